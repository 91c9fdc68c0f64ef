// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gtrelax/tensor.hpp"

namespace gtrelax {

/// Named parameter tensors in insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ad::Shape shape;
    std::vector<double> values;
    bool operator==(const Entry&) const = default;
  };

  void add(const std::string& name, ad::Shape shape, std::vector<double> values);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  /// Total number of scalars.
  std::size_t total() const;

  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  const std::vector<Entry>& entries() const { return entries_; }

  bool operator==(const ParamStore& o) const { return entries_ == o.entries_; }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters as tensors for one forward pass: tape variables when a tape is
/// given (training), constants otherwise (attacks, evaluation).
class BoundParams {
 public:
  BoundParams(const ParamStore& store, ad::Tape* tape);
  const ad::Tensor& operator[](const std::string& name) const;
  const std::vector<ad::Tensor>& tensors() const { return tensors_; }

 private:
  const ParamStore* store_;
  std::vector<ad::Tensor> tensors_;
};

/// Glorot-uniform weight `<name>.w` [in, out] and zero bias `<name>.b` [out].
void init_linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                 std::mt19937_64& rng, bool bias = true);
/// Uniform(-scale, scale) tensor.
void init_uniform(ParamStore& ps, const std::string& name, ad::Shape shape, double scale, std::mt19937_64& rng);
void init_constant(ParamStore& ps, const std::string& name, ad::Shape shape, double value);

/// x W (+ b) for parameters created by init_linear.
ad::Tensor linear(const BoundParams& p, const std::string& name, const ad::Tensor& x, bool bias = true);

}  // namespace gtrelax
