// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/params.hpp"

#include <cmath>
#include <stdexcept>

namespace gtrelax {

void ParamStore::add(const std::string& name, ad::Shape shape, std::vector<double> values) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  if (ad::shape_size(shape) != values.size()) {
    throw std::invalid_argument("ParamStore: '" + name + "' has " + std::to_string(values.size()) +
                                " values for shape " + ad::shape_str(shape));
  }
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(shape), std::move(values)});
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total() const {
  std::size_t t = 0;
  for (const auto& e : entries_) t += e.values.size();
  return t;
}

BoundParams::BoundParams(const ParamStore& store, ad::Tape* tape) : store_(&store) {
  tensors_.reserve(store.size());
  for (const auto& e : store.entries()) {
    tensors_.push_back(tape ? tape->variable(e.shape, e.values) : ad::Tensor::constant(e.shape, e.values));
  }
}

const ad::Tensor& BoundParams::operator[](const std::string& name) const {
  return tensors_[store_->index_of(name)];
}

void init_linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
                 bool bias) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  init_uniform(ps, name + ".w", {in, out}, a, rng);
  if (bias) init_constant(ps, name + ".b", {out}, 0.0);
}

void init_uniform(ParamStore& ps, const std::string& name, ad::Shape shape, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(ad::shape_size(shape));
  for (auto& x : v) x = u(rng);
  ps.add(name, std::move(shape), std::move(v));
}

void init_constant(ParamStore& ps, const std::string& name, ad::Shape shape, double value) {
  const auto n = ad::shape_size(shape);
  ps.add(name, std::move(shape), std::vector<double>(n, value));
}

ad::Tensor linear(const BoundParams& p, const std::string& name, const ad::Tensor& x, bool bias) {
  auto y = ad::matmul(x, p[name + ".w"]);
  return bias ? ad::add_row(y, p[name + ".b"]) : y;
}

}  // namespace gtrelax
