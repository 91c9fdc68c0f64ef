// SPDX-License-Identifier: Apache-2.0
#pragma once

// Generators and comparison helpers shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "gtrelax/graph.hpp"
#include "gtrelax/models.hpp"
#include "gtrelax/optim.hpp"

namespace gtrelax::testing {

inline Matrix random_discrete(std::mt19937_64& rng, std::size_t n, double p) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (u(rng) < p) a(i, j) = a(j, i) = 1.0;
  return a;
}

/// Discrete graph with a random spanning tree plus extra edges.
inline Matrix random_connected(std::mt19937_64& rng, std::size_t n, double p) {
  auto a = random_discrete(rng, n, p);
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    a(i, j) = a(j, i) = 1.0;
  }
  return a;
}

/// Every off-diagonal entry in [lo, hi].
inline Matrix random_interior(std::mt19937_64& rng, std::size_t n, double lo = 0.1, double hi = 0.9) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = u(rng);
  return a;
}

inline Matrix random_features(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> nd;
  Matrix x(n, d);
  for (auto& v : x.data) v = nd(rng);
  return x;
}

inline ModelConfig small_config(ModelKind kind, Task task = Task::node_classification, std::size_t in_dim = 4) {
  ModelConfig c;
  c.kind = kind;
  c.task = task;
  c.in_dim = in_dim;
  c.num_classes = task == Task::node_classification ? 3 : 2;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.grit_k = 3;
  c.grit_pair_dim = 6;
  c.san_k = 4;
  c.san_pe_dim = 4;
  return c;
}

/// Upper-triangle index pairs of an n-node graph, row major.
inline std::vector<IndexPair> upper_pairs(std::size_t n) {
  std::vector<IndexPair> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out.emplace_back(i, j);
  return out;
}

/// Symmetric [n, n] tensor with upper-triangle entries `u` (see upper_pairs).
inline ad::Tensor symmetric_from_upper(const ad::Tensor& u, std::size_t n) {
  const auto pairs = upper_pairs(n);
  std::vector<std::size_t> src, pos;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    src.push_back(k);
    pos.push_back(pairs[k].first * n + pairs[k].second);
    src.push_back(k);
    pos.push_back(pairs[k].second * n + pairs[k].first);
  }
  return ad::index_put(ad::gather(u, src), pos, {n, n});
}

inline std::vector<double> upper_values(const Matrix& a) {
  std::vector<double> v;
  for (auto [i, j] : upper_pairs(a.rows)) v.push_back(a(i, j));
  return v;
}

/// max |a - b| / max(|a|, |b|) over all entries.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max({den, std::abs(a[i]), std::abs(b[i])});
  }
  return den < 1e-12 ? num : num / den;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Relative error between the tape gradient and central differences of
/// loss(model(Ã)) over the upper triangle of Ã, with shortest paths and the
/// eigen base frozen at `a0`.
template <class Loss>
double model_gradient_error(const Model& model, const Matrix& a0, const Matrix& x, Loss loss, double eps = 1e-5,
                            const RelaxToggles& toggles = {}) {
  const std::size_t n = a0.rows;
  const auto base = SpectralBase::from_adjacency(a0);
  const auto sp = paths::all_pairs_shortest(paths::reciprocal_weights(a0));
  ForwardContext ctx;
  ctx.relaxed = true;
  ctx.toggles = toggles;
  ctx.spectral_base = &base;
  ctx.frozen_paths = &sp;
  ctx.align_degenerate = false;
  const BoundParams fixed(model.params(), nullptr);
  auto eval = [&](const ad::Tensor& u) { return loss(model.forward(fixed, symmetric_from_upper(u, n), x, ctx)); };
  const auto u0 = upper_values(a0);
  ad::Tape tape;
  const auto u = tape.variable({u0.size()}, u0);
  const auto g = tape.backward(eval(u))[u];
  const auto fd = optim::finite_difference(
      [&](std::span<const double> v) { return eval(ad::Tensor::constant({v.size()}, {v.begin(), v.end()})).item(); },
      u0, eps);
  return relative_error(g, fd);
}

}  // namespace gtrelax::testing
