// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/paths.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>
#include <string>

namespace gtrelax::paths {

namespace {

bool same_length(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); }

// Path source..v following pred, written into `out` (cleared first).
void trace(const std::int32_t* pred, std::size_t v, std::vector<std::size_t>& out) {
  out.clear();
  for (std::int64_t u = static_cast<std::int64_t>(v); u >= 0; u = pred[u]) out.push_back(static_cast<std::size_t>(u));
  std::reverse(out.begin(), out.end());
}

// Dijkstra from `s`, writing row s of dist/pred.
void single_source(const Matrix& r, std::size_t s, double* dist, std::int32_t* pred) {
  const std::size_t n = r.rows;
  std::fill(dist, dist + n, kInf);
  std::fill(pred, pred + n, -1);
  std::vector<std::uint8_t> done(n, 0);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  dist[s] = 0.0;
  heap.emplace(0.0, s);
  std::vector<std::size_t> via_u, via_old;
  while (!heap.empty()) {
    const auto [d, u] = heap.top();
    heap.pop();
    if (done[u] || d != dist[u]) continue;
    done[u] = 1;
    for (std::size_t v = 0; v < n; ++v) {
      const double w = r(u, v);
      if (v == u || done[v] || w == kInf) continue;
      const double nd = d + w;
      if (dist[v] != kInf && same_length(nd, dist[v])) {
        // Tie: keep the lexicographically smaller node sequence.
        trace(pred, u, via_u);
        trace(pred, static_cast<std::size_t>(pred[v]), via_old);
        if (std::lexicographical_compare(via_u.begin(), via_u.end(), via_old.begin(), via_old.end())) {
          pred[v] = static_cast<std::int32_t>(u);
        }
      } else if (nd < dist[v]) {
        dist[v] = nd;
        pred[v] = static_cast<std::int32_t>(u);
        heap.emplace(nd, v);
      }
    }
  }
}

void check_weights(const Matrix& r) {
  if (r.rows != r.cols) throw std::invalid_argument("all_pairs_shortest: weight matrix is not square");
  for (std::size_t i = 0; i < r.rows; ++i)
    for (std::size_t j = 0; j < r.cols; ++j)
      if (i != j && !(r(i, j) >= 0.0)) throw std::invalid_argument("all_pairs_shortest: negative or NaN weight");
}

}  // namespace

Matrix reciprocal_weights(const Matrix& a) {
  Matrix r(a.rows, a.cols, kInf);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      if (i != j && a(i, j) >= kAbsentBelow) r(i, j) = 1.0 / a(i, j);
  return r;
}

std::vector<std::size_t> ShortestPathResult::path(std::size_t i, std::size_t j) const {
  std::vector<std::size_t> out;
  if (!reachable(i, j)) return out;
  trace(pred.data() + i * n, j, out);
  return out;
}

ShortestPathResult all_pairs_shortest_serial(const Matrix& r) {
  check_weights(r);
  ShortestPathResult res;
  res.n = r.rows;
  res.dist = Matrix(res.n, res.n);
  res.pred.assign(res.n * res.n, -1);
  for (std::size_t s = 0; s < res.n; ++s) single_source(r, s, res.dist.data.data() + s * res.n, res.pred.data() + s * res.n);
  return res;
}

ShortestPathResult all_pairs_shortest(const Matrix& r) {
  check_weights(r);
  ShortestPathResult res;
  const std::size_t n = r.rows;
  res.n = n;
  res.dist = Matrix(n, n);
  res.pred.assign(n * n, -1);
  const auto ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 4) if (n >= 64)
  for (std::int64_t s = 0; s < ni; ++s) {
    single_source(r, static_cast<std::size_t>(s), res.dist.data.data() + s * ni, res.pred.data() + s * ni);
  }
  return res;
}

Matrix bfs_hops(const Matrix& a) {
  const std::size_t n = a.rows;
  Matrix d(n, n, kInf);
  std::vector<std::size_t> queue;
  for (std::size_t s = 0; s < n; ++s) {
    queue.assign(1, s);
    d(s, s) = 0.0;
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const auto u = queue[head];
      for (std::size_t v = 0; v < n; ++v) {
        if (a(u, v) > 0.0 && d(s, v) == kInf) {
          d(s, v) = d(s, u) + 1.0;
          queue.push_back(v);
        }
      }
    }
  }
  return d;
}

ad::Tensor path_sum_proxy(const ad::Tensor& a, const ShortestPathResult& res, std::size_t i, std::size_t j) {
  if (!res.reachable(i, j)) {
    throw std::invalid_argument("path_sum_proxy: node " + std::to_string(j) + " unreachable from " + std::to_string(i));
  }
  if (i == j) return ad::Tensor::scalar(0.0);
  const auto p = res.path(i, j);
  std::vector<std::size_t> flat;
  for (std::size_t k = 0; k + 1 < p.size(); ++k) flat.push_back(p[k] * res.n + p[k + 1]);
  return ad::sum(ad::reciprocal(ad::gather(a, flat)));
}

ad::Tensor rspd_tensor(const ad::Tensor& a, const ShortestPathResult& res) {
  const std::size_t n = res.n;
  if (a.rank() != 2 || a.dim(0) != n || a.dim(1) != n) ad::shape_error("rspd_tensor", a.shape(), {n, n});
  // Path edges per pair, flattened: offsets into `edges` (position in a).
  // Values are re-summed from `a` along the frozen paths, in path order.
  std::vector<std::size_t> offset(n * n + 1, 0);
  std::vector<std::size_t> edges;
  std::vector<std::size_t> p;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      offset[i * n + j] = edges.size();
      if (i == j || !res.reachable(i, j)) continue;
      trace(res.pred.data() + i * n, j, p);
      for (std::size_t k = 0; k + 1 < p.size(); ++k) edges.push_back(p[k] * n + p[k + 1]);
    }
  }
  offset[n * n] = edges.size();
  const auto av = a.values();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t q = 0; q < n * n; ++q)
    for (std::size_t e = offset[q]; e < offset[q + 1]; ++e) out[q] += 1.0 / av[edges[e]];
  return ad::record("rspd", {n, n}, std::move(out), {a},
                    [offset = std::move(offset), edges = std::move(edges)](const ad::Node& o,
                                                                           std::span<ad::Node* const> in) {
                      if (!in[0]->requires_grad) return;
                      double* g = in[0]->grad.data();
                      const auto& av = in[0]->value;
                      for (std::size_t q = 0; q + 1 < offset.size(); ++q) {
                        const double go = o.grad[q];
                        if (go == 0.0) continue;
                        for (std::size_t e = offset[q]; e < offset[q + 1]; ++e) {
                          const double w = av[edges[e]];
                          g[edges[e]] -= go / (w * w);
                        }
                      }
                    });
}

ad::Tensor spd_bias(const ad::Tensor& rspd, bool reachable, const ad::Tensor& table, const ad::Tensor& unreachable) {
  if (!reachable) return unreachable;
  const std::size_t s_max = table.size() - 1;
  const double r = rspd.item();
  if (r >= static_cast<double>(s_max)) {
    const std::size_t last = s_max;
    return ad::gather(table, std::span<const std::size_t>(&last, 1));
  }
  const auto s = static_cast<std::size_t>(std::floor(r));
  const std::size_t lo = s, hi = s + 1;
  const auto eta = ad::sub(rspd, ad::floor(rspd));
  const auto b_lo = ad::gather(table, std::span<const std::size_t>(&lo, 1));
  const auto b_hi = ad::gather(table, std::span<const std::size_t>(&hi, 1));
  return ad::add(ad::mul(b_hi, eta), ad::mul(b_lo, ad::rsub_scalar(1.0, eta)));
}

ad::Tensor spd_bias_heads(const ad::Tensor& rspd, std::span<const std::uint8_t> reachable, const ad::Tensor& table,
                          const ad::Tensor& unreachable, const ad::Tensor& virtual_bias) {
  if (rspd.rank() != 2 || rspd.dim(0) != rspd.dim(1)) ad::shape_error("spd_bias_heads", rspd.shape(), rspd.shape());
  const std::size_t n = rspd.dim(0);
  if (table.rank() != 2) ad::shape_error("spd_bias_heads", rspd.shape(), table.shape());
  const std::size_t heads = table.dim(1);
  const std::size_t s_max = table.dim(0) - 1;
  if (unreachable.size() != heads) ad::shape_error("spd_bias_heads", table.shape(), unreachable.shape());
  if (reachable.size() != n * n) throw std::invalid_argument("spd_bias_heads: reachable mask size mismatch");
  const bool with_virtual = virtual_bias.defined();
  if (with_virtual && virtual_bias.size() != heads) ad::shape_error("spd_bias_heads", table.shape(), virtual_bias.shape());
  const std::size_t m = with_virtual ? n + 1 : n;

  // For each real pair: lower table index and interpolation weight; -1 for
  // unreachable, -2 for clamped.
  std::vector<std::int64_t> lo(n * n);
  std::vector<double> eta(n * n, 0.0);
  const auto rv = rspd.values();
  for (std::size_t q = 0; q < n * n; ++q) {
    if (!reachable[q]) {
      lo[q] = -1;
    } else if (rv[q] >= static_cast<double>(s_max)) {
      lo[q] = -2;
    } else {
      const double f = std::floor(rv[q]);
      lo[q] = static_cast<std::int64_t>(f);
      eta[q] = rv[q] - f;
    }
  }
  const auto t = table.values();
  const auto ub = unreachable.values();
  std::vector<double> out(heads * m * m);
  for (std::size_t h = 0; h < heads; ++h) {
    double* oh = out.data() + h * m * m;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double v;
        if (i == n || j == n) {
          v = virtual_bias[h];
        } else {
          const std::size_t q = i * n + j;
          if (lo[q] == -1) {
            v = ub[h];
          } else if (lo[q] == -2) {
            v = t[s_max * heads + h];
          } else {
            const auto s = static_cast<std::size_t>(lo[q]);
            v = eta[q] * t[(s + 1) * heads + h] + (1.0 - eta[q]) * t[s * heads + h];
          }
        }
        oh[i * m + j] = v;
      }
    }
  }
  std::vector<ad::Tensor> inputs = {rspd, table, unreachable};
  if (with_virtual) inputs.push_back(virtual_bias);
  return ad::record(
      "spd_bias_heads", {heads, m * m}, std::move(out), inputs,
      [lo = std::move(lo), eta = std::move(eta), n, m, heads, s_max, with_virtual](const ad::Node& o,
                                                                                    std::span<ad::Node* const> in) {
        double* gr = in[0]->requires_grad ? in[0]->grad.data() : nullptr;
        double* gt = in[1]->requires_grad ? in[1]->grad.data() : nullptr;
        double* gu = in[2]->requires_grad ? in[2]->grad.data() : nullptr;
        double* gv = with_virtual && in[3]->requires_grad ? in[3]->grad.data() : nullptr;
        const auto& t = in[1]->value;
        for (std::size_t h = 0; h < heads; ++h) {
          const double* go = o.grad.data() + h * m * m;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
              const double g = go[i * m + j];
              if (g == 0.0) continue;
              if (i == n || j == n) {
                if (gv) gv[h] += g;
                continue;
              }
              const std::size_t q = i * n + j;
              if (lo[q] == -1) {
                if (gu) gu[h] += g;
              } else if (lo[q] == -2) {
                if (gt) gt[s_max * heads + h] += g;
              } else {
                const auto s = static_cast<std::size_t>(lo[q]);
                if (gt) {
                  gt[(s + 1) * heads + h] += g * eta[q];
                  gt[s * heads + h] += g * (1.0 - eta[q]);
                }
                if (gr) gr[q] += g * (t[(s + 1) * heads + h] - t[s * heads + h]);
              }
            }
          }
        }
      });
}

}  // namespace gtrelax::paths
