// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "gtrelax/models.hpp"

namespace gtrelax {

ad::Tensor graphormer_degree_pe(const ad::Tensor& deg, const ad::Tensor& z, bool interpolate) {
  const std::size_t n = deg.size();
  const std::size_t d_max = z.dim(0) - 1;
  const double top = static_cast<double>(d_max);
  std::vector<std::size_t> lo(n), hi(n);
  if (!interpolate) {
    for (std::size_t i = 0; i < n; ++i) lo[i] = static_cast<std::size_t>(std::clamp(std::round(deg[i]), 0.0, top));
    return ad::gather_rows(z, lo);
  }
  const auto dc = ad::clamp(deg, 0.0, top);
  std::vector<double> fl(n);
  for (std::size_t i = 0; i < n; ++i) {
    fl[i] = std::floor(dc[i]);
    lo[i] = static_cast<std::size_t>(fl[i]);
    hi[i] = std::min(lo[i] + 1, d_max);
  }
  const auto eta = ad::sub(dc, ad::Tensor::constant({n}, fl));
  const auto z_lo = ad::gather_rows(z, lo);
  return ad::add(z_lo, ad::mul_col(ad::sub(ad::gather_rows(z, hi), z_lo), eta));
}

namespace detail {

void init_graphormer(ParamStore& ps, const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.hidden;
  init_linear(ps, "in", c.in_dim, d, rng);
  init_uniform(ps, "deg_table", {c.d_max + 1, d}, 0.5, rng);
  init_uniform(ps, "virtual_token", {1, d}, 0.5, rng);
  init_uniform(ps, "spd_table", {c.s_max + 1, c.heads}, 0.5, rng);
  init_uniform(ps, "spd_unreachable", {c.heads}, 0.5, rng);
  init_uniform(ps, "spd_virtual", {c.heads}, 0.5, rng);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto pre = "layer" + std::to_string(l);
    init_linear(ps, pre + ".q", d, d, rng);
    init_linear(ps, pre + ".k", d, d, rng);
    init_linear(ps, pre + ".v", d, d, rng);
    init_ffn_block(ps, pre, d, rng);
  }
  init_linear(ps, "head", d, c.output_dim(), rng);
}

namespace {

struct SpdInput {
  ad::Tensor rspd;
  std::vector<std::uint8_t> reachable;
};

SpdInput discrete_spd(const Matrix& hops) {
  SpdInput s;
  std::vector<double> r(hops.data.size());
  s.reachable.resize(r.size());
  for (std::size_t k = 0; k < r.size(); ++k) {
    s.reachable[k] = hops.data[k] != paths::kInf;
    r[k] = s.reachable[k] ? hops.data[k] : 0.0;
  }
  s.rspd = ad::Tensor::constant({hops.rows, hops.cols}, std::move(r));
  return s;
}

}  // namespace

ad::Tensor graphormer_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a, const ad::Tensor& x,
                              const ForwardContext& ctx) {
  const std::size_t n = a.dim(0), m = n + 1, d = c.hidden, nh = c.heads, dh = d / nh;

  const auto deg = ad::sum_last(a);
  ad::Tensor h = ad::add(linear(p, "in", x),
                         graphormer_degree_pe(deg, p["deg_table"], ctx.relaxed && ctx.toggles.graphormer_deg));
  h = ad::concat_rows({h, p["virtual_token"]});

  SpdInput spd;
  if (ctx.relaxed && ctx.toggles.graphormer_spd) {
    paths::ShortestPathResult own;
    const paths::ShortestPathResult* res = ctx.frozen_paths;
    if (!res) {
      own = paths::all_pairs_shortest(paths::reciprocal_weights(a.to_matrix()));
      res = &own;
    }
    spd.rspd = paths::rspd_tensor(a, *res);
    spd.reachable.resize(n * n);
    for (std::size_t k = 0; k < n * n; ++k) spd.reachable[k] = res->dist.data[k] != paths::kInf;
  } else if (!ctx.relaxed && ctx.cache && ctx.cache->hops) {
    spd = discrete_spd(*ctx.cache->hops);
  } else {
    Matrix hard = a.to_matrix();
    if (ctx.relaxed)
      for (auto& v : hard.data) v = v > 0.5 ? 1.0 : 0.0;
    spd = discrete_spd(paths::bfs_hops(hard));
  }
  const auto bias = paths::spd_bias_heads(spd.rspd, spd.reachable, p["spd_table"], p["spd_unreachable"],
                                          p["spd_virtual"]);

  ad::Tensor probs = attention_probs(ctx);
  if (probs.defined()) {
    probs = ad::reshape(ad::concat_rows({ad::reshape(probs, {n, 1}), ad::Tensor::full({1, 1}, 1.0)}), {m});
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto pre = "layer" + std::to_string(l);
    const auto q = linear(p, pre + ".q", h);
    const auto k = linear(p, pre + ".k", h);
    const auto v = linear(p, pre + ".v", h);
    std::vector<ad::Tensor> outs;
    for (std::size_t hh = 0; hh < nh; ++hh) {
      const auto qh = ad::slice_cols(q, hh * dh, (hh + 1) * dh);
      const auto kh = ad::slice_cols(k, hh * dh, (hh + 1) * dh);
      const auto w = ad::add(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt),
                             ad::reshape(ad::slice_rows(bias, hh, hh + 1), {m, m}));
      outs.push_back(ad::matmul(attention_nodeprob_bias(w, probs), ad::slice_cols(v, hh * dh, (hh + 1) * dh)));
    }
    h = ffn_block(p, pre, h, ad::concat_cols(outs));
  }
  if (c.task == Task::node_classification) return linear(p, "head", ad::slice_rows(h, 0, n));
  return linear(p, "head", ad::slice_rows(h, n, m));
}

}  // namespace detail
}  // namespace gtrelax
