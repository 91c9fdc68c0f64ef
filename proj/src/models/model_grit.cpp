// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "gtrelax/models.hpp"

namespace gtrelax {

std::vector<ad::Tensor> rrwp(const ad::Tensor& adjacency, std::size_t k) {
  const std::size_t n = adjacency.dim(0);
  const auto m = ad::mul_col(adjacency, ad::reciprocal_or_zero(ad::sum_last(adjacency)));
  std::vector<ad::Tensor> out;
  out.reserve(k);
  out.push_back(ad::Tensor::from_matrix(Matrix::identity(n)));
  if (k > 1) out.push_back(m);
  for (std::size_t i = 2; i < k; ++i) out.push_back(ad::matmul(out.back(), m));
  return out;
}

namespace detail {

void init_grit(ParamStore& ps, const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.hidden, de = c.grit_pair_dim;
  init_linear(ps, "in", c.in_dim, d, rng);
  init_linear(ps, "node_pe", c.grit_k, d, rng, false);
  init_linear(ps, "pair_pe", c.grit_k, de, rng);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto pre = "layer" + std::to_string(l);
    init_linear(ps, pre + ".q", d, de, rng, false);
    init_linear(ps, pre + ".k", d, de, rng, false);
    init_linear(ps, pre + ".v", d, d, rng);
    init_linear(ps, pre + ".ew", de, de, rng);
    init_linear(ps, pre + ".eb", de, de, rng);
    init_linear(ps, pre + ".score", de, c.heads, rng, false);
    init_linear(ps, pre + ".ev", de, d, rng, false);
    init_constant(ps, pre + ".theta1", {d}, 1.0);
    init_constant(ps, pre + ".theta2", {d}, 0.1);
    init_ffn_block(ps, pre, d, rng);
  }
  init_linear(ps, "head", d, c.output_dim(), rng);
}

ad::Tensor grit_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a, const ad::Tensor& x,
                        const ForwardContext& ctx) {
  const std::size_t n = a.dim(0), d = c.hidden, de = c.grit_pair_dim, nh = c.heads, dh = d / nh;
  const bool rrwp_grad = !ctx.relaxed || ctx.toggles.grit_rrwp_grad;
  const bool deg_grad = !ctx.relaxed || ctx.toggles.grit_deg_grad;

  const auto walks = rrwp(rrwp_grad ? a : ad::detach(a), c.grit_k);
  std::vector<ad::Tensor> node_cols, pair_cols;
  for (const auto& pk : walks) {
    node_cols.push_back(ad::reshape(ad::diag(pk), {n, 1}));
    pair_cols.push_back(ad::reshape(pk, {n * n, 1}));
  }
  ad::Tensor h = ad::add(linear(p, "in", x), linear(p, "node_pe", ad::concat_cols(node_cols), false));
  ad::Tensor e = linear(p, "pair_pe", ad::concat_cols(pair_cols));

  const auto deg = ad::sum_last(a);
  const auto log_deg = ad::log1p(deg_grad ? deg : ad::detach(deg));
  const auto probs = attention_probs(ctx);

  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto pre = "layer" + std::to_string(l);
    const auto q = linear(p, pre + ".q", h, false);
    const auto k = linear(p, pre + ".k", h, false);
    const auto qk = ad::reshape(ad::outer_add(q, k), {n * n, de});
    const auto e_hat = ad::relu(ad::add(ad::mul(qk, linear(p, pre + ".ew", e)), linear(p, pre + ".eb", e)));
    const auto scores = linear(p, pre + ".score", e_hat, false);
    const auto v = linear(p, pre + ".v", h);
    const auto e3 = ad::reshape(e_hat, {n, n, de});
    const auto w_ev = p[pre + ".ev.w"];
    std::vector<ad::Tensor> outs;
    for (std::size_t hh = 0; hh < nh; ++hh) {
      const auto alpha = attention_nodeprob_bias(ad::reshape(ad::slice_cols(scores, hh, hh + 1), {n, n}), probs);
      const auto pair_msg = ad::reshape(ad::bmm(ad::reshape(alpha, {n, 1, n}), e3), {n, de});
      outs.push_back(ad::add(ad::matmul(alpha, ad::slice_cols(v, hh * dh, (hh + 1) * dh)),
                             ad::matmul(pair_msg, ad::slice_cols(w_ev, hh * dh, (hh + 1) * dh))));
    }
    auto h1 = ad::add(h, linear(p, pre + ".out", ad::concat_cols(outs)));
    // Degree scaler: h * theta1 + log(1 + deg) * (h * theta2).
    h1 = ad::add(ad::mul_row(h1, p[pre + ".theta1"]), ad::mul_col(ad::mul_row(h1, p[pre + ".theta2"]), log_deg));
    h = ad::add(h1, linear(p, pre + ".ffn2", ad::relu(linear(p, pre + ".ffn1", h1))));
    e = e_hat;
  }
  return readout(c, p, h, ctx.node_probs);
}

}  // namespace detail
}  // namespace gtrelax
