// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "gtrelax/models.hpp"

namespace gtrelax {

ad::Tensor san_lpe_tokens(const ad::Tensor& values, const ad::Tensor& vectors, std::size_t k) {
  const std::size_t n = vectors.dim(0), r = vectors.dim(1);
  if (values.size() != r) throw std::invalid_argument("san_lpe_tokens: values/vectors mismatch");
  if (r > k) throw std::invalid_argument("san_lpe_tokens: more eigenpairs than tokens");
  auto lam = ad::matmul(ad::Tensor::full({n, 1}, 1.0), ad::reshape(values, {1, r}));
  auto vec = vectors;
  if (r < k) {
    lam = ad::concat_cols({lam, ad::Tensor::zeros({n, k - r})});
    vec = ad::concat_cols({vec, ad::Tensor::zeros({n, k - r})});
  }
  return ad::concat_cols({ad::reshape(lam, {n * k, 1}), ad::reshape(vec, {n * k, 1})});
}

ad::Tensor san_attention(const ad::Tensor& w_real, const ad::Tensor& w_fake, const ad::Tensor& adjacency,
                         const ad::Tensor& p, double gamma, bool soft) {
  const std::size_t n = adjacency.dim(0);
  std::vector<std::uint8_t> diagonal(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) diagonal[i * n + i] = 1;
  ad::Tensor q_real, q_fake;
  if (soft) {
    q_real = adjacency;
    q_fake = ad::masked_fill(ad::rsub_scalar(1.0, adjacency), diagonal, 0.0);
  } else {
    const auto av = adjacency.values();
    std::vector<double> real(n * n), fake(n * n);
    for (std::size_t k = 0; k < n * n; ++k) {
      real[k] = av[k] > 0.5 ? 1.0 : 0.0;
      fake[k] = diagonal[k] ? 0.0 : 1.0 - real[k];
    }
    q_real = ad::Tensor::constant({n, n}, std::move(real));
    q_fake = ad::Tensor::constant({n, n}, std::move(fake));
  }
  if (p.defined()) {
    q_real = ad::mul_row(q_real, p);
    q_fake = ad::mul_row(q_fake, p);
  }
  return ad::add(ad::scale(ad::weighted_softmax_rows(w_fake, q_fake), gamma / (1.0 + gamma)),
                 ad::scale(ad::weighted_softmax_rows(w_real, q_real), 1.0 / (1.0 + gamma)));
}

namespace detail {

void init_san(ParamStore& ps, const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.hidden, dpe = c.san_pe_dim;
  init_linear(ps, "in", c.in_dim, d - dpe, rng);
  init_linear(ps, "lpe.in", 2, dpe, rng);
  init_linear(ps, "lpe.q", dpe, dpe, rng);
  init_linear(ps, "lpe.k", dpe, dpe, rng);
  init_linear(ps, "lpe.v", dpe, dpe, rng);
  init_ffn_block(ps, "lpe", dpe, rng);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto pre = "layer" + std::to_string(l);
    init_linear(ps, pre + ".q_real", d, d, rng);
    init_linear(ps, pre + ".k_real", d, d, rng);
    init_linear(ps, pre + ".q_fake", d, d, rng);
    init_linear(ps, pre + ".k_fake", d, d, rng);
    init_linear(ps, pre + ".v", d, d, rng);
    init_ffn_block(ps, pre, d, rng);
  }
  init_linear(ps, "head", d, c.output_dim(), rng);
}

namespace {

struct Pairs {
  ad::Tensor values;
  ad::Tensor vectors;
};

Pairs exact_pairs(const spectral::EigenDecomposition& e, std::size_t r) {
  const std::size_t n = e.vectors.rows;
  std::vector<double> vec(n * r);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < r; ++j) vec[i * r + j] = e.vectors(i, j);
  return {ad::Tensor::constant({r}, {e.values.begin(), e.values.begin() + static_cast<std::ptrdiff_t>(r)}),
          ad::Tensor::constant({n, r}, std::move(vec))};
}

Pairs eigenpairs(const ad::Tensor& a, std::size_t r, const ForwardContext& ctx) {
  if (ctx.relaxed && ctx.toggles.san_lap_pert) {
    SpectralBase own;
    const SpectralBase* base = ctx.spectral_base;
    if (!base) {
      own = SpectralBase::from_adjacency(a.to_matrix());
      base = &own;
    }
    if (base->laplacian.rows != a.dim(0)) throw std::invalid_argument("san: spectral base has the wrong size");
    const auto dl = ad::sub(spectral::laplacian_sym(a), ad::Tensor::from_matrix(base->laplacian));
    if (ctx.align_degenerate && !base->op.groups.empty()) {
      const auto aligned = spectral::degenerate_alignment(base->eig, dl.to_matrix());
      const auto pp = spectral::perturb_lowest(aligned, base->op, dl, r);
      return {pp.values, pp.vectors};
    }
    const auto pp = spectral::perturb_lowest(base->eig, base->op, dl, r);
    return {pp.values, pp.vectors};
  }
  if (!ctx.relaxed && ctx.cache && ctx.cache->eig) return exact_pairs(*ctx.cache->eig, r);
  return exact_pairs(spectral::eig_sym(laplacian_sym(a.to_matrix())), r);
}

}  // namespace

ad::Tensor san_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a, const ad::Tensor& x,
                       const ForwardContext& ctx) {
  const std::size_t n = a.dim(0), d = c.hidden, dpe = c.san_pe_dim, k = c.san_k, nh = c.heads, dh = d / nh;

  // Laplacian positional encoding: one transformer layer over each node's k
  // eigenpair tokens, sum-pooled.
  const auto pairs = eigenpairs(a, std::min(k, n), ctx);
  auto t = linear(p, "lpe.in", san_lpe_tokens(pairs.values, pairs.vectors, k));
  const auto tq = ad::reshape(linear(p, "lpe.q", t), {n, k, dpe});
  const auto tk = ad::reshape(linear(p, "lpe.k", t), {n, k, dpe});
  const auto tv = ad::reshape(linear(p, "lpe.v", t), {n, k, dpe});
  const auto ta = ad::softmax_rows(ad::scale(ad::bmm(tq, ad::batch_transpose(tk)), 1.0 / std::sqrt(double(dpe))));
  t = ffn_block(p, "lpe", t, ad::reshape(ad::bmm(ta, tv), {n * k, dpe}));
  const auto pe = ad::sum_last(ad::batch_transpose(ad::reshape(t, {n, k, dpe})));

  ad::Tensor h = ad::concat_cols({linear(p, "in", x), pe});
  const bool soft = ctx.relaxed && ctx.toggles.san_attention;
  const auto probs = attention_probs(ctx);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto pre = "layer" + std::to_string(l);
    const auto qr = linear(p, pre + ".q_real", h), kr = linear(p, pre + ".k_real", h);
    const auto qf = linear(p, pre + ".q_fake", h), kf = linear(p, pre + ".k_fake", h);
    const auto v = linear(p, pre + ".v", h);
    std::vector<ad::Tensor> outs;
    for (std::size_t hh = 0; hh < nh; ++hh) {
      auto score = [&](const ad::Tensor& q, const ad::Tensor& kk) {
        return ad::scale(ad::matmul(ad::slice_cols(q, hh * dh, (hh + 1) * dh),
                                    ad::transpose(ad::slice_cols(kk, hh * dh, (hh + 1) * dh))),
                         inv_sqrt);
      };
      const auto alpha = san_attention(score(qr, kr), score(qf, kf), a, probs, c.san_gamma, soft);
      outs.push_back(ad::matmul(alpha, ad::slice_cols(v, hh * dh, (hh + 1) * dh)));
    }
    h = ffn_block(p, pre, h, ad::concat_cols(outs));
  }
  return readout(c, p, h, ctx.node_probs);
}

}  // namespace detail
}  // namespace gtrelax
