// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/models.hpp"

namespace gtrelax::detail {

void init_gcn(ParamStore& ps, const ModelConfig& c, Rng& rng) {
  for (std::size_t l = 0; l < c.layers; ++l) {
    init_linear(ps, "conv" + std::to_string(l), l == 0 ? c.in_dim : c.hidden, c.hidden, rng);
  }
  init_linear(ps, "head", c.hidden, c.output_dim(), rng);
}

ad::Tensor gcn_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a, const ad::Tensor& x,
                       const ForwardContext& ctx) {
  const std::size_t n = a.dim(0);
  // D^{-1/2} (A + I) D^{-1/2}
  const auto self = ad::add(a, ad::Tensor::from_matrix(Matrix::identity(n)));
  const auto r = ad::rsqrt_or_zero(ad::sum_last(self));
  const auto norm = ad::mul_col(ad::mul_row(self, r), r);
  ad::Tensor h = x;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto name = "conv" + std::to_string(l);
    h = ad::relu(ad::add_row(ad::matmul(norm, ad::matmul(h, p[name + ".w"])), p[name + ".b"]));
  }
  return readout(c, p, h, ctx.node_probs);
}

}  // namespace gtrelax::detail
