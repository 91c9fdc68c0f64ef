// SPDX-License-Identifier: Apache-2.0
#pragma once

// GCN, GRIT, Graphormer and SAN over a continuous adjacency in [0, 1].
//
// Every model has two forward modes. The unrelaxed mode is the ordinary
// architecture on a discrete graph: integer degrees, hop distances, exact
// Laplacian eigenpairs and hard edge masks. The relaxed mode replaces each of
// these by a continuous counterpart (selected per component by RelaxToggles)
// and coincides with the unrelaxed mode whenever the adjacency is discrete.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gtrelax/graph.hpp"
#include "gtrelax/matrix.hpp"
#include "gtrelax/params.hpp"
#include "gtrelax/paths.hpp"
#include "gtrelax/spectral.hpp"
#include "gtrelax/tensor.hpp"

namespace gtrelax {

enum class ModelKind { gcn, grit, graphormer, san };

std::string to_string(ModelKind k);
/// Accepts "gcn", "grit", "graphormer", "san"; throws std::invalid_argument.
ModelKind model_kind_from_string(const std::string& s);
inline constexpr ModelKind kAllModels[] = {ModelKind::gcn, ModelKind::grit, ModelKind::graphormer,
                                           ModelKind::san};

struct RelaxToggles {
  bool graphormer_deg = true;
  bool graphormer_spd = true;
  bool san_attention = true;
  bool san_lap_pert = true;
  bool grit_rrwp_grad = true;
  bool grit_deg_grad = true;
  bool node_prob_bias = true;

  static RelaxToggles all(bool on);
  bool operator==(const RelaxToggles&) const = default;
};

/// Names in declaration order, e.g. "graphormer_deg".
std::vector<std::string> toggle_names();
bool& toggle_ref(RelaxToggles& t, const std::string& name);
/// Comma list of enabled toggle names; "none" and "all" are accepted.
RelaxToggles toggles_from_list(const std::string& list);
std::string toggles_to_list(const RelaxToggles& t);

enum class PoolMode { sum, mean };

struct ModelConfig {
  ModelKind kind = ModelKind::gcn;
  Task task = Task::node_classification;
  std::size_t in_dim = 0;
  std::size_t num_classes = 2;
  std::size_t hidden = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t grit_k = 4;
  std::size_t grit_pair_dim = 8;
  std::size_t d_max = 64;
  std::size_t s_max = 20;
  std::size_t san_k = 8;
  std::size_t san_pe_dim = 8;
  double san_gamma = 0.25;
  PoolMode pooling = PoolMode::mean;

  /// Number of logits per node (node task) or per graph. Binary graph
  /// classification uses a single raw score.
  std::size_t output_dim() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Laplacian decomposition of a clean graph, the base of first-order updates.
struct SpectralBase {
  Matrix laplacian;
  spectral::EigenDecomposition eig;
  spectral::PerturbationOperator op;

  static SpectralBase from_adjacency(const Matrix& a);
};

/// Structure encodings of a fixed discrete graph, reusable across forward
/// passes (training, repeated evaluation).
struct StructureCache {
  std::optional<Matrix> hops;
  std::optional<spectral::EigenDecomposition> eig;
};

struct ForwardContext {
  bool relaxed = false;
  RelaxToggles toggles;
  /// [n] probabilities in [0, 1]. Undefined means all ones.
  ad::Tensor node_probs;
  /// SAN relaxed: base of the eigenpair update. Without it the current
  /// adjacency is decomposed, which makes dL zero.
  const SpectralBase* spectral_base = nullptr;
  /// SAN relaxed: rotate degenerate eigenspaces to the current dL.
  bool align_degenerate = true;
  /// Graphormer relaxed: shortest paths to differentiate along. Without it
  /// they are recomputed from the current adjacency.
  const paths::ShortestPathResult* frozen_paths = nullptr;
  /// Unrelaxed mode only.
  const StructureCache* cache = nullptr;
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  /// Throws std::invalid_argument when the parameters do not match `cfg`.
  Model(ModelConfig cfg, ParamStore params);

  const ModelConfig& config() const { return cfg_; }
  ModelKind kind() const { return cfg_.kind; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Node task: [n, C] logits. Graph task: [1, output_dim].
  ad::Tensor forward(const BoundParams& p, const ad::Tensor& adjacency, const Matrix& features,
                     const ForwardContext& ctx) const;
  /// Forward with the stored parameters as constants.
  ad::Tensor forward(const ad::Tensor& adjacency, const Matrix& features, const ForwardContext& ctx = {}) const;
  /// Unrelaxed forward on a plain matrix.
  Matrix predict(const Matrix& adjacency, const Matrix& features, const StructureCache* cache = nullptr) const;

  StructureCache make_cache(const Matrix& adjacency) const;

  bool operator==(const Model& o) const { return cfg_ == o.cfg_ && params_ == o.params_; }

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

// ---- checkpoints ------------------------------------------------------------
// {"format": "gtrelax-checkpoint-1", "config": {...},
//  "params": [{"name": ..., "shape": [...], "values": [...]}, ...]}
std::string checkpoint_to_json(const Model& m);
Model checkpoint_from_json(const std::string& text, const std::string& origin = "<string>");
void save_checkpoint(const Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// ---- shared building blocks ---------------------------------------------------

/// Row softmax of `w` [r, m] reweighted by p [m]: p_j e^{w_ij} / sum_k p_k e^{w_ik}.
/// Undefined `p` gives the plain softmax. Throws std::invalid_argument when
/// p is all zero.
ad::Tensor attention_nodeprob_bias(const ad::Tensor& w, const ad::Tensor& p);

/// Graph representation [1, d] from node representations [n, d]. Undefined
/// `p` means all ones. Mean pooling with sum(p) = 0 throws.
ad::Tensor pool_weighted(const ad::Tensor& h, const ad::Tensor& p, PoolMode mode);

/// [I, M, ..., M^{K-1}] with M = D^{-1} A (zero rows for isolated nodes).
std::vector<ad::Tensor> rrwp(const ad::Tensor& adjacency, std::size_t k);

/// Degree embedding [n, d] from degrees [n] and table z [D_max + 1, d].
/// Interpolating mode: eta * z[floor + 1] + (1 - eta) * z[floor], clamped to
/// z[D_max]. Otherwise round(deg) indexes the table and deg gets no gradient.
ad::Tensor graphormer_degree_pe(const ad::Tensor& deg, const ad::Tensor& z, bool interpolate);

/// LPE input tokens [n * k, 2]: token (i, j) = (lambda_j, U_ij). Columns of
/// `vectors` [n, r] beyond r are zero padded up to k.
ad::Tensor san_lpe_tokens(const ad::Tensor& values, const ad::Tensor& vectors, std::size_t k);

/// SAN attention [n, n] from real/fake branch scores [n, n].
/// soft: gamma/(1+gamma) * wsoftmax(w_fake, (1 - A) off-diagonal ⊙ p)
///     + 1/(1+gamma) * wsoftmax(w_real, A ⊙ p).
/// hard: the same with A replaced by [A > 0.5] and no gradient to A.
ad::Tensor san_attention(const ad::Tensor& w_real, const ad::Tensor& w_fake, const ad::Tensor& adjacency,
                         const ad::Tensor& p, double gamma, bool soft);

namespace detail {
void init_gcn(ParamStore& ps, const ModelConfig& c, Rng& rng);
void init_grit(ParamStore& ps, const ModelConfig& c, Rng& rng);
void init_graphormer(ParamStore& ps, const ModelConfig& c, Rng& rng);
void init_san(ParamStore& ps, const ModelConfig& c, Rng& rng);
ad::Tensor gcn_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a, const ad::Tensor& x,
                       const ForwardContext& ctx);
ad::Tensor grit_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a, const ad::Tensor& x,
                        const ForwardContext& ctx);
ad::Tensor graphormer_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a,
                              const ad::Tensor& x, const ForwardContext& ctx);
ad::Tensor san_forward(const ModelConfig& c, const BoundParams& p, const ad::Tensor& a, const ad::Tensor& x,
                       const ForwardContext& ctx);

/// Node probabilities used as attention bias, or undefined when disabled.
ad::Tensor attention_probs(const ForwardContext& ctx);
/// h + out(attn), followed by a residual two-layer FFN.
ad::Tensor ffn_block(const BoundParams& p, const std::string& prefix, const ad::Tensor& h, const ad::Tensor& attn);
void init_ffn_block(ParamStore& ps, const std::string& prefix, std::size_t d, Rng& rng);
/// Final layer: node logits, or pooled graph logits.
ad::Tensor readout(const ModelConfig& c, const BoundParams& p, const ad::Tensor& h, const ad::Tensor& probs);
}  // namespace detail

}  // namespace gtrelax
