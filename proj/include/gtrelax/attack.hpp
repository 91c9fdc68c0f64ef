// SPDX-License-Identifier: Apache-2.0
#pragma once

// Evasion attacks on the graph structure: projected randomized block
// coordinate descent (PRBCD) over relaxed edge flips, node injection from a
// candidate pool, discretization, and the random / transfer baselines.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gtrelax/graph.hpp"
#include "gtrelax/models.hpp"

namespace gtrelax::attack {

enum class LossKind { tanh_margin, raw_score };
enum class ConstraintKind { none, protect_labeled, tree_only };
enum class AttackMode { structure, injection };

std::string to_string(LossKind k);
std::string to_string(ConstraintKind k);
std::string to_string(AttackMode k);
LossKind loss_kind_from_string(const std::string& s);
ConstraintKind constraint_from_string(const std::string& s);
AttackMode mode_from_string(const std::string& s);

struct AttackConfig {
  /// Budget as a fraction of the clean graph's edge count.
  double budget_fraction = 0.01;
  std::size_t steps = 125;
  /// 0 picks min(20000, allowed) for structure and min(1000, allowed) for
  /// injection.
  std::size_t block_size = 0;
  std::size_t n_discrete_samples = 20;
  LossKind loss = LossKind::tanh_margin;
  RelaxToggles toggles;
  ConstraintKind constraint = ConstraintKind::none;
  AttackMode mode = AttackMode::structure;
  /// Step size is base_lr * budget / block_size.
  double base_lr = 100.0;
  std::size_t resample_every = 10;
  double keep_fraction = 0.5;
  /// Injection: also sample candidate-candidate pairs.
  bool sample_f_region = false;
  /// Injection: also sample pairs inside the original graph (not with tree_only).
  bool sample_b_region = false;
  std::size_t node_prob_iterations = 3;
  std::size_t max_rejections = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Discrete budget for a graph with `edges` edges.
std::size_t budget_for(const AttackConfig& cfg, std::size_t edges);

// ---- losses and metrics -----------------------------------------------------

/// tanh_margin: mean over nodes of tanh(z_y - max_{c != y} z_c) for logits
/// [n, C]. raw_score: +s for label 1, -s for label 0 on a [1, 1] score. The
/// attacker minimizes both. Throws std::invalid_argument on a kind/shape
/// mismatch.
ad::Tensor attack_loss(const ad::Tensor& logits, const std::vector<int>& labels, LossKind kind);
/// Accuracy in percent: node task over all nodes; graph task 100 or 0.
double accuracy(const Matrix& logits, const std::vector<int>& labels);
/// Labels the loss and metric are taken against.
std::vector<int> targets_of(const Graph& g);

// ---- budget projection --------------------------------------------------------

/// Euclidean projection onto {x in [0, 1]^k : sum(x) <= budget}, by bisection
/// on the shift mu until |sum - budget| <= 1e-8.
std::vector<double> project_budget(std::vector<double> values, double budget);

// ---- blocks -------------------------------------------------------------------

/// Pairs an attack may flip, i < j, in row-major order.
struct AllowedPairs {
  std::vector<IndexPair> pairs;
};

/// Structure mode: all upper-triangle pairs; protect_labeled drops pairs that
/// touch a labeled node. tree_only is rejected (it only applies to injection).
AllowedPairs constraint_mask(const Graph& g, ConstraintKind kind);

struct BlockState {
  std::vector<IndexPair> index;
  std::vector<double> values;
};

/// Block of min(size, allowed) distinct pairs drawn uniformly, values 0.
BlockState initial_block(const AllowedPairs& allowed, std::size_t size, Rng& rng);
/// Keeps the round(keep_fraction * size) highest-valued entries (ties: block
/// order) and refills with fresh pairs at value 0.
BlockState resample_block(const BlockState& block, const AllowedPairs& allowed, double keep_fraction, Rng& rng);

/// Relaxed objective of the block values; returns the scalar loss.
using RelaxedLoss = std::function<ad::Tensor(const ad::Tensor& values)>;

/// One descent step on the attacker's loss followed by project_budget.
/// Returns the loss before the step. Throws std::runtime_error on a
/// non-finite gradient.
double prbcd_step(BlockState& block, const RelaxedLoss& loss, double lr, double budget);

/// Largest `budget` entries with positive value (ties: block order).
std::vector<IndexPair> top_k_flips(const BlockState& block, std::size_t budget);

/// Loss of the true model on a discrete flip set; lower is stronger.
using DiscreteLoss = std::function<double(const std::vector<IndexPair>& flips)>;

struct DiscreteChoice {
  std::vector<IndexPair> flips;
  double loss = 0.0;
  std::size_t evaluations = 0;
};

/// Evaluates top-k rounding and n_samples Bernoulli draws (redrawn while over
/// budget, up to max_rejections times, then top-k) and keeps the lowest loss.
DiscreteChoice sample_discrete(const BlockState& block, std::size_t budget, std::size_t n_samples,
                               std::size_t max_rejections, const DiscreteLoss& loss, Rng& rng);

// ---- injection ------------------------------------------------------------------

struct Candidate {
  std::size_t graph_id;
  std::size_t node_id;
  bool operator==(const Candidate&) const = default;
};

struct CandidateSet {
  Matrix features;
  std::vector<Candidate> provenance;
  std::size_t size() const { return provenance.size(); }
};

struct CandidateOptions {
  std::size_t max_candidates = 100;
  /// Skip nodes whose first feature channel is set (tree roots).
  bool exclude_roots = true;
};

/// Up to max_candidates nodes drawn without replacement from every graph of
/// `pool` other than `exclude_graph`, deterministic in `seed`.
CandidateSet build_candidates(const std::vector<Graph>& pool, std::size_t exclude_graph, std::uint64_t seed,
                              const CandidateOptions& opts = {});

enum class Region : std::uint8_t { b, e, f };

struct AugmentedGraph {
  Graph graph;
  std::size_t n_original = 0;
  Region region(std::size_t i, std::size_t j) const;
};

/// Appends the candidates as isolated nodes.
AugmentedGraph nia_augment(const Graph& g, const CandidateSet& candidates);

/// Injection pairs: region E, plus F / B when enabled; B is refused under
/// tree_only.
AllowedPairs injection_mask(const AugmentedGraph& aug, const AttackConfig& cfg);

/// Nodes of the component (edges with weight > 0) holding node 0, ascending.
/// Throws std::invalid_argument when that component misses an original node.
std::vector<std::size_t> prune_disconnected(const Matrix& adjacency, std::size_t n_original);

/// p^(t+1)_i = 1 - prod_j (1 - A_ij p^(t)_j), p^(0) = 1, for `iterations` sweeps.
std::vector<double> node_probability(const Matrix& adjacency, std::size_t iterations);
/// Differentiable form of node_probability.
ad::Tensor node_probability(const ad::Tensor& adjacency, std::size_t iterations);

/// Maximum-weight spanning tree (Kruskal, ties by index pair) as a discrete
/// adjacency. Throws std::invalid_argument when the support is disconnected.
Matrix mst_projection(const Matrix& weights);

// ---- runs -------------------------------------------------------------------------

struct PerturbationResult {
  std::size_t graph_id = 0;
  std::size_t budget = 0;
  /// Upper-triangle flips; in injection mode indices >= n refer to candidates.
  std::vector<IndexPair> flips;
  double clean_metric = 0.0;
  double attacked_metric = 0.0;
  std::vector<double> loss_trace;
  std::uint64_t seed = 0;
  RelaxToggles toggles;
  AttackMode mode = AttackMode::structure;
  std::vector<Candidate> candidates;
  /// Loss of the true model on the emitted perturbation.
  double attacked_loss = 0.0;
  /// Discrete model evaluations spent.
  std::size_t evaluations = 0;

  bool operator==(const PerturbationResult&) const = default;
};

std::string result_to_json(const PerturbationResult& r);
PerturbationResult result_from_json(const std::string& text, const std::string& origin = "<string>");

/// The attacked graph. `candidates` is required in injection mode.
struct AttackTarget {
  const Graph* graph = nullptr;
  std::size_t graph_id = 0;
  const CandidateSet* candidates = nullptr;
};

PerturbationResult run_attack(const Model& model, const AttackTarget& target, const AttackConfig& cfg);
/// Same budget, mask and number of discrete evaluations as run_attack, with
/// uniformly random flip sets; keeps the strongest.
PerturbationResult random_baseline(const Model& model, const AttackTarget& target, const AttackConfig& cfg);

/// Clean graph with the stored flips applied (injection: candidates attached
/// and unreachable nodes pruned).
Graph perturbed_graph(const PerturbationResult& r, const AttackTarget& target);
/// Accuracy of the unrelaxed `model` on a stored perturbation.
double transfer_attack(const PerturbationResult& r, const Model& model, const AttackTarget& target);

/// Violations of budget, symmetry, diagonal, mask and tree validity; empty
/// when sound.
std::vector<std::string> check_perturbation(const PerturbationResult& r, const AttackTarget& target,
                                            const AttackConfig& cfg);

}  // namespace gtrelax::attack
