// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gtrelax/matrix.hpp"
#include "gtrelax/tensor.hpp"

namespace gtrelax {

using Rng = std::mt19937_64;
using IndexPair = std::pair<std::size_t, std::size_t>;

/// Generator for an independent stream of a seed.
Rng seeded(std::uint64_t seed, std::uint64_t stream);

/// Undirected attributed graph with a dense adjacency in [0, 1].
struct Graph {
  std::size_t n = 0;
  Matrix adjacency;
  Matrix features;
  std::optional<std::vector<int>> node_labels;
  std::optional<int> graph_label;
  std::optional<std::vector<std::uint8_t>> labeled_mask;

  std::size_t feature_dim() const { return features.cols; }
  /// Every adjacency entry is exactly 0 or 1.
  bool is_discrete() const;
  /// Number of upper-triangle entries that are non-zero.
  std::size_t edge_count() const;
  /// Throws std::invalid_argument on shape, symmetry, diagonal or range errors.
  void validate() const;

  bool operator==(const Graph&) const = default;
};

enum class Task { node_classification, graph_classification };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct Dataset {
  std::vector<Graph> graphs;
  Split split;
  Task task = Task::node_classification;
  std::size_t num_classes = 0;

  /// Splits disjoint and in range, feature width uniform, graphs valid.
  void validate() const;
};

// ---- derived quantities ---------------------------------------------------

std::vector<double> degrees(const Matrix& adjacency);
inline std::vector<double> degrees(const Graph& g) { return degrees(g.adjacency); }

/// I - D^{-1/2} A D^{-1/2}; rows and columns of isolated nodes are identity rows.
Matrix laplacian_sym(const Matrix& adjacency);
inline Matrix laplacian_sym(const Graph& g) { return laplacian_sym(g.adjacency); }

/// Connectivity over entries strictly greater than `threshold`.
bool is_connected(const Matrix& adjacency, double threshold = 0.0);

/// Connected component of `source` over entries > threshold, ascending.
std::vector<std::size_t> component_of(const Matrix& adjacency, std::size_t source,
                                      double threshold = 0.0);

/// Budget Δ = round(fraction * edges).
std::size_t budget_from_fraction(double fraction, std::size_t edges);

// ---- edge flips -----------------------------------------------------------

/// Upper-triangle flip entries (i < j) with values in [0, 1].
struct EdgeFlips {
  std::vector<IndexPair> index;
  std::vector<double> values;
};

/// Ã = A + (1 - 2A) ⊙ B on plain matrices.
Matrix apply_flips(const Matrix& a, const EdgeFlips& b);

/// Differentiable version; `values` holds one entry per index pair and the
/// result is an [n, n] tensor whose gradient reaches `values`.
ad::Tensor apply_flips(const Matrix& a, const std::vector<IndexPair>& index,
                       const ad::Tensor& values);

/// Discrete flips (each listed pair toggled).
Matrix apply_discrete_flips(const Matrix& a, const std::vector<IndexPair>& flips);

// ---- synthetic generators -------------------------------------------------

struct SbmConfig {
  std::size_t n_clusters = 6;
  std::size_t min_cluster_size = 15;
  std::size_t max_cluster_size = 25;
  double p_intra = 0.4;
  double p_inter = 0.05;
  /// First n_clusters channels hold the label one-hot of the labeled nodes;
  /// the rest are noise.
  std::size_t feature_dim = 8;
  double noise_std = 0.1;
  int max_retries = 100;
};

Graph generate_sbm_cluster(std::uint64_t seed, const SbmConfig& cfg);

struct TreeConfig {
  std::size_t min_nodes = 16;
  std::size_t max_nodes = 40;
  std::size_t feature_dim = 8;
  /// Probability that a new node attaches to the root instead of a uniformly
  /// chosen earlier node.
  double root_attach = 0.4;
  /// Mean of the root's content channels is ±root_shift by label.
  double root_shift = 1.0;
  /// Mean of user channels is ±user_shift by label.
  double user_shift = 0.35;
  double noise_std = 1.0;
};

/// Tree rooted at node 0. Channel 0 is the root indicator. Topology and noise
/// depend only on the seed; the label only moves feature means.
Graph generate_retweet_tree(std::uint64_t seed, const TreeConfig& cfg, int label);

struct ClusterDatasetConfig {
  SbmConfig sbm;
  std::size_t n_train = 600;
  std::size_t n_val = 60;
  std::size_t n_test = 60;
};

struct TreeDatasetConfig {
  TreeConfig tree;
  std::size_t n_graphs = 300;
  double train_fraction = 0.4;
  double val_fraction = 0.1;
};

Dataset generate_cluster_dataset(std::uint64_t seed, const ClusterDatasetConfig& cfg);
Dataset generate_tree_dataset(std::uint64_t seed, const TreeDatasetConfig& cfg);

}  // namespace gtrelax
