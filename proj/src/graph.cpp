// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <stdexcept>

namespace gtrelax {

Rng seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

bool Graph::is_discrete() const {
  return std::all_of(adjacency.data.begin(), adjacency.data.end(),
                     [](double v) { return v == 0.0 || v == 1.0; });
}

std::size_t Graph::edge_count() const {
  std::size_t m = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m += adjacency(i, j) != 0.0;
  return m;
}

void Graph::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("graph: " + what); };
  if (adjacency.rows != n || adjacency.cols != n) fail("adjacency is not n x n");
  if (features.rows != n) fail("features have " + std::to_string(features.rows) + " rows for n=" + std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (adjacency(i, i) != 0.0) fail("non-zero diagonal at node " + std::to_string(i));
    for (std::size_t j = i + 1; j < n; ++j) {
      const double a = adjacency(i, j);
      if (!(a >= 0.0 && a <= 1.0)) fail("adjacency entry outside [0, 1] at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
      if (std::abs(a - adjacency(j, i)) > 1e-12) {
        fail("adjacency not symmetric at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
      }
    }
  }
  for (double v : features.data)
    if (!std::isfinite(v)) fail("non-finite feature");
  if (node_labels && node_labels->size() != n) fail("node_labels length differs from n");
  if (labeled_mask && labeled_mask->size() != n) fail("labeled_mask length differs from n");
}

std::string to_string(Task t) {
  return t == Task::node_classification ? "node" : "graph";
}

Task task_from_string(const std::string& s) {
  if (s == "node") return Task::node_classification;
  if (s == "graph") return Task::graph_classification;
  throw std::invalid_argument("unknown task '" + s + "' (expected node|graph)");
}

void Dataset::validate() const {
  if (graphs.empty()) throw std::invalid_argument("dataset: no graphs");
  std::vector<std::uint8_t> seen(graphs.size(), 0);
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (auto i : *part) {
      if (i >= graphs.size()) throw std::invalid_argument("dataset: split index out of range");
      if (seen[i]++) throw std::invalid_argument("dataset: splits overlap at graph " + std::to_string(i));
    }
  }
  const auto d = graphs.front().feature_dim();
  for (const auto& g : graphs) {
    g.validate();
    if (g.feature_dim() != d) throw std::invalid_argument("dataset: feature dimension differs between graphs");
    if (task == Task::node_classification && !g.node_labels) throw std::invalid_argument("dataset: node task without node labels");
    if (task == Task::graph_classification && !g.graph_label) throw std::invalid_argument("dataset: graph task without graph label");
  }
}

std::vector<double> degrees(const Matrix& a) {
  std::vector<double> d(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) d[i] += a(i, j);
  return d;
}

Matrix laplacian_sym(const Matrix& a) {
  const auto d = degrees(a);
  std::vector<double> s(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) s[i] = d[i] > 0.0 ? 1.0 / std::sqrt(d[i]) : 0.0;
  Matrix l = Matrix::identity(a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) l(i, j) -= a(i, j) * s[j] * s[i];
  return l;
}

std::vector<std::size_t> component_of(const Matrix& a, std::size_t source, double threshold) {
  std::vector<std::uint8_t> seen(a.rows, 0);
  std::vector<std::size_t> out;
  std::queue<std::size_t> q;
  q.push(source);
  seen[source] = 1;
  while (!q.empty()) {
    const auto u = q.front();
    q.pop();
    out.push_back(u);
    for (std::size_t v = 0; v < a.cols; ++v) {
      if (!seen[v] && a(u, v) > threshold) {
        seen[v] = 1;
        q.push(v);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool is_connected(const Matrix& a, double threshold) {
  return a.rows == 0 || component_of(a, 0, threshold).size() == a.rows;
}

std::size_t budget_from_fraction(double fraction, std::size_t edges) {
  if (!(fraction >= 0.0)) throw std::invalid_argument("budget fraction must be >= 0");
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(edges)));
}

Matrix apply_flips(const Matrix& a, const EdgeFlips& b) {
  if (b.index.size() != b.values.size()) throw std::invalid_argument("apply_flips: index/value length mismatch");
  Matrix out = a;
  for (std::size_t k = 0; k < b.index.size(); ++k) {
    const auto [i, j] = b.index[k];
    const double v = a(i, j) + (1.0 - 2.0 * a(i, j)) * b.values[k];
    out(i, j) = v;
    out(j, i) = v;
  }
  return out;
}

ad::Tensor apply_flips(const Matrix& a, const std::vector<IndexPair>& index, const ad::Tensor& values) {
  if (values.size() != index.size()) {
    throw std::invalid_argument("apply_flips: " + std::to_string(values.size()) + " values for " +
                                std::to_string(index.size()) + " pairs");
  }
  const std::size_t n = a.rows;
  std::vector<double> out = a.data;
  std::vector<double> coef(index.size());
  for (std::size_t k = 0; k < index.size(); ++k) {
    const auto [i, j] = index[k];
    if (i >= j || j >= n) throw std::invalid_argument("apply_flips: pairs must satisfy i < j < n");
    coef[k] = 1.0 - 2.0 * a(i, j);
    const double v = a(i, j) + coef[k] * values[k];
    out[i * n + j] = v;
    out[j * n + i] = v;
  }
  return ad::record("apply_flips", {n, n}, std::move(out), {values},
                    [index, coef, n](const ad::Node& o, std::span<ad::Node* const> in) {
                      if (!in[0]->requires_grad) return;
                      double* g = in[0]->grad.data();
                      for (std::size_t k = 0; k < index.size(); ++k) {
                        const auto [i, j] = index[k];
                        g[k] += coef[k] * (o.grad[i * n + j] + o.grad[j * n + i]);
                      }
                    });
}

Matrix apply_discrete_flips(const Matrix& a, const std::vector<IndexPair>& flips) {
  Matrix out = a;
  for (const auto& [i, j] : flips) {
    if (i == j) throw std::invalid_argument("apply_discrete_flips: diagonal flip");
    out(i, j) = 1.0 - out(i, j);
    out(j, i) = out(i, j);
  }
  return out;
}

Graph generate_sbm_cluster(std::uint64_t seed, const SbmConfig& cfg) {
  if (!(cfg.p_intra >= 0.0 && cfg.p_intra <= 1.0 && cfg.p_inter >= 0.0 && cfg.p_inter <= 1.0)) {
    throw std::invalid_argument("sbm: probabilities must lie in [0, 1]");
  }
  if (!(cfg.p_intra > cfg.p_inter)) throw std::invalid_argument("sbm: p_intra must exceed p_inter");
  if (cfg.feature_dim < cfg.n_clusters) throw std::invalid_argument("sbm: feature_dim smaller than n_clusters");
  if (cfg.min_cluster_size < 1 || cfg.min_cluster_size > cfg.max_cluster_size) {
    throw std::invalid_argument("sbm: bad cluster size range");
  }
  Rng rng = seeded(seed, 0x5b3);
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    std::uniform_int_distribution<std::size_t> size_dist(cfg.min_cluster_size, cfg.max_cluster_size);
    std::vector<int> label;
    for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
      const auto s = size_dist(rng);
      label.insert(label.end(), s, static_cast<int>(c));
    }
    std::shuffle(label.begin(), label.end(), rng);
    const std::size_t n = label.size();

    Graph g;
    g.n = n;
    g.adjacency = Matrix(n, n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double p = label[i] == label[j] ? cfg.p_intra : cfg.p_inter;
        if (u(rng) < p) g.adjacency(i, j) = g.adjacency(j, i) = 1.0;
      }
    }
    if (!is_connected(g.adjacency)) continue;

    g.features = Matrix(n, cfg.feature_dim);
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = cfg.n_clusters; f < cfg.feature_dim; ++f) g.features(i, f) = noise(rng);
    g.labeled_mask = std::vector<std::uint8_t>(n, 0);
    for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < n; ++i)
        if (label[i] == static_cast<int>(c)) members.push_back(i);
      const auto pick = members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)];
      (*g.labeled_mask)[pick] = 1;
      g.features(pick, c) = 1.0;
    }
    g.node_labels = std::move(label);
    return g;
  }
  throw std::runtime_error("sbm: no connected graph after " + std::to_string(cfg.max_retries) + " attempts");
}

Graph generate_retweet_tree(std::uint64_t seed, const TreeConfig& cfg, int label) {
  if (cfg.min_nodes < 2 || cfg.min_nodes > cfg.max_nodes) throw std::invalid_argument("tree: need 2 <= min_nodes <= max_nodes");
  if (cfg.feature_dim < 2) throw std::invalid_argument("tree: feature_dim must be >= 2");
  Rng rng = seeded(seed, 0x7ee);
  const auto n = std::uniform_int_distribution<std::size_t>(cfg.min_nodes, cfg.max_nodes)(rng);
  Graph g;
  g.n = n;
  g.adjacency = Matrix(n, n);
  std::bernoulli_distribution to_root(cfg.root_attach);
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t parent = to_root(rng) ? 0 : std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    g.adjacency(i, parent) = g.adjacency(parent, i) = 1.0;
  }
  g.features = Matrix(n, cfg.feature_dim);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  const double sign = label ? 1.0 : -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double shift = sign * (i == 0 ? cfg.root_shift : cfg.user_shift);
    g.features(i, 0) = i == 0 ? 1.0 : 0.0;
    for (std::size_t f = 1; f < cfg.feature_dim; ++f) g.features(i, f) = noise(rng) + shift;
  }
  g.graph_label = label;
  return g;
}

Dataset generate_cluster_dataset(std::uint64_t seed, const ClusterDatasetConfig& cfg) {
  Dataset ds;
  ds.task = Task::node_classification;
  ds.num_classes = cfg.sbm.n_clusters;
  const std::size_t total = cfg.n_train + cfg.n_val + cfg.n_test;
  for (std::size_t i = 0; i < total; ++i) ds.graphs.push_back(generate_sbm_cluster(seed * 1000003 + i, cfg.sbm));
  for (std::size_t i = 0; i < total; ++i) {
    (i < cfg.n_train ? ds.split.train : i < cfg.n_train + cfg.n_val ? ds.split.val : ds.split.test).push_back(i);
  }
  return ds;
}

Dataset generate_tree_dataset(std::uint64_t seed, const TreeDatasetConfig& cfg) {
  Dataset ds;
  ds.task = Task::graph_classification;
  ds.num_classes = 2;
  std::vector<int> labels(cfg.n_graphs);
  for (std::size_t i = 0; i < cfg.n_graphs; ++i) labels[i] = static_cast<int>(i % 2);
  Rng rng = seeded(seed, 0x11);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < cfg.n_graphs; ++i) {
    ds.graphs.push_back(generate_retweet_tree(seed * 1000003 + i, cfg.tree, labels[i]));
  }
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * cfg.n_graphs));
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * cfg.n_graphs));
  for (std::size_t i = 0; i < cfg.n_graphs; ++i) {
    (i < n_train ? ds.split.train : i < n_train + n_val ? ds.split.val : ds.split.test).push_back(i);
  }
  return ds;
}

}  // namespace gtrelax
