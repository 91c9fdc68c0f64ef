// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <stdexcept>

namespace gtrelax::attack {

std::string to_string(LossKind k) { return k == LossKind::tanh_margin ? "tanh_margin" : "raw_score"; }

std::string to_string(ConstraintKind k) {
  switch (k) {
    case ConstraintKind::none: return "none";
    case ConstraintKind::protect_labeled: return "protect_labeled";
    case ConstraintKind::tree_only: return "tree_only";
  }
  return "?";
}

std::string to_string(AttackMode k) { return k == AttackMode::structure ? "structure" : "injection"; }

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "tanh_margin") return LossKind::tanh_margin;
  if (s == "raw_score") return LossKind::raw_score;
  throw std::invalid_argument("unknown loss '" + s + "' (expected tanh_margin or raw_score)");
}

ConstraintKind constraint_from_string(const std::string& s) {
  if (s == "none") return ConstraintKind::none;
  if (s == "protect_labeled") return ConstraintKind::protect_labeled;
  if (s == "tree_only") return ConstraintKind::tree_only;
  throw std::invalid_argument("unknown constraint '" + s + "' (expected none, protect_labeled or tree_only)");
}

AttackMode mode_from_string(const std::string& s) {
  if (s == "structure") return AttackMode::structure;
  if (s == "injection") return AttackMode::injection;
  throw std::invalid_argument("unknown attack mode '" + s + "' (expected structure or injection)");
}

void AttackConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("AttackConfig: " + m); };
  if (!(budget_fraction >= 0.0) || !std::isfinite(budget_fraction)) fail("budget fraction must be >= 0");
  if (steps == 0) fail("steps must be at least 1");
  if (resample_every == 0) fail("resample_every must be at least 1");
  if (!(keep_fraction >= 0.0 && keep_fraction <= 1.0)) fail("keep_fraction must lie in [0, 1]");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) fail("base_lr must be positive");
  if (node_prob_iterations == 0) fail("node_prob_iterations must be at least 1");
  if (mode == AttackMode::structure && constraint == ConstraintKind::tree_only) {
    fail("tree_only applies to injection attacks");
  }
  if (sample_b_region && constraint == ConstraintKind::tree_only) fail("tree_only forbids region B");
}

std::size_t budget_for(const AttackConfig& cfg, std::size_t edges) {
  return budget_from_fraction(cfg.budget_fraction, edges);
}

// ---- losses and metrics -----------------------------------------------------

ad::Tensor attack_loss(const ad::Tensor& logits, const std::vector<int>& labels, LossKind kind) {
  if (kind == LossKind::raw_score) {
    if (logits.size() != 1 || labels.size() != 1) {
      throw std::invalid_argument("raw_score loss needs a single graph score and label, got logits " +
                                  ad::shape_str(logits.shape()));
    }
    const auto s = ad::reshape(logits, {1});
    return labels[0] == 1 ? s : ad::neg(s);
  }
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(1) < 2) {
    throw std::invalid_argument("tanh_margin loss needs [n, C >= 2] node logits for " +
                                std::to_string(labels.size()) + " labels, got " + ad::shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> idx(n);
  std::vector<std::uint8_t> mask(n * c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw std::invalid_argument("tanh_margin: label " + std::to_string(labels[i]) + " out of range");
    }
    idx[i] = i * c + static_cast<std::size_t>(labels[i]);
    mask[idx[i]] = 1;
  }
  const auto own = ad::gather(logits, idx);
  const auto best_other = ad::row_max(ad::masked_fill(logits, mask, -std::numeric_limits<double>::infinity()));
  return ad::mean(ad::tanh(ad::sub(own, best_other)));
}

double accuracy(const Matrix& logits, const std::vector<int>& labels) {
  if (logits.rows != labels.size()) throw std::invalid_argument("accuracy: logits/labels size mismatch");
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    int pred;
    if (logits.cols == 1) {
      pred = logits(i, 0) > 0.0 ? 1 : 0;
    } else {
      pred = 0;
      for (std::size_t c = 1; c < logits.cols; ++c)
        if (logits(i, c) > logits(i, static_cast<std::size_t>(pred))) pred = static_cast<int>(c);
    }
    correct += pred == labels[i];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<int> targets_of(const Graph& g) {
  if (g.graph_label) return {*g.graph_label};
  if (g.node_labels) return *g.node_labels;
  throw std::invalid_argument("graph has neither node labels nor a graph label");
}

// ---- projection ---------------------------------------------------------------

std::vector<double> project_budget(std::vector<double> values, double budget) {
  for (double v : values)
    if (!std::isfinite(v)) throw std::invalid_argument("project_budget: non-finite value");
  auto clamped_sum = [&](double mu) {
    double s = 0.0;
    for (double v : values) s += std::clamp(v - mu, 0.0, 1.0);
    return s;
  };
  if (clamped_sum(0.0) <= budget) {
    for (auto& v : values) v = std::clamp(v, 0.0, 1.0);
    return values;
  }
  // sum(clamp(x - mu)) is non-increasing in mu; bracket [lo, hi] has
  // f(lo) > budget >= f(hi).
  double lo = 0.0, hi = *std::max_element(values.begin(), values.end());
  double mu = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    mu = 0.5 * (lo + hi);
    const double s = clamped_sum(mu);
    if (std::abs(s - budget) <= 1e-8) break;
    if (s > budget)
      lo = mu;
    else
      hi = mu;
  }
  for (auto& v : values) v = std::clamp(v - mu, 0.0, 1.0);
  return values;
}

// ---- blocks -------------------------------------------------------------------

AllowedPairs constraint_mask(const Graph& g, ConstraintKind kind) {
  if (kind == ConstraintKind::tree_only) {
    throw std::invalid_argument("constraint_mask: tree_only only applies to injection (see injection_mask)");
  }
  if (kind == ConstraintKind::protect_labeled && !g.labeled_mask) {
    throw std::invalid_argument("constraint_mask: protect_labeled needs a labeled mask");
  }
  AllowedPairs out;
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = i + 1; j < g.n; ++j) {
      if (kind == ConstraintKind::protect_labeled && ((*g.labeled_mask)[i] || (*g.labeled_mask)[j])) continue;
      out.pairs.emplace_back(i, j);
    }
  return out;
}

namespace {

// k distinct positions of [0, n), uniformly, returned ascending.
std::vector<std::size_t> choose(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + std::uniform_int_distribution<std::size_t>(0, n - 1 - i)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

BlockState initial_block(const AllowedPairs& allowed, std::size_t size, Rng& rng) {
  BlockState b;
  for (std::size_t k : choose(allowed.pairs.size(), size, rng)) b.index.push_back(allowed.pairs[k]);
  b.values.assign(b.index.size(), 0.0);
  return b;
}

BlockState resample_block(const BlockState& block, const AllowedPairs& allowed, double keep_fraction, Rng& rng) {
  const std::size_t size = block.index.size();
  const auto keep = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(size)));
  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return block.values[a] > block.values[b]; });
  order.resize(std::min(keep, size));
  std::sort(order.begin(), order.end());

  BlockState out;
  std::set<IndexPair> old(block.index.begin(), block.index.end());
  std::set<IndexPair> kept;
  for (std::size_t k : order) {
    out.index.push_back(block.index[k]);
    out.values.push_back(block.values[k]);
    kept.insert(block.index[k]);
  }
  // Fresh pairs come from outside the old block first, then from its
  // dropped entries when the allowed set is too small.
  std::vector<IndexPair> fresh, dropped;
  for (const auto& p : allowed.pairs) {
    if (!old.count(p))
      fresh.push_back(p);
    else if (!kept.count(p))
      dropped.push_back(p);
  }
  const std::size_t need = size - out.index.size();
  for (std::size_t k : choose(fresh.size(), need, rng)) out.index.push_back(fresh[k]);
  if (out.index.size() < size) {
    for (std::size_t k : choose(dropped.size(), size - out.index.size(), rng)) out.index.push_back(dropped[k]);
  }
  out.values.resize(out.index.size(), 0.0);
  return out;
}

double prbcd_step(BlockState& block, const RelaxedLoss& loss, double lr, double budget) {
  ad::Tape tape;
  const auto v = tape.variable({block.values.size()}, block.values);
  const auto l = loss(v);
  const double value = l.item();
  std::vector<double> g(block.values.size(), 0.0);
  if (l.tape() == &tape) g = tape.backward(l)[v];
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (!std::isfinite(g[k])) {
      throw std::runtime_error("prbcd_step: non-finite gradient for block entry (" +
                               std::to_string(block.index[k].first) + ", " + std::to_string(block.index[k].second) +
                               ")");
    }
    block.values[k] -= lr * g[k];
  }
  block.values = project_budget(std::move(block.values), budget);
  return value;
}

std::vector<IndexPair> top_k_flips(const BlockState& block, std::size_t budget) {
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < block.values.size(); ++k)
    if (block.values[k] > 0.0) order.push_back(k);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return block.values[a] > block.values[b]; });
  order.resize(std::min(order.size(), budget));
  std::sort(order.begin(), order.end());
  std::vector<IndexPair> out;
  for (std::size_t k : order) out.push_back(block.index[k]);
  return out;
}

DiscreteChoice sample_discrete(const BlockState& block, std::size_t budget, std::size_t n_samples,
                               std::size_t max_rejections, const DiscreteLoss& loss, Rng& rng) {
  std::map<std::vector<IndexPair>, double> seen;
  DiscreteChoice best;
  bool have = false;
  auto consider = [&](std::vector<IndexPair> flips) {
    auto it = seen.find(flips);
    const double l = it != seen.end() ? it->second : (seen[flips] = loss(flips));
    if (!have || l < best.loss) {
      best.flips = std::move(flips);
      best.loss = l;
      have = true;
    }
  };
  const auto top = top_k_flips(block, budget);
  consider(top);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    std::vector<IndexPair> flips;
    bool ok = false;
    for (std::size_t attempt = 0; attempt <= max_rejections && !ok; ++attempt) {
      flips.clear();
      for (std::size_t k = 0; k < block.values.size(); ++k)
        if (u(rng) < block.values[k]) flips.push_back(block.index[k]);
      ok = flips.size() <= budget;
    }
    consider(ok ? flips : top);
  }
  best.evaluations = n_samples + 1;
  return best;
}

// ---- injection ------------------------------------------------------------------

CandidateSet build_candidates(const std::vector<Graph>& pool, std::size_t exclude_graph, std::uint64_t seed,
                              const CandidateOptions& opts) {
  std::vector<Candidate> all;
  std::size_t dim = 0;
  for (std::size_t g = 0; g < pool.size(); ++g) {
    if (g == exclude_graph) continue;
    dim = pool[g].feature_dim();
    for (std::size_t i = 0; i < pool[g].n; ++i) {
      if (opts.exclude_roots && pool[g].features(i, 0) == 1.0) continue;
      all.push_back({g, i});
    }
  }
  Rng rng = seeded(seed, 0xca0d + exclude_graph);
  CandidateSet cs;
  for (std::size_t k : choose(all.size(), opts.max_candidates, rng)) cs.provenance.push_back(all[k]);
  cs.features = Matrix(cs.provenance.size(), dim);
  for (std::size_t r = 0; r < cs.provenance.size(); ++r) {
    const auto& src = pool[cs.provenance[r].graph_id];
    if (src.feature_dim() != dim) throw std::invalid_argument("build_candidates: feature widths differ");
    for (std::size_t c = 0; c < dim; ++c) cs.features(r, c) = src.features(cs.provenance[r].node_id, c);
  }
  return cs;
}

Region AugmentedGraph::region(std::size_t i, std::size_t j) const {
  const bool a = i < n_original, b = j < n_original;
  if (a && b) return Region::b;
  if (!a && !b) return Region::f;
  return Region::e;
}

AugmentedGraph nia_augment(const Graph& g, const CandidateSet& candidates) {
  const std::size_t c = candidates.size();
  if (c > 0 && candidates.features.cols != g.feature_dim()) {
    throw std::invalid_argument("nia_augment: candidate feature width " + std::to_string(candidates.features.cols) +
                                " != graph feature width " + std::to_string(g.feature_dim()));
  }
  AugmentedGraph aug;
  aug.n_original = g.n;
  Graph& out = aug.graph;
  out.n = g.n + c;
  out.adjacency = Matrix(out.n, out.n);
  out.features = Matrix(out.n, g.feature_dim());
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.n; ++j) out.adjacency(i, j) = g.adjacency(i, j);
    for (std::size_t f = 0; f < g.feature_dim(); ++f) out.features(i, f) = g.features(i, f);
  }
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t f = 0; f < g.feature_dim(); ++f) out.features(g.n + r, f) = candidates.features(r, f);
  out.graph_label = g.graph_label;
  return aug;
}

AllowedPairs injection_mask(const AugmentedGraph& aug, const AttackConfig& cfg) {
  if (cfg.sample_b_region && cfg.constraint == ConstraintKind::tree_only) {
    throw std::invalid_argument("injection_mask: tree_only forbids region B");
  }
  AllowedPairs out;
  const std::size_t n = aug.graph.n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto r = aug.region(i, j);
      if (r == Region::e || (r == Region::f && cfg.sample_f_region) || (r == Region::b && cfg.sample_b_region)) {
        out.pairs.emplace_back(i, j);
      }
    }
  return out;
}

std::vector<std::size_t> prune_disconnected(const Matrix& adjacency, std::size_t n_original) {
  auto keep = component_of(adjacency, 0, 0.0);
  std::sort(keep.begin(), keep.end());
  if (keep.size() < n_original || keep[n_original - 1] != n_original - 1) {
    throw std::invalid_argument("prune_disconnected: the original graph is not connected");
  }
  return keep;
}

std::vector<double> node_probability(const Matrix& a, std::size_t iterations) {
  const std::size_t n = a.rows;
  std::vector<double> p(n, 1.0), next(n);
  for (std::size_t t = 0; t < iterations; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double prod = 1.0;
      for (std::size_t j = 0; j < n; ++j) prod *= 1.0 - a(i, j) * p[j];
      next[i] = 1.0 - prod;
    }
    p.swap(next);
  }
  return p;
}

ad::Tensor node_probability(const ad::Tensor& a, std::size_t iterations) {
  const std::size_t n = a.dim(0);
  ad::Tensor p = ad::Tensor::full({n}, 1.0);
  for (std::size_t t = 0; t < iterations; ++t) {
    p = ad::rsub_scalar(1.0, ad::prod_last(ad::rsub_scalar(1.0, ad::mul_row(a, p))));
  }
  return p;
}

Matrix mst_projection(const Matrix& w) {
  const std::size_t n = w.rows;
  struct Edge {
    double w;
    std::size_t i, j;
  };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (w(i, j) > 0.0) edges.push_back({w(i, j), i, j});
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.w > b.w; });
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  Matrix out(n, n);
  std::size_t added = 0;
  for (const auto& e : edges) {
    const auto a = find(e.i), b = find(e.j);
    if (a == b) continue;
    parent[a] = b;
    out(e.i, e.j) = out(e.j, e.i) = 1.0;
    ++added;
  }
  if (n > 0 && added + 1 != n) throw std::invalid_argument("mst_projection: support is disconnected");
  return out;
}

}  // namespace gtrelax::attack
