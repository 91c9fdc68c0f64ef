// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>

#include "gtrelax/attack.hpp"
#include "gtrelax/graph_io.hpp"
#include "json.hpp"

namespace gtrelax::attack {

using nlohmann::json;

namespace {

Graph induced(const Graph& g, const std::vector<std::size_t>& keep) {
  Graph out;
  out.n = keep.size();
  out.adjacency = Matrix(out.n, out.n);
  out.features = Matrix(out.n, g.feature_dim());
  for (std::size_t a = 0; a < keep.size(); ++a) {
    for (std::size_t b = 0; b < keep.size(); ++b) out.adjacency(a, b) = g.adjacency(keep[a], keep[b]);
    for (std::size_t f = 0; f < g.feature_dim(); ++f) out.features(a, f) = g.features(keep[a], f);
  }
  out.graph_label = g.graph_label;
  return out;
}

struct Outcome {
  std::vector<IndexPair> flips;
  double loss = 0.0;
  double metric = 0.0;
};

// Everything needed to evaluate discrete and relaxed perturbations of one
// attacked graph.
class Problem {
 public:
  Problem(const Model& model, const AttackTarget& target, const AttackConfig& cfg)
      : model_(model), target_(target), cfg_(cfg) {
    if (!target.graph) throw std::invalid_argument("attack: no graph given");
    const Graph& g = *target.graph;
    labels_ = targets_of(g);
    if (cfg.mode == AttackMode::injection) {
      if (!target.candidates) throw std::invalid_argument("injection attack needs a candidate set");
      aug_ = nia_augment(g, *target.candidates);
      allowed_ = injection_mask(*aug_, cfg);
      prune_disconnected(g.adjacency, g.n);  // original must be connected
    } else {
      allowed_ = constraint_mask(g, cfg.constraint);
      if (model.kind() == ModelKind::san) base_ = SpectralBase::from_adjacency(g.adjacency);
    }
    budget_ = budget_for(cfg, g.edge_count());
  }

  std::size_t budget() const { return budget_; }
  const AllowedPairs& allowed() const { return allowed_; }
  const Graph& graph() const { return *target_.graph; }

  /// Discrete evaluation. `weights` gives the continuous value of flipped
  /// pairs for the spanning-tree projection (default 1).
  Outcome evaluate(const std::vector<IndexPair>& flips, const std::map<IndexPair, double>& weights = {}) const {
    Outcome o;
    Graph g;
    if (!aug_) {
      g = graph();
      g.adjacency = apply_discrete_flips(g.adjacency, flips);
      o.flips = flips;
    } else {
      const Matrix a = apply_discrete_flips(aug_->graph.adjacency, flips);
      const auto keep = prune_disconnected(a, aug_->n_original);
      std::vector<std::size_t> local(a.rows, SIZE_MAX);
      for (std::size_t k = 0; k < keep.size(); ++k) local[keep[k]] = k;
      g = induced(aug_->graph, keep);
      g.adjacency = Matrix(keep.size(), keep.size());
      for (std::size_t x = 0; x < keep.size(); ++x)
        for (std::size_t y = 0; y < keep.size(); ++y) g.adjacency(x, y) = a(keep[x], keep[y]);
      if (cfg_.constraint == ConstraintKind::tree_only) {
        // Original edges rank above any injected edge, including injected
        // ones at weight 1, so the clean tree always survives.
        Matrix w = g.adjacency;
        for (auto& v : w.data) v *= 2.0;
        for (const auto& f : flips) {
          if (local[f.first] == SIZE_MAX || local[f.second] == SIZE_MAX) continue;
          auto it = weights.find(f);
          const double v = it == weights.end() ? 1.0 : it->second;
          w(local[f.first], local[f.second]) = w(local[f.second], local[f.first]) = v;
        }
        g.adjacency = mst_projection(w);
      }
      for (const auto& f : flips) {
        const auto x = local[f.first], y = local[f.second];
        if (x != SIZE_MAX && y != SIZE_MAX && g.adjacency(x, y) != aug_->graph.adjacency(f.first, f.second)) {
          o.flips.push_back(f);
        }
      }
    }
    const auto logits = model_.predict(g.adjacency, g.features);
    o.loss = attack_loss(ad::Tensor::from_matrix(logits), labels_, cfg_.loss).item();
    o.metric = accuracy(logits, labels_);
    return o;
  }

  /// Relaxed objective for a fixed block layout.
  class Relaxed {
   public:
    Relaxed(const Problem& pr, const std::vector<IndexPair>& index) : pr_(pr) {
      const Graph& g = pr.graph();
      ctx_.relaxed = true;
      ctx_.toggles = pr.cfg_.toggles;
      if (!pr.aug_) {
        a_ = g.adjacency;
        x_ = g.features;
        index_ = index;
        if (pr.base_) ctx_.spectral_base = &*pr.base_;
        return;
      }
      // Original nodes plus every candidate the block touches.
      std::set<std::size_t> nodes;
      for (std::size_t i = 0; i < pr.aug_->n_original; ++i) nodes.insert(i);
      for (const auto& [i, j] : index) {
        nodes.insert(i);
        nodes.insert(j);
      }
      const std::vector<std::size_t> keep(nodes.begin(), nodes.end());
      std::vector<std::size_t> local(pr.aug_->graph.n, SIZE_MAX);
      for (std::size_t k = 0; k < keep.size(); ++k) local[keep[k]] = k;
      const Graph sub = induced(pr.aug_->graph, keep);
      a_ = sub.adjacency;
      x_ = sub.features;
      for (const auto& [i, j] : index) index_.emplace_back(local[i], local[j]);
      if (pr.model_.kind() == ModelKind::san) {
        base_ = SpectralBase::from_adjacency(a_);
        ctx_.spectral_base = &*base_;
      }
    }

    ad::Tensor operator()(const ad::Tensor& values) const {
      const auto at = apply_flips(a_, index_, values);
      ForwardContext ctx = ctx_;
      if (pr_.aug_) ctx.node_probs = node_probability(at, pr_.cfg_.node_prob_iterations);
      return attack_loss(pr_.model_.forward(at, x_, ctx), pr_.labels_, pr_.cfg_.loss);
    }

   private:
    const Problem& pr_;
    Matrix a_, x_;
    std::vector<IndexPair> index_;
    std::optional<SpectralBase> base_;
    ForwardContext ctx_;
  };

  PerturbationResult make_result(const Outcome& clean, const Outcome& attacked) const {
    PerturbationResult r;
    r.graph_id = target_.graph_id;
    r.budget = budget_;
    r.flips = attacked.flips;
    r.clean_metric = clean.metric;
    r.attacked_metric = attacked.metric;
    r.attacked_loss = attacked.loss;
    r.seed = cfg_.seed;
    r.toggles = cfg_.toggles;
    r.mode = cfg_.mode;
    if (aug_) r.candidates = target_.candidates->provenance;
    return r;
  }

  std::size_t block_size() const {
    const std::size_t cap = cfg_.block_size ? cfg_.block_size : (aug_ ? 1000 : 20000);
    return std::min(cap, allowed_.pairs.size());
  }

 private:
  const Model& model_;
  const AttackTarget& target_;
  const AttackConfig& cfg_;
  std::vector<int> labels_;
  std::optional<AugmentedGraph> aug_;
  std::optional<SpectralBase> base_;
  AllowedPairs allowed_;
  std::size_t budget_ = 0;
};

}  // namespace

PerturbationResult run_attack(const Model& model, const AttackTarget& target, const AttackConfig& cfg) {
  cfg.validate();
  const Problem pr(model, target, cfg);
  const auto clean = pr.evaluate({});
  const std::size_t budget = pr.budget();
  const std::size_t bs = pr.block_size();
  if (budget == 0 || bs == 0) {
    auto r = pr.make_result(clean, clean);
    return r;
  }
  Rng rng = seeded(cfg.seed, 0xa77ac + target.graph_id);
  const double lr = cfg.base_lr * static_cast<double>(budget) / static_cast<double>(bs);
  auto block = initial_block(pr.allowed(), bs, rng);
  auto relaxed = std::make_unique<Problem::Relaxed>(pr, block.index);
  std::vector<double> trace;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (step > 0 && step % cfg.resample_every == 0 && bs < pr.allowed().pairs.size()) {
      block = resample_block(block, pr.allowed(), cfg.keep_fraction, rng);
      relaxed = std::make_unique<Problem::Relaxed>(pr, block.index);
    }
    trace.push_back(prbcd_step(block, std::ref(*relaxed), lr, static_cast<double>(budget)));
  }
  std::map<IndexPair, double> weights;
  for (std::size_t k = 0; k < block.index.size(); ++k) weights[block.index[k]] = block.values[k];
  const auto choice = sample_discrete(
      block, budget, cfg.n_discrete_samples, cfg.max_rejections,
      [&](const std::vector<IndexPair>& flips) { return pr.evaluate(flips, weights).loss; }, rng);
  auto r = pr.make_result(clean, pr.evaluate(choice.flips, weights));
  r.loss_trace = std::move(trace);
  r.evaluations = cfg.steps + choice.evaluations;
  return r;
}

PerturbationResult random_baseline(const Model& model, const AttackTarget& target, const AttackConfig& cfg) {
  cfg.validate();
  const Problem pr(model, target, cfg);
  const auto clean = pr.evaluate({});
  const std::size_t budget = pr.budget();
  if (budget == 0 || pr.allowed().pairs.empty()) return pr.make_result(clean, clean);
  Rng rng = seeded(cfg.seed, 0x7a4d0 + target.graph_id);
  const std::size_t evaluations = cfg.steps + cfg.n_discrete_samples + 1;
  std::optional<Outcome> best;
  std::vector<double> trace;
  for (std::size_t e = 0; e < evaluations; ++e) {
    std::vector<IndexPair> flips;
    for (std::size_t k : [&] {
           std::vector<std::size_t> idx(pr.allowed().pairs.size());
           std::iota(idx.begin(), idx.end(), 0);
           const std::size_t take = std::min(budget, idx.size());
           for (std::size_t i = 0; i < take; ++i) {
             const std::size_t j = i + std::uniform_int_distribution<std::size_t>(0, idx.size() - 1 - i)(rng);
             std::swap(idx[i], idx[j]);
           }
           idx.resize(take);
           std::sort(idx.begin(), idx.end());
           return idx;
         }())
      flips.push_back(pr.allowed().pairs[k]);
    auto o = pr.evaluate(flips);
    if (!best || o.loss < best->loss) best = std::move(o);
    trace.push_back(best->loss);
  }
  auto r = pr.make_result(clean, *best);
  r.loss_trace = std::move(trace);
  r.evaluations = evaluations;
  return r;
}

Graph perturbed_graph(const PerturbationResult& r, const AttackTarget& target) {
  if (!target.graph) throw std::invalid_argument("perturbed_graph: no graph given");
  if (r.graph_id != target.graph_id) {
    throw std::invalid_argument("perturbation belongs to graph " + std::to_string(r.graph_id) + ", not " +
                                std::to_string(target.graph_id));
  }
  const Graph& g = *target.graph;
  if (r.mode == AttackMode::structure) {
    Graph out = g;
    out.adjacency = apply_discrete_flips(g.adjacency, r.flips);
    return out;
  }
  if (!target.candidates || target.candidates->provenance != r.candidates) {
    throw std::invalid_argument("perturbed_graph: candidate set does not match the stored perturbation");
  }
  const auto aug = nia_augment(g, *target.candidates);
  Graph full = aug.graph;
  full.adjacency = apply_discrete_flips(full.adjacency, r.flips);
  return induced(full, prune_disconnected(full.adjacency, g.n));
}

double transfer_attack(const PerturbationResult& r, const Model& model, const AttackTarget& target) {
  const Graph g = perturbed_graph(r, target);
  return accuracy(model.predict(g.adjacency, g.features), targets_of(*target.graph));
}

std::vector<std::string> check_perturbation(const PerturbationResult& r, const AttackTarget& target,
                                            const AttackConfig& cfg) {
  std::vector<std::string> issues;
  const Graph& g = *target.graph;
  if (r.budget != budget_for(cfg, g.edge_count())) issues.push_back("budget does not match the config");
  if (r.flips.size() > r.budget) {
    issues.push_back(std::to_string(r.flips.size()) + " flips exceed budget " + std::to_string(r.budget));
  }
  std::set<IndexPair> seen;
  for (const auto& f : r.flips) {
    if (!seen.insert(f).second) issues.push_back("duplicate flip");
    if (f.first >= f.second) issues.push_back("flip not in the upper triangle");
  }
  AllowedPairs allowed;
  std::optional<AugmentedGraph> aug;
  if (r.mode == AttackMode::injection) {
    if (!target.candidates) return {"injection result without candidate set"};
    aug = nia_augment(g, *target.candidates);
    allowed = injection_mask(*aug, cfg);
  } else {
    allowed = constraint_mask(g, cfg.constraint);
  }
  const std::set<IndexPair> ok(allowed.pairs.begin(), allowed.pairs.end());
  for (const auto& f : r.flips)
    if (!ok.count(f)) issues.push_back("flip (" + std::to_string(f.first) + ", " + std::to_string(f.second) +
                                       ") violates the constraint mask");
  Graph pg;
  try {
    pg = perturbed_graph(r, target);
  } catch (const std::exception& e) {
    issues.push_back(e.what());
    return issues;
  }
  for (std::size_t i = 0; i < pg.n; ++i) {
    if (pg.adjacency(i, i) != 0.0) issues.push_back("non-zero diagonal");
    for (std::size_t j = 0; j < pg.n; ++j) {
      if (pg.adjacency(i, j) != pg.adjacency(j, i)) issues.push_back("asymmetric adjacency");
      if (pg.adjacency(i, j) != 0.0 && pg.adjacency(i, j) != 1.0) issues.push_back("non-discrete adjacency");
    }
  }
  if (cfg.constraint == ConstraintKind::tree_only) {
    if (pg.edge_count() + 1 != pg.n || !is_connected(pg.adjacency)) issues.push_back("result is not a tree");
    for (std::size_t i = 0; i < g.n; ++i)
      for (std::size_t j = 0; j < g.n; ++j)
        if (pg.adjacency(i, j) != g.adjacency(i, j)) issues.push_back("original tree modified");
  }
  std::sort(issues.begin(), issues.end());
  issues.erase(std::unique(issues.begin(), issues.end()), issues.end());
  return issues;
}

// ---- JSON -----------------------------------------------------------------------

std::string result_to_json(const PerturbationResult& r) {
  json flips = json::array();
  for (const auto& [i, j] : r.flips) flips.push_back({i, j});
  json toggles = json::object();
  auto t = r.toggles;
  for (const auto& name : toggle_names()) toggles[name] = toggle_ref(t, name);
  json doc{{"graph_id", r.graph_id},
           {"budget", r.budget},
           {"flips", flips},
           {"clean_metric", r.clean_metric},
           {"attacked_metric", r.attacked_metric},
           {"loss_trace", r.loss_trace},
           {"seed", r.seed},
           {"toggles", toggles},
           {"mode", to_string(r.mode)},
           {"attacked_loss", r.attacked_loss},
           {"evaluations", r.evaluations}};
  if (r.mode == AttackMode::injection) {
    json cands = json::array();
    for (const auto& c : r.candidates) cands.push_back({c.graph_id, c.node_id});
    doc["candidates"] = cands;
  }
  return doc.dump() + "\n";
}

PerturbationResult result_from_json(const std::string& text, const std::string& origin) {
  try {
    const auto doc = json::parse(text);
    PerturbationResult r;
    r.graph_id = doc.at("graph_id").get<std::size_t>();
    r.budget = doc.at("budget").get<std::size_t>();
    for (const auto& f : doc.at("flips")) r.flips.emplace_back(f.at(0).get<std::size_t>(), f.at(1).get<std::size_t>());
    r.clean_metric = doc.at("clean_metric").get<double>();
    r.attacked_metric = doc.at("attacked_metric").get<double>();
    r.loss_trace = doc.at("loss_trace").get<std::vector<double>>();
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.toggles = RelaxToggles::all(false);
    for (const auto& [name, on] : doc.at("toggles").items()) toggle_ref(r.toggles, name) = on.get<bool>();
    r.mode = mode_from_string(doc.value("mode", std::string("structure")));
    r.attacked_loss = doc.value("attacked_loss", 0.0);
    r.evaluations = doc.value("evaluations", std::size_t{0});
    if (doc.contains("candidates"))
      for (const auto& c : doc.at("candidates"))
        r.candidates.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>()});
    return r;
  } catch (const json::exception& e) {
    throw ParseError(origin + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

}  // namespace gtrelax::attack
