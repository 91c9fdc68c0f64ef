// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "gtrelax/attack.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace gtrelax;
using namespace gtrelax::attack;
using namespace gtrelax::testing;

namespace {

Graph small_cluster_graph(std::uint64_t seed) {
  SbmConfig cfg;
  cfg.min_cluster_size = 5;
  cfg.max_cluster_size = 6;
  cfg.p_intra = 0.5;
  cfg.p_inter = 0.08;
  return generate_sbm_cluster(seed, cfg);
}

}  // namespace

TEST_CASE("attack_loss") {
  const auto confident = ad::Tensor::constant({2, 3}, {20, 0, 0, 0, 0, 20});
  CHECK(attack_loss(confident, {0, 2}, LossKind::tanh_margin).item() == doctest::Approx(1.0));
  const auto tied = ad::Tensor::constant({1, 3}, {1.0, 1.0, -2.0});
  CHECK(attack_loss(tied, {0}, LossKind::tanh_margin).item() == 0.0);
  const auto wrong = ad::Tensor::constant({1, 2}, {0.0, 0.5});
  CHECK(attack_loss(wrong, {0}, LossKind::tanh_margin).item() == doctest::Approx(std::tanh(-0.5)));

  const auto score = ad::Tensor::constant({1, 1}, {-3.0});
  CHECK(attack_loss(score, {0}, LossKind::raw_score).item() == 3.0);
  CHECK(attack_loss(score, {1}, LossKind::raw_score).item() == -3.0);
  // Label 0: descending on the loss pushes the score up.
  ad::Tape tape;
  auto s = tape.variable({1, 1}, {-3.0});
  CHECK(tape.backward(attack_loss(s, {0}, LossKind::raw_score))[s][0] == -1.0);

  CHECK_THROWS_AS(attack_loss(confident, {0, 2}, LossKind::raw_score), std::invalid_argument);
  CHECK_THROWS_AS(attack_loss(score, {0}, LossKind::tanh_margin), std::invalid_argument);
}

TEST_CASE("accuracy") {
  CHECK(accuracy(Matrix(2, 2, {1, 0, 0, 1}), {0, 0}) == 50.0);
  CHECK(accuracy(Matrix(1, 1, {0.3}), {1}) == 100.0);
  CHECK(accuracy(Matrix(1, 1, {-0.3}), {1}) == 0.0);
}

TEST_CASE("project_budget examples") {
  const auto a = project_budget({0.8, 0.8}, 1.0);
  CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-8));
  CHECK(a[1] == doctest::Approx(0.5).epsilon(1e-8));
  CHECK(project_budget({0.2, 0.1}, 1.0) == std::vector<double>{0.2, 0.1});
  CHECK(project_budget({2.0, -1.0}, 1.0) == std::vector<double>{1.0, 0.0});
  CHECK(project_budget({}, 1.0).empty());
}

TEST_CASE("project_budget matches the sort-based oracle") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.3, 0.6);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(1 + t % 40);
    for (auto& v : x) v = nd(rng);
    const double b = 0.5 + (t % 7);
    const auto got = project_budget(x, b);
    worst = std::max(worst, max_abs_diff(got, projection_oracle(x, b)));
    double s = 0.0;
    for (double v : got) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      s += v;
    }
    CHECK(s <= b + 1e-8);
  }
  CHECK(worst <= 1e-8);
}

TEST_CASE("constraint_mask") {
  const auto g = small_cluster_graph(3);
  const std::size_t n = g.n;
  CHECK(constraint_mask(g, ConstraintKind::none).pairs.size() == n * (n - 1) / 2);
  const auto prot = constraint_mask(g, ConstraintKind::protect_labeled);
  // Only pairs between two unlabeled nodes remain.
  CHECK(prot.pairs.size() == (n - 6) * (n - 7) / 2);
  for (auto [i, j] : prot.pairs) {
    CHECK_FALSE((*g.labeled_mask)[i]);
    CHECK_FALSE((*g.labeled_mask)[j]);
  }
  Graph unlabeled = g;
  unlabeled.labeled_mask.reset();
  CHECK_THROWS_AS(constraint_mask(unlabeled, ConstraintKind::protect_labeled), std::invalid_argument);
}

TEST_CASE("block sampling and resampling") {
  AllowedPairs allowed;
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = i + 1; j < 30; j += 2) allowed.pairs.emplace_back(i, j);
  const std::set<IndexPair> ok(allowed.pairs.begin(), allowed.pairs.end());
  Rng rng(4);
  auto block = initial_block(allowed, 40, rng);
  CHECK(block.index.size() == 40);
  CHECK(std::set<IndexPair>(block.index.begin(), block.index.end()).size() == 40);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : block.values) v = u(rng);

  const auto same = resample_block(block, allowed, 1.0, rng);
  CHECK(same.index == block.index);
  CHECK(same.values == block.values);

  const auto fresh = resample_block(block, allowed, 0.0, rng);
  CHECK(fresh.index.size() == 40);
  for (std::size_t k = 0; k < 40; ++k) {
    CHECK(fresh.values[k] == 0.0);
    CHECK(std::find(block.index.begin(), block.index.end(), fresh.index[k]) == block.index.end());
  }

  const auto half = resample_block(block, allowed, 0.5, rng);
  std::vector<double> sorted = block.values;
  std::sort(sorted.rbegin(), sorted.rend());
  std::size_t kept = 0;
  for (std::size_t k = 0; k < 40; ++k)
    if (half.values[k] > 0.0) {
      ++kept;
      CHECK(half.values[k] >= sorted[19]);
    }
  CHECK(kept == 20);

  for (int t = 0; t < 1000; ++t) {
    for (auto& v : block.values) v = u(rng);
    block = resample_block(block, allowed, 0.5, rng);
    CHECK(block.index.size() == 40);
    for (const auto& p : block.index) CHECK(ok.count(p) == 1);
  }
}

TEST_CASE("prbcd_step") {
  SUBCASE("flat landscape leaves values unchanged") {
    BlockState b{{{0, 1}, {0, 2}}, {0.3, 0.2}};
    prbcd_step(b, [](const ad::Tensor&) { return ad::Tensor::scalar(1.0); }, 0.5, 2.0);
    CHECK(b.values == std::vector<double>{0.3, 0.2});
  }
  SUBCASE("single edge climbs until the box binds") {
    BlockState b{{{0, 1}}, {0.0}};
    std::vector<double> seen;
    for (int s = 0; s < 6; ++s) {
      prbcd_step(b, [](const ad::Tensor& v) { return ad::neg(ad::sum(v)); }, 0.3, 5.0);
      seen.push_back(b.values[0]);
    }
    CHECK(seen[0] == doctest::Approx(0.3));
    CHECK(seen[1] == doctest::Approx(0.6));
    CHECK(seen.back() == 1.0);
  }
  SUBCASE("budget binds before the box") {
    BlockState b{{{0, 1}, {1, 2}}, {0.0, 0.0}};
    for (int s = 0; s < 10; ++s) prbcd_step(b, [](const ad::Tensor& v) { return ad::neg(ad::sum(v)); }, 0.3, 1.0);
    CHECK(b.values[0] + b.values[1] == doctest::Approx(1.0).epsilon(1e-8));
  }
  SUBCASE("non-finite gradient is reported") {
    BlockState b{{{0, 1}}, {0.0}};
    CHECK_THROWS_AS(prbcd_step(b, [](const ad::Tensor& v) { return ad::sum(ad::log(v)); }, 0.1, 1.0),
                    std::exception);
  }
}

TEST_CASE("relaxed loss trends down over steps on a fixed block") {
  const auto g = small_cluster_graph(5);
  ModelConfig cfg = small_config(ModelKind::gcn, Task::node_classification, g.feature_dim());
  cfg.num_classes = 6;
  const Model model(cfg, 2);
  const auto labels = targets_of(g);
  auto allowed = constraint_mask(g, ConstraintKind::none);
  BlockState block{allowed.pairs, std::vector<double>(allowed.pairs.size(), 0.0)};
  auto loss = [&](const ad::Tensor& v) {
    return attack_loss(model.forward(apply_flips(g.adjacency, block.index, v), g.features), labels,
                       LossKind::tanh_margin);
  };
  std::vector<double> trace;
  for (int s = 0; s < 30; ++s) trace.push_back(prbcd_step(block, loss, 5.0, 10.0));
  CHECK(trace.back() <= trace.front());
  std::size_t rises = 0;
  for (std::size_t k = 1; k < trace.size(); ++k) rises += trace[k] > trace[k - 1] + 1e-9;
  CHECK(rises <= trace.size() / 4);
}

TEST_CASE("sample_discrete") {
  Rng rng(2);
  SUBCASE("binary values are reproduced") {
    BlockState b{{{0, 1}, {0, 2}, {1, 2}}, {1.0, 0.0, 1.0}};
    std::size_t calls = 0;
    const auto c = sample_discrete(b, 2, 20, 50, [&](const auto&) { ++calls; return 0.0; }, rng);
    CHECK(c.flips == std::vector<IndexPair>{{0, 1}, {1, 2}});
    CHECK(calls == 1);  // every draw is the same set
    CHECK(c.evaluations == 21);
  }
  SUBCASE("zero values give the empty perturbation") {
    BlockState b{{{0, 1}, {0, 2}}, {0.0, 0.0}};
    CHECK(sample_discrete(b, 2, 5, 50, [](const auto&) { return 0.0; }, rng).flips.empty());
  }
  SUBCASE("never over budget, lowest loss wins") {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
      BlockState b;
      for (std::size_t k = 0; k < 12; ++k) {
        b.index.emplace_back(k, k + 1);
        b.values.push_back(u(rng));
      }
      const std::size_t budget = 1 + t % 5;
      double best_seen = 1e9;
      const auto c = sample_discrete(
          b, budget, 10, 3,
          [&](const std::vector<IndexPair>& f) {
            const double l = -static_cast<double>(f.size()) + 0.01 * static_cast<double>(f.empty() ? 0 : f[0].first);
            best_seen = std::min(best_seen, l);
            return l;
          },
          rng);
      CHECK(c.flips.size() <= budget);
      CHECK(c.loss == best_seen);
    }
  }
}

TEST_CASE("nia_augment and regions") {
  Graph g;
  g.n = 5;
  g.adjacency = Matrix(5, 5);
  for (std::size_t i = 0; i + 1 < 5; ++i) g.adjacency(i, i + 1) = g.adjacency(i + 1, i) = 1.0;
  g.features = Matrix(5, 3, 0.5);
  g.graph_label = 1;
  CandidateSet cs;
  cs.features = Matrix(7, 3, 2.0);
  for (std::size_t k = 0; k < 7; ++k) cs.provenance.push_back({1, k});
  const auto aug = nia_augment(g, cs);
  CHECK(aug.graph.n == 12);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(aug.graph.adjacency(i, j) == g.adjacency(i, j));
  for (std::size_t i = 5; i < 12; ++i)
    for (std::size_t j = 0; j < 12; ++j) CHECK(aug.graph.adjacency(i, j) == 0.0);
  CHECK(aug.graph.features(6, 0) == 2.0);
  CHECK(aug.region(1, 3) == Region::b);
  CHECK(aug.region(1, 7) == Region::e);
  CHECK(aug.region(8, 7) == Region::f);

  AttackConfig cfg;
  cfg.mode = AttackMode::injection;
  cfg.constraint = ConstraintKind::tree_only;
  CHECK(injection_mask(aug, cfg).pairs.size() == 35);
  cfg.sample_f_region = true;
  CHECK(injection_mask(aug, cfg).pairs.size() == 35 + 21);
  cfg.sample_b_region = true;
  CHECK_THROWS_AS(injection_mask(aug, cfg), std::invalid_argument);

  const auto none = nia_augment(g, CandidateSet{Matrix(0, 3), {}});
  CHECK(none.graph.adjacency == g.adjacency);
  CHECK(none.graph.features == g.features);
}

TEST_CASE("prune_disconnected") {
  Matrix a(6, 6);
  a(0, 1) = a(1, 0) = 1.0;
  a(1, 2) = a(2, 1) = 1.0;
  CHECK(prune_disconnected(a, 3) == std::vector<std::size_t>{0, 1, 2});
  a(2, 4) = a(4, 2) = 0.3;
  CHECK(prune_disconnected(a, 3) == std::vector<std::size_t>{0, 1, 2, 4});
  a(3, 5) = a(5, 3) = 1.0;  // candidates joined only to each other
  CHECK(prune_disconnected(a, 3) == std::vector<std::size_t>{0, 1, 2, 4});
  Matrix split(3, 3);
  split(0, 1) = split(1, 0) = 1.0;
  CHECK_THROWS_AS(prune_disconnected(split, 3), std::invalid_argument);
}

TEST_CASE("node_probability examples") {
  Matrix tri(3, 3, 1.0);
  for (std::size_t i = 0; i < 3; ++i) tri(i, i) = 0.0;
  for (std::size_t t = 1; t <= 4; ++t) CHECK(node_probability(tri, t) == std::vector<double>(3, 1.0));

  Matrix one(2, 2);
  one(0, 1) = one(1, 0) = 0.5;
  // Node 0 is the original graph here only through the recurrence start.
  CHECK(node_probability(one, 1)[1] == 0.5);

  Matrix chain(4, 4);
  chain(0, 1) = chain(1, 0) = 1.0;
  chain(1, 2) = chain(2, 1) = 0.5;
  chain(2, 3) = chain(3, 2) = 0.8;
  const auto p = node_probability(chain, 2);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == 1.0);
  CHECK(p[2] == doctest::Approx(0.82).epsilon(1e-15));
  CHECK(p[3] == doctest::Approx(0.72).epsilon(1e-15));
}

TEST_CASE("node_probability agrees with the oracle, its tensor form, and is monotone") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + t % 12;
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (u(rng) < 0.4) a(i, j) = a(j, i) = u(rng) < 0.3 ? 1.0 : u(rng);
    const std::size_t iters = 1 + t % 4;
    const auto p = node_probability(a, iters);
    CHECK(p == probability_oracle(a, iters));
    const auto pt = node_probability(ad::Tensor::from_matrix(a), iters);
    CHECK(std::vector<double>(pt.values().begin(), pt.values().end()) == p);
    for (double v : p) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    const std::size_t i = t % n, j = (t * 5 + 1) % n;
    if (i == j) continue;
    Matrix b = a;
    b(i, j) = b(j, i) = std::min(1.0, a(i, j) + u(rng));
    const auto q = node_probability(b, iters);
    for (std::size_t k = 0; k < n; ++k) CHECK(q[k] >= p[k] - 1e-15);
  }
}

TEST_CASE("original nodes of a connected discrete graph keep probability 1") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n0 = 2 + t % 10, extra = 1 + t % 5, n = n0 + extra;
    Matrix a(n, n);
    for (std::size_t i = 1; i < n0; ++i) {
      const std::size_t parent = rng() % i;
      a(i, parent) = a(parent, i) = 1.0;
    }
    for (std::size_t c = n0; c < n; ++c)
      for (std::size_t j = 0; j < c; ++j)
        if (u(rng) < 0.4) a(c, j) = a(j, c) = u(rng);
    const auto p = node_probability(a, 1 + t % 4);
    for (std::size_t i = 0; i < n0; ++i) CHECK(p[i] == 1.0);
  }
}

TEST_CASE("mst_projection") {
  Matrix tri(3, 3);
  tri(0, 1) = tri(1, 0) = 0.9;
  tri(1, 2) = tri(2, 1) = 0.8;
  tri(0, 2) = tri(2, 0) = 0.1;
  const auto t = mst_projection(tri);
  CHECK(t(0, 1) == 1.0);
  CHECK(t(1, 2) == 1.0);
  CHECK(t(0, 2) == 0.0);

  Matrix path(4, 4);
  for (std::size_t i = 0; i + 1 < 4; ++i) path(i, i + 1) = path(i + 1, i) = 1.0;
  CHECK(mst_projection(path) == path);
  Matrix split(4, 4);
  split(0, 1) = split(1, 0) = 1.0;
  CHECK_THROWS_AS(mst_projection(split), std::invalid_argument);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 3 + trial % 5;
    Matrix w = random_interior(rng, n, 0.01, 1.0);
    // Thin the support but keep it connected through a spanning path.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 2; j < n; ++j)
        if (rng() % 3 == 0) w(i, j) = w(j, i) = 0.0;
    const auto tree = mst_projection(w);
    Graph g{n, tree, Matrix(n, 1), {}, {}, {}};
    CHECK(g.edge_count() == n - 1);
    CHECK(is_connected(tree));
    CHECK(spanning_weight(w, tree) == doctest::Approx(brute_force_mst(w)).epsilon(1e-12));
  }
}

TEST_CASE("structure attack runs") {
  const auto g = small_cluster_graph(11);
  ModelConfig mc = small_config(ModelKind::gcn, Task::node_classification, g.feature_dim());
  mc.num_classes = 6;
  AttackConfig cfg;
  cfg.steps = 20;
  cfg.n_discrete_samples = 5;
  cfg.budget_fraction = 0.05;
  cfg.seed = 3;
  const AttackTarget target{&g, 7, nullptr};
  for (auto kind : kAllModels) {
    CAPTURE(to_string(kind));
    mc.kind = kind;
    const Model model(mc, 1);
    const auto r = run_attack(model, target, cfg);
    CHECK(r.budget == budget_from_fraction(0.05, g.edge_count()));
    CHECK(r.flips.size() <= r.budget);
    CHECK(r.loss_trace.size() == 20);
    CHECK(check_perturbation(r, target, cfg).empty());
    CHECK(r.clean_metric == accuracy(model.predict(g.adjacency, g.features), *g.node_labels));
    CHECK(transfer_attack(r, model, target) == r.attacked_metric);
    CHECK(run_attack(model, target, cfg) == r);
    CHECK(result_from_json(result_to_json(r)) == r);

    const auto rnd = random_baseline(model, target, cfg);
    CHECK(rnd.evaluations == r.evaluations);
    CHECK(rnd.flips.size() == r.budget);
    CHECK(check_perturbation(rnd, target, cfg).empty());

    PerturbationResult empty = r;
    empty.flips.clear();
    CHECK(transfer_attack(empty, model, target) == r.clean_metric);
  }
  auto zero = cfg;
  zero.budget_fraction = 0.0;
  mc.kind = ModelKind::gcn;
  const Model gcn(mc, 1);
  const auto r0 = run_attack(gcn, target, zero);
  CHECK(r0.flips.empty());
  CHECK(r0.attacked_metric == r0.clean_metric);
  CHECK(random_baseline(gcn, target, zero).attacked_metric == r0.clean_metric);

  auto prot = cfg;
  prot.constraint = ConstraintKind::protect_labeled;
  const auto rp = run_attack(gcn, target, prot);
  for (auto [i, j] : rp.flips) {
    CHECK_FALSE((*g.labeled_mask)[i]);
    CHECK_FALSE((*g.labeled_mask)[j]);
  }
}

TEST_CASE("injection attack runs") {
  TreeDatasetConfig tcfg;
  tcfg.n_graphs = 12;
  const auto ds = generate_tree_dataset(5, tcfg);
  const std::size_t gid = 3;
  const auto& g = ds.graphs[gid];
  CandidateOptions copts;
  copts.max_candidates = 15;
  const auto cs = build_candidates(ds.graphs, gid, 9, copts);
  CHECK(cs.size() == 15);
  for (const auto& c : cs.provenance) {
    CHECK(c.graph_id != gid);
    CHECK(ds.graphs[c.graph_id].features(c.node_id, 0) != 1.0);
  }
  CHECK(build_candidates(ds.graphs, gid, 9, copts).provenance == cs.provenance);

  AttackConfig cfg;
  cfg.mode = AttackMode::injection;
  cfg.constraint = ConstraintKind::tree_only;
  cfg.loss = LossKind::raw_score;
  cfg.budget_fraction = 0.2;
  cfg.steps = 12;
  cfg.n_discrete_samples = 4;
  cfg.block_size = 40;
  cfg.resample_every = 5;
  const AttackTarget target{&g, gid, &cs};
  for (auto kind : kAllModels) {
    CAPTURE(to_string(kind));
    const Model model(small_config(kind, Task::graph_classification, g.feature_dim()), 4);
    // Zero flips reproduce the clean prediction exactly.
    auto zero = cfg;
    zero.budget_fraction = 0.0;
    const auto r0 = run_attack(model, target, zero);
    CHECK(r0.attacked_metric == accuracy(model.predict(g.adjacency, g.features), {*g.graph_label}));
    CHECK(perturbed_graph(r0, target).adjacency == g.adjacency);

    for (bool bias : {true, false}) {
      cfg.toggles.node_prob_bias = bias;
      const auto r = run_attack(model, target, cfg);
      CHECK(check_perturbation(r, target, cfg).empty());
      CHECK(r.flips.size() <= r.budget);
      for (auto [i, j] : r.flips) {
        CHECK(i < g.n);
        CHECK(j >= g.n);
      }
      const auto pg = perturbed_graph(r, target);
      CHECK(pg.n == g.n + r.flips.size());
      CHECK(transfer_attack(r, model, target) == r.attacked_metric);
      CHECK(result_from_json(result_to_json(r)) == r);
      const auto rnd = random_baseline(model, target, cfg);
      CHECK(check_perturbation(rnd, target, cfg).empty());
    }
  }
}

TEST_CASE("check_perturbation flags violations") {
  const auto g = small_cluster_graph(2);
  AttackConfig cfg;
  cfg.budget_fraction = 0.01;
  const AttackTarget target{&g, 0, nullptr};
  PerturbationResult r;
  r.budget = budget_for(cfg, g.edge_count());
  for (std::size_t k = 0; k <= r.budget; ++k) r.flips.emplace_back(0, k + 1);
  CHECK_FALSE(check_perturbation(r, target, cfg).empty());
  r.flips = {{3, 1}};
  CHECK_FALSE(check_perturbation(r, target, cfg).empty());
  r.flips = {{1, 3}};
  CHECK(check_perturbation(r, target, cfg).empty());
  cfg.constraint = ConstraintKind::protect_labeled;
  std::size_t labeled = 0;
  while (!(*g.labeled_mask)[labeled]) ++labeled;
  r.flips = {{std::min(labeled, labeled == 0 ? 1 : labeled - 1), std::max(labeled, labeled == 0 ? 1 : labeled - 1)}};
  CHECK_FALSE(check_perturbation(r, target, cfg).empty());
}
