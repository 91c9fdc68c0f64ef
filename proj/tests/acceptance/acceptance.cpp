// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
// usage: acceptance [work_dir]   (default: ./acceptance_runs)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "../oracles.hpp"
#include "../support.hpp"
#include "gtrelax/attack.hpp"
#include "gtrelax/graph_io.hpp"
#include "gtrelax/harness.hpp"
#include "gtrelax/paths.hpp"
#include "gtrelax/spectral.hpp"

namespace fs = std::filesystem;
using namespace gtrelax;
using namespace gtrelax::testing;
namespace h = gtrelax::harness;

namespace {

// ---- pinned tolerances and protocol ----------------------------------------------
constexpr double kPrincipleTol = 1e-8;
constexpr double kGradientTol = 1e-3;
constexpr double kFdEps = 1e-5;
constexpr double kRatioLo = 3.0, kRatioHi = 5.0;
constexpr double kMinGap = 0.05;
constexpr double kProjectionTol = 1e-8;
constexpr double kMinCleanAccuracy = 55.0;
constexpr double kStructureMargin = 3.0;
constexpr double kInjectionTolerance = 1.0;
constexpr double kInjectionMargin = 3.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

// ---- 1: relaxed and unrelaxed forward agree on discrete graphs ----------------------

Outcome principle_one() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (auto kind : kAllModels) {
    for (auto task : {Task::node_classification, Task::graph_classification}) {
      const Model model(small_config(kind, task), 17);
      for (int t = 0; t < 50; ++t) {
        const std::size_t n = 2 + t % 14;
        const auto a = random_discrete(rng, n, 0.3);
        const auto x = random_features(rng, n, 4);
        ForwardContext ctx;
        ctx.relaxed = true;
        ctx.node_probs = ad::Tensor::full({n}, 1.0);
        const auto relaxed = model.forward(ad::Tensor::from_matrix(a), x, ctx).to_matrix();
        worst = std::max(worst, max_abs_diff(model.predict(a, x).data, relaxed.data));
      }
    }
  }
  return {worst <= kPrincipleTol, "max |logit diff| " + sci(worst) + " over 4 models x 2 tasks x 50 graphs"};
}

// ---- 2: attack-loss gradients against central differences ---------------------------

Outcome gradient_fidelity() {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (auto kind : kAllModels) {
    const Model node_model(small_config(kind, Task::node_classification), 5);
    const Model graph_model(small_config(kind, Task::graph_classification), 5);
    for (int t = 0; t < 20; ++t) {
      const std::size_t n = 4 + t % 4;
      const auto a = random_interior(rng, n);
      const auto x = random_features(rng, n, 4);
      if (t % 2 == 0) {
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 3);
        auto loss = [&](const ad::Tensor& z) { return attack::attack_loss(z, labels, attack::LossKind::tanh_margin); };
        worst = std::max(worst, model_gradient_error(node_model, a, x, loss, kFdEps));
      } else {
        auto loss = [&](const ad::Tensor& z) { return attack::attack_loss(z, {1}, attack::LossKind::raw_score); };
        worst = std::max(worst, model_gradient_error(graph_model, a, x, loss, kFdEps));
      }
    }
  }
  return {worst <= kGradientTol, "max relative error " + sci(worst) + " over 4 models x 20 points"};
}

// ---- 3: first-order eigenpair updates are second-order accurate -----------------------

Outcome spectral_first_order() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  double lo = 1e9, hi = 0.0;
  int trials = 0;
  while (trials < 50) {
    Matrix a(10, 10);
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = i + 1; j < 10; ++j)
        if (u(rng) < 0.4) a(i, j) = a(j, i) = 1.0;
    const auto l = laplacian_sym(a);
    const auto base = spectral::eig_sym(l);
    double gap = 1e9;
    for (std::size_t i = 0; i + 1 < 10; ++i) gap = std::min(gap, base.values[i + 1] - base.values[i]);
    if (gap < kMinGap) continue;
    Matrix dir(10, 10);
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = i; j < 10; ++j) dir(i, j) = dir(j, i) = nd(rng);
    double nrm = 0.0;
    for (double v : dir.data) nrm += v * v;
    nrm = std::sqrt(nrm);
    // Errors of eigenvalues and (sign-aligned) eigenvectors at ||dL|| = eps.
    auto errors = [&](double eps) {
      Matrix dl = dir;
      for (auto& v : dl.data) v *= eps / nrm;
      Matrix lp = l;
      for (std::size_t k = 0; k < lp.data.size(); ++k) lp.data[k] += dl.data[k];
      const auto exact = spectral::eig_sym(lp);
      const auto vals = spectral::perturb_eigenvalues(base, dl);
      const auto vecs = spectral::perturb_eigenvectors(base, dl);
      double ev = 0.0, eu = 0.0;
      for (std::size_t c = 0; c < 10; ++c) {
        ev = std::max(ev, std::abs(exact.values[c] - vals[c]));
        double dot = 0.0;
        for (std::size_t r = 0; r < 10; ++r) dot += exact.vectors(r, c) * vecs(r, c);
        const double s = dot < 0.0 ? -1.0 : 1.0;
        for (std::size_t r = 0; r < 10; ++r) eu = std::max(eu, std::abs(s * exact.vectors(r, c) - vecs(r, c)));
      }
      return std::make_pair(ev, eu);
    };
    const auto big = errors(1e-2), small = errors(5e-3);
    for (double ratio : {big.first / small.first, big.second / small.second}) {
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
    }
    ++trials;
  }
  return {lo >= kRatioLo && hi <= kRatioHi,
          "error ratios in [" + fmt(lo) + ", " + fmt(hi) + "] for eigenvalues and eigenvectors, 50 graphs"};
}

// ---- 4: oracle equivalences ----------------------------------------------------------

Outcome oracles() {
  std::mt19937_64 rng(404);
  std::normal_distribution<double> nd(0.3, 0.6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::string> failed;

  double proj = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(1 + t % 50);
    for (auto& v : x) v = nd(rng);
    const double b = 0.25 + 0.5 * (t % 13);
    proj = std::max(proj, max_abs_diff(attack::project_budget(x, b), projection_oracle(x, b)));
  }
  if (proj > kProjectionTol) failed.push_back("projection " + sci(proj));

  int rspd_bad = 0;
  for (int t = 0; t < 100; ++t) {
    const auto a = random_discrete(rng, 2 + t % 30, 0.15);
    rspd_bad += paths::all_pairs_shortest(paths::reciprocal_weights(a)).dist != paths::bfs_hops(a);
  }
  if (rspd_bad) failed.push_back(std::to_string(rspd_bad) + " rspd/BFS mismatches");

  int prob_bad = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + t % 15;
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (u(rng) < 0.35) a(i, j) = a(j, i) = u(rng) < 0.3 ? 1.0 : u(rng);
    const std::size_t iters = 1 + t % 4;
    prob_bad += attack::node_probability(a, iters) != probability_oracle(a, iters);
  }
  if (prob_bad) failed.push_back(std::to_string(prob_bad) + " node probability mismatches");

  int mst_bad = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + t % 6;
    Matrix w = random_interior(rng, n, 0.01, 1.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 2; j < n; ++j)
        if (u(rng) < 0.3) w(i, j) = w(j, i) = 0.0;
    const auto tree = attack::mst_projection(w);
    Graph g{n, tree, Matrix(n, 1), {}, {}, {}};
    const bool spanning = g.edge_count() == n - 1 && is_connected(tree);
    mst_bad += !spanning || std::abs(spanning_weight(w, tree) - brute_force_mst(w)) > 1e-12;
  }
  if (mst_bad) failed.push_back(std::to_string(mst_bad) + " non-maximal spanning trees");

  if (!failed.empty()) {
    std::string d;
    for (const auto& f : failed) d += (d.empty() ? "" : "; ") + f;
    return {false, d};
  }
  return {true, "projection max diff " + sci(proj) +
                    " (1000 cases); rspd = BFS on 100 graphs; node probability exact on 200; MST optimal on 100"};
}

// ---- shared experiment setup ------------------------------------------------------------

h::ExperimentConfig structure_config() {
  h::ExperimentConfig cfg;
  cfg.dataset.kind = h::DatasetKind::cluster;
  cfg.dataset.seed = 1;
  cfg.train.epochs = 8;
  cfg.train.lr = 3e-3;
  cfg.sweep.budgets = {0.01};
  cfg.sweep.seeds = {0, 1};
  cfg.sweep.n_graphs = 20;
  cfg.sweep.transfer = true;
  cfg.validate();
  return cfg;
}

h::ExperimentConfig injection_config() {
  h::ExperimentConfig cfg;
  cfg.dataset.kind = h::DatasetKind::tree;
  cfg.dataset.seed = 1;
  cfg.dataset.tree.tree.user_shift = 0.1;
  cfg.dataset.tree.tree.root_shift = 0.5;
  cfg.models = {ModelKind::graphormer, ModelKind::grit};
  cfg.train.epochs = 10;
  cfg.train.lr = 3e-3;
  cfg.sweep.attack.mode = attack::AttackMode::injection;
  cfg.sweep.attack.constraint = attack::ConstraintKind::tree_only;
  cfg.sweep.attack.loss = attack::LossKind::raw_score;
  cfg.sweep.budgets = {0.1};
  cfg.sweep.seeds = {0, 1};
  cfg.sweep.n_graphs = 20;
  cfg.sweep.transfer = false;
  cfg.validate();
  return cfg;
}

/// Mean over seeds of the rows matching (model, attack).
double cell(const h::ResultsTable& t, const std::string& model, const std::string& attack) {
  double s = 0.0;
  int k = 0;
  for (const auto& r : t.rows)
    if (r.model == model && r.attack == attack) {
      s += r.accuracy;
      ++k;
    }
  return k ? s / k : std::nan("");
}

double test_accuracy(const fs::path& out, ModelKind kind) {
  const auto ds = load_dataset(out / "dataset");
  return h::evaluate(load_checkpoint(out / "checkpoints" / (to_string(kind) + ".json")), ds, ds.split.test);
}

struct Runs {
  fs::path work;
  fs::path structure, structure_rerun, injection, injection_off;
  h::ResultsTable structure_table, rerun_table, injection_table, injection_off_table;
  std::ostringstream log;
};

void run_structure(Runs& r, const fs::path& out, h::ResultsTable& table) {
  const auto cfg = structure_config();
  fs::remove_all(out);
  h::cmd_generate(cfg, out, {}, r.log);
  h::cmd_train(cfg, out, {}, r.log);
  table = h::cmd_attack(cfg, out, {}, r.log);
}

// ---- 5: structure attacks beat the evaluation-matched random baseline -----------------

Outcome structure_efficacy(Runs& r) {
  run_structure(r, r.structure, r.structure_table);
  bool ok = true;
  std::string d;
  for (auto kind : kAllModels) {
    const auto name = to_string(kind);
    const double clean = test_accuracy(r.structure, kind);
    const double adaptive = cell(r.structure_table, name, "adaptive");
    const double random = cell(r.structure_table, name, "random");
    const bool pass = clean >= kMinCleanAccuracy && adaptive <= random - kStructureMargin;
    ok = ok && pass;
    d += (d.empty() ? "" : "; ") + name + " clean " + fmt(clean) + " adaptive " + fmt(adaptive) + " random " +
         fmt(random);
  }
  return {ok, d};
}

// ---- 6: injection with the node-probability bias ---------------------------------------

Outcome injection_efficacy(Runs& r) {
  const auto cfg = injection_config();
  fs::remove_all(r.injection);
  fs::remove_all(r.injection_off);
  h::cmd_generate(cfg, r.injection, {}, r.log);
  h::cmd_train(cfg, r.injection, {}, r.log);
  r.injection_table = h::cmd_attack(cfg, r.injection, {}, r.log);

  fs::create_directories(r.injection_off);
  fs::copy(r.injection / "dataset", r.injection_off / "dataset", fs::copy_options::recursive);
  fs::copy(r.injection / "checkpoints", r.injection_off / "checkpoints", fs::copy_options::recursive);
  h::Overrides off;
  RelaxToggles t;
  t.node_prob_bias = false;
  off.toggles = t;
  auto cfg_off = cfg;
  cfg_off.sweep.random_baseline = false;
  r.injection_off_table = h::cmd_attack(cfg_off, r.injection_off, off, r.log);

  bool ok = true;
  std::string d;
  for (auto kind : {ModelKind::graphormer, ModelKind::grit}) {
    const auto name = to_string(kind);
    const double on = cell(r.injection_table, name, "adaptive");
    const double no = cell(r.injection_off_table, name, "adaptive");
    const double random = cell(r.injection_table, name, "random");
    const double clean = test_accuracy(r.injection, kind);
    ok = ok && on <= no + kInjectionTolerance && on <= random - kInjectionMargin;
    d += (d.empty() ? "" : "; ") + name + " clean " + fmt(clean) + " bias-on " + fmt(on) + " bias-off " + fmt(no) +
         " random " + fmt(random);
  }
  return {ok, d};
}

// ---- 7: every emitted perturbation is valid ------------------------------------------------

/// Parses "<kind>_b<budget>_s<seed>_g<graph>".
bool parse_stem(const std::string& stem, double& budget, std::uint64_t& seed) {
  const auto b = stem.rfind("_b"), s = stem.rfind("_s"), g = stem.rfind("_g");
  if (b == std::string::npos || s == std::string::npos || g == std::string::npos || !(b < s && s < g)) return false;
  budget = std::stod(stem.substr(b + 2, s - b - 2));
  seed = std::stoull(stem.substr(s + 2, g - s - 2));
  return true;
}

Outcome constraint_soundness(const Runs& r) {
  std::size_t files = 0, bad = 0;
  std::string first;
  const std::vector<std::pair<fs::path, h::ExperimentConfig>> runs = {{r.structure, structure_config()},
                                                                      {r.structure_rerun, structure_config()},
                                                                      {r.injection, injection_config()},
                                                                      {r.injection_off, injection_config()}};
  for (const auto& [dir, cfg] : runs) {
    if (!fs::exists(dir / "perturbations")) continue;
    const auto ds = load_dataset(dir / "dataset");
    for (const auto& e : fs::recursive_directory_iterator(dir / "perturbations")) {
      if (e.path().extension() != ".json") continue;
      ++files;
      const auto res = attack::result_from_json(read_file(e.path()), e.path().string());
      auto ac = cfg.sweep.attack;
      std::uint64_t seed = 0;
      std::vector<std::string> issues;
      if (!parse_stem(e.path().stem().string(), ac.budget_fraction, seed) || seed != res.seed) {
        issues.push_back("file name does not match its contents");
      }
      std::optional<attack::CandidateSet> cs;
      if (res.mode == attack::AttackMode::injection) {
        attack::CandidateOptions opts;
        opts.max_candidates = cfg.sweep.max_candidates;
        cs = attack::build_candidates(ds.graphs, res.graph_id, seed, opts);
        if (cs->provenance != res.candidates) issues.push_back("candidate provenance differs");
      }
      const attack::AttackTarget target{&ds.graphs.at(res.graph_id), res.graph_id, cs ? &*cs : nullptr};
      const auto more = attack::check_perturbation(res, target, ac);
      issues.insert(issues.end(), more.begin(), more.end());
      if (!issues.empty()) {
        ++bad;
        if (first.empty()) first = e.path().string() + ": " + issues.front();
      }
    }
  }
  if (files == 0) return {false, "no perturbation files found"};
  return {bad == 0, std::to_string(files) + " perturbation files scanned, " + std::to_string(bad) + " invalid" +
                        (first.empty() ? "" : " (first: " + first + ")")};
}

// ---- 8: the structure sweep is reproducible ----------------------------------------------

Outcome determinism(Runs& r) {
  run_structure(r, r.structure_rerun, r.rerun_table);
  std::size_t differing_files = 0, files = 0;
  for (const auto& e : fs::recursive_directory_iterator(r.structure / "perturbations")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = r.structure_rerun / fs::relative(e.path(), r.structure);
    if (!fs::exists(other) || read_file(other) != read_file(e.path())) ++differing_files;
  }
  const bool same_table = r.rerun_table == r.structure_table;
  bool same_checkpoints = true;
  for (auto kind : kAllModels) {
    const auto p = fs::path("checkpoints") / (to_string(kind) + ".json");
    same_checkpoints = same_checkpoints && read_file(r.structure / p) == read_file(r.structure_rerun / p);
  }
  return {same_table && differing_files == 0 && same_checkpoints,
          std::to_string(r.structure_table.rows.size()) + " table cells " + (same_table ? "identical" : "DIFFER") +
              ", " + std::to_string(files - differing_files) + "/" + std::to_string(files) +
              " perturbation files identical, checkpoints " + (same_checkpoints ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  Runs runs;
  runs.work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs");
  runs.structure = runs.work / "structure";
  runs.structure_rerun = runs.work / "structure_rerun";
  runs.injection = runs.work / "injection";
  runs.injection_off = runs.work / "injection_no_bias";
  fs::create_directories(runs.work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 relaxed/unrelaxed equivalence on discrete graphs", principle_one},
      {"2 gradient fidelity vs central differences", gradient_fidelity},
      {"3 spectral first-order accuracy", spectral_first_order},
      {"4 oracle equivalences", oracles},
      {"5 structure attack beats random at 1%", [&] { return structure_efficacy(runs); }},
      {"6 injection with node-probability bias", [&] { return injection_efficacy(runs); }},
      {"7 constraint soundness of emitted perturbations", [&] { return constraint_soundness(runs); }},
      {"8 determinism of the structure sweep", [&] { return determinism(runs); }},
  };

  // Criterion 7 scans the files written by 5, 6 and 8, so it runs last;
  // lines are still printed in criterion order.
  const std::size_t order[] = {0, 1, 2, 3, 4, 5, 7, 6};
  std::vector<std::pair<Outcome, double>> outcomes(criteria.size());
  for (std::size_t k : order) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "finished criterion " << criteria[k].first << " in " << fmt(secs, 1) << "s" << std::endl;
    outcomes[k] = {o, secs};
  }
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const auto& [o, secs] = outcomes[k];
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << criteria[k].first << ": " << o.detail << " ["
              << fmt(secs, 1) << "s]" << std::endl;
  }
  std::cout << "--- harness log ---\n" << runs.log.str();
  return failures == 0 ? 0 : 1;
}
