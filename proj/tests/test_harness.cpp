// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <unistd.h>

#include "doctest.h"
#include "gtrelax/graph_io.hpp"
#include "gtrelax/harness.hpp"
#include "json.hpp"

using namespace gtrelax;
using namespace gtrelax::harness;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("gtrelax_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

ExperimentConfig small_cluster() {
  ExperimentConfig c;
  c.dataset.cluster.n_train = 40;
  c.dataset.cluster.n_val = 10;
  c.dataset.cluster.n_test = 4;
  c.dataset.cluster.sbm.min_cluster_size = 6;
  c.dataset.cluster.sbm.max_cluster_size = 9;
  c.dataset.cluster.sbm.p_intra = 0.6;
  c.dataset.cluster.sbm.p_inter = 0.05;
  c.models = {ModelKind::gcn, ModelKind::graphormer};
  c.model.hidden = 16;
  c.train.epochs = 6;
  c.train.lr = 1e-2;
  c.sweep.attack.steps = 6;
  c.sweep.attack.n_discrete_samples = 3;
  c.sweep.budgets = {0.0, 0.05};
  c.sweep.seeds = {0, 1};
  c.sweep.n_graphs = 3;
  c.validate();
  return c;
}

ExperimentConfig small_tree() {
  ExperimentConfig c;
  c.dataset.kind = DatasetKind::tree;
  c.dataset.tree.n_graphs = 24;
  c.dataset.tree.tree.min_nodes = 6;
  c.dataset.tree.tree.max_nodes = 10;
  c.models = {ModelKind::graphormer};
  c.model.hidden = 8;
  c.train.epochs = 1;
  c.sweep.attack.mode = attack::AttackMode::injection;
  c.sweep.attack.constraint = attack::ConstraintKind::tree_only;
  c.sweep.attack.loss = attack::LossKind::raw_score;
  c.sweep.attack.steps = 3;
  c.sweep.attack.n_discrete_samples = 2;
  c.sweep.budgets = {0.2};
  c.sweep.seeds = {0};
  c.sweep.n_graphs = 2;
  c.sweep.max_candidates = 6;
  c.validate();
  return c;
}

}  // namespace

TEST_CASE("config parsing and validation") {
  const auto d = config_from_json("{}");
  CHECK(d.sweep.seeds == std::vector<std::uint64_t>{0, 1});
  CHECK(d.models.size() == 4);
  CHECK(d.dataset.cluster.n_train == 600);

  const auto c = config_from_json(R"({"models": ["san"], "attack": {"budgets": [0.01, 0.05], "toggles": "none",
      "steps": 7}, "train": {"epochs": 2}, "model": {"pooling": "sum"}})");
  CHECK(c.models == std::vector<ModelKind>{ModelKind::san});
  CHECK(c.sweep.budgets == std::vector<double>{0.01, 0.05});
  CHECK(c.sweep.attack.toggles == RelaxToggles::all(false));
  CHECK(c.sweep.attack.steps == 7);
  CHECK(c.model.pooling == PoolMode::sum);
  CHECK(config_to_json(config_from_json(config_to_json(c))) == config_to_json(c));

  CHECK_THROWS_AS(config_from_json(R"({"attack": {"budgets": [0.05, 0.01]}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"attack": {"seeds": []}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"attack": {"stepz": 3}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"train": {"epochs": -1}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"models": ["gat"]})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"attack": {"toggles": "deg"}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"attack": {"mode": "injection"}, "dataset": {"kind": "cluster"}})"),
                  ConfigError);
  // Injection without a dataset section defaults to trees.
  CHECK(config_from_json(R"({"attack": {"mode": "injection", "constraint": "tree_only"}})").dataset.kind ==
        DatasetKind::tree);

  auto other = c;
  other.sweep.attack.steps = 8;
  CHECK(config_hash(c) == config_hash(config_from_json(config_to_json(c))));
  CHECK(config_hash(c) != config_hash(other));
  CHECK(config_hash(c).size() == 16);
}

TEST_CASE("generate") {
  TempDir tmp("generate");
  SUBCASE("cluster protocol split sizes") {
    DatasetSpec spec;
    spec.cluster.sbm.min_cluster_size = 4;
    spec.cluster.sbm.max_cluster_size = 5;
    const auto ds = generate_dataset(spec);
    CHECK(ds.split.train.size() == 600);
    CHECK(ds.split.val.size() == 60);
    CHECK(ds.split.test.size() == 60);
  }
  SUBCASE("tree labels are balanced") {
    DatasetSpec spec;
    spec.kind = DatasetKind::tree;
    const auto ds = generate_dataset(spec);
    CHECK(ds.graphs.size() == 300);
    int ones = 0;
    for (const auto& g : ds.graphs) ones += *g.graph_label;
    CHECK(ones == 150);
  }
  SUBCASE("same seed, same files; another seed differs") {
    const auto cfg = small_cluster();
    std::ostringstream log;
    cmd_generate(cfg, tmp.path / "a", {}, log);
    cmd_generate(cfg, tmp.path / "b", {}, log);
    Overrides o;
    o.seed = 9;
    cmd_generate(cfg, tmp.path / "c", o, log);
    const auto a = read_tree(tmp.path / "a" / "dataset");
    CHECK(a.size() == 55);
    CHECK(a == read_tree(tmp.path / "b" / "dataset"));
    CHECK(a != read_tree(tmp.path / "c" / "dataset"));
  }
}

TEST_CASE("training") {
  const auto cfg = small_cluster();
  const auto ds = generate_dataset(cfg.dataset);
  const auto mc = cfg.model_config(ModelKind::gcn, ds);

  SUBCASE("GCN clearly beats chance on the cluster data") {
    const auto r = train_model(ds, mc, cfg.train);
    CHECK(r.val_accuracy > 100.0 / 6.0 + 20.0);
    CHECK(r.log.size() == cfg.train.epochs);
    CHECK(r.val_accuracy == doctest::Approx(evaluate(r.model, ds, ds.split.val)).epsilon(1e-12));
    CHECK(r.test_accuracy == doctest::Approx(evaluate(r.model, ds, ds.split.test)).epsilon(1e-12));
    for (const auto& e : r.log) CHECK(e.val_accuracy <= r.val_accuracy);
  }
  SUBCASE("zero epochs keep the initialization") {
    auto tc = cfg.train;
    tc.epochs = 0;
    const auto r = train_model(ds, mc, tc);
    CHECK(r.model == Model(mc, tc.seed));
    CHECK(r.best_epoch == 0);
  }
  SUBCASE("fixed seed gives identical checkpoint bytes") {
    auto tc = cfg.train;
    tc.epochs = 2;
    CHECK(checkpoint_to_json(train_model(ds, mc, tc).model) == checkpoint_to_json(train_model(ds, mc, tc).model));
  }
  SUBCASE("a non-finite loss is reported") {
    auto bad = ds;
    bad.graphs[bad.split.train[0]].features(0, 0) = std::nan("");
    auto tc = cfg.train;
    tc.epochs = 1;
    CHECK_THROWS_AS(train_model(bad, mc, tc), TrainingDiverged);
  }
}

TEST_CASE("attack sweep, ablation and report") {
  TempDir tmp("sweep");
  const auto cfg = small_cluster();
  const auto out = tmp.path;
  std::ostringstream log;

  CHECK_THROWS_AS(cmd_attack(cfg, out, {}, log), std::runtime_error);  // nothing generated yet
  cmd_generate(cfg, out, {}, log);
  cmd_train(cfg, out, {}, log);
  CHECK(fs::exists(out / "checkpoints" / "gcn.json"));
  CHECK(fs::exists(out / "checkpoints" / "graphormer.log.json"));

  const auto table = cmd_attack(cfg, out, {}, log);
  // models x {adaptive, random, transfer} x budgets x seeds
  CHECK(table.rows.size() == 2 * 3 * 2 * 2);
  CHECK(table_from_csv(read_file(out / "results" / "attack.csv")) == table);

  const auto ds = load_dataset(out / "dataset");
  const std::vector<std::size_t> attacked(ds.split.test.begin(), ds.split.test.begin() + 3);
  for (auto kind : cfg.models) {
    const double clean = evaluate(load_checkpoint(out / "checkpoints" / (to_string(kind) + ".json")), ds, attacked);
    for (const auto& r : table.rows) {
      CHECK(r.accuracy >= 0.0);
      CHECK(r.accuracy <= 100.0);
      CHECK(r.graphs == 3);
      CHECK(r.config_hash == config_hash(cfg));
      if (r.model == to_string(kind) && r.budget == 0.0) CHECK(r.accuracy == doctest::Approx(clean).epsilon(1e-12));
    }
  }
  // Every stored perturbation is sound.
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(out / "perturbations")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto r = attack::result_from_json(read_file(e.path()));
    auto ac = cfg.sweep.attack;
    ac.budget_fraction = e.path().filename().string().find("_b0.05_") != std::string::npos ? 0.05 : 0.0;
    const attack::AttackTarget t{&ds.graphs[r.graph_id], r.graph_id, nullptr};
    CHECK(attack::check_perturbation(r, t, ac).empty());
  }
  CHECK(files == 2 * 2 * 2 * 2 * 3);  // models x {adaptive, random} x budgets x seeds x graphs

  SUBCASE("re-run reproduces the table") { CHECK(cmd_attack(cfg, out, {}, log) == table); }

  SUBCASE("overrides narrow the sweep") {
    Overrides o;
    o.model = ModelKind::gcn;
    o.budget = 0.05;
    o.seed = 3;
    const auto t = cmd_attack(cfg, out, o, log);
    // Transfer sources for this seed do not exist on disk, so that row is skipped.
    CHECK(t.rows.size() == 2);
    for (const auto& r : t.rows) CHECK((r.seed == 3 && r.budget == 0.05 && r.model == "gcn"));
  }

  SUBCASE("ablation") {
    auto acfg = cfg;
    acfg.sweep.n_graphs = 4;  // the whole test split
    const auto t = cmd_ablate(acfg, out, {}, log);
    CHECK(fs::exists(out / "results" / "ablate_graphormer.csv"));
    // gcn: clean, random, one adaptive row; graphormer: clean, random, 4 toggle rows; per seed.
    CHECK(t.rows.size() == (3 + 6) * 2);
    for (const auto& r : t.rows) {
      if (r.attack != "clean") continue;
      const auto logj = nlohmann::json::parse(read_file(out / "checkpoints" / (r.model + ".log.json")));
      CHECK(r.accuracy == doctest::Approx(logj["test_accuracy"].get<double>()).epsilon(1e-12));
    }
  }

  SUBCASE("report") {
    cmd_report(out, log);
    const auto text = read_file(out / "report" / "attack.csv");
    CHECK(text.rfind("budget,model,attack,mean,std\n", 0) == 0);
    CHECK(text.find(",strongest,") != std::string::npos);
  }
}

TEST_CASE("larger budgets are at least as damaging") {
  TempDir tmp("budget");
  auto cfg = small_cluster();
  cfg.models = {ModelKind::gcn};
  cfg.sweep.budgets = {0.01, 0.1};
  cfg.sweep.attack.steps = 30;
  cfg.sweep.random_baseline = false;
  cfg.sweep.transfer = false;
  std::ostringstream log;
  cmd_generate(cfg, tmp.path, {}, log);
  cmd_train(cfg, tmp.path, {}, log);
  const auto t = cmd_attack(cfg, tmp.path, {}, log);
  double low = 0.0, high = 0.0;
  for (const auto& r : t.rows) (r.budget == 0.01 ? low : high) += r.accuracy / 2.0;
  CHECK(high <= low + 2.0);
}

TEST_CASE("injection sweep with the tree constraint") {
  TempDir tmp("inject");
  const auto cfg = small_tree();
  std::ostringstream log;
  cmd_generate(cfg, tmp.path, {}, log);
  cmd_train(cfg, tmp.path, {}, log);
  const auto t = cmd_attack(cfg, tmp.path, {}, log);
  CHECK(t.rows.size() == 2);  // adaptive + random; single model, so no transfer row
  const auto ds = load_dataset(tmp.path / "dataset");
  for (const auto& e : fs::recursive_directory_iterator(tmp.path / "perturbations")) {
    if (!e.is_regular_file()) continue;
    const auto r = attack::result_from_json(read_file(e.path()));
    attack::CandidateOptions opts;
    opts.max_candidates = cfg.sweep.max_candidates;
    const auto cs = attack::build_candidates(ds.graphs, r.graph_id, r.seed, opts);
    CHECK(cs.provenance == r.candidates);
    auto ac = cfg.sweep.attack;
    ac.budget_fraction = 0.2;
    CHECK(attack::check_perturbation(r, {&ds.graphs[r.graph_id], r.graph_id, &cs}, ac).empty());
  }
  const auto grid = ablation_grid(ModelKind::graphormer, attack::AttackMode::injection);
  CHECK(grid.size() == 7);
  CHECK(grid.front() == RelaxToggles{});
  CHECK(ablation_grid(ModelKind::graphormer, attack::AttackMode::structure).size() == 4);
  CHECK(ablation_grid(ModelKind::gcn, attack::AttackMode::structure).size() == 1);
}

TEST_CASE("results tables") {
  ResultsTable t;
  t.rows = {{"gcn", "adaptive", 0.01, "all", 0, 50.0, 20, "h"}, {"gcn", "adaptive", 0.01, "all", 1, 60.0, 20, "h"},
            {"gcn", "random", 0.01, "none", 0, 70.0, 20, "h"},   {"gcn", "random", 0.01, "none", 1, 70.0, 20, "h"},
            {"gcn", "adaptive", 0.05, "all", 0, 30.0, 20, "h"},  {"gcn", "random", 0.05, "none", 0, 20.0, 20, "h"},
            {"san", "adaptive", 0.01, "all", 0, 40.0, 20, "h"}};
  CHECK(table_from_csv(table_to_csv(t)) == t);
  CHECK_THROWS_AS(table_from_csv("model,attack\n"), ParseError);
  CHECK_THROWS_AS(table_from_csv(table_to_csv(t) + "gcn,adaptive,x,all,0,1,1,h\n"), ParseError);

  // Golden output: column order, number format and the strongest series.
  std::vector<std::string> warnings;
  CHECK(summary_to_csv(summarize(t, &warnings)) ==
        "budget,model,attack,mean,std\n"
        "0.01,gcn,adaptive,55.0000,5.0000\n"
        "0.01,gcn,random,70.0000,0.0000\n"
        "0.05,gcn,adaptive,30.0000,0.0000\n"
        "0.05,gcn,random,20.0000,0.0000\n"
        "0.01,san,adaptive,40.0000,0.0000\n"
        "0.01,gcn,strongest,55.0000,5.0000\n"
        "0.05,gcn,strongest,20.0000,0.0000\n"
        "0.01,san,strongest,40.0000,0.0000\n");
  CHECK(warnings.empty());

  // A missing cell is reported and leaves a gap in the strongest series.
  t.rows.erase(t.rows.begin() + 5);
  const auto rows = summarize(t, &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("random") != std::string::npos);
  for (const auto& r : rows) CHECK_FALSE((r.attack == "strongest" && r.budget == 0.05));

  TempDir tmp("report");
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_report(tmp.path, log), std::runtime_error);
}

TEST_CASE("command-line exit codes") {
  TempDir tmp("cli");
  const std::string cli = GTRELAX_CLI_PATH;
  auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  const auto good = tmp.path / "good.json";
  const auto bad = tmp.path / "bad.json";
  write_file(good, config_to_json(small_tree()));
  write_file(bad, R"({"attack": {"budgets": [0.2, 0.1]}})");
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("generate --out " + tmp.path.string()) == 2);
  CHECK(run("generate --config " + bad.string() + " --out " + tmp.path.string()) == 2);
  CHECK(run("generate --config " + good.string() + " --out " + tmp.path.string() + " --budget 3") == 2);
  CHECK(run("train --config " + good.string() + " --out " + tmp.path.string() + " --model gat") == 2);
  CHECK(run("report --out " + tmp.path.string()) == 1);
  CHECK(run("generate --config " + good.string() + " --out " + tmp.path.string()) == 0);
  CHECK(run("train --config " + good.string() + " --out " + tmp.path.string()) == 0);
  CHECK(run("attack --config " + good.string() + " --out " + tmp.path.string() + " --toggles all") == 0);
  CHECK(run("report --out " + tmp.path.string()) == 0);
  CHECK(fs::exists(tmp.path / "report" / "attack.csv"));
  CHECK(run("--help") == 0);
}
