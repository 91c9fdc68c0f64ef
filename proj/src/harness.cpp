// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "gtrelax/graph_io.hpp"
#include "gtrelax/optim.hpp"
#include "json.hpp"

namespace gtrelax::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- strict JSON reading -------------------------------------------------------

class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) fail(path_, "expected an object");
  }
  /// Rejects keys that were never looked up.
  void done() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) fail(path_ + "." + key, "unknown key");
    }
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }
  std::string at(const std::string& key) const { return path_ + "." + key; }

  void get(const std::string& key, std::size_t& dst) {
    if (auto v = find(key)) {
      if (!v->is_number_unsigned()) fail(at(key), "expected a non-negative integer");
      dst = v->get<std::size_t>();
    }
  }
  void get(const std::string& key, double& dst) {
    if (auto v = find(key)) {
      if (!v->is_number()) fail(at(key), "expected a number");
      dst = v->get<double>();
    }
  }
  void get(const std::string& key, bool& dst) {
    if (auto v = find(key)) {
      if (!v->is_boolean()) fail(at(key), "expected true or false");
      dst = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& dst) {
    if (auto v = find(key)) {
      if (!v->is_string()) fail(at(key), "expected a string");
      dst = v->get<std::string>();
    }
  }
  template <class Parse, class T>
  void get_enum(const std::string& key, T& dst, Parse parse) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    try {
      dst = parse(s);
    } catch (const std::invalid_argument& e) {
      fail(at(key), e.what());
    }
  }

  [[noreturn]] static void fail(const std::string& where, const std::string& what) {
    throw ConfigError("config " + where + ": " + what);
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

PoolMode pool_from_string(const std::string& s) {
  if (s == "sum") return PoolMode::sum;
  if (s == "mean") return PoolMode::mean;
  throw std::invalid_argument("unknown pooling '" + s + "' (expected sum or mean)");
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "cluster") return DatasetKind::cluster;
  if (s == "tree") return DatasetKind::tree;
  throw std::invalid_argument("unknown dataset kind '" + s + "' (expected cluster or tree)");
}

std::string to_string(DatasetKind k) { return k == DatasetKind::cluster ? "cluster" : "tree"; }

void read_dataset(const json& j, DatasetSpec& d) {
  Reader r(j, "dataset");
  r.get_enum("kind", d.kind, dataset_kind_from_string);
  r.get("seed", d.seed);
  r.get("n_train", d.cluster.n_train);
  r.get("n_val", d.cluster.n_val);
  r.get("n_test", d.cluster.n_test);
  if (auto s = r.find("sbm")) {
    Reader q(*s, "dataset.sbm");
    auto& c = d.cluster.sbm;
    q.get("n_clusters", c.n_clusters);
    q.get("min_cluster_size", c.min_cluster_size);
    q.get("max_cluster_size", c.max_cluster_size);
    q.get("p_intra", c.p_intra);
    q.get("p_inter", c.p_inter);
    q.get("feature_dim", c.feature_dim);
    q.get("noise_std", c.noise_std);
    q.done();
  }
  r.get("n_graphs", d.tree.n_graphs);
  r.get("train_fraction", d.tree.train_fraction);
  r.get("val_fraction", d.tree.val_fraction);
  if (auto t = r.find("tree")) {
    Reader q(*t, "dataset.tree");
    auto& c = d.tree.tree;
    q.get("min_nodes", c.min_nodes);
    q.get("max_nodes", c.max_nodes);
    q.get("feature_dim", c.feature_dim);
    q.get("root_attach", c.root_attach);
    q.get("root_shift", c.root_shift);
    q.get("user_shift", c.user_shift);
    q.get("noise_std", c.noise_std);
    q.done();
  }
  r.done();
}

void read_model(const json& j, ModelConfig& m) {
  Reader r(j, "model");
  r.get("hidden", m.hidden);
  r.get("layers", m.layers);
  r.get("heads", m.heads);
  r.get("grit_k", m.grit_k);
  r.get("grit_pair_dim", m.grit_pair_dim);
  r.get("d_max", m.d_max);
  r.get("s_max", m.s_max);
  r.get("san_k", m.san_k);
  r.get("san_pe_dim", m.san_pe_dim);
  r.get("san_gamma", m.san_gamma);
  r.get_enum("pooling", m.pooling, pool_from_string);
  r.done();
}

void read_train(const json& j, TrainConfig& t) {
  Reader r(j, "train");
  r.get("epochs", t.epochs);
  r.get("lr", t.lr);
  r.get("weight_decay", t.weight_decay);
  r.get("graphs_per_epoch", t.graphs_per_epoch);
  r.get("seed", t.seed);
  r.done();
}

void read_attack(const json& j, SweepConfig& s) {
  Reader r(j, "attack");
  auto& a = s.attack;
  r.get_enum("mode", a.mode, attack::mode_from_string);
  r.get_enum("loss", a.loss, attack::loss_kind_from_string);
  r.get_enum("constraint", a.constraint, attack::constraint_from_string);
  r.get_enum("toggles", a.toggles, toggles_from_list);
  r.get("steps", a.steps);
  r.get("block_size", a.block_size);
  r.get("n_discrete_samples", a.n_discrete_samples);
  r.get("base_lr", a.base_lr);
  r.get("resample_every", a.resample_every);
  r.get("keep_fraction", a.keep_fraction);
  r.get("sample_f_region", a.sample_f_region);
  r.get("sample_b_region", a.sample_b_region);
  r.get("node_prob_iterations", a.node_prob_iterations);
  r.get("max_rejections", a.max_rejections);
  if (auto b = r.find("budgets")) {
    if (!b->is_array()) Reader::fail(r.at("budgets"), "expected an array of numbers");
    s.budgets.clear();
    for (const auto& v : *b) {
      if (!v.is_number()) Reader::fail(r.at("budgets"), "expected an array of numbers");
      s.budgets.push_back(v.get<double>());
    }
  }
  if (auto b = r.find("seeds")) {
    if (!b->is_array()) Reader::fail(r.at("seeds"), "expected an array of non-negative integers");
    s.seeds.clear();
    for (const auto& v : *b) {
      if (!v.is_number_unsigned()) Reader::fail(r.at("seeds"), "expected an array of non-negative integers");
      s.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  r.get("n_graphs", s.n_graphs);
  r.get("random_baseline", s.random_baseline);
  r.get("transfer", s.transfer);
  r.get("ablation_budget", s.ablation_budget);
  r.get("max_candidates", s.max_candidates);
  r.done();
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  double back = 0.0;
  // Shortest representation that parses back exactly.
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream t;
    t << std::setprecision(p) << v;
    std::istringstream(t.str()) >> back;
    if (back == v) return t.str();
  }
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---- training ----------------------------------------------------------------

ad::Tensor training_loss(const ad::Tensor& logits, const Graph& g) {
  if (logits.dim(1) == 1) {
    const auto s = logits;
    return ad::sum(ad::softplus(*g.graph_label == 1 ? ad::neg(s) : s));
  }
  const auto labels = attack::targets_of(g);
  const std::size_t c = logits.dim(1);
  std::vector<std::size_t> flat(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) flat[i] = i * c + static_cast<std::size_t>(labels[i]);
  return ad::neg(ad::mean(ad::gather(ad::log_softmax_rows(logits), flat)));
}

std::vector<StructureCache> make_caches(const Model& m, const Dataset& ds) {
  std::vector<StructureCache> caches(ds.graphs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < ds.graphs.size(); ++i) caches[i] = m.make_cache(ds.graphs[i].adjacency);
  return caches;
}

double evaluate_cached(const Model& model, const Dataset& ds, const std::vector<std::size_t>& idx,
                       const std::vector<StructureCache>& caches) {
  if (idx.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i : idx) {
    const auto& g = ds.graphs[i];
    total += attack::accuracy(model.predict(g.adjacency, g.features, &caches[i]), attack::targets_of(g));
  }
  return total / static_cast<double>(idx.size());
}

// ---- sweep helpers -------------------------------------------------------------

fs::path dataset_dir(const fs::path& out) { return out / "dataset"; }
fs::path checkpoint_path(const fs::path& out, ModelKind k) { return out / "checkpoints" / (to_string(k) + ".json"); }

Dataset require_dataset(const fs::path& out) {
  if (!fs::exists(dataset_dir(out) / "split.json")) {
    throw std::runtime_error("no dataset under " + dataset_dir(out).string() + "; run 'generate' first");
  }
  return load_dataset(dataset_dir(out));
}

Model require_model(const fs::path& out, ModelKind k) {
  const auto p = checkpoint_path(out, k);
  if (!fs::exists(p)) throw std::runtime_error("no checkpoint " + p.string() + "; run 'train' first");
  return load_checkpoint(p);
}

std::vector<ModelKind> selected_models(const ExperimentConfig& cfg, const Overrides& o) {
  if (o.model) return {*o.model};
  return cfg.models;
}

std::vector<std::uint64_t> selected_seeds(const ExperimentConfig& cfg, const Overrides& o) {
  if (o.seed) return {*o.seed};
  return cfg.sweep.seeds;
}

std::vector<std::size_t> attacked_graphs(const ExperimentConfig& cfg, const Dataset& ds) {
  std::vector<std::size_t> out = ds.split.test;
  out.resize(std::min(out.size(), cfg.sweep.n_graphs));
  return out;
}

std::string budget_tag(double b) { return fmt_double(b); }

/// One (graph, seed) attack with its random baseline.
struct Cell {
  std::size_t graph = 0;
  std::uint64_t seed = 0;
  double budget = 0.0;
  RelaxToggles toggles;
  attack::PerturbationResult adaptive;
  std::optional<attack::PerturbationResult> random;
};

class Sweep {
 public:
  Sweep(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log)
      : cfg_(cfg), out_(out), log_(log), ds_(require_dataset(out)), graphs_(attacked_graphs(cfg, ds_)) {
    if (graphs_.empty()) throw ConfigError("the dataset has no test graphs to attack");
  }

  const Dataset& dataset() const { return ds_; }
  const std::vector<std::size_t>& graphs() const { return graphs_; }

  const attack::CandidateSet* candidates(std::size_t gid, std::uint64_t seed) {
    if (cfg_.sweep.attack.mode != attack::AttackMode::injection) return nullptr;
    auto key = std::make_pair(gid, seed);
    auto it = candidates_.find(key);
    if (it == candidates_.end()) {
      attack::CandidateOptions opts;
      opts.max_candidates = cfg_.sweep.max_candidates;
      it = candidates_.emplace(key, attack::build_candidates(ds_.graphs, gid, seed, opts)).first;
    }
    return &it->second;
  }

  attack::AttackTarget target(std::size_t gid, std::uint64_t seed) {
    return {&ds_.graphs[gid], gid, candidates(gid, seed)};
  }

  /// Runs every (graph, seed) cell in parallel; results come back in input
  /// order.
  std::vector<Cell> run(const Model& model, std::vector<Cell> cells, bool with_random) {
    for (auto& c : cells) candidates(c.graph, c.seed);  // filled before the parallel region
    std::vector<std::exception_ptr> errors(cells.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t k = 0; k < cells.size(); ++k) {
      try {
        auto& c = cells[k];
        auto ac = cfg_.sweep.attack;
        ac.budget_fraction = c.budget;
        ac.seed = c.seed;
        ac.toggles = c.toggles;
        const attack::CandidateSet* cs =
            ac.mode == attack::AttackMode::injection ? &candidates_.at({c.graph, c.seed}) : nullptr;
        const attack::AttackTarget tgt{&ds_.graphs[c.graph], c.graph, cs};
        c.adaptive = attack::run_attack(model, tgt, ac);
        if (with_random) c.random = attack::random_baseline(model, tgt, ac);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    return cells;
  }

  void save(const std::string& model, const std::string& stem, const attack::PerturbationResult& r) {
    const auto dir = out_ / "perturbations" / model;
    fs::create_directories(dir);
    write_file(dir / (stem + ".json"), attack::result_to_json(r));
  }

 private:
  const ExperimentConfig& cfg_;
  fs::path out_;
  std::ostream& log_;
  Dataset ds_;
  std::vector<std::size_t> graphs_;
  std::map<std::pair<std::size_t, std::uint64_t>, attack::CandidateSet> candidates_;
};

std::string cell_stem(const std::string& kind, double budget, std::uint64_t seed, std::size_t graph) {
  return kind + "_b" + budget_tag(budget) + "_s" + std::to_string(seed) + "_g" + std::to_string(graph);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void write_table(const fs::path& path, const ResultsTable& t) {
  fs::create_directories(path.parent_path());
  write_file(path, table_to_csv(t));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---- config -------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (models.empty()) fail("models must not be empty");
  if (sweep.seeds.empty()) fail("attack.seeds must not be empty");
  for (std::size_t i = 0; i < sweep.budgets.size(); ++i) {
    if (!(sweep.budgets[i] >= 0.0 && sweep.budgets[i] <= 1.0)) fail("attack.budgets must lie in [0, 1]");
    if (i > 0 && !(sweep.budgets[i] > sweep.budgets[i - 1])) fail("attack.budgets must be strictly ascending");
  }
  if (!(sweep.ablation_budget >= 0.0 && sweep.ablation_budget <= 1.0)) fail("attack.ablation_budget must lie in [0, 1]");
  if (sweep.n_graphs == 0) fail("attack.n_graphs must be at least 1");
  if (!(train.lr > 0.0)) fail("train.lr must be positive");
  if (!(train.weight_decay >= 0.0)) fail("train.weight_decay must be >= 0");
  const bool injection = sweep.attack.mode == attack::AttackMode::injection;
  if (injection && dataset.kind != DatasetKind::tree) fail("injection attacks need a graph classification dataset");
  if (!injection && dataset.kind != DatasetKind::cluster) fail("structure attacks need a node classification dataset");
  if (dataset.kind == DatasetKind::cluster) {
    const auto& c = dataset.cluster;
    if (c.n_train == 0 || c.n_val == 0 || c.n_test == 0) fail("dataset split sizes must be positive");
  } else {
    const auto& t = dataset.tree;
    if (t.n_graphs == 0) fail("dataset.n_graphs must be positive");
    if (!(t.train_fraction > 0.0 && t.val_fraction >= 0.0 && t.train_fraction + t.val_fraction < 1.0)) {
      fail("dataset fractions must leave a test split");
    }
    if (t.tree.min_nodes < 2 || t.tree.min_nodes > t.tree.max_nodes) fail("dataset.tree node range is empty");
  }
  try {
    sweep.attack.validate();
    ModelConfig probe = model;
    probe.in_dim = 1;
    probe.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

ModelConfig ExperimentConfig::model_config(ModelKind kind, const Dataset& ds) const {
  ModelConfig m = model;
  m.kind = kind;
  m.task = ds.task;
  m.in_dim = ds.graphs.at(0).feature_dim();
  m.num_classes = ds.num_classes;
  m.validate();
  return m;
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  {
    Reader r(j, "config");
    if (auto d = r.find("dataset")) read_dataset(*d, cfg.dataset);
    if (auto m = r.find("models")) {
      if (!m->is_array()) Reader::fail(r.at("models"), "expected an array of model names");
      cfg.models.clear();
      for (const auto& v : *m) {
        if (!v.is_string()) Reader::fail(r.at("models"), "expected an array of model names");
        try {
          cfg.models.push_back(model_kind_from_string(v.get<std::string>()));
        } catch (const std::invalid_argument& e) {
          Reader::fail(r.at("models"), e.what());
        }
      }
    }
    if (auto m = r.find("model")) read_model(*m, cfg.model);
    if (auto t = r.find("train")) read_train(*t, cfg.train);
    if (auto a = r.find("attack")) read_attack(*a, cfg.sweep);
    r.done();
  }
  if (cfg.sweep.attack.mode == attack::AttackMode::injection && !j.contains("dataset")) {
    cfg.dataset.kind = DatasetKind::tree;
  }
  cfg.validate();
  return cfg;
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  const auto& d = c.dataset;
  const auto& s = d.cluster.sbm;
  const auto& t = d.tree.tree;
  j["dataset"] = {{"kind", to_string(d.kind)},
                  {"seed", d.seed},
                  {"n_train", d.cluster.n_train},
                  {"n_val", d.cluster.n_val},
                  {"n_test", d.cluster.n_test},
                  {"sbm",
                   {{"n_clusters", s.n_clusters},
                    {"min_cluster_size", s.min_cluster_size},
                    {"max_cluster_size", s.max_cluster_size},
                    {"p_intra", s.p_intra},
                    {"p_inter", s.p_inter},
                    {"feature_dim", s.feature_dim},
                    {"noise_std", s.noise_std}}},
                  {"n_graphs", d.tree.n_graphs},
                  {"train_fraction", d.tree.train_fraction},
                  {"val_fraction", d.tree.val_fraction},
                  {"tree",
                   {{"min_nodes", t.min_nodes},
                    {"max_nodes", t.max_nodes},
                    {"feature_dim", t.feature_dim},
                    {"root_attach", t.root_attach},
                    {"root_shift", t.root_shift},
                    {"user_shift", t.user_shift},
                    {"noise_std", t.noise_std}}}};
  j["models"] = json::array();
  for (auto k : c.models) j["models"].push_back(to_string(k));
  const auto& m = c.model;
  j["model"] = {{"hidden", m.hidden},         {"layers", m.layers},       {"heads", m.heads},
                {"grit_k", m.grit_k},         {"grit_pair_dim", m.grit_pair_dim},
                {"d_max", m.d_max},           {"s_max", m.s_max},         {"san_k", m.san_k},
                {"san_pe_dim", m.san_pe_dim}, {"san_gamma", m.san_gamma},
                {"pooling", m.pooling == PoolMode::sum ? "sum" : "mean"}};
  j["train"] = {{"epochs", c.train.epochs},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"graphs_per_epoch", c.train.graphs_per_epoch},
                {"seed", c.train.seed}};
  const auto& a = c.sweep.attack;
  j["attack"] = {{"mode", attack::to_string(a.mode)},
                 {"loss", attack::to_string(a.loss)},
                 {"constraint", attack::to_string(a.constraint)},
                 {"toggles", toggles_to_list(a.toggles)},
                 {"steps", a.steps},
                 {"block_size", a.block_size},
                 {"n_discrete_samples", a.n_discrete_samples},
                 {"base_lr", a.base_lr},
                 {"resample_every", a.resample_every},
                 {"keep_fraction", a.keep_fraction},
                 {"sample_f_region", a.sample_f_region},
                 {"sample_b_region", a.sample_b_region},
                 {"node_prob_iterations", a.node_prob_iterations},
                 {"max_rejections", a.max_rejections},
                 {"budgets", c.sweep.budgets},
                 {"seeds", c.sweep.seeds},
                 {"n_graphs", c.sweep.n_graphs},
                 {"random_baseline", c.sweep.random_baseline},
                 {"transfer", c.sweep.transfer},
                 {"ablation_budget", c.sweep.ablation_budget},
                 {"max_candidates", c.sweep.max_candidates}};
  return j.dump(2);
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  try {
    return config_from_json(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string config_hash(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_json(cfg))));
  return buf;
}

// ---- generate / train ------------------------------------------------------------

Dataset generate_dataset(const DatasetSpec& spec) {
  return spec.kind == DatasetKind::cluster ? generate_cluster_dataset(spec.seed, spec.cluster)
                                           : generate_tree_dataset(spec.seed, spec.tree);
}

double evaluate(const Model& model, const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i : indices) {
    const auto& g = ds.graphs.at(i);
    total += attack::accuracy(model.predict(g.adjacency, g.features), attack::targets_of(g));
  }
  return total / static_cast<double>(indices.size());
}

TrainResult train_model(const Dataset& ds, const ModelConfig& mc, const TrainConfig& cfg) {
  if (ds.split.train.empty()) throw std::invalid_argument("train_model: empty training split");
  Model model(mc, cfg.seed);
  const auto caches = make_caches(model, ds);
  std::vector<std::size_t> val = ds.split.val.empty() ? ds.split.train : ds.split.val;

  TrainResult out{model, {}, 0, evaluate_cached(model, ds, val, caches), 0.0};
  std::vector<optim::AdamState> states(model.params().size());
  optim::AdamConfig adam;
  adam.weight_decay = cfg.weight_decay;
  Rng rng = seeded(cfg.seed, 0x7a1);
  std::vector<std::size_t> order = ds.split.train;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t count = cfg.graphs_per_epoch == 0 ? order.size() : std::min(order.size(), cfg.graphs_per_epoch);
    double loss_sum = 0.0, acc_sum = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t gi = order[k];
      const auto& g = ds.graphs[gi];
      ad::Tape tape;
      const BoundParams bp(model.params(), &tape);
      ForwardContext ctx;
      ctx.cache = &caches[gi];
      ad::Tensor logits, loss;
      try {
        logits = model.forward(bp, ad::Tensor::from_matrix(g.adjacency), g.features, ctx);
        loss = training_loss(logits, g);
      } catch (const std::domain_error& e) {
        throw TrainingDiverged("training " + to_string(mc.kind) + " diverged at epoch " + std::to_string(epoch) +
                               ", graph " + std::to_string(gi) + ": " + e.what());
      }
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainingDiverged("training " + to_string(mc.kind) + ": loss became " + std::to_string(lv) +
                               " at epoch " + std::to_string(epoch) + ", graph " + std::to_string(gi));
      }
      loss_sum += lv;
      acc_sum += attack::accuracy(logits.to_matrix(), attack::targets_of(g));
      const auto grads = tape.backward(loss);
      for (std::size_t i = 0; i < model.params().size(); ++i) {
        const auto gr = grads[bp.tensors()[i]];
        optim::adam_step(model.params()[i].values, gr, states[i], cfg.lr, adam);
      }
    }
    EpochLog e{epoch, loss_sum / static_cast<double>(count), acc_sum / static_cast<double>(count),
               evaluate_cached(model, ds, val, caches)};
    out.log.push_back(e);
    if (e.val_accuracy > out.val_accuracy) {
      out.val_accuracy = e.val_accuracy;
      out.best_epoch = epoch;
      out.model = model;
    }
  }
  out.test_accuracy = evaluate_cached(out.model, ds, ds.split.test, caches);
  return out;
}

// ---- results ----------------------------------------------------------------------

static const char* kCsvHeader = "model,attack,budget,toggles,seed,accuracy,graphs,config_hash";

std::string table_to_csv(const ResultsTable& t) {
  std::ostringstream os;
  os << kCsvHeader << "\n";
  for (const auto& r : t.rows) {
    os << r.model << ',' << r.attack << ',' << fmt_double(r.budget) << ',' << r.toggles << ',' << r.seed << ','
       << fmt_double(r.accuracy) << ',' << r.graphs << ',' << r.config_hash << "\n";
  }
  return os.str();
}

ResultsTable table_from_csv(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) {
    throw ParseError(origin + ": expected header '" + std::string(kCsvHeader) + "'");
  }
  ResultsTable t;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw ParseError(origin + ":" + std::to_string(lineno) + ": expected 8 fields");
    try {
      std::size_t used = 0;
      ResultRow r;
      r.model = f[0];
      r.attack = f[1];
      r.budget = std::stod(f[2], &used);
      r.toggles = f[3];
      r.seed = std::stoull(f[4]);
      r.accuracy = std::stod(f[5]);
      r.graphs = std::stoull(f[6]);
      r.config_hash = f[7];
      t.rows.push_back(r);
    } catch (const std::logic_error&) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return t;
}

std::vector<SummaryRow> summarize(const ResultsTable& t, std::vector<std::string>* warnings) {
  // Ablation tables distinguish adaptive runs by toggles.
  std::map<std::pair<std::string, std::string>, std::set<std::string>> toggle_sets;
  for (const auto& r : t.rows) toggle_sets[{r.model, r.attack}].insert(r.toggles);
  auto name_of = [&](const ResultRow& r) {
    return toggle_sets[{r.model, r.attack}].size() > 1 ? r.attack + "[" + r.toggles + "]" : r.attack;
  };

  // Key order: model, budget, attack in first-seen order of attacks.
  std::vector<std::string> model_order, attack_order;
  std::map<std::string, std::set<double>> budgets;
  std::map<std::tuple<std::string, double, std::string>, std::vector<double>> cells;
  for (const auto& r : t.rows) {
    const auto name = name_of(r);
    if (std::find(model_order.begin(), model_order.end(), r.model) == model_order.end()) model_order.push_back(r.model);
    if (std::find(attack_order.begin(), attack_order.end(), name) == attack_order.end()) attack_order.push_back(name);
    budgets[r.model].insert(r.budget);
    cells[{r.model, r.budget, name}].push_back(r.accuracy);
  }

  std::vector<SummaryRow> out, strongest;
  for (const auto& m : model_order) {
    std::set<std::string> kinds;
    for (const auto& [key, v] : cells)
      if (std::get<0>(key) == m) kinds.insert(std::get<2>(key));
    for (double b : budgets[m]) {
      std::optional<SummaryRow> best;
      bool gap = false;
      for (const auto& a : attack_order) {
        if (!kinds.count(a)) continue;
        auto it = cells.find({m, b, a});
        if (it == cells.end()) {
          gap = true;
          if (warnings) warnings->push_back("gap: " + m + " has no '" + a + "' rows at budget " + fmt_double(b));
          continue;
        }
        const double mu = mean_of(it->second);
        double var = 0.0;
        for (double x : it->second) var += (x - mu) * (x - mu);
        SummaryRow row{b, m, a, mu, std::sqrt(var / static_cast<double>(it->second.size()))};
        out.push_back(row);
        if (a != "clean" && (!best || row.mean < best->mean)) best = row;
      }
      if (best && !gap) {
        best->attack = "strongest";
        strongest.push_back(*best);
      }
    }
  }
  out.insert(out.end(), strongest.begin(), strongest.end());
  return out;
}

std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "budget,model,attack,mean,std\n";
  for (const auto& r : rows) {
    os << fmt_double(r.budget) << ',' << r.model << ',' << r.attack << ',' << std::fixed << std::setprecision(4)
       << r.mean << ',' << r.std << std::defaultfloat << "\n";
  }
  return os.str();
}

std::string toggles_label(const RelaxToggles& t) {
  auto s = toggles_to_list(t);
  std::replace(s.begin(), s.end(), ',', '+');
  return s;
}

std::vector<RelaxToggles> ablation_grid(ModelKind kind, attack::AttackMode mode) {
  std::vector<std::string> names;
  switch (kind) {
    case ModelKind::gcn: break;
    case ModelKind::grit: names = {"grit_rrwp_grad", "grit_deg_grad"}; break;
    case ModelKind::graphormer: names = {"graphormer_deg", "graphormer_spd"}; break;
    case ModelKind::san: names = {"san_attention", "san_lap_pert"}; break;
  }
  if (mode == attack::AttackMode::injection) names.push_back("node_prob_bias");
  std::vector<RelaxToggles> out;
  const std::size_t combos = std::size_t{1} << names.size();
  // All-on first, all-off last.
  for (std::size_t m = 0; m < combos; ++m) {
    RelaxToggles t;
    bool any = false;
    for (std::size_t b = 0; b < names.size(); ++b) {
      const bool on = !((m >> (names.size() - 1 - b)) & 1u);
      toggle_ref(t, names[b]) = on;
      any = any || on;
    }
    if (mode == attack::AttackMode::injection && !any) continue;
    out.push_back(t);
  }
  return out;
}

// ---- commands ----------------------------------------------------------------------

void cmd_generate(const ExperimentConfig& cfg, const fs::path& out, const Overrides& o, std::ostream& log) {
  DatasetSpec spec = cfg.dataset;
  if (o.seed) spec.seed = *o.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = generate_dataset(spec);
  ds.validate();
  const auto dir = dataset_dir(out);
  if (fs::exists(dir)) fs::remove_all(dir);
  save_dataset(ds, dir);
  write_file(out / "config.json", config_to_json(cfg));
  log << "generate: " << ds.graphs.size() << " " << to_string(spec.kind) << " graphs (train " << ds.split.train.size()
      << ", val " << ds.split.val.size() << ", test " << ds.split.test.size() << ") in " << std::fixed
      << std::setprecision(1) << seconds_since(t0) << std::defaultfloat << "s -> " << dir.string() << "\n";
}

void cmd_train(const ExperimentConfig& cfg, const fs::path& out, const Overrides& o, std::ostream& log) {
  const auto ds = require_dataset(out);
  TrainConfig tc = cfg.train;
  if (o.seed) tc.seed = *o.seed;
  fs::create_directories(out / "checkpoints");
  for (auto kind : selected_models(cfg, o)) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = train_model(ds, cfg.model_config(kind, ds), tc);
    save_checkpoint(r.model, checkpoint_path(out, kind));
    json j;
    j["model"] = to_string(kind);
    j["seed"] = tc.seed;
    j["best_epoch"] = r.best_epoch;
    j["val_accuracy"] = r.val_accuracy;
    j["test_accuracy"] = r.test_accuracy;
    j["epochs"] = json::array();
    for (const auto& e : r.log) {
      j["epochs"].push_back(
          {{"epoch", e.epoch}, {"loss", e.loss}, {"train_accuracy", e.train_accuracy}, {"val_accuracy", e.val_accuracy}});
    }
    write_file(out / "checkpoints" / (to_string(kind) + ".log.json"), j.dump(2));
    log << "train " << to_string(kind) << ": best epoch " << r.best_epoch << ", val " << std::fixed
        << std::setprecision(2) << r.val_accuracy << "%, test " << r.test_accuracy << "% ("
        << std::setprecision(1) << seconds_since(t0) << "s)" << std::defaultfloat << "\n";
  }
}

ResultsTable cmd_attack(const ExperimentConfig& cfg, const fs::path& out, const Overrides& o, std::ostream& log) {
  Sweep sweep(cfg, out, log);
  const auto hash = config_hash(cfg);
  const auto seeds = selected_seeds(cfg, o);
  const auto budgets = o.budget ? std::vector<double>{*o.budget} : cfg.sweep.budgets;
  const RelaxToggles toggles = o.toggles ? *o.toggles : cfg.sweep.attack.toggles;
  const auto label = toggles_label(toggles);
  const auto& graphs = sweep.graphs();

  // Adaptive perturbations of every model at (budget, seed, graph); transfer
  // rows evaluate the other models' entries.
  std::map<std::string, std::map<std::tuple<double, std::uint64_t, std::size_t>, attack::PerturbationResult>> store;
  std::map<std::string, Model> models;
  ResultsTable table;
  for (auto kind : selected_models(cfg, o)) {
    const auto name = to_string(kind);
    const auto& model = models.emplace(name, require_model(out, kind)).first->second;
    for (double b : budgets) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<Cell> cells;
      for (auto s : seeds)
        for (auto g : graphs) cells.push_back({g, s, b, toggles, {}, {}});
      cells = sweep.run(model, std::move(cells), cfg.sweep.random_baseline);
      std::map<std::uint64_t, std::vector<double>> adaptive, random;
      for (const auto& c : cells) {
        sweep.save(name, cell_stem("adaptive", b, c.seed, c.graph), c.adaptive);
        adaptive[c.seed].push_back(c.adaptive.attacked_metric);
        store[name][{b, c.seed, c.graph}] = c.adaptive;
        if (c.random) {
          sweep.save(name, cell_stem("random", b, c.seed, c.graph), *c.random);
          random[c.seed].push_back(c.random->attacked_metric);
        }
      }
      for (auto s : seeds) {
        table.rows.push_back({name, "adaptive", b, label, s, mean_of(adaptive[s]), graphs.size(), hash});
        if (cfg.sweep.random_baseline)
          table.rows.push_back({name, "random", b, "none", s, mean_of(random[s]), graphs.size(), hash});
      }
      log << "attack " << name << " budget " << fmt_double(b) << ": adaptive " << std::fixed << std::setprecision(2)
          << mean_of([&] {
               std::vector<double> all;
               for (auto& [s, v] : adaptive) all.insert(all.end(), v.begin(), v.end());
               return all;
             }())
          << "%";
      if (cfg.sweep.random_baseline) {
        std::vector<double> all;
        for (auto& [s, v] : random) all.insert(all.end(), v.begin(), v.end());
        log << ", random " << mean_of(all) << "%";
      }
      log << " (" << std::setprecision(1) << seconds_since(t0) << "s)" << std::defaultfloat << "\n";
    }
  }

  if (cfg.sweep.transfer) {
    // Sources not attacked in this run are read back from earlier runs.
    for (auto kind : cfg.models) {
      const auto name = to_string(kind);
      if (store.count(name)) continue;
      for (double b : budgets)
        for (auto s : seeds)
          for (auto g : graphs) {
            const auto p = out / "perturbations" / name / (cell_stem("adaptive", b, s, g) + ".json");
            if (fs::exists(p)) store[name][{b, s, g}] = attack::result_from_json(read_file(p), p.string());
          }
    }
    for (auto& [name, model] : models) {
      for (double b : budgets)
        for (auto s : seeds) {
          std::vector<double> per_graph;
          for (auto g : graphs) {
            std::optional<double> worst;
            for (const auto& [src, results] : store) {
              if (src == name) continue;
              auto it = results.find({b, s, g});
              if (it == results.end()) continue;
              const double acc = attack::transfer_attack(it->second, model, sweep.target(g, s));
              worst = worst ? std::min(*worst, acc) : acc;
            }
            if (worst) per_graph.push_back(*worst);
          }
          if (per_graph.size() != graphs.size()) {
            log << "transfer " << name << " budget " << fmt_double(b) << " seed " << s
                << ": no perturbations from other models, row skipped\n";
            continue;
          }
          table.rows.push_back({name, "transfer", b, label, s, mean_of(per_graph), graphs.size(), hash});
        }
    }
  }
  std::stable_sort(table.rows.begin(), table.rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.model, a.budget, a.seed) < std::tie(b.model, b.budget, b.seed);
  });
  write_table(out / "results" / "attack.csv", table);
  return table;
}

ResultsTable cmd_ablate(const ExperimentConfig& cfg, const fs::path& out, const Overrides& o, std::ostream& log) {
  Sweep sweep(cfg, out, log);
  const auto hash = config_hash(cfg);
  const auto seeds = selected_seeds(cfg, o);
  const double b = o.budget ? *o.budget : cfg.sweep.ablation_budget;
  const auto& graphs = sweep.graphs();
  ResultsTable all;
  for (auto kind : selected_models(cfg, o)) {
    const auto name = to_string(kind);
    const Model model = require_model(out, kind);
    ResultsTable table;
    const auto grid = o.toggles ? std::vector<RelaxToggles>{*o.toggles} : ablation_grid(kind, cfg.sweep.attack.mode);
    bool first = true;
    for (const auto& t : grid) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<Cell> cells;
      for (auto s : seeds)
        for (auto g : graphs) cells.push_back({g, s, b, t, {}, {}});
      cells = sweep.run(model, std::move(cells), first && cfg.sweep.random_baseline);
      std::map<std::uint64_t, std::vector<double>> clean, adaptive, random;
      const auto label = toggles_label(t);
      for (const auto& c : cells) {
        sweep.save(name, cell_stem("ablate-" + label, b, c.seed, c.graph), c.adaptive);
        clean[c.seed].push_back(c.adaptive.clean_metric);
        adaptive[c.seed].push_back(c.adaptive.attacked_metric);
        if (c.random) {
          sweep.save(name, cell_stem("ablate-random", b, c.seed, c.graph), *c.random);
          random[c.seed].push_back(c.random->attacked_metric);
        }
      }
      for (auto s : seeds) {
        if (first) {
          table.rows.push_back({name, "clean", b, "none", s, mean_of(clean[s]), graphs.size(), hash});
          if (cfg.sweep.random_baseline)
            table.rows.push_back({name, "random", b, "none", s, mean_of(random[s]), graphs.size(), hash});
        }
        table.rows.push_back({name, "adaptive", b, label, s, mean_of(adaptive[s]), graphs.size(), hash});
      }
      log << "ablate " << name << " [" << label << "] budget " << fmt_double(b) << " (" << std::fixed
          << std::setprecision(1) << seconds_since(t0) << "s)" << std::defaultfloat << "\n";
      first = false;
    }
    write_table(out / "results" / ("ablate_" + name + ".csv"), table);
    all.rows.insert(all.rows.end(), table.rows.begin(), table.rows.end());
  }
  return all;
}

void cmd_report(const fs::path& out, std::ostream& log) {
  const auto dir = out / "results";
  std::vector<fs::path> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".csv") files.push_back(e.path());
  if (files.empty()) throw std::runtime_error("report: no result tables under " + dir.string());
  std::sort(files.begin(), files.end());
  fs::create_directories(out / "report");
  for (const auto& f : files) {
    const auto table = table_from_csv(read_file(f), f.string());
    std::vector<std::string> warnings;
    const auto rows = summarize(table, &warnings);
    for (const auto& w : warnings) log << "warning: " << f.filename().string() << ": " << w << "\n";
    const auto dst = out / "report" / f.filename();
    write_file(dst, summary_to_csv(rows));
    log << "report: " << rows.size() << " rows -> " << dst.string() << "\n";
  }
}

}  // namespace gtrelax::harness
