// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/models.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "gtrelax/graph_io.hpp"
#include "json.hpp"

namespace gtrelax {

using nlohmann::json;

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::gcn: return "gcn";
    case ModelKind::grit: return "grit";
    case ModelKind::graphormer: return "graphormer";
    case ModelKind::san: return "san";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
  for (auto k : kAllModels)
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown model '" + s + "' (expected gcn, grit, graphormer or san)");
}

RelaxToggles RelaxToggles::all(bool on) {
  return RelaxToggles{on, on, on, on, on, on, on};
}

std::vector<std::string> toggle_names() {
  return {"graphormer_deg", "graphormer_spd", "san_attention", "san_lap_pert",
          "grit_rrwp_grad", "grit_deg_grad",  "node_prob_bias"};
}

bool& toggle_ref(RelaxToggles& t, const std::string& name) {
  if (name == "graphormer_deg") return t.graphormer_deg;
  if (name == "graphormer_spd") return t.graphormer_spd;
  if (name == "san_attention") return t.san_attention;
  if (name == "san_lap_pert") return t.san_lap_pert;
  if (name == "grit_rrwp_grad") return t.grit_rrwp_grad;
  if (name == "grit_deg_grad") return t.grit_deg_grad;
  if (name == "node_prob_bias") return t.node_prob_bias;
  throw std::invalid_argument("unknown toggle '" + name + "'");
}

RelaxToggles toggles_from_list(const std::string& list) {
  if (list == "all") return RelaxToggles::all(true);
  auto t = RelaxToggles::all(false);
  if (list.empty() || list == "none") return t;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    toggle_ref(t, item) = true;
  }
  return t;
}

std::string toggles_to_list(const RelaxToggles& t) {
  std::string out;
  auto copy = t;
  for (const auto& name : toggle_names()) {
    if (!toggle_ref(copy, name)) continue;
    if (!out.empty()) out += ',';
    out += name;
  }
  return out.empty() ? "none" : out;
}

std::size_t ModelConfig::output_dim() const {
  return task == Task::graph_classification && num_classes == 2 ? 1 : num_classes;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (in_dim == 0) fail("in_dim must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (hidden == 0 || layers == 0 || heads == 0) fail("hidden, layers and heads must be positive");
  if (kind != ModelKind::gcn && hidden % heads != 0) fail("hidden must be divisible by heads");
  if (kind == ModelKind::grit && grit_k < 2) fail("grit_k must be at least 2");
  if (kind == ModelKind::san) {
    if (san_k == 0) fail("san_k must be positive");
    if (!(san_gamma > 0.0)) fail("san_gamma must be positive");
    if (san_pe_dim == 0 || san_pe_dim >= hidden) fail("san_pe_dim must lie in [1, hidden)");
  }
}

SpectralBase SpectralBase::from_adjacency(const Matrix& a) {
  SpectralBase b;
  b.laplacian = laplacian_sym(a);
  b.eig = spectral::eig_sym(b.laplacian);
  b.op = spectral::perturbation_operator(b.eig);
  return b;
}

// ---- model ----------------------------------------------------------------

namespace {

void init_params(ParamStore& ps, const ModelConfig& c, Rng& rng) {
  switch (c.kind) {
    case ModelKind::gcn: detail::init_gcn(ps, c, rng); break;
    case ModelKind::grit: detail::init_grit(ps, c, rng); break;
    case ModelKind::graphormer: detail::init_graphormer(ps, c, rng); break;
    case ModelKind::san: detail::init_san(ps, c, rng); break;
  }
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  init_params(params_, cfg_, rng);
}

Model::Model(ModelConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  ParamStore ref;
  Rng rng(0);
  init_params(ref, cfg_, rng);
  if (ref.size() != params_.size()) {
    throw std::invalid_argument("parameter count " + std::to_string(params_.size()) + " does not match the " +
                                to_string(cfg_.kind) + " config (" + std::to_string(ref.size()) + ")");
  }
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (ref[i].name != params_[i].name || ref[i].shape != params_[i].shape) {
      throw std::invalid_argument("parameter " + std::to_string(i) + " is '" + params_[i].name + "' " +
                                  ad::shape_str(params_[i].shape) + ", expected '" + ref[i].name + "' " +
                                  ad::shape_str(ref[i].shape));
    }
  }
}

ad::Tensor Model::forward(const BoundParams& p, const ad::Tensor& adjacency, const Matrix& features,
                          const ForwardContext& ctx) const {
  const std::size_t n = features.rows;
  if (adjacency.shape() != ad::Shape{n, n}) {
    throw std::invalid_argument("forward: adjacency " + ad::shape_str(adjacency.shape()) + " for " +
                                std::to_string(n) + " nodes");
  }
  if (features.cols != cfg_.in_dim) {
    throw std::invalid_argument("forward: feature width " + std::to_string(features.cols) + ", model expects " +
                                std::to_string(cfg_.in_dim));
  }
  if (ctx.node_probs.defined() && ctx.node_probs.shape() != ad::Shape{n}) {
    throw std::invalid_argument("forward: node_probs " + ad::shape_str(ctx.node_probs.shape()) + " for " +
                                std::to_string(n) + " nodes");
  }
  const auto x = ad::Tensor::from_matrix(features);
  switch (cfg_.kind) {
    case ModelKind::gcn: return detail::gcn_forward(cfg_, p, adjacency, x, ctx);
    case ModelKind::grit: return detail::grit_forward(cfg_, p, adjacency, x, ctx);
    case ModelKind::graphormer: return detail::graphormer_forward(cfg_, p, adjacency, x, ctx);
    case ModelKind::san: return detail::san_forward(cfg_, p, adjacency, x, ctx);
  }
  throw std::logic_error("unreachable");
}

ad::Tensor Model::forward(const ad::Tensor& adjacency, const Matrix& features, const ForwardContext& ctx) const {
  return forward(BoundParams(params_, nullptr), adjacency, features, ctx);
}

Matrix Model::predict(const Matrix& adjacency, const Matrix& features, const StructureCache* cache) const {
  ForwardContext ctx;
  ctx.cache = cache;
  return forward(ad::Tensor::from_matrix(adjacency), features, ctx).to_matrix();
}

StructureCache Model::make_cache(const Matrix& adjacency) const {
  StructureCache c;
  if (cfg_.kind == ModelKind::graphormer) c.hops = paths::bfs_hops(adjacency);
  if (cfg_.kind == ModelKind::san) c.eig = spectral::eig_sym(laplacian_sym(adjacency));
  return c;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "gtrelax-checkpoint-1";

json config_to_json(const ModelConfig& c) {
  return json{{"kind", to_string(c.kind)},
              {"task", to_string(c.task)},
              {"in_dim", c.in_dim},
              {"num_classes", c.num_classes},
              {"hidden", c.hidden},
              {"layers", c.layers},
              {"heads", c.heads},
              {"grit_k", c.grit_k},
              {"grit_pair_dim", c.grit_pair_dim},
              {"d_max", c.d_max},
              {"s_max", c.s_max},
              {"san_k", c.san_k},
              {"san_pe_dim", c.san_pe_dim},
              {"san_gamma", c.san_gamma},
              {"pooling", c.pooling == PoolMode::sum ? "sum" : "mean"}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.kind = model_kind_from_string(j.at("kind").get<std::string>());
  c.task = task_from_string(j.at("task").get<std::string>());
  c.in_dim = j.at("in_dim").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.grit_k = j.at("grit_k").get<std::size_t>();
  c.grit_pair_dim = j.at("grit_pair_dim").get<std::size_t>();
  c.d_max = j.at("d_max").get<std::size_t>();
  c.s_max = j.at("s_max").get<std::size_t>();
  c.san_k = j.at("san_k").get<std::size_t>();
  c.san_pe_dim = j.at("san_pe_dim").get<std::size_t>();
  c.san_gamma = j.at("san_gamma").get<double>();
  const auto pool = j.at("pooling").get<std::string>();
  if (pool != "sum" && pool != "mean") throw std::invalid_argument("pooling must be sum or mean, got " + pool);
  c.pooling = pool == "sum" ? PoolMode::sum : PoolMode::mean;
  return c;
}

}  // namespace

std::string checkpoint_to_json(const Model& m) {
  json params = json::array();
  for (const auto& e : m.params().entries()) {
    params.push_back(json{{"name", e.name}, {"shape", e.shape}, {"values", e.values}});
  }
  json doc{{"format", kCheckpointFormat}, {"config", config_to_json(m.config())}, {"params", params}};
  return doc.dump() + "\n";
}

Model checkpoint_from_json(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != kCheckpointFormat) {
      throw ParseError(origin + ": unsupported checkpoint format '" + doc.at("format").get<std::string>() + "'");
    }
    auto cfg = config_from_json(doc.at("config"));
    ParamStore ps;
    for (const auto& e : doc.at("params")) {
      ps.add(e.at("name").get<std::string>(), e.at("shape").get<ad::Shape>(),
             e.at("values").get<std::vector<double>>());
    }
    return Model(std::move(cfg), std::move(ps));
  } catch (const json::exception& e) {
    throw ParseError(origin + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) { write_file(path, checkpoint_to_json(m)); }

Model load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(read_file(path), path.string());
}

// ---- building blocks --------------------------------------------------------

ad::Tensor attention_nodeprob_bias(const ad::Tensor& w, const ad::Tensor& p) {
  if (!p.defined()) return ad::softmax_rows(w);
  const auto v = p.values();
  if (std::none_of(v.begin(), v.end(), [](double x) { return x > 0.0; })) {
    throw std::invalid_argument("attention_nodeprob_bias: every node probability is zero");
  }
  return ad::weighted_softmax_rows(w, p);
}

ad::Tensor pool_weighted(const ad::Tensor& h, const ad::Tensor& p, PoolMode mode) {
  const std::size_t n = h.dim(0), d = h.dim(1);
  ad::Tensor s;
  double total;
  if (p.defined()) {
    s = ad::sum_first(ad::mul_col(h, p));
    total = 0.0;
    for (double v : p.values()) total += v;
  } else {
    s = ad::sum_first(h);
    total = static_cast<double>(n);
  }
  s = ad::reshape(s, {1, d});
  if (mode == PoolMode::sum) return s;
  if (total <= 0.0) throw std::invalid_argument("pool_weighted: mean pooling with zero total probability");
  if (p.defined()) return ad::div(s, ad::sum(p));
  return ad::scale(s, 1.0 / total);
}

namespace detail {

ad::Tensor attention_probs(const ForwardContext& ctx) {
  if (ctx.relaxed && ctx.toggles.node_prob_bias && ctx.node_probs.defined()) return ctx.node_probs;
  return {};
}

void init_ffn_block(ParamStore& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  init_linear(ps, prefix + ".out", d, d, rng);
  init_linear(ps, prefix + ".ffn1", d, 2 * d, rng);
  init_linear(ps, prefix + ".ffn2", 2 * d, d, rng);
}

ad::Tensor ffn_block(const BoundParams& p, const std::string& prefix, const ad::Tensor& h, const ad::Tensor& attn) {
  const auto h1 = ad::add(h, linear(p, prefix + ".out", attn));
  return ad::add(h1, linear(p, prefix + ".ffn2", ad::relu(linear(p, prefix + ".ffn1", h1))));
}

ad::Tensor readout(const ModelConfig& c, const BoundParams& p, const ad::Tensor& h, const ad::Tensor& probs) {
  if (c.task == Task::node_classification) return linear(p, "head", h);
  return linear(p, "head", pool_weighted(h, probs, c.pooling));
}

}  // namespace detail

}  // namespace gtrelax
