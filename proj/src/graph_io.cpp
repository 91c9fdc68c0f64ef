// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/graph_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace gtrelax {

using nlohmann::json;

namespace {

[[noreturn]] void field_error(const std::string& origin, const std::string& field, const std::string& what) {
  throw ParseError(origin + ": field '" + field + "': " + what);
}

template <class T>
T get_as(const json& j, const std::string& origin, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    field_error(origin, field, e.what());
  }
}

const json& require(const json& doc, const char* key, const std::string& origin) {
  if (!doc.contains(key)) field_error(origin, key, "missing");
  return doc.at(key);
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string graph_to_json(const Graph& g) {
  json doc;
  doc["n"] = g.n;
  json edges = json::array();
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = i + 1; j < g.n; ++j)
      if (g.adjacency(i, j) != 0.0) edges.push_back({i, j, g.adjacency(i, j)});
  doc["edges"] = std::move(edges);
  json feats = json::array();
  for (std::size_t i = 0; i < g.n; ++i) {
    const auto r = g.features.row(i);
    feats.push_back(std::vector<double>(r.begin(), r.end()));
  }
  doc["features"] = std::move(feats);
  doc["node_labels"] = g.node_labels ? json(*g.node_labels) : json(nullptr);
  doc["graph_label"] = g.graph_label ? json(*g.graph_label) : json(nullptr);
  doc["labeled_mask"] = g.labeled_mask ? json(*g.labeled_mask) : json(nullptr);
  return doc.dump() + "\n";
}

Graph graph_from_json(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
  if (!doc.is_object()) throw ParseError(origin + ": top level must be an object");
  Graph g;
  g.n = get_as<std::size_t>(require(doc, "n", origin), origin, "n");
  g.adjacency = Matrix(g.n, g.n);
  const auto& edges = require(doc, "edges", origin);
  if (!edges.is_array()) field_error(origin, "edges", "expected an array");
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const std::string field = "edges[" + std::to_string(k) + "]";
    const auto& e = edges[k];
    if (!e.is_array() || e.size() != 3) field_error(origin, field, "expected [i, j, weight]");
    const auto i = get_as<std::size_t>(e[0], origin, field);
    const auto j = get_as<std::size_t>(e[1], origin, field);
    const auto w = get_as<double>(e[2], origin, field);
    if (i >= g.n || j >= g.n) field_error(origin, field, "node index out of range");
    if (i == j) field_error(origin, field, "self loop");
    if (g.adjacency(i, j) != 0.0 && g.adjacency(i, j) != w) {
      field_error(origin, field, "asymmetric adjacency: (" + std::to_string(i) + ", " + std::to_string(j) +
                                     ") listed with two weights");
    }
    g.adjacency(i, j) = g.adjacency(j, i) = w;
  }
  const auto& feats = require(doc, "features", origin);
  if (!feats.is_array() || feats.size() != g.n) field_error(origin, "features", "expected n rows");
  const std::size_t d = g.n ? feats[0].size() : 0;
  g.features = Matrix(g.n, d);
  for (std::size_t i = 0; i < g.n; ++i) {
    const std::string field = "features[" + std::to_string(i) + "]";
    auto row = get_as<std::vector<double>>(feats[i], origin, field);
    if (row.size() != d) field_error(origin, field, "ragged feature rows");
    std::copy(row.begin(), row.end(), g.features.row(i).begin());
  }
  if (doc.contains("node_labels") && !doc["node_labels"].is_null())
    g.node_labels = get_as<std::vector<int>>(doc["node_labels"], origin, "node_labels");
  if (doc.contains("graph_label") && !doc["graph_label"].is_null())
    g.graph_label = get_as<int>(doc["graph_label"], origin, "graph_label");
  if (doc.contains("labeled_mask") && !doc["labeled_mask"].is_null())
    g.labeled_mask = get_as<std::vector<std::uint8_t>>(doc["labeled_mask"], origin, "labeled_mask");
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(origin + ": " + e.what());
  }
  return g;
}

void save_graph(const Graph& g, const std::filesystem::path& path) { write_file(path, graph_to_json(g)); }

Graph load_graph(const std::filesystem::path& path) { return graph_from_json(read_file(path), path.string()); }

namespace {

std::string graph_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "graph_%05zu.json", i);
  return buf;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ds.graphs.size(); ++i) save_graph(ds.graphs[i], dir / graph_file_name(i));
  json split;
  split["task"] = to_string(ds.task);
  split["num_classes"] = ds.num_classes;
  split["n_graphs"] = ds.graphs.size();
  split["train"] = ds.split.train;
  split["val"] = ds.split.val;
  split["test"] = ds.split.test;
  write_file(dir / "split.json", split.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto split_path = dir / "split.json";
  json split;
  try {
    split = json::parse(read_file(split_path));
  } catch (const json::parse_error& e) {
    throw ParseError(split_path.string() + ": " + e.what());
  }
  const std::string origin = split_path.string();
  Dataset ds;
  try {
    ds.task = task_from_string(get_as<std::string>(require(split, "task", origin), origin, "task"));
  } catch (const std::invalid_argument& e) {
    throw ParseError(origin + ": " + e.what());
  }
  ds.num_classes = get_as<std::size_t>(require(split, "num_classes", origin), origin, "num_classes");
  const auto count = get_as<std::size_t>(require(split, "n_graphs", origin), origin, "n_graphs");
  ds.split.train = get_as<std::vector<std::size_t>>(require(split, "train", origin), origin, "train");
  ds.split.val = get_as<std::vector<std::size_t>>(require(split, "val", origin), origin, "val");
  ds.split.test = get_as<std::vector<std::size_t>>(require(split, "test", origin), origin, "test");
  for (std::size_t i = 0; i < count; ++i) ds.graphs.push_back(load_graph(dir / graph_file_name(i)));
  try {
    ds.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(dir.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace gtrelax
