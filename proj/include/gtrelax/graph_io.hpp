// SPDX-License-Identifier: Apache-2.0
#pragma once

// Graph files are single JSON documents:
//   {"n": int, "edges": [[i, j, weight], ...], "features": [[...], ...],
//    "node_labels": [...] | null, "graph_label": int | null,
//    "labeled_mask": [...] | null}
// Edges list the upper triangle only (i < j). A dataset directory holds one
// graph_NNNNN.json per graph plus split.json:
//   {"task": "node" | "graph", "num_classes": int,
//    "train": [...], "val": [...], "test": [...]}

#include <filesystem>
#include <stdexcept>
#include <string>

#include "gtrelax/graph.hpp"

namespace gtrelax {

/// Malformed or invalid graph/dataset file. The message names the file and
/// the offending field or parse position.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string graph_to_json(const Graph& g);
Graph graph_from_json(const std::string& text, const std::string& origin = "<string>");

void save_graph(const Graph& g, const std::filesystem::path& path);
Graph load_graph(const std::filesystem::path& path);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace gtrelax
