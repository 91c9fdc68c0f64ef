// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment plumbing behind the command-line tool: dataset generation,
// training with validation-based selection, attack sweeps, toggle ablations
// and CSV reports.
//
// Output directory layout:
//   dataset/                  graph_NNNNN.json + split.json
//   checkpoints/<model>.json  parameters + architecture
//   checkpoints/<model>.log.json
//   perturbations/<model>/b<budget>_s<seed>_g<graph>[_<toggles>].json
//   results/attack.csv, results/ablate_<model>.csv
//   report/<results stem>.csv

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtrelax/attack.hpp"
#include "gtrelax/graph.hpp"
#include "gtrelax/models.hpp"

namespace gtrelax::harness {

/// Invalid configuration or command-line input (exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training loss became NaN or infinite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DatasetKind { cluster, tree };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::cluster;
  std::uint64_t seed = 0;
  ClusterDatasetConfig cluster;
  TreeDatasetConfig tree;
};

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 3e-3;
  double weight_decay = 0.0;
  /// 0 uses every training graph each epoch.
  std::size_t graphs_per_epoch = 0;
  std::uint64_t seed = 0;
};

struct SweepConfig {
  /// Base attack settings; budget_fraction and seed are set per cell.
  attack::AttackConfig attack;
  /// Ascending budget fractions.
  std::vector<double> budgets = {0.0025, 0.005, 0.01, 0.02, 0.05, 0.1};
  std::vector<std::uint64_t> seeds = {0, 1};
  /// The first n test graphs are attacked.
  std::size_t n_graphs = 20;
  bool random_baseline = true;
  bool transfer = true;
  /// Ablation budget.
  double ablation_budget = 0.01;
  std::size_t max_candidates = 100;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<ModelKind> models = {kAllModels[0], kAllModels[1], kAllModels[2], kAllModels[3]};
  /// Architecture shared by every model; kind, task, in_dim and num_classes
  /// come from the model list and the dataset.
  ModelConfig model;
  TrainConfig train;
  SweepConfig sweep;

  /// Throws ConfigError.
  void validate() const;
  ModelConfig model_config(ModelKind kind, const Dataset& ds) const;
};

/// Unknown keys and ill-typed values throw ConfigError naming the key.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);
/// 16 hex digits identifying a configuration.
std::string config_hash(const ExperimentConfig& cfg);

// ---- generate / train ----------------------------------------------------------

Dataset generate_dataset(const DatasetSpec& spec);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  /// 0 is the initialization.
  std::size_t best_epoch = 0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
};

/// Adam with per-graph steps; keeps the parameters with the highest
/// validation accuracy (earliest on ties). Deterministic in cfg.seed.
TrainResult train_model(const Dataset& ds, const ModelConfig& mc, const TrainConfig& cfg);

/// Mean per-graph accuracy (percent) over `indices`.
double evaluate(const Model& model, const Dataset& ds, const std::vector<std::size_t>& indices);

// ---- results -----------------------------------------------------------------------

struct ResultRow {
  std::string model;
  /// clean, adaptive, random or transfer.
  std::string attack;
  double budget = 0.0;
  /// Enabled toggles joined by '+', or "none".
  std::string toggles;
  std::uint64_t seed = 0;
  /// Mean per-graph accuracy in percent.
  double accuracy = 0.0;
  std::size_t graphs = 0;
  std::string config_hash;

  bool operator==(const ResultRow&) const = default;
};

struct ResultsTable {
  std::vector<ResultRow> rows;
  bool operator==(const ResultsTable&) const = default;
};

std::string table_to_csv(const ResultsTable& t);
ResultsTable table_from_csv(const std::string& text, const std::string& origin = "<string>");

struct SummaryRow {
  double budget = 0.0;
  std::string model;
  std::string attack;
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population std over seeds per (model, attack, budget, toggles),
/// followed by a "strongest" series per (model, budget): the attack with the
/// lowest mean. Combinations missing from some budgets are reported through
/// `warnings` and left out of the strongest series for that budget.
std::vector<SummaryRow> summarize(const ResultsTable& t, std::vector<std::string>* warnings = nullptr);
std::string summary_to_csv(const std::vector<SummaryRow>& rows);

// ---- commands ----------------------------------------------------------------------

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<ModelKind> model;
  std::optional<double> budget;
  std::optional<RelaxToggles> toggles;
};

/// Each command writes below `out` and logs progress to `log`.
void cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& out, const Overrides& o,
                  std::ostream& log);
void cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, const Overrides& o,
               std::ostream& log);
ResultsTable cmd_attack(const ExperimentConfig& cfg, const std::filesystem::path& out, const Overrides& o,
                        std::ostream& log);
ResultsTable cmd_ablate(const ExperimentConfig& cfg, const std::filesystem::path& out, const Overrides& o,
                        std::ostream& log);
/// Throws std::runtime_error when `out`/results holds no CSV.
void cmd_report(const std::filesystem::path& out, std::ostream& log);

/// Toggle combinations of an ablation grid: every on/off assignment of the
/// model's own relaxations (and node_prob_bias in injection mode), the
/// all-off row dropped in injection mode.
std::vector<RelaxToggles> ablation_grid(ModelKind kind, attack::AttackMode mode);

std::string toggles_label(const RelaxToggles& t);

}  // namespace gtrelax::harness
