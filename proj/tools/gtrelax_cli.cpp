// SPDX-License-Identifier: Apache-2.0
// gtrelax: generate datasets, train models, run attack sweeps and ablations,
// and summarize the result tables.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gtrelax/harness.hpp"

namespace {

namespace h = gtrelax::harness;

constexpr int kValidationError = 2;

struct Args {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> model;
  std::optional<double> budget;
  std::optional<std::string> toggles;
};

void add_common(CLI::App* sub, Args& a, bool needs_config) {
  auto* c = sub->add_option("--config", a.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  if (needs_config) c->required();
  sub->add_option("--out", a.out, "output directory")->required();
  sub->add_option("--seed", a.seed, "override the seed (dataset, training or attack)");
  sub->add_option("--model", a.model, "restrict to one model: gcn, grit, graphormer, san");
  sub->add_option("--budget", a.budget, "single budget fraction instead of the configured list")
      ->check(CLI::Range(0.0, 1.0));
  sub->add_option("--toggles", a.toggles, "relaxations to enable: comma list, 'all' or 'none'");
}

h::Overrides overrides(const Args& a) {
  h::Overrides o;
  o.seed = a.seed;
  o.budget = a.budget;
  try {
    if (a.model) o.model = gtrelax::model_kind_from_string(*a.model);
    if (a.toggles) o.toggles = gtrelax::toggles_from_list(*a.toggles);
  } catch (const std::invalid_argument& e) {
    throw h::ConfigError(e.what());
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive structure attacks on graph transformers"};
  app.require_subcommand(1);
  Args args;
  auto* gen = app.add_subcommand("generate", "write the synthetic dataset");
  auto* train = app.add_subcommand("train", "train models and save checkpoints");
  auto* atk = app.add_subcommand("attack", "adaptive, random and transfer attacks over the budget list");
  auto* abl = app.add_subcommand("ablate", "adaptive attacks over the relaxation toggle grid");
  auto* rep = app.add_subcommand("report", "summarize result tables into CSV series");
  for (auto* s : {gen, train, atk, abl}) add_common(s, args, true);
  rep->add_option("--out", args.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidationError;
  }

  try {
    const std::filesystem::path out = args.out;
    if (rep->parsed()) {
      h::cmd_report(out, std::cerr);
      return 0;
    }
    const auto cfg = h::load_config(args.config);
    const auto o = overrides(args);
    if (gen->parsed()) h::cmd_generate(cfg, out, o, std::cerr);
    if (train->parsed()) h::cmd_train(cfg, out, o, std::cerr);
    if (atk->parsed()) h::cmd_attack(cfg, out, o, std::cerr);
    if (abl->parsed()) h::cmd_ablate(cfg, out, o, std::cerr);
  } catch (const h::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
