// knnx: k-NN and influence-function explanations, label agreement and
// leave-k-out counterfactual experiments.
//
//   knnx train          --config cfg.json [--out DIR] [--seed N]
//   knnx agreement      --config cfg.json
//   knnx counterfactual --config cfg.json [--workers N] [--k 1,5] [--method knn|influence|both]
//   knnx report         --config cfg.json
//
// Flags override the config file. Exit codes: 0 success, 1 validation error,
// 2 runtime error.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "knnx/experiment.hpp"

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

std::vector<std::size_t> parse_k_list(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v < 1) throw knnx::ConfigError({"--k: '" + item + "' is not a positive integer"});
    ks.push_back(static_cast<std::size_t>(v));
  }
  if (ks.empty()) throw knnx::ConfigError({"--k: empty list"});
  return ks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"k-NN vs. influence-function instance explanations"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> out_dir;
  std::optional<std::string> k_list;
  std::optional<std::string> method;

  app.add_option("--config", config_path, "Experiment config (JSON)")->required();
  app.add_option("--seed", seed, "Master seed (overrides master_seed)");
  app.add_option("--workers", workers, "Worker threads for counterfactual trials")->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "Output directory (overrides output_dir)");
  app.add_option("--k", k_list, "Comma-separated k values, e.g. 1,5,10");
  app.add_option("--method", method, "knn, influence or both")->check(CLI::IsMember({"knn", "influence", "both"}));
  app.fallthrough();

  auto* train_cmd = app.add_subcommand("train", "Train the base model and write model.json");
  auto* agreement_cmd = app.add_subcommand("agreement", "Per-layer 1-NN label agreement table");
  auto* cf_cmd = app.add_subcommand("counterfactual", "Leave-k-out retraining with k-NN and influence removal sets");
  auto* report_cmd = app.add_subcommand("report", "Re-render tables from records.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    auto cfg = knnx::load_config(config_path);
    if (seed) cfg.master_seed = *seed;
    if (workers) cfg.workers = *workers;
    if (out_dir) cfg.output_dir = *out_dir;
    if (k_list) cfg.ks = parse_k_list(*k_list);
    if (method) {
      if (*method == "both")
        cfg.methods = {knnx::Method::knn, knnx::Method::influence};
      else
        cfg.methods = {knnx::parse_method(*method)};
    }

    if (train_cmd->parsed()) {
      const auto r = knnx::cmd_train(cfg);
      std::cout << r.digest << '\n';
    } else if (agreement_cmd->parsed()) {
      const auto model = knnx::load_trained_model(cfg);
      const auto rows = knnx::cmd_agreement(cfg, model);
      std::ostringstream csv;
      knnx::write_agreement(csv, std::cout, rows);
    } else if (cf_cmd->parsed()) {
      const auto model = knnx::load_trained_model(cfg);
      knnx::cmd_counterfactual(cfg, model);
      knnx::cmd_report(cfg, std::cout);
    } else if (report_cmd->parsed()) {
      knnx::cmd_report(cfg, std::cout);
    }
  } catch (const knnx::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
