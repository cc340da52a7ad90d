#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhen/dist_sim.hpp"
#include "dhen/network.hpp"
#include "dhen/sharding.hpp"
#include "dhen/training.hpp"

namespace dhen::cli {

// Raised for malformed configs; path() names the offending key, e.g.
// `network.layers[1].modules[0]`.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::invalid_argument(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Uniform per-layer dense profile given directly instead of derived from
// the network spec.
struct ProfileOverride {
  bool reference = false;
  std::size_t layers = 0;
  double param_bytes = 0.0;
  double activation_bytes = 0.0;
  double flops = 0.0;
  double optimizer_multiplier = 2.0;
};

struct TablesSection {
  std::optional<std::size_t> devices;
  std::optional<double> batch;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::vector<sharding::TableSpec> items;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  bool has_network = false;
  NetworkSpec network;
  std::optional<ProfileOverride> profile;
  TrainConfig train;
  bool has_synthetic = false;
  SyntheticSpec synthetic;
  std::size_t train_samples = 10000;
  std::size_t eval_samples = 2000;
  bool has_cluster = false;
  sim::ClusterSpec cluster;
  bool has_paradigm = false;
  sim::ParadigmSpec paradigm;
  std::size_t global_batch = sim::kReferenceGlobalBatch;
  bool has_tables = false;
  TablesSection tables;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// network section in config format (round-trips through parse_config).
std::string network_to_json(const NetworkSpec& spec);

struct TrainOutcome {
  double final_eval_ne = 0.0;
  std::optional<double> baseline_eval_ne;
  std::optional<double> ne_diff_percent;
};

// Writes metrics.csv, summary.txt and trained_model.json into out_dir.
TrainOutcome cmd_train(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& baseline = std::nullopt);

struct PlanOutcome {
  std::vector<sharding::ShardCost> shards;
  sharding::Placement placement;
  std::optional<double> optimum;
  std::optional<double> ratio;
};

// Writes plan.csv and balance.txt into out_dir.
PlanOutcome cmd_plan(const ExperimentConfig& config, const std::filesystem::path& out_dir);

// Writes simulate_<paradigm>.csv into out_dir and returns the report.
sim::SimReport cmd_simulate(const ExperimentConfig& config, sim::ParadigmKind paradigm,
                            const std::filesystem::path& out_dir);

std::vector<std::size_t> default_sweep();
// Parses "4,8,12"; throws ConfigError on malformed or empty lists.
std::vector<std::size_t> parse_layer_list(const std::string& text);

// Writes compare.csv into out_dir.
std::vector<sim::ComparisonRow> cmd_compare(const ExperimentConfig& config, const std::vector<std::size_t>& layers,
                                            const std::filesystem::path& out_dir);

// Dense profile the simulator uses for the config, with the layer count
// overridden when given.
sim::DenseModelProfile resolve_profile(const ExperimentConfig& config, std::optional<std::size_t> layers = {});

// Embedding plan over the cluster's GPUs; empty without a tables section.
sim::EmbeddingPlan resolve_plan(const ExperimentConfig& config);

// Entry point shared by the dhen binary; returns the process exit code.
int run(int argc, char** argv);

}  // namespace dhen::cli
