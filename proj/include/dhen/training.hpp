#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhen/network.hpp"

namespace dhen {

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::size_t step, double loss);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Normalized entropy: mean log-loss divided by the entropy of the empirical
// positive rate. Probabilities are clamped to [kProbClamp, 1 - kProbClamp].
double ne_metric(std::span<const double> probs, std::span<const double> labels);

// ---------------------------------------------------------------------------
// Synthetic CTR data with planted interactions.

struct PlantedTerm {
  std::vector<std::size_t> fields;
  double coefficient = 1.0;

  std::size_t order() const { return fields.size(); }
};

enum class LatentKind { kRademacher, kGaussian };

struct SyntheticSpec {
  std::vector<std::size_t> cardinalities;
  std::size_t dense_width = 1;
  std::vector<PlantedTerm> terms;
  // Empty means no dense contribution.
  std::vector<double> dense_coefficients;
  double bias = 0.0;
  // Labels ~ Bernoulli(sigmoid(logit / temperature)); infinity is pure noise.
  double temperature = 1.0;
  LatentKind latent = LatentKind::kRademacher;
  std::size_t ids_per_field = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  FeatureBatch features;
  std::vector<double> labels;
  std::vector<double> logits;

  std::size_t size() const { return labels.size(); }
  Dataset subset(std::span<const std::size_t> rows) const;
  Dataset slice(std::size_t begin, std::size_t end) const;
};

// Per-id latent scalars are fixed by spec.seed; samples are drawn from a
// stream derived from (spec.seed, stream) so train and eval sets share the
// same planted function.
Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t n, std::uint64_t stream = 0);

// Per-field latent tables used by generate_synthetic.
std::vector<std::vector<double>> synthetic_latents(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Param*> params, AdamConfig config);

  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Param*> params_;
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t steps = 1000;
  AdamConfig adam;
  std::size_t eval_every = 100;
  std::uint64_t seed = 0;
  // Off keeps metric files byte-reproducible (wall_ms is written as 0).
  bool record_wall_clock = false;

  void validate() const;
};

struct MetricRow {
  std::size_t step = 0;
  double train_ne = 0.0;
  double eval_ne = 0.0;
  double wall_ms = 0.0;
};

struct MetricLog {
  std::vector<MetricRow> rows;
  // Mean training log-loss of every step, in order.
  std::vector<double> losses;

  // Header `step,train_ne,eval_ne,wall_ms`.
  void write_csv(std::ostream& out) const;
  std::string to_csv() const;
  static MetricLog read_csv(std::istream& in);
};

// Evaluates NE of the network over a dataset in fixed-size chunks.
double evaluate_ne(DhenNetwork& net, const Dataset& data, std::size_t chunk = 4096);

MetricLog train(DhenNetwork& net, const Dataset& train_set, const Dataset& eval_set, const TrainConfig& cfg);

}  // namespace dhen
