#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "dhen/interaction.hpp"

namespace dhen {

enum class EnsembleMethod { kConcat, kSum, kWeightedSum };

const char* ensemble_name(EnsembleMethod method);
EnsembleMethod parse_ensemble(const std::string& name);

struct LayerSpec {
  std::vector<ModuleSpec> modules;
  EnsembleMethod ensemble = EnsembleMethod::kConcat;
  bool dense_token = false;

  // Token count leaving the layer; throws on an invalid combination.
  std::size_t output_count() const;
};

// Mean-pool over embeddings, MLP ending in one logit, sigmoid. bias_only
// replaces everything with a single learned logit.
struct HeadSpec {
  std::vector<std::size_t> hidden{64};
  bool bias_only = false;
};

struct NetworkSpec {
  FeatureConfig features;
  std::vector<LayerSpec> layers;
  HeadSpec head;
  double norm_epsilon = Tape::kDefaultLayerNormEpsilon;

  // m_0, m_1, ..., m_N. Validates every layer against its input count.
  std::vector<std::size_t> token_counts() const;
  void validate() const;
};

struct FlopBreakdown {
  std::uint64_t features = 0;
  std::vector<std::uint64_t> layers;
  std::uint64_t head = 0;

  std::uint64_t layer_total() const;
  std::uint64_t total() const { return features + layer_total() + head; }
};

// Per-sample forward flops: 2 x multiply-adds of every matmul and conv.
FlopBreakdown flop_breakdown(const NetworkSpec& spec);
std::uint64_t count_flops(const NetworkSpec& spec);

// Dense trainable scalars per stage (embedding tables excluded), matching
// what DhenNetwork allocates.
FlopBreakdown parameter_breakdown(const NetworkSpec& spec);

// Intermediate values of one layer_forward, for inspection.
struct LayerTrace {
  bool shortcut_identity = false;
  Var pre_norm;
  Var normalized;
};

class DhenLayer {
 public:
  DhenLayer(const LayerSpec& spec, std::size_t m_in, std::size_t d, std::size_t dense_width, double epsilon,
            Rng& rng, const std::string& prefix);

  EmbeddingBundle forward(Tape& tape, const EmbeddingBundle& x, std::optional<Var> dense_ctx = std::nullopt,
                          LayerTrace* trace = nullptr);

  const LayerSpec& spec() const { return spec_; }
  std::size_t input_count() const { return m_in_; }
  std::size_t output_count() const { return m_out_; }
  std::vector<std::unique_ptr<InteractionModule>>& modules() { return modules_; }
  bool has_shortcut_projection() const { return shortcut_.has_value(); }
  Param* shortcut() { return shortcut_ ? &*shortcut_ : nullptr; }
  Param* ensemble_weights() { return weights_ ? &*weights_ : nullptr; }
  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  std::vector<Param*> parameters();

 private:
  LayerSpec spec_;
  std::size_t m_in_;
  std::size_t m_out_;
  std::size_t d_;
  double epsilon_;
  std::vector<std::unique_ptr<InteractionModule>> modules_;
  std::optional<Param> shortcut_;
  std::optional<Param> weights_;
  std::optional<Param> dense_proj_;
  std::optional<Param> dense_bias_;
  Param gamma_;
  Param beta_;
};

class DhenNetwork {
 public:
  DhenNetwork(NetworkSpec spec, Rng& rng);

  // B probabilities, shape [B].
  Var forward(Tape& tape, const FeatureBatch& batch);
  std::vector<double> predict(const FeatureBatch& batch);

  const NetworkSpec& spec() const { return spec_; }
  FeatureProcessor& features() { return features_; }
  std::vector<DhenLayer>& layers() { return layers_; }
  DenseArch& head() { return head_; }
  Param& head_bias() { return head_bias_; }
  // Parameters that influence the output.
  std::vector<Param*> parameters();
  std::size_t parameter_count();

 private:
  NetworkSpec spec_;
  FeatureProcessor features_;
  std::vector<DhenLayer> layers_;
  DenseArch head_;
  Param head_bias_;
};

}  // namespace dhen
