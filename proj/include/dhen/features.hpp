#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dhen/random.hpp"
#include "dhen/tape.hpp"

namespace dhen {

struct SparseFieldSpec {
  std::string name;
  std::size_t rows = 0;
};

struct FeatureConfig {
  std::size_t dim = 8;
  std::vector<SparseFieldSpec> sparse;
  std::size_t dense_width = 4;
  std::vector<std::size_t> dense_hidden;

  // m of X_0: one token per sparse field plus the dense output.
  std::size_t token_count() const { return sparse.size() + 1; }
  void validate() const;
};

// A batch of raw features. sparse[f][b] lists the ids of field f in sample b.
struct FeatureBatch {
  std::size_t batch_size = 0;
  std::vector<std::shared_ptr<const IdBags>> sparse;
  Tensor dense;

  void validate(const FeatureConfig& config) const;
};

// B x m x d list of embeddings.
class EmbeddingBundle {
 public:
  explicit EmbeddingBundle(Var tensor);

  Var tensor() const { return tensor_; }
  std::size_t batch() const { return tensor_.dim(0); }
  std::size_t count() const { return tensor_.dim(1); }
  std::size_t dim() const { return tensor_.dim(2); }

 private:
  Var tensor_;
};

class EmbeddingTable {
 public:
  EmbeddingTable(std::string name, std::size_t rows, std::size_t dim, Rng& rng);

  // Sum-pooled lookup, one output row per bag.
  Var lookup(Tape& tape, std::shared_ptr<const IdBags> ids);

  const std::string& name() const { return values_.name; }
  std::size_t rows() const { return values_.value.dim(0); }
  std::size_t dim() const { return values_.value.dim(1); }
  Param& values() { return values_; }
  const Param& values() const { return values_; }

 private:
  Param values_;
};

// MLP with relu between layers and a linear output layer.
class DenseArch {
 public:
  DenseArch(std::size_t input_width, std::vector<std::size_t> hidden, std::size_t output_width,
            Rng& rng, const std::string& prefix = "dense");

  Var forward(Tape& tape, Var x);

  std::size_t input_width() const { return input_width_; }
  std::size_t output_width() const { return output_width_; }
  std::vector<Param*> parameters();
  std::vector<Param>& weights() { return weights_; }
  std::vector<Param>& biases() { return biases_; }
  std::uint64_t flops() const;

 private:
  std::size_t input_width_;
  std::size_t output_width_;
  std::vector<Param> weights_;
  std::vector<Param> biases_;
};

// Concatenates per-field B x d outputs (declaration order) and the dense
// output (last) into X_0.
EmbeddingBundle assemble_x0(std::span<const Var> sparse_outputs, Var dense_output);

class FeatureProcessor {
 public:
  FeatureProcessor(const FeatureConfig& config, Rng& rng);

  EmbeddingBundle forward(Tape& tape, const FeatureBatch& batch);

  const FeatureConfig& config() const { return config_; }
  std::vector<EmbeddingTable>& tables() { return tables_; }
  DenseArch& dense() { return dense_; }
  std::vector<Param*> parameters();
  std::uint64_t flops() const { return dense_.flops(); }

 private:
  FeatureConfig config_;
  std::vector<EmbeddingTable> tables_;
  DenseArch dense_;
};

}  // namespace dhen
