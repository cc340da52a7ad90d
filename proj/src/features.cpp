#include "dhen/features.hpp"

#include <stdexcept>

namespace dhen {

void FeatureConfig::validate() const {
  if (dim == 0) throw std::invalid_argument("features: embedding dim must be positive");
  if (dense_width == 0) throw std::invalid_argument("features: dense width must be positive");
  for (const auto& field : sparse) {
    if (field.rows == 0) throw std::invalid_argument("features: field '" + field.name + "' has no rows");
  }
  for (auto w : dense_hidden) {
    if (w == 0) throw std::invalid_argument("features: dense hidden widths must be positive");
  }
}

void FeatureBatch::validate(const FeatureConfig& config) const {
  if (batch_size == 0) throw std::invalid_argument("feature batch is empty");
  if (sparse.size() != config.sparse.size()) {
    throw std::invalid_argument("feature batch has " + std::to_string(sparse.size()) +
                                " sparse fields, config declares " +
                                std::to_string(config.sparse.size()));
  }
  for (std::size_t f = 0; f < sparse.size(); ++f) {
    if (!sparse[f] || sparse[f]->size() != batch_size) {
      throw std::invalid_argument("sparse field '" + config.sparse[f].name +
                                  "' does not have one id list per sample");
    }
  }
  if (dense.rank() != 2 || dense.dim(0) != batch_size || dense.dim(1) != config.dense_width) {
    throw std::invalid_argument("dense features have shape " + shape_string(dense.shape()) +
                                ", expected [" + std::to_string(batch_size) + "x" +
                                std::to_string(config.dense_width) + "]");
  }
}

EmbeddingBundle::EmbeddingBundle(Var tensor) : tensor_(tensor) {
  if (tensor.shape().size() != 3) {
    throw ShapeError("embedding bundle must be B x m x d, got " + shape_string(tensor.shape()));
  }
}

EmbeddingTable::EmbeddingTable(std::string name, std::size_t rows, std::size_t dim, Rng& rng)
    : values_(std::move(name), fan_in_uniform({rows, dim}, dim, rng)) {}

Var EmbeddingTable::lookup(Tape& tape, std::shared_ptr<const IdBags> ids) {
  for (const auto& bag : *ids) {
    for (auto id : bag) {
      if (id >= rows()) {
        throw std::out_of_range("table '" + name() + "': id " + std::to_string(id) +
                                " out of range [0," + std::to_string(rows()) + ")");
      }
    }
  }
  return embedding_bag(tape.param(values_), std::move(ids));
}

DenseArch::DenseArch(std::size_t input_width, std::vector<std::size_t> hidden,
                     std::size_t output_width, Rng& rng, const std::string& prefix)
    : input_width_(input_width), output_width_(output_width) {
  std::vector<std::size_t> widths{input_width};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(output_width);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::string idx = std::to_string(i);
    weights_.emplace_back(prefix + ".w" + idx, fan_in_uniform({widths[i], widths[i + 1]}, widths[i], rng));
    biases_.emplace_back(prefix + ".b" + idx, fan_in_uniform({widths[i + 1]}, widths[i], rng));
  }
}

Var DenseArch::forward(Tape& tape, Var x) {
  if (x.shape().size() != 2 || x.dim(1) != input_width_) {
    throw ShapeError("dense arch expects [B x " + std::to_string(input_width_) + "], got " +
                     shape_string(x.shape()));
  }
  Var h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    h = add(matmul(h, tape.param(weights_[i])), tape.param(biases_[i]));
    if (i + 1 < weights_.size()) h = relu(h);
  }
  return h;
}

std::vector<Param*> DenseArch::parameters() {
  std::vector<Param*> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(&weights_[i]);
    out.push_back(&biases_[i]);
  }
  return out;
}

std::uint64_t DenseArch::flops() const {
  std::uint64_t total = 0;
  for (const auto& w : weights_) total += 2ULL * w.value.dim(0) * w.value.dim(1);
  return total;
}

EmbeddingBundle assemble_x0(std::span<const Var> sparse_outputs, Var dense_output) {
  const Shape& ds = dense_output.shape();
  if (ds.size() != 2) throw ShapeError("assemble_x0: dense output must be B x d, got " + shape_string(ds));
  const std::size_t batch = ds[0];
  const std::size_t d = ds[1];
  std::vector<Var> tokens;
  tokens.reserve(sparse_outputs.size() + 1);
  for (const Var& s : sparse_outputs) {
    if (s.shape() != ds) {
      throw ShapeError("assemble_x0: sparse output " + shape_string(s.shape()) +
                       " disagrees with dense output " + shape_string(ds));
    }
    tokens.push_back(reshape(s, {batch, 1, d}));
  }
  tokens.push_back(reshape(dense_output, {batch, 1, d}));
  if (tokens.size() == 1) return EmbeddingBundle(tokens[0]);
  return EmbeddingBundle(concat(tokens, 1));
}

FeatureProcessor::FeatureProcessor(const FeatureConfig& config, Rng& rng)
    : config_(config),
      dense_((config.validate(), config.dense_width), config.dense_hidden, config.dim, rng, "dense") {
  tables_.reserve(config.sparse.size());
  for (const auto& field : config.sparse) tables_.emplace_back(field.name, field.rows, config.dim, rng);
}

EmbeddingBundle FeatureProcessor::forward(Tape& tape, const FeatureBatch& batch) {
  batch.validate(config_);
  std::vector<Var> sparse;
  sparse.reserve(tables_.size());
  for (std::size_t f = 0; f < tables_.size(); ++f) sparse.push_back(tables_[f].lookup(tape, batch.sparse[f]));
  Var dense = dense_.forward(tape, tape.constant(batch.dense));
  return assemble_x0(sparse, dense);
}

std::vector<Param*> FeatureProcessor::parameters() {
  std::vector<Param*> out;
  for (auto& t : tables_) out.push_back(&t.values());
  for (Param* p : dense_.parameters()) out.push_back(p);
  return out;
}

}  // namespace dhen
