#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dhen/features.hpp"

namespace dhen {

enum class ModuleKind { kDotInteraction, kSelfAttention, kConvolution, kLinear, kCrossNet };

const char* module_kind_name(ModuleKind kind);
// Accepts the names produced by module_kind_name.
ModuleKind parse_module_kind(const std::string& name);

struct ModuleSpec {
  ModuleKind kind = ModuleKind::kLinear;
  std::size_t l = 1;
  std::size_t heads = 2;
  std::size_t ffn_width = 0;  // 0 selects 4 * d
  std::size_t channels = 4;
  std::size_t kernel = 3;

  std::size_t resolved_ffn_width(std::size_t d) const { return ffn_width ? ffn_width : 4 * d; }
  // Throws std::invalid_argument when the spec cannot consume m tokens of dim d.
  void validate(std::size_t m, std::size_t d) const;
};

// Per-sample forward flops (2 x multiply-adds of every matmul and conv).
std::uint64_t module_flops(const ModuleSpec& spec, std::size_t m, std::size_t d);

// Number of trainable scalars the module owns.
std::uint64_t module_param_count(const ModuleSpec& spec, std::size_t m, std::size_t d);

// Maps a B x m x d bundle to B x l x d.
class InteractionModule {
 public:
  virtual ~InteractionModule() = default;

  virtual EmbeddingBundle forward(Tape& tape, const EmbeddingBundle& x) = 0;
  virtual std::vector<Param*> parameters() = 0;

  const ModuleSpec& spec() const { return spec_; }
  ModuleKind kind() const { return spec_.kind; }
  std::size_t input_count() const { return m_; }
  std::size_t dim() const { return d_; }
  std::size_t output_count() const { return spec_.l; }
  std::uint64_t flops() const { return module_flops(spec_, m_, d_); }

 protected:
  InteractionModule(const ModuleSpec& spec, std::size_t m, std::size_t d);
  void check_input(const EmbeddingBundle& x) const;

  ModuleSpec spec_;
  std::size_t m_;
  std::size_t d_;
};

// Right-multiplies each sample's d x m matrix by w (m x l): B x m x d -> B x l x d.
Var project_tokens(Tape& tape, Var x, Param& w);

// DLRM pairwise dot products of the m embeddings, mapped to l embeddings.
class DotInteraction : public InteractionModule {
 public:
  DotInteraction(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng, const std::string& prefix);
  EmbeddingBundle forward(Tape& tape, const EmbeddingBundle& x) override;
  std::vector<Param*> parameters() override { return {&w_}; }
  std::size_t pair_count() const { return m_ * (m_ - 1) / 2; }
  Param& weight() { return w_; }

 private:
  std::vector<std::size_t> upper_;
  Param w_;
};

// One post-norm transformer encoder layer over the tokens, then a token
// projection.
class SelfAttention : public InteractionModule {
 public:
  SelfAttention(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng, const std::string& prefix);
  EmbeddingBundle forward(Tape& tape, const EmbeddingBundle& x) override;
  // As forward; also returns each head's B x m x m attention weights.
  EmbeddingBundle forward_with_attention(Tape& tape, const EmbeddingBundle& x, std::vector<Var>* attention);
  std::vector<Param*> parameters() override;
  Param& projection() { return proj_; }

 private:
  Var dense(Tape& tape, Var x, Param& w, Param& b);
  Var norm(Tape& tape, Var x, Param& gamma, Param& beta);

  Param wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  Param ln1_gamma_, ln1_beta_;
  Param w1_, b1_, w2_, b2_;
  Param ln2_gamma_, ln2_beta_;
  Param proj_;
};

// C filters over the d x m image, averaged over channels, then a token
// projection.
class Convolution : public InteractionModule {
 public:
  Convolution(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng, const std::string& prefix);
  EmbeddingBundle forward(Tape& tape, const EmbeddingBundle& x) override;
  std::vector<Param*> parameters() override { return {&filters_, &proj_}; }
  Param& filters() { return filters_; }
  Param& projection() { return proj_; }

 private:
  Param filters_;
  Param proj_;
};

class Linear : public InteractionModule {
 public:
  Linear(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng, const std::string& prefix);
  EmbeddingBundle forward(Tape& tape, const EmbeddingBundle& x) override;
  std::vector<Param*> parameters() override { return {&w_}; }
  Param& weight() { return w_; }

 private:
  Param w_;
};

// u = (X X^T) W + b with W, b in R^{d x l}; column j of u is output token j.
class CrossNet : public InteractionModule {
 public:
  CrossNet(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng, const std::string& prefix);
  EmbeddingBundle forward(Tape& tape, const EmbeddingBundle& x) override;
  std::vector<Param*> parameters() override { return {&w_, &b_}; }
  Param& weight() { return w_; }
  Param& bias() { return b_; }

 private:
  Param w_;
  Param b_;
};

std::unique_ptr<InteractionModule> make_module(const ModuleSpec& spec, std::size_t m, std::size_t d,
                                               Rng& rng, const std::string& prefix);

}  // namespace dhen
