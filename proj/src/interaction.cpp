#include "dhen/interaction.hpp"

#include <cmath>
#include <stdexcept>

namespace dhen {

const char* module_kind_name(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::kDotInteraction: return "dot-interaction";
    case ModuleKind::kSelfAttention: return "self-attention";
    case ModuleKind::kConvolution: return "convolution";
    case ModuleKind::kLinear: return "linear";
    case ModuleKind::kCrossNet: return "cross-net";
  }
  return "unknown";
}

ModuleKind parse_module_kind(const std::string& name) {
  for (ModuleKind k : {ModuleKind::kDotInteraction, ModuleKind::kSelfAttention, ModuleKind::kConvolution,
                       ModuleKind::kLinear, ModuleKind::kCrossNet}) {
    if (name == module_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown module kind '" + name + "'");
}

void ModuleSpec::validate(std::size_t m, std::size_t d) const {
  const std::string who = module_kind_name(kind);
  if (m == 0 || d == 0) throw std::invalid_argument(who + ": empty input bundle");
  if (l == 0) throw std::invalid_argument(who + ": output count l must be positive");
  switch (kind) {
    case ModuleKind::kDotInteraction:
      if (m < 2) throw std::invalid_argument(who + ": needs at least 2 embeddings to form pairs, got " + std::to_string(m));
      break;
    case ModuleKind::kSelfAttention:
      if (heads == 0 || d % heads != 0) {
        throw std::invalid_argument(who + ": dim " + std::to_string(d) + " not divisible by " +
                                    std::to_string(heads) + " heads");
      }
      break;
    case ModuleKind::kConvolution:
      if (channels == 0) throw std::invalid_argument(who + ": channel count must be positive");
      if (kernel == 0 || kernel % 2 == 0) {
        throw std::invalid_argument(who + ": kernel extent must be odd, got " + std::to_string(kernel));
      }
      break;
    case ModuleKind::kLinear:
    case ModuleKind::kCrossNet:
      break;
  }
}

std::uint64_t module_flops(const ModuleSpec& spec, std::size_t m, std::size_t d) {
  const std::uint64_t mm = m, dd = d, ll = spec.l;
  const std::uint64_t token_projection = 2 * dd * mm * ll;
  switch (spec.kind) {
    case ModuleKind::kDotInteraction: {
      const std::uint64_t h = mm * (mm - 1) / 2;
      return 2 * mm * mm * dd + 2 * h * dd * ll;
    }
    case ModuleKind::kSelfAttention: {
      const std::uint64_t f = spec.resolved_ffn_width(d);
      return 4 * 2 * mm * dd * dd + 2 * 2 * mm * mm * dd + 2 * 2 * mm * dd * f + token_projection;
    }
    case ModuleKind::kConvolution: {
      const std::uint64_t k = spec.kernel;
      return 2 * spec.channels * k * k * dd * mm + token_projection;
    }
    case ModuleKind::kLinear:
      return token_projection;
    case ModuleKind::kCrossNet:
      return 2 * dd * dd * mm + 2 * dd * dd * ll;
  }
  return 0;
}

std::uint64_t module_param_count(const ModuleSpec& spec, std::size_t m, std::size_t d) {
  const std::uint64_t mm = m, dd = d, ll = spec.l;
  switch (spec.kind) {
    case ModuleKind::kDotInteraction:
      return mm * (mm - 1) / 2 * dd * ll;
    case ModuleKind::kSelfAttention: {
      const std::uint64_t f = spec.resolved_ffn_width(d);
      return 4 * (dd * dd + dd) + (dd * f + f) + (f * dd + dd) + 4 * dd + mm * ll;
    }
    case ModuleKind::kConvolution:
      return static_cast<std::uint64_t>(spec.channels) * spec.kernel * spec.kernel + mm * ll;
    case ModuleKind::kLinear:
      return mm * ll;
    case ModuleKind::kCrossNet:
      return 2 * dd * ll;
  }
  return 0;
}

InteractionModule::InteractionModule(const ModuleSpec& spec, std::size_t m, std::size_t d)
    : spec_(spec), m_(m), d_(d) {
  spec_.validate(m, d);
}

void InteractionModule::check_input(const EmbeddingBundle& x) const {
  if (x.count() != m_ || x.dim() != d_) {
    throw ShapeError(std::string(module_kind_name(spec_.kind)) + ": expects " + std::to_string(m_) +
                     " embeddings of dim " + std::to_string(d_) + ", got " +
                     shape_string(x.tensor().shape()));
  }
}

Var project_tokens(Tape& tape, Var x, Param& w) {
  return transpose(matmul(transpose(x), tape.param(w)));
}

// ---------------------------------------------------------------------------

DotInteraction::DotInteraction(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng,
                               const std::string& prefix)
    : InteractionModule(spec, m, d),
      w_(prefix + ".w_m", fan_in_uniform({m * (m - 1) / 2, d * spec.l}, m * (m - 1) / 2, rng)) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) upper_.push_back(i * m + j);
  }
}

EmbeddingBundle DotInteraction::forward(Tape& tape, const EmbeddingBundle& x) {
  check_input(x);
  Var t = x.tensor();
  Var gram = matmul(t, transpose(t));
  Var pairs = gather(gram, upper_);
  Var u = matmul(pairs, tape.param(w_));
  return EmbeddingBundle(reshape(u, {x.batch(), spec_.l, d_}));
}

// ---------------------------------------------------------------------------

SelfAttention::SelfAttention(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng,
                             const std::string& prefix)
    : InteractionModule(spec, m, d),
      wq_(prefix + ".wq", fan_in_uniform({d, d}, d, rng)),
      bq_(prefix + ".bq", Tensor({d}, 0.0)),
      wk_(prefix + ".wk", fan_in_uniform({d, d}, d, rng)),
      bk_(prefix + ".bk", Tensor({d}, 0.0)),
      wv_(prefix + ".wv", fan_in_uniform({d, d}, d, rng)),
      bv_(prefix + ".bv", Tensor({d}, 0.0)),
      wo_(prefix + ".wo", fan_in_uniform({d, d}, d, rng)),
      bo_(prefix + ".bo", Tensor({d}, 0.0)),
      ln1_gamma_(prefix + ".ln1.gamma", Tensor({d}, 1.0)),
      ln1_beta_(prefix + ".ln1.beta", Tensor({d}, 0.0)),
      w1_(prefix + ".ffn.w1", fan_in_uniform({d, spec.resolved_ffn_width(d)}, d, rng)),
      b1_(prefix + ".ffn.b1", Tensor({spec.resolved_ffn_width(d)}, 0.0)),
      w2_(prefix + ".ffn.w2", fan_in_uniform({spec.resolved_ffn_width(d), d}, spec.resolved_ffn_width(d), rng)),
      b2_(prefix + ".ffn.b2", Tensor({d}, 0.0)),
      ln2_gamma_(prefix + ".ln2.gamma", Tensor({d}, 1.0)),
      ln2_beta_(prefix + ".ln2.beta", Tensor({d}, 0.0)),
      proj_(prefix + ".w", fan_in_uniform({m, spec.l}, m, rng)) {}

Var SelfAttention::dense(Tape& tape, Var x, Param& w, Param& b) {
  return add(matmul(x, tape.param(w)), tape.param(b));
}

Var SelfAttention::norm(Tape& tape, Var x, Param& gamma, Param& beta) {
  return add(mul(layer_norm(x), tape.param(gamma)), tape.param(beta));
}

EmbeddingBundle SelfAttention::forward(Tape& tape, const EmbeddingBundle& x) {
  return forward_with_attention(tape, x, nullptr);
}

EmbeddingBundle SelfAttention::forward_with_attention(Tape& tape, const EmbeddingBundle& x,
                                                      std::vector<Var>* attention) {
  check_input(x);
  Var t = x.tensor();
  Var q = dense(tape, t, wq_, bq_);
  Var k = dense(tape, t, wk_, bk_);
  Var v = dense(tape, t, wv_, bv_);
  const std::size_t hd = d_ / spec_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> heads;
  heads.reserve(spec_.heads);
  for (std::size_t h = 0; h < spec_.heads; ++h) {
    Var qh = slice(q, 2, h * hd, (h + 1) * hd);
    Var kh = slice(k, 2, h * hd, (h + 1) * hd);
    Var vh = slice(v, 2, h * hd, (h + 1) * hd);
    Var weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 2);
    if (attention) attention->push_back(weights);
    heads.push_back(matmul(weights, vh));
  }
  Var attended = heads.size() == 1 ? heads[0] : concat(heads, 2);
  Var x1 = norm(tape, add(t, dense(tape, attended, wo_, bo_)), ln1_gamma_, ln1_beta_);
  Var ffn = dense(tape, relu(dense(tape, x1, w1_, b1_)), w2_, b2_);
  Var x2 = norm(tape, add(x1, ffn), ln2_gamma_, ln2_beta_);
  return EmbeddingBundle(project_tokens(tape, x2, proj_));
}

std::vector<Param*> SelfAttention::parameters() {
  return {&wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_, &ln1_gamma_, &ln1_beta_,
          &w1_, &b1_, &w2_, &b2_, &ln2_gamma_, &ln2_beta_, &proj_};
}

// ---------------------------------------------------------------------------

Convolution::Convolution(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng,
                         const std::string& prefix)
    : InteractionModule(spec, m, d),
      filters_(prefix + ".filters",
               fan_in_uniform({spec.channels, spec.kernel, spec.kernel}, spec.kernel * spec.kernel, rng)),
      proj_(prefix + ".w", fan_in_uniform({m, spec.l}, m, rng)) {}

EmbeddingBundle Convolution::forward(Tape& tape, const EmbeddingBundle& x) {
  check_input(x);
  Var image = transpose(x.tensor());
  Var maps = conv2d(image, tape.param(filters_));
  Var pooled = mean(maps, 1);
  return EmbeddingBundle(transpose(matmul(pooled, tape.param(proj_))));
}

// ---------------------------------------------------------------------------

Linear::Linear(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng, const std::string& prefix)
    : InteractionModule(spec, m, d), w_(prefix + ".w", fan_in_uniform({m, spec.l}, m, rng)) {}

EmbeddingBundle Linear::forward(Tape& tape, const EmbeddingBundle& x) {
  check_input(x);
  return EmbeddingBundle(project_tokens(tape, x.tensor(), w_));
}

// ---------------------------------------------------------------------------

CrossNet::CrossNet(const ModuleSpec& spec, std::size_t m, std::size_t d, Rng& rng, const std::string& prefix)
    : InteractionModule(spec, m, d),
      w_(prefix + ".w", fan_in_uniform({d, spec.l}, d, rng)),
      b_(prefix + ".b", Tensor({d, spec.l}, 0.0)) {}

EmbeddingBundle CrossNet::forward(Tape& tape, const EmbeddingBundle& x) {
  check_input(x);
  Var t = x.tensor();
  const std::size_t batch = x.batch();
  Var gram = matmul(transpose(t), t);
  Var u = matmul(gram, tape.param(w_));
  Var flat = add(reshape(u, {batch, d_ * spec_.l}), reshape(tape.param(b_), {d_ * spec_.l}));
  return EmbeddingBundle(transpose(reshape(flat, {batch, d_, spec_.l})));
}

// ---------------------------------------------------------------------------

std::unique_ptr<InteractionModule> make_module(const ModuleSpec& spec, std::size_t m, std::size_t d,
                                               Rng& rng, const std::string& prefix) {
  switch (spec.kind) {
    case ModuleKind::kDotInteraction: return std::make_unique<DotInteraction>(spec, m, d, rng, prefix);
    case ModuleKind::kSelfAttention: return std::make_unique<SelfAttention>(spec, m, d, rng, prefix);
    case ModuleKind::kConvolution: return std::make_unique<Convolution>(spec, m, d, rng, prefix);
    case ModuleKind::kLinear: return std::make_unique<Linear>(spec, m, d, rng, prefix);
    case ModuleKind::kCrossNet: return std::make_unique<CrossNet>(spec, m, d, rng, prefix);
  }
  throw std::invalid_argument("unknown module kind");
}

}  // namespace dhen
