#include "dhen/network.hpp"

#include <numeric>
#include <stdexcept>

namespace dhen {

const char* ensemble_name(EnsembleMethod method) {
  switch (method) {
    case EnsembleMethod::kConcat: return "concat";
    case EnsembleMethod::kSum: return "sum";
    case EnsembleMethod::kWeightedSum: return "weighted-sum";
  }
  return "unknown";
}

EnsembleMethod parse_ensemble(const std::string& name) {
  for (EnsembleMethod e : {EnsembleMethod::kConcat, EnsembleMethod::kSum, EnsembleMethod::kWeightedSum}) {
    if (name == ensemble_name(e)) return e;
  }
  throw std::invalid_argument("unknown ensemble method '" + name + "'");
}

std::size_t LayerSpec::output_count() const {
  if (modules.empty()) throw std::invalid_argument("layer needs at least one interaction module");
  if (ensemble == EnsembleMethod::kConcat) {
    std::size_t total = 0;
    for (const auto& m : modules) total += m.l;
    return total;
  }
  for (const auto& m : modules) {
    if (m.l != modules[0].l) {
      throw std::invalid_argument(std::string(ensemble_name(ensemble)) +
                                  " ensemble needs equal output counts, got " + std::to_string(modules[0].l) +
                                  " and " + std::to_string(m.l));
    }
  }
  return modules[0].l;
}

std::vector<std::size_t> NetworkSpec::token_counts() const {
  features.validate();
  if (layers.empty()) throw std::invalid_argument("network needs at least one layer");
  std::vector<std::size_t> counts{features.token_count()};
  for (const auto& layer : layers) {
    const std::size_t module_in = counts.back() + (layer.dense_token ? 1 : 0);
    for (const auto& m : layer.modules) m.validate(module_in, features.dim);
    counts.push_back(layer.output_count());
  }
  return counts;
}

void NetworkSpec::validate() const {
  token_counts();
  if (!(norm_epsilon >= 0.0)) throw std::invalid_argument("norm epsilon must be non-negative");
  for (auto w : head.hidden) {
    if (w == 0) throw std::invalid_argument("head hidden widths must be positive");
  }
}

std::uint64_t FlopBreakdown::layer_total() const {
  return std::accumulate(layers.begin(), layers.end(), std::uint64_t{0});
}

FlopBreakdown flop_breakdown(const NetworkSpec& spec) {
  FlopBreakdown out;
  if (spec.head.bias_only) return out;
  const auto counts = spec.token_counts();
  const std::uint64_t d = spec.features.dim;

  std::uint64_t prev = spec.features.dense_width;
  for (auto w : spec.features.dense_hidden) {
    out.features += 2 * prev * w;
    prev = w;
  }
  out.features += 2 * prev * d;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const std::size_t m_in = counts[i];
    const std::size_t m_out = counts[i + 1];
    const std::size_t module_in = m_in + (layer.dense_token ? 1 : 0);
    std::uint64_t f = 0;
    if (layer.dense_token) f += 2 * static_cast<std::uint64_t>(spec.features.dense_width) * d;
    for (const auto& m : layer.modules) f += module_flops(m, module_in, spec.features.dim);
    if (m_in != m_out) f += 2 * d * m_in * m_out;
    out.layers.push_back(f);
  }

  prev = d;
  for (auto w : spec.head.hidden) {
    out.head += 2 * prev * w;
    prev = w;
  }
  out.head += 2 * prev;
  return out;
}

std::uint64_t count_flops(const NetworkSpec& spec) { return flop_breakdown(spec).total(); }

FlopBreakdown parameter_breakdown(const NetworkSpec& spec) {
  FlopBreakdown out;
  if (spec.head.bias_only) {
    out.head = 1;
    return out;
  }
  const auto counts = spec.token_counts();
  const std::uint64_t d = spec.features.dim;

  std::uint64_t prev = spec.features.dense_width;
  for (auto w : spec.features.dense_hidden) {
    out.features += prev * w + w;
    prev = w;
  }
  out.features += prev * d + d;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const std::uint64_t m_in = counts[i];
    const std::uint64_t m_out = counts[i + 1];
    const std::size_t module_in = m_in + (layer.dense_token ? 1 : 0);
    std::uint64_t n = 2 * d;
    if (layer.dense_token) n += static_cast<std::uint64_t>(spec.features.dense_width) * d + d;
    for (const auto& m : layer.modules) n += module_param_count(m, module_in, spec.features.dim);
    if (layer.ensemble == EnsembleMethod::kWeightedSum) n += layer.modules.size();
    if (m_in != m_out) n += m_in * m_out;
    out.layers.push_back(n);
  }

  prev = d;
  for (auto w : spec.head.hidden) {
    out.head += prev * w + w;
    prev = w;
  }
  out.head += prev + 1;
  return out;
}

// ---------------------------------------------------------------------------

DhenLayer::DhenLayer(const LayerSpec& spec, std::size_t m_in, std::size_t d, std::size_t dense_width,
                     double epsilon, Rng& rng, const std::string& prefix)
    : spec_(spec),
      m_in_(m_in),
      m_out_(spec.output_count()),
      d_(d),
      epsilon_(epsilon),
      gamma_(prefix + ".norm.gamma", Tensor({d}, 1.0)),
      beta_(prefix + ".norm.beta", Tensor({d}, 0.0)) {
  const std::size_t module_in = m_in + (spec.dense_token ? 1 : 0);
  if (spec.dense_token) {
    dense_proj_.emplace(prefix + ".dense_token.w", fan_in_uniform({dense_width, d}, dense_width, rng));
    dense_bias_.emplace(prefix + ".dense_token.b", fan_in_uniform({d}, dense_width, rng));
  }
  for (std::size_t i = 0; i < spec.modules.size(); ++i) {
    modules_.push_back(make_module(spec.modules[i], module_in, d, rng,
                                   prefix + "." + std::to_string(i) + "." + module_kind_name(spec.modules[i].kind)));
  }
  if (spec.ensemble == EnsembleMethod::kWeightedSum) {
    weights_.emplace(prefix + ".ensemble.weights",
                     Tensor({spec.modules.size()}, 1.0 / static_cast<double>(spec.modules.size())));
  }
  if (m_in_ != m_out_) shortcut_.emplace(prefix + ".shortcut", fan_in_uniform({m_in_, m_out_}, m_in_, rng));
}

EmbeddingBundle DhenLayer::forward(Tape& tape, const EmbeddingBundle& x, std::optional<Var> dense_ctx,
                                   LayerTrace* trace) {
  if (x.count() != m_in_ || x.dim() != d_) {
    throw ShapeError("layer expects " + std::to_string(m_in_) + " embeddings of dim " + std::to_string(d_) +
                     ", got " + shape_string(x.tensor().shape()));
  }
  const std::size_t batch = x.batch();
  EmbeddingBundle module_in = x;
  if (spec_.dense_token) {
    if (!dense_ctx) throw std::invalid_argument("layer has a dense token but no dense features were supplied");
    Var token = add(matmul(*dense_ctx, tape.param(*dense_proj_)), tape.param(*dense_bias_));
    const Var parts[] = {x.tensor(), reshape(token, {batch, 1, d_})};
    module_in = EmbeddingBundle(concat(parts, 1));
  }

  std::vector<Var> outs;
  outs.reserve(modules_.size());
  for (auto& module : modules_) outs.push_back(module->forward(tape, module_in).tensor());

  Var ensembled;
  switch (spec_.ensemble) {
    case EnsembleMethod::kConcat:
      ensembled = outs.size() == 1 ? outs[0] : concat(outs, 1);
      break;
    case EnsembleMethod::kSum:
      ensembled = outs[0];
      for (std::size_t i = 1; i < outs.size(); ++i) ensembled = add(ensembled, outs[i]);
      break;
    case EnsembleMethod::kWeightedSum: {
      Var w = tape.param(*weights_);
      for (std::size_t i = 0; i < outs.size(); ++i) {
        Var term = scale_by(outs[i], slice(w, 0, i, i + 1));
        ensembled = i == 0 ? term : add(ensembled, term);
      }
      break;
    }
  }

  Var shortcut = shortcut_ ? project_tokens(tape, x.tensor(), *shortcut_) : x.tensor();
  Var pre = add(ensembled, shortcut);
  Var normalized = layer_norm(pre, epsilon_);
  if (trace) {
    trace->shortcut_identity = !shortcut_.has_value();
    trace->pre_norm = pre;
    trace->normalized = normalized;
  }
  return EmbeddingBundle(add(mul(normalized, tape.param(gamma_)), tape.param(beta_)));
}

std::vector<Param*> DhenLayer::parameters() {
  std::vector<Param*> out;
  if (dense_proj_) {
    out.push_back(&*dense_proj_);
    out.push_back(&*dense_bias_);
  }
  for (auto& module : modules_) {
    for (Param* p : module->parameters()) out.push_back(p);
  }
  if (weights_) out.push_back(&*weights_);
  if (shortcut_) out.push_back(&*shortcut_);
  out.push_back(&gamma_);
  out.push_back(&beta_);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

const NetworkSpec& validated(const NetworkSpec& spec) {
  spec.validate();
  return spec;
}

}  // namespace

DhenNetwork::DhenNetwork(NetworkSpec spec, Rng& rng)
    : spec_(std::move(spec)),
      features_(validated(spec_).features, rng),
      head_(spec_.features.dim, spec_.head.hidden, 1, rng, "head"),
      head_bias_("head.bias_only", Tensor({1}, 0.0)) {
  const auto counts = spec_.token_counts();
  layers_.reserve(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    layers_.emplace_back(spec_.layers[i], counts[i], spec_.features.dim, spec_.features.dense_width,
                         spec_.norm_epsilon, rng, "layer" + std::to_string(i));
  }
}

Var DhenNetwork::forward(Tape& tape, const FeatureBatch& batch) {
  batch.validate(spec_.features);
  const std::size_t b = batch.batch_size;
  if (spec_.head.bias_only) {
    Var ones = tape.constant(Tensor({b, 1}, 1.0));
    Var logits = matmul(ones, reshape(tape.param(head_bias_), {1, 1}));
    return sigmoid(reshape(logits, {b}));
  }
  EmbeddingBundle x = features_.forward(tape, batch);
  std::optional<Var> dense_ctx;
  for (const auto& layer : spec_.layers) {
    if (layer.dense_token) {
      dense_ctx = tape.constant(batch.dense);
      break;
    }
  }
  for (auto& layer : layers_) x = layer.forward(tape, x, dense_ctx);
  Var pooled = mean(x.tensor(), 1);
  Var logits = head_.forward(tape, pooled);
  return sigmoid(reshape(logits, {b}));
}

std::vector<double> DhenNetwork::predict(const FeatureBatch& batch) {
  Tape tape;
  return forward(tape, batch).value().values();
}

std::vector<Param*> DhenNetwork::parameters() {
  if (spec_.head.bias_only) return {&head_bias_};
  std::vector<Param*> out = features_.parameters();
  for (auto& layer : layers_) {
    for (Param* p : layer.parameters()) out.push_back(p);
  }
  for (Param* p : head_.parameters()) out.push_back(p);
  return out;
}

std::size_t DhenNetwork::parameter_count() {
  std::size_t n = 0;
  for (Param* p : parameters()) n += p->value.size();
  return n;
}

}  // namespace dhen
