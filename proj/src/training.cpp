#include "dhen/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace dhen {

NonFiniteLossError::NonFiniteLossError(std::size_t step, double loss)
    : std::runtime_error("non-finite training loss " + std::to_string(loss) + " at step " + std::to_string(step)),
      step_(step) {}

double ne_metric(std::span<const double> probs, std::span<const double> labels) {
  if (probs.size() != labels.size()) {
    throw std::invalid_argument("ne_metric: " + std::to_string(probs.size()) + " probabilities for " +
                                std::to_string(labels.size()) + " labels");
  }
  if (probs.empty()) throw UndefinedMetricError("ne_metric: empty batch");
  double positives = 0.0;
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("ne_metric: labels must be 0 or 1");
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw std::invalid_argument("ne_metric: probability outside [0,1]");
    const double p = std::clamp(probs[i], kProbClamp, 1.0 - kProbClamp);
    loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    positives += y;
  }
  const double n = static_cast<double>(probs.size());
  const double ctr = positives / n;
  if (ctr <= 0.0 || ctr >= 1.0) {
    throw UndefinedMetricError("ne_metric: background CTR is " + std::to_string(ctr) + ", NE undefined");
  }
  const double background = -(ctr * std::log(ctr) + (1.0 - ctr) * std::log(1.0 - ctr));
  return (loss / n) / background;
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (cardinalities.empty() && !terms.empty()) throw std::invalid_argument("synthetic: terms reference no fields");
  for (auto c : cardinalities) {
    if (c == 0) throw std::invalid_argument("synthetic: cardinalities must be positive");
  }
  if (dense_width == 0) throw std::invalid_argument("synthetic: dense width must be positive");
  if (!dense_coefficients.empty() && dense_coefficients.size() != dense_width) {
    throw std::invalid_argument("synthetic: dense coefficients must match dense width");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("synthetic: temperature must be positive");
  if (ids_per_field == 0) throw std::invalid_argument("synthetic: ids per field must be positive");
  for (std::size_t t = 0; t < terms.size(); ++t) {
    if (terms[t].order() < 1) throw std::invalid_argument("synthetic: term " + std::to_string(t) + " has order 0");
    for (auto f : terms[t].fields) {
      if (f >= cardinalities.size()) {
        throw std::invalid_argument("synthetic: term " + std::to_string(t) + " references field " +
                                    std::to_string(f) + " of " + std::to_string(cardinalities.size()));
      }
    }
  }
}

std::vector<std::vector<double>> synthetic_latents(const SyntheticSpec& spec) {
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<double>> latents(spec.cardinalities.size());
  for (std::size_t f = 0; f < spec.cardinalities.size(); ++f) {
    latents[f].resize(spec.cardinalities[f]);
    for (double& z : latents[f]) z = spec.latent == LatentKind::kRademacher ? (coin(rng) ? 1.0 : -1.0) : normal(rng);
  }
  return latents;
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t n, std::uint64_t stream) {
  spec.validate();
  if (n == 0) throw std::invalid_argument("synthetic: sample count must be positive");
  const auto latents = synthetic_latents(spec);
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL * (stream + 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::size_t fields = spec.cardinalities.size();
  std::vector<IdBags> bags(fields, IdBags(n));
  Dataset out;
  out.features.batch_size = n;
  out.features.dense = Tensor({n, spec.dense_width}, 0.0);
  out.labels.resize(n);
  out.logits.resize(n);
  std::vector<double> field_value(fields);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < fields; ++f) {
      std::uniform_int_distribution<std::size_t> pick(0, spec.cardinalities[f] - 1);
      field_value[f] = 0.0;
      auto& bag = bags[f][i];
      bag.resize(spec.ids_per_field);
      for (auto& id : bag) {
        id = pick(rng);
        field_value[f] += latents[f][id];
      }
    }
    double logit = spec.bias;
    for (std::size_t k = 0; k < spec.dense_width; ++k) {
      const double x = normal(rng);
      out.features.dense[i * spec.dense_width + k] = x;
      if (!spec.dense_coefficients.empty()) logit += spec.dense_coefficients[k] * x;
    }
    for (const auto& term : spec.terms) {
      double product = term.coefficient;
      for (auto f : term.fields) product *= field_value[f];
      logit += product;
    }
    out.logits[i] = logit;
    const double z = std::isinf(spec.temperature) ? 0.0 : logit / spec.temperature;
    const double p = 1.0 / (1.0 + std::exp(-z));
    out.labels[i] = unit(rng) < p ? 1.0 : 0.0;
  }
  for (auto& field : bags) out.features.sparse.push_back(std::make_shared<const IdBags>(std::move(field)));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  const std::size_t width = features.dense.dim(1);
  Dataset out;
  out.features.batch_size = rows.size();
  out.features.dense = Tensor({rows.size(), width}, 0.0);
  out.labels.reserve(rows.size());
  out.logits.reserve(rows.size());
  for (const auto& field : features.sparse) {
    IdBags bags;
    bags.reserve(rows.size());
    for (auto r : rows) bags.push_back((*field)[r]);
    out.features.sparse.push_back(std::make_shared<const IdBags>(std::move(bags)));
  }
  auto src = features.dense.data();
  auto dst = out.features.dense.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.begin() + rows[i] * width, width, dst.begin() + i * width);
    out.labels.push_back(labels[rows[i]]);
    if (!logits.empty()) out.logits.push_back(logits[rows[i]]);
  }
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return subset(rows);
}

// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Param*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (Param* p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i]->value.data();
    auto g = params_[i]->grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      w[k] -= config_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
    }
  }
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (steps == 0) throw std::invalid_argument("train: steps must be positive");
  if (eval_every == 0) throw std::invalid_argument("train: eval cadence must be positive");
  if (!(adam.learning_rate >= 0.0)) throw std::invalid_argument("train: learning rate must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw std::invalid_argument("train: adam betas must lie in [0,1)");
  }
  if (!(adam.epsilon > 0.0)) throw std::invalid_argument("train: adam epsilon must be positive");
}

// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void MetricLog::write_csv(std::ostream& out) const {
  out << "step,train_ne,eval_ne,wall_ms\n";
  for (const auto& r : rows) {
    out << r.step << ',' << format_double(r.train_ne) << ',' << format_double(r.eval_ne) << ','
        << format_double(r.wall_ms) << '\n';
  }
}

std::string MetricLog::to_csv() const {
  std::ostringstream out;
  write_csv(out);
  return out.str();
}

MetricLog MetricLog::read_csv(std::istream& in) {
  MetricLog log;
  std::string line;
  if (!std::getline(in, line) || line != "step,train_ne,eval_ne,wall_ms") {
    throw std::invalid_argument("metrics file lacks the header step,train_ne,eval_ne,wall_ms");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 4) throw std::invalid_argument("malformed metrics row: " + line);
    MetricRow r;
    r.step = std::stoull(cells[0]);
    r.train_ne = std::strtod(cells[1].c_str(), nullptr);
    r.eval_ne = std::strtod(cells[2].c_str(), nullptr);
    r.wall_ms = std::strtod(cells[3].c_str(), nullptr);
    log.rows.push_back(r);
  }
  return log;
}

double evaluate_ne(DhenNetwork& net, const Dataset& data, std::size_t chunk) {
  std::vector<double> probs;
  probs.reserve(data.size());
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const Dataset part = data.slice(begin, end);
    const auto p = net.predict(part.features);
    probs.insert(probs.end(), p.begin(), p.end());
  }
  return ne_metric(probs, data.labels);
}

MetricLog train(DhenNetwork& net, const Dataset& train_set, const Dataset& eval_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  const auto start = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const std::size_t batch = std::min(cfg.batch_size, train_set.size());

  Adam adam(net.parameters(), cfg.adam);
  MetricLog log;
  std::vector<double> window_probs;
  std::vector<double> window_labels;
  std::vector<std::size_t> rows(batch);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& r : rows) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      r = order[cursor++];
    }
    const Dataset b = train_set.subset(rows);
    Tape tape;
    Var probs = net.forward(tape, b.features);
    Var loss = log_loss(probs, tape.constant(Tensor({batch}, b.labels)));
    const double loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) throw NonFiniteLossError(step, loss_value);
    adam.zero_grad();
    tape.backward(loss.id());
    adam.step();
    log.losses.push_back(loss_value);

    const auto& p = probs.value().values();
    window_probs.insert(window_probs.end(), p.begin(), p.end());
    window_labels.insert(window_labels.end(), b.labels.begin(), b.labels.end());

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      MetricRow row;
      row.step = step;
      try {
        row.train_ne = ne_metric(window_probs, window_labels);
      } catch (const UndefinedMetricError&) {
        row.train_ne = std::numeric_limits<double>::quiet_NaN();
      }
      row.eval_ne = eval_set.size() ? evaluate_ne(net, eval_set) : std::numeric_limits<double>::quiet_NaN();
      if (cfg.record_wall_clock) {
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      }
      log.rows.push_back(row);
      window_probs.clear();
      window_labels.clear();
    }
  }
  return log;
}

}  // namespace dhen
