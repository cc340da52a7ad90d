#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dhen/features.hpp"
#include "dhen/random.hpp"
#include "dhen/tape.hpp"

namespace dhen::testing {

// Error used for every gradient comparison: relative, with an absolute floor
// for coordinates whose true gradient is ~0.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

// Builds the loss on a fresh tape, backpropagates once, then compares
// `samples` randomly chosen parameter coordinates (spread over all params in
// proportion to their size) against central differences.
inline GradCheck grad_check(const std::function<Var(Tape&)>& loss, const std::vector<Param*>& params,
                            std::size_t samples, Rng& rng, double step = 1e-5) {
  for (Param* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l.id());
  }
  std::vector<std::pair<Param*, std::size_t>> all;
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) all.push_back({p, i});
  }
  std::shuffle(all.begin(), all.end(), rng);
  if (all.size() > samples) all.resize(samples);

  auto objective = [&] {
    Tape tape;
    return loss(tape).value().item();
  };
  GradCheck out;
  for (auto [p, i] : all) {
    const std::size_t coord[] = {i};
    const double numeric = finite_diff_grad_at(objective, *p, coord, step)[0];
    out.max_rel_error = std::max(out.max_rel_error, rel_error(p->grad[i], numeric));
    ++out.coordinates;
  }
  return out;
}

// sum(x * R) for a fixed random R: a generic scalar probe of a tensor output.
inline Var random_projection(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, tape.constant(uniform_tensor(x.shape(), 1.0, rng))));
}

inline Tensor random_tensor(Shape shape, Rng& rng, double bound = 1.0) {
  return uniform_tensor(std::move(shape), bound, rng);
}

// Random multi-hot batch for a feature config.
inline FeatureBatch random_batch(const FeatureConfig& cfg, std::size_t batch, Rng& rng, std::size_t ids = 1) {
  FeatureBatch out;
  out.batch_size = batch;
  for (const auto& field : cfg.sparse) {
    IdBags bags(batch);
    std::uniform_int_distribution<std::size_t> pick(0, field.rows - 1);
    for (auto& bag : bags) {
      for (std::size_t k = 0; k < ids; ++k) bag.push_back(pick(rng));
    }
    out.sparse.push_back(std::make_shared<const IdBags>(std::move(bags)));
  }
  out.dense = uniform_tensor({batch, cfg.dense_width}, 1.0, rng);
  return out;
}

}  // namespace dhen::testing
