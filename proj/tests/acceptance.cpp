// Runs the twelve acceptance criteria and prints one PASS/FAIL line each.
// Exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "dhen/cli.hpp"
#include "dhen/dist_sim.hpp"
#include "dhen/network.hpp"
#include "dhen/sharding.hpp"
#include "dhen/training.hpp"
#include "support.hpp"

using namespace dhen;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModuleSpec mod(ModuleKind kind, std::size_t l) {
  ModuleSpec s;
  s.kind = kind;
  s.l = l;
  return s;
}

const ModuleKind kKinds[] = {ModuleKind::kDotInteraction, ModuleKind::kSelfAttention, ModuleKind::kConvolution,
                             ModuleKind::kLinear, ModuleKind::kCrossNet};

FeatureConfig features(std::size_t fields, std::size_t rows, std::size_t dim, std::size_t dense_width) {
  FeatureConfig cfg;
  cfg.dim = dim;
  cfg.dense_width = dense_width;
  for (std::size_t i = 0; i < fields; ++i) cfg.sparse.push_back({"f" + std::to_string(i), rows});
  return cfg;
}

// ---------------------------------------------------------------------------

Verdict gradient_fidelity() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  Rng rng(11);
  const std::size_t m = 6, d = 8, l = 4;
  for (ModuleKind k : kKinds) {
    auto module = make_module(mod(k, l), m, d, rng, "m");
    Param x("x", testing::random_tensor({2, m, d}, rng));
    std::vector<Param*> params = module->parameters();
    params.push_back(&x);
    Rng pick(1);
    const auto r = testing::grad_check(
        [&](Tape& t) { return testing::random_projection(t, module->forward(t, EmbeddingBundle(t.param(x))).tensor(), 3); },
        params, 100, pick);
    worst = std::max(worst, r.max_rel_error);
  }

  NetworkSpec spec;
  spec.features = features(5, 20, d, 3);  // 5 sparse + 1 dense = 6 embeddings
  LayerSpec a, b;
  a.modules = {mod(ModuleKind::kCrossNet, l), mod(ModuleKind::kLinear, l)};
  a.ensemble = EnsembleMethod::kSum;
  b.modules = {mod(ModuleKind::kSelfAttention, l), mod(ModuleKind::kDotInteraction, l)};
  b.ensemble = EnsembleMethod::kWeightedSum;
  spec.layers = {a, b};
  DhenNetwork net(spec, rng);
  Rng data(2);
  const FeatureBatch batch = testing::random_batch(spec.features, 4, data);
  const Tensor labels({4}, {1, 0, 0, 1});
  Rng pick(3);
  const auto r = testing::grad_check(
      [&](Tape& t) { return log_loss(net.forward(t, batch), t.constant(labels)); }, net.parameters(), 100, pick);
  worst = std::max(worst, r.max_rel_error);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < 1e-4 && secs < 60.0, fmt("max rel error %.3g over 6 checks (< 1e-4), %.2f s (< 60 s)", worst, secs)};
}

Verdict layer_structure() {
  Rng rng(4);
  std::uniform_int_distribution<int> kind(0, 4), count(1, 3), tokens(2, 7), l_pick(1, 6), ens(0, 2), batch(1, 4);
  const std::size_t d = 6;
  std::size_t specs = 0, contract_failures = 0, shortcut_failures = 0;
  double worst_mean = 0.0, worst_var = 0.0;
  for (int trial = 0; trial < 250; ++trial) {
    const std::size_t m_in = tokens(rng);
    LayerSpec spec;
    spec.ensemble = static_cast<EnsembleMethod>(ens(rng));
    const std::size_t shared = l_pick(rng);
    for (int i = 0, k = count(rng); i < k; ++i) {
      spec.modules.push_back(mod(kKinds[kind(rng)], spec.ensemble == EnsembleMethod::kConcat ? l_pick(rng) : shared));
    }
    ++specs;
    DhenLayer layer(spec, m_in, d, 1, 1e-12, rng, "r");
    const std::size_t b = batch(rng);
    Tape tape;
    LayerTrace trace;
    EmbeddingBundle y = layer.forward(tape, EmbeddingBundle(tape.constant(testing::random_tensor({b, m_in, d}, rng))),
                                      std::nullopt, &trace);
    if (y.batch() != b || y.count() != spec.output_count() || y.dim() != d) ++contract_failures;
    if (trace.shortcut_identity != (m_in == spec.output_count())) ++shortcut_failures;
    const Tensor& z = trace.normalized.value();
    for (std::size_t t = 0; t < z.size() / d; ++t) {
      double mu = 0.0, var = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += z[t * d + j];
      mu /= d;
      for (std::size_t j = 0; j < d; ++j) var += (z[t * d + j] - mu) * (z[t * d + j] - mu);
      var /= d;
      worst_mean = std::max(worst_mean, std::abs(mu));
      worst_var = std::max(worst_var, std::abs(var - 1.0));
    }
  }
  const bool pass = specs >= 200 && contract_failures == 0 && shortcut_failures == 0 && worst_mean <= 1e-6 &&
                    worst_var <= 1e-6;
  return {pass, fmt("%zu specs, %zu contract / %zu shortcut violations, max |mean| %.2g, max |var-1| %.2g (<= 1e-6)",
                    specs, contract_failures, shortcut_failures, worst_mean, worst_var)};
}

Verdict ne_correctness() {
  const std::vector<double> labels{1, 0, 0, 1, 0, 1, 0, 0, 0, 0};
  const std::vector<double> constant(labels.size(), 0.3);
  const double one = ne_metric(constant, labels);
  const double hand = ne_metric(std::vector<double>{0.9, 0.1, 0.9, 0.1}, std::vector<double>{1, 0, 1, 0});
  const bool pass = std::abs(one - 1.0) <= 1e-12 && std::abs(hand - 0.152003) <= 1e-6;
  return {pass, fmt("constant predictor NE %.15f (1 +- 1e-12), hand case %.7f (0.152003 +- 1e-6)", one, hand)};
}

// ---------------------------------------------------------------------------
// Learning echoes. Data: 6 fields of 100 ids, 100k train / 20k eval.

constexpr std::size_t kFields = 6;
constexpr std::size_t kRows = 100;
constexpr std::size_t kDim = 8;
constexpr std::size_t kDenseWidth = 4;
constexpr std::size_t kTrainSamples = 100000;
constexpr std::size_t kEvalSamples = 20000;

NetworkSpec echo_network(std::vector<std::vector<ModuleKind>> layers, std::size_t head_width) {
  NetworkSpec spec;
  spec.features = features(kFields, kRows, kDim, kDenseWidth);
  for (const auto& kinds : layers) {
    LayerSpec ls;
    ls.ensemble = EnsembleMethod::kSum;
    for (ModuleKind k : kinds) ls.modules.push_back(mod(k, kFields + 1));
    spec.layers.push_back(ls);
  }
  spec.head.hidden = {head_width};
  return spec;
}

double train_eval_ne(const NetworkSpec& spec, const Dataset& train_set, const Dataset& eval_set, std::uint64_t seed) {
  Rng rng(seed);
  DhenNetwork net(spec, rng);
  TrainConfig cfg;
  cfg.batch_size = 256;
  cfg.steps = 3000;
  cfg.eval_every = 3000;
  cfg.adam.learning_rate = 3e-3;
  cfg.seed = seed;
  return train(net, train_set, eval_set, cfg).rows.back().eval_ne;
}

Verdict depth_echo() {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<ModuleKind> block{ModuleKind::kCrossNet, ModuleKind::kLinear};
  const NetworkSpec deep = echo_network({block, block}, 64);
  // Match the shallow net's parameter count by widening its head.
  const auto total = [](const NetworkSpec& s) { return parameter_breakdown(s).total(); };
  std::size_t best_width = 1;
  for (std::size_t w = 1; w <= 512; ++w) {
    const auto gap = [&](std::size_t width) {
      return std::llabs(static_cast<long long>(total(echo_network({block}, width))) -
                        static_cast<long long>(total(deep)));
    };
    if (gap(w) < gap(best_width)) best_width = w;
  }
  const NetworkSpec shallow = echo_network({block}, best_width);

  double deep_ne = 0.0, shallow_ne = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SyntheticSpec syn;
    syn.cardinalities.assign(kFields, kRows);
    syn.dense_width = kDenseWidth;
    // Two order-3 products, each reachable through its own lower-order
    // prefix terms.
    syn.terms = {{{0}, 1.0}, {{0, 1}, 1.0}, {{0, 1, 2}, 2.0}, {{3}, 1.0}, {{3, 4}, 1.0}, {{3, 4, 5}, 2.0}};
    syn.seed = 100 + seed;
    const Dataset train_set = generate_synthetic(syn, kTrainSamples, 0);
    const Dataset eval_set = generate_synthetic(syn, kEvalSamples, 1);
    deep_ne += train_eval_ne(deep, train_set, eval_set, seed) / 3.0;
    shallow_ne += train_eval_ne(shallow, train_set, eval_set, seed) / 3.0;
  }
  const double gain = (shallow_ne - deep_ne) / shallow_ne;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {gain >= 0.005 && secs < 600.0,
          fmt("2-layer NE %.5f (%llu dense params) vs 1-layer NE %.5f (%llu dense params, head %zu): relative gain %.3f%% "
              "(>= 0.5%%), %.0f s (< 600 s)",
              deep_ne, static_cast<unsigned long long>(total(deep)), shallow_ne,
              static_cast<unsigned long long>(total(shallow)), best_width, gain * 100.0, secs)};
}

Verdict ensemble_echo() {
  const NetworkSpec both = echo_network({{ModuleKind::kCrossNet, ModuleKind::kLinear},
                                         {ModuleKind::kCrossNet, ModuleKind::kLinear}}, 64);
  const NetworkSpec cross = echo_network({{ModuleKind::kCrossNet}, {ModuleKind::kCrossNet}}, 64);
  const NetworkSpec linear = echo_network({{ModuleKind::kLinear}, {ModuleKind::kLinear}}, 64);
  double ne[3] = {0.0, 0.0, 0.0};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SyntheticSpec syn;
    syn.cardinalities.assign(kFields, kRows);
    syn.dense_width = kDenseWidth;
    syn.terms = {{{0}, 1.0}, {{1}, -1.0}, {{2, 3}, 1.5}, {{4, 5}, -1.5}, {{0, 2, 4}, 1.0}};
    syn.dense_coefficients = {0.5, -0.5, 0.25, 0.0};
    syn.seed = 200 + seed;
    const Dataset train_set = generate_synthetic(syn, kTrainSamples, 0);
    const Dataset eval_set = generate_synthetic(syn, kEvalSamples, 1);
    ne[0] += train_eval_ne(both, train_set, eval_set, seed) / 3.0;
    ne[1] += train_eval_ne(cross, train_set, eval_set, seed) / 3.0;
    ne[2] += train_eval_ne(linear, train_set, eval_set, seed) / 3.0;
  }
  const double limit = std::min(ne[1], ne[2]) * 1.002;
  return {ne[0] <= limit, fmt("ensemble NE %.5f vs cross-net %.5f, linear %.5f (limit %.5f)", ne[0], ne[1], ne[2],
                              limit)};
}

// ---------------------------------------------------------------------------

Verdict lpt_guarantee() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> shards(1, 10), devices(2, 4);
  std::uniform_real_distribution<double> cost(0.1, 10.0);
  double worst = 0.0;
  std::size_t violations = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> c(shards(rng));
    for (double& v : c) v = cost(rng);
    const std::size_t m = devices(rng);
    const double opt = sharding::brute_force_place(c, m);
    const double lpt = sharding::lpt_place(c, m).makespan;
    worst = std::max(worst, lpt / opt / sharding::lpt_bound(m));
    if (lpt > sharding::lpt_bound(m) * opt) ++violations;
  }
  const double tight[] = {3, 3, 2, 2, 2};
  const double ratio = sharding::lpt_place(tight, 2).makespan / sharding::brute_force_place(tight, 2);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {violations == 0 && ratio == 7.0 / 6.0 && secs < 30.0,
          fmt("200 instances, %zu bound violations, worst ratio/bound %.4f; [3,3,2,2,2]/2 ratio %.17g (7/6), %.2f s",
              violations, worst, ratio, secs)};
}

Verdict byte_exactness() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> g_pick(2, 8), h_pick(1, 16), layers(1, 8), k(1, 4096);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t g = g_pick(rng), h = h_pick(rng), n = g * h;
    sim::ClusterSpec c;
    c.hosts = h;
    c.gpus_per_host = g;
    c.hbm_bytes = 1e18;
    sim::DenseModelProfile p;
    for (std::size_t i = 0, count = layers(rng); i < count; ++i) {
      p.layer_param_bytes.push_back(static_cast<double>(k(rng) * n));
      p.layer_activation_bytes.push_back(1.0);
      p.layer_flops.push_back(1e6);
    }
    const double s = p.total_param_bytes();
    sim::ParadigmSpec fsdp, hsdp;
    fsdp.kind = sim::ParadigmKind::kFSDP;
    hsdp.kind = sim::ParadigmKind::kHSDP;
    const auto rf = sim::simulate_iteration(fsdp, p, c, sim::empty_plan(n), 4096);
    const auto rh = sim::simulate_iteration(hsdp, p, c, sim::empty_plan(n), 4096);
    if (rf.dense_intra_bytes + rf.dense_cross_bytes != 3.0 * s * (n - 1) / n) ++mismatches;
    if (rh.dense_cross_bytes != 2.0 * (s / g) * (h - 1) / h) ++mismatches;
    if (rh.dense_intra_bytes != 3.0 * s * (g - 1) / g) ++mismatches;
  }

  std::size_t g1_mismatches = 0;
  for (std::size_t hosts : {2, 4, 16}) {
    sim::ClusterSpec c;
    c.hosts = hosts;
    c.gpus_per_host = 1;
    sim::ParadigmSpec fsdp, hsdp;
    fsdp.kind = sim::ParadigmKind::kFSDP;
    hsdp.kind = sim::ParadigmKind::kHSDP;
    const auto p = sim::uniform_profile(6, 4e7, 1e4, 1e9);
    std::ostringstream a, b;
    sim::write_report_csv(sim::simulate_iteration(hsdp, p, c, sim::empty_plan(hosts), 1024), a);
    sim::write_report_csv(sim::simulate_iteration(fsdp, p, c, sim::empty_plan(hosts), 1024), b);
    if (a.str() != b.str()) ++g1_mismatches;
  }
  return {mismatches == 0 && g1_mismatches == 0,
          fmt("500 random (S,g,h): %zu byte mismatches; HSDP g=1 vs FSDP: %zu differing reports", mismatches,
              g1_mismatches)};
}

struct Sweep {
  std::vector<sim::ComparisonRow> rows;
};

const Sweep& reference_sweep() {
  static const Sweep sweep = [] {
    const sim::ClusterSpec c;
    const auto plan = sim::make_plan(sim::reference_tables(), c.gpus(), sim::kReferenceGlobalBatch,
                                     sim::default_cost_weights(c));
    std::vector<sim::SweepPoint> points;
    for (std::size_t l : cli::default_sweep()) points.push_back({l, sim::reference_profile(l)});
    return Sweep{sim::compare_paradigms(points, c, sim::ParadigmSpec{}, plan, sim::kReferenceGlobalBatch)};
  }();
  return sweep;
}

Verdict memory_shape() {
  const auto& rows = reference_sweep().rows;
  std::size_t boundary = 0;
  for (std::size_t i = 0; i + 2 < rows.size(); i += 3) {
    if (!rows[i].feasible && rows[i + 1].feasible && rows[i + 2].feasible) {
      boundary = rows[i].layers;
      break;
    }
  }
  const sim::ClusterSpec c;
  const double cap_ratio = sim::param_residency_cap(sim::ParadigmKind::kHSDP, c) /
                           sim::param_residency_cap(sim::ParadigmKind::kDP, c);
  return {boundary != 0 && cap_ratio == static_cast<double>(c.gpus_per_host),
          fmt("first layer count with DP infeasible and FSDP/HSDP feasible: %zu; HSDP/DP residency cap %.17g (g = %zu)",
              boundary, cap_ratio, c.gpus_per_host)};
}

Verdict throughput_ordering() {
  const auto& rows = reference_sweep().rows;
  double best = 0.0;
  std::size_t best_layers = 0, compared = 0, inversions = 0;
  for (std::size_t i = 0; i + 2 < rows.size(); i += 3) {
    const auto& f = rows[i + 1];
    const auto& h = rows[i + 2];
    if (!f.feasible || !h.feasible) continue;
    ++compared;
    if (!(h.iteration_time < f.iteration_time)) ++inversions;
    if (h.qps / f.qps > best) {
      best = h.qps / f.qps;
      best_layers = h.layers;
    }
  }
  return {compared > 0 && inversions == 0 && best >= 1.1 && best <= 1.5,
          fmt("%zu layer counts compared, %zu with HSDP not faster; max HSDP/FSDP throughput %.4f at %zu layers "
              "(band [1.1, 1.5])",
              compared, inversions, best, best_layers)};
}

Verdict quantized_collectives() {
  sim::ClusterSpec c;
  const auto plan = sim::make_plan(sim::reference_tables(), c.gpus(), sim::kReferenceGlobalBatch,
                                   sim::default_cost_weights(c));
  sim::ParadigmSpec base;
  sim::ParadigmSpec half = base;
  half.collective_bytes = 2;
  const auto b = sim::simulate_iteration(base, sim::reference_profile(8), c, plan, sim::kReferenceGlobalBatch);
  const auto o = sim::simulate_iteration(half, sim::reference_profile(8), c, plan, sim::kReferenceGlobalBatch);
  const bool halved = o.wire_bytes() * 2.0 == b.wire_bytes();
  const double speedup = sim::optimization_delta(b, o);

  sim::ParadigmSpec dp_base, dp_half;
  dp_base.kind = dp_half.kind = sim::ParadigmKind::kDP;
  dp_half.collective_bytes = 2;
  const auto bound = sim::uniform_profile(4, 1e3, 1.0, 1e12);
  const double compute_bound = sim::optimization_delta(sim::simulate_iteration(dp_base, bound, c, sim::empty_plan(128), 1024),
                                                       sim::simulate_iteration(dp_half, bound, c, sim::empty_plan(128), 1024));
  sim::ClusterSpec free = c;
  free.intra_latency = free.cross_latency = 0.0;
  free.hbm_bandwidth = std::numeric_limits<double>::infinity();
  const auto comm = sim::uniform_profile(4, 1e8, 1.0, 0.0);
  const double comm_only = sim::optimization_delta(sim::simulate_iteration(base, comm, free, sim::empty_plan(128), 1024),
                                                   sim::simulate_iteration(half, comm, free, sim::empty_plan(128), 1024));
  return {halved && speedup >= 1.0 && speedup <= 2.0 && compute_bound == 1.0 && comm_only == 2.0,
          fmt("wire bytes halved: %s; 8-layer HSDP speedup %.4f; compute-bound %.17g; comm-only %.17g",
              halved ? "yes" : "no", speedup, compute_bound, comm_only)};
}

Verdict stochastic_rounding() {
  std::mt19937_64 rng(12345);
  const std::size_t draws = 1000000;
  double total = 0.0;
  for (std::size_t i = 0; i < draws; ++i) total += stochastic_round(0.3, 0.5, rng);
  const double mean = total / draws;
  // Draws are 0.5 with probability 0.6, else 0.
  const double sigma = std::sqrt(0.25 * 0.6 * 0.4 / draws);
  bool grid_ok = true;
  for (double x : {-2.0, -0.5, 0.0, 0.5, 1.0, 7.5}) grid_ok = grid_ok && stochastic_round(x, 0.5, rng) == x;
  return {std::abs(mean - 0.3) <= 3.0 * sigma && grid_ok,
          fmt("mean %.6f, |mean - 0.3| = %.2f sigma (<= 3); grid points unchanged: %s", mean,
              std::abs(mean - 0.3) / sigma, grid_ok ? "yes" : "no")};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / ("dhen_acceptance_" + std::to_string(std::random_device{}()));
  const cli::ExperimentConfig cfg = cli::parse_config(R"({
    "seed": 9,
    "features": {"dim": 8, "dense_width": 4, "sparse": [{"rows": 50}, {"rows": 50}, {"rows": 50}, {"rows": 50}]},
    "network": {"layers": [{"modules": ["cross-net", "linear"], "ensemble": "sum", "l": 5},
                           {"modules": ["self-attention", "dot-interaction"], "ensemble": "concat", "l": 3}]},
    "train": {"batch_size": 128, "steps": 60, "eval_every": 20},
    "synthetic": {"train_samples": 4000, "eval_samples": 1000, "terms": [{"fields": [0, 1], "coefficient": 2.0}]},
    "cluster": {},
    "paradigm": {"kind": "hsdp", "global_batch": 65536},
    "tables": {"items": "reference"}
  })");
  std::size_t compared = 0, differing = 0;
  for (int run = 0; run < 2; ++run) {
    const fs::path out = root / std::to_string(run);
    cli::cmd_train(cfg, out);
    for (auto kind : {sim::ParadigmKind::kDP, sim::ParadigmKind::kFSDP, sim::ParadigmKind::kHSDP}) {
      cli::cmd_simulate(cfg, kind, out);
    }
  }
  for (const auto& entry : fs::directory_iterator(root / "0")) {
    ++compared;
    if (slurp(entry.path()) != slurp(root / "1" / entry.path().filename())) ++differing;
  }
  std::error_code ec;
  fs::remove_all(root, ec);
  return {compared == 6 && differing == 0,
          fmt("%zu output files from repeated train/simulate runs, %zu differ", compared, differing)};
}

}  // namespace

// Optional arguments restrict the run to the listed criterion numbers.
int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::pair<const char*, std::function<Verdict()>> criteria[] = {
      {"gradient fidelity", gradient_fidelity},
      {"layer structure", layer_structure},
      {"NE correctness", ne_correctness},
      {"depth echo", depth_echo},
      {"ensemble echo", ensemble_echo},
      {"LPT guarantee", lpt_guarantee},
      {"collective-byte exactness", byte_exactness},
      {"memory/feasibility shape", memory_shape},
      {"throughput ordering", throughput_ordering},
      {"quantized-collective model", quantized_collectives},
      {"stochastic rounding", stochastic_rounding},
      {"determinism", determinism},
  };
  int failures = 0;
  int index = 0;
  int ran = 0;
  for (const auto& [name, check] : criteria) {
    ++index;
    if (!only.empty() && !only.contains(index)) continue;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    ++ran;
    if (!v.pass) ++failures;
    std::printf("[%s] %2d %s: %s\n", v.pass ? "PASS" : "FAIL", index, name, v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria passed\n", ran - failures, ran);
  return failures;
}
