#include "dhen/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

namespace dhen::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Typed access to one JSON object, tracking visited keys so leftovers can
// be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  Section child(const std::string& key) { return Section(raw(key), at(key)); }

  std::size_t size(const std::string& key, std::size_t def) { return has(key) ? to_size(raw(key), at(key)) : def; }
  double number(const std::string& key, double def) { return has(key) ? to_double(raw(key), at(key)) : def; }
  bool flag(const std::string& key, bool def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(at(key), "expected true or false");
    return v.get<bool>();
  }
  std::string text(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError(at(key), "expected a string");
    return v.get<std::string>();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
    }
  }

  static std::size_t to_size(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() >= 0) return static_cast<std::size_t>(v.get<std::int64_t>());
    } else if (v.is_number_float()) {
      const double d = v.get<double>();
      if (d >= 0.0 && d == std::floor(d) && d < 1.8e19) return static_cast<std::size_t>(d);
    }
    throw ConfigError(path, "expected a non-negative integer");
  }

  static double to_double(const json& v, const std::string& path) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    }
    throw ConfigError(path, "expected a number");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const json& array_at(Section& s, const std::string& key) {
  const json& v = s.raw(key);
  if (!v.is_array()) throw ConfigError(s.at(key), "expected a list");
  return v;
}

std::string index_path(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

std::vector<std::size_t> size_list(Section& s, const std::string& key) {
  std::vector<std::size_t> out;
  if (!s.has(key)) return out;
  const json& v = array_at(s, key);
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(Section::to_size(v[i], index_path(s.at(key), i)));
  return out;
}

std::vector<double> number_list(Section& s, const std::string& key) {
  std::vector<double> out;
  if (!s.has(key)) return out;
  const json& v = array_at(s, key);
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(Section::to_double(v[i], index_path(s.at(key), i)));
  return out;
}

// Runs a domain validator and re-raises its message against a config path.
template <class F>
void validate_at(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
}

FeatureConfig parse_features(Section s) {
  FeatureConfig f;
  f.dim = s.size("dim", f.dim);
  f.dense_width = s.size("dense_width", f.dense_width);
  f.dense_hidden = size_list(s, "dense_hidden");
  if (s.has("sparse")) {
    const json& v = array_at(s, "sparse");
    for (std::size_t i = 0; i < v.size(); ++i) {
      Section field(v[i], index_path(s.at("sparse"), i));
      SparseFieldSpec spec;
      spec.name = field.text("name", "f" + std::to_string(i));
      if (!field.has("rows")) throw ConfigError(field.at("rows"), "missing");
      spec.rows = field.size("rows", 0);
      field.finish();
      f.sparse.push_back(spec);
    }
  }
  s.finish();
  validate_at(s.at(""), [&] { f.validate(); });
  return f;
}

ModuleSpec parse_module(const json& v, const std::string& path, std::optional<std::size_t> layer_l) {
  ModuleSpec m;
  auto kind_of = [&](const std::string& name, const std::string& p) {
    try {
      return parse_module_kind(name);
    } catch (const std::exception& e) {
      throw ConfigError(p, e.what());
    }
  };
  if (v.is_string()) {
    m.kind = kind_of(v.get<std::string>(), path);
    if (!layer_l) throw ConfigError(path, "module needs an output count: set `l` on the layer or the module");
    m.l = *layer_l;
    return m;
  }
  Section s(v, path);
  if (!s.has("kind")) throw ConfigError(s.at("kind"), "missing");
  m.kind = kind_of(s.text("kind", ""), s.at("kind"));
  if (s.has("l")) {
    m.l = s.size("l", 0);
  } else if (layer_l) {
    m.l = *layer_l;
  } else {
    throw ConfigError(s.at("l"), "missing, and the layer sets no `l`");
  }
  m.heads = s.size("heads", m.heads);
  m.ffn_width = s.size("ffn_width", m.ffn_width);
  m.channels = s.size("channels", m.channels);
  m.kernel = s.size("kernel", m.kernel);
  s.finish();
  return m;
}

ProfileOverride parse_profile(const json& v, const std::string& path) {
  ProfileOverride p;
  if (v.is_string()) {
    if (v.get<std::string>() != "reference") throw ConfigError(path, "expected \"reference\" or an object");
    p.reference = true;
    return p;
  }
  Section s(v, path);
  p.layers = s.size("layers", 0);
  p.param_bytes = s.number("param_bytes_per_layer", 0.0);
  p.activation_bytes = s.number("activation_bytes_per_layer", 0.0);
  p.flops = s.number("flops_per_layer", 0.0);
  p.optimizer_multiplier = s.number("optimizer_multiplier", p.optimizer_multiplier);
  s.finish();
  for (double x : {p.param_bytes, p.activation_bytes, p.flops, p.optimizer_multiplier}) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError(path, "profile values must be finite and non-negative");
  }
  return p;
}

void parse_network(Section s, ExperimentConfig& cfg) {
  if (s.has("profile")) cfg.profile = parse_profile(s.raw("profile"), s.at("profile"));
  cfg.network.norm_epsilon = s.number("norm_epsilon", cfg.network.norm_epsilon);
  if (s.has("head")) {
    Section h = s.child("head");
    if (h.has("hidden")) cfg.network.head.hidden = size_list(h, "hidden");
    cfg.network.head.bias_only = h.flag("bias_only", false);
    h.finish();
  }
  if (s.has("layers")) {
    const json& layers = array_at(s, "layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      Section ls(layers[i], index_path(s.at("layers"), i));
      LayerSpec layer;
      std::optional<std::size_t> l;
      if (ls.has("l")) l = ls.size("l", 0);
      if (!ls.has("modules")) throw ConfigError(ls.at("modules"), "missing");
      const json& mods = array_at(ls, "modules");
      for (std::size_t j = 0; j < mods.size(); ++j) {
        layer.modules.push_back(parse_module(mods[j], index_path(ls.at("modules"), j), l));
      }
      if (ls.has("ensemble")) {
        const std::string name = ls.text("ensemble", "");
        validate_at(ls.at("ensemble"), [&] { layer.ensemble = parse_ensemble(name); });
      }
      layer.dense_token = ls.flag("dense_token", false);
      ls.finish();
      validate_at(ls.at("modules"), [&] { layer.output_count(); });
      cfg.network.layers.push_back(std::move(layer));
    }
  }
  s.finish();
  if (!cfg.network.layers.empty() || !cfg.profile) {
    validate_at(s.at("layers"), [&] { cfg.network.validate(); });
  }
}

void parse_train(Section s, TrainConfig& t) {
  t.batch_size = s.size("batch_size", t.batch_size);
  t.steps = s.size("steps", t.steps);
  t.eval_every = s.size("eval_every", t.eval_every);
  t.adam.learning_rate = s.number("learning_rate", t.adam.learning_rate);
  t.adam.beta1 = s.number("beta1", t.adam.beta1);
  t.adam.beta2 = s.number("beta2", t.adam.beta2);
  t.adam.epsilon = s.number("epsilon", t.adam.epsilon);
  t.record_wall_clock = s.flag("record_wall_clock", t.record_wall_clock);
  s.finish();
  validate_at(s.at(""), [&] { t.validate(); });
}

void parse_synthetic(Section s, ExperimentConfig& cfg) {
  SyntheticSpec& syn = cfg.synthetic;
  cfg.train_samples = s.size("train_samples", cfg.train_samples);
  cfg.eval_samples = s.size("eval_samples", cfg.eval_samples);
  if (cfg.train_samples == 0) throw ConfigError(s.at("train_samples"), "must be positive");
  if (cfg.eval_samples == 0) throw ConfigError(s.at("eval_samples"), "must be positive");
  if (s.has("terms")) {
    const json& terms = array_at(s, "terms");
    for (std::size_t i = 0; i < terms.size(); ++i) {
      Section ts(terms[i], index_path(s.at("terms"), i));
      PlantedTerm term;
      term.fields = size_list(ts, "fields");
      term.coefficient = ts.number("coefficient", term.coefficient);
      ts.finish();
      syn.terms.push_back(term);
    }
  }
  syn.dense_coefficients = number_list(s, "dense_coefficients");
  syn.bias = s.number("bias", syn.bias);
  syn.temperature = s.number("temperature", syn.temperature);
  syn.ids_per_field = s.size("ids_per_field", syn.ids_per_field);
  const std::string latent = s.text("latent", "rademacher");
  if (latent == "rademacher") {
    syn.latent = LatentKind::kRademacher;
  } else if (latent == "gaussian") {
    syn.latent = LatentKind::kGaussian;
  } else {
    throw ConfigError(s.at("latent"), "expected rademacher or gaussian");
  }
  s.finish();
}

void parse_cluster(Section s, sim::ClusterSpec& c) {
  c.hosts = s.size("hosts", c.hosts);
  c.gpus_per_host = s.size("gpus_per_host", c.gpus_per_host);
  c.hbm_bytes = s.number("hbm_bytes", c.hbm_bytes);
  c.peak_flops = s.number("peak_flops", c.peak_flops);
  c.efficiency = s.number("efficiency", c.efficiency);
  c.hbm_bandwidth = s.number("hbm_bandwidth", c.hbm_bandwidth);
  c.intra_bandwidth = s.number("intra_bandwidth", c.intra_bandwidth);
  c.intra_latency = s.number("intra_latency", c.intra_latency);
  c.cross_bandwidth = s.number("cross_bandwidth", c.cross_bandwidth);
  c.cross_latency = s.number("cross_latency", c.cross_latency);
  c.host_link_bandwidth = s.number("host_link_bandwidth", c.host_link_bandwidth);
  s.finish();
  validate_at(s.at(""), [&] { c.validate(); });
}

void parse_paradigm_section(Section s, ExperimentConfig& cfg) {
  sim::ParadigmSpec& p = cfg.paradigm;
  if (s.has("kind")) {
    const std::string kind = s.text("kind", "");
    validate_at(s.at("kind"), [&] { p.kind = sim::parse_paradigm(kind); });
  }
  p.activation_checkpointing = s.flag("activation_checkpointing", p.activation_checkpointing);
  p.cpu_offload = s.flag("cpu_offload", p.cpu_offload);
  p.collective_bytes = s.size("collective_bytes", p.collective_bytes);
  p.embedding_bytes = s.size("embedding_bytes", p.embedding_bytes);
  p.prefetch = s.flag("prefetch", p.prefetch);
  cfg.global_batch = s.size("global_batch", cfg.global_batch);
  if (cfg.global_batch == 0) throw ConfigError(s.at("global_batch"), "must be positive");
  s.finish();
  if (p.collective_bytes == 0) throw ConfigError(s.at("collective_bytes"), "must be positive");
  if (p.embedding_bytes == 0) throw ConfigError(s.at("embedding_bytes"), "must be positive");
}

void parse_tables(Section s, TablesSection& t) {
  if (s.has("devices")) {
    t.devices = s.size("devices", 1);
    if (*t.devices == 0) throw ConfigError(s.at("devices"), "must be positive");
  }
  if (s.has("batch")) {
    t.batch = s.number("batch", 1.0);
    if (!(*t.batch > 0.0)) throw ConfigError(s.at("batch"), "must be positive");
  }
  if (s.has("alpha")) t.alpha = s.number("alpha", 1.0);
  if (s.has("beta")) t.beta = s.number("beta", 1.0);
  for (auto* w : {&t.alpha, &t.beta}) {
    if (*w && !(**w >= 0.0)) throw ConfigError(s.at(w == &t.alpha ? "alpha" : "beta"), "must be non-negative");
  }
  if (s.has("items")) {
    const json& v = s.raw("items");
    if (v.is_string()) {
      if (v.get<std::string>() != "reference") throw ConfigError(s.at("items"), "expected \"reference\" or a list");
      t.items = sim::reference_tables();
    } else {
      if (!v.is_array()) throw ConfigError(s.at("items"), "expected a list");
      for (std::size_t i = 0; i < v.size(); ++i) {
        Section ts(v[i], index_path(s.at("items"), i));
        sharding::TableSpec table;
        table.name = ts.text("name", "table" + std::to_string(i));
        table.rows = ts.size("rows", table.rows);
        table.cols = ts.size("cols", table.cols);
        table.dtype_bytes = ts.size("dtype_bytes", table.dtype_bytes);
        table.pooled_lookups = ts.number("pooled", table.pooled_lookups);
        ts.finish();
        validate_at(ts.at(""), [&] { table.validate(); });
        t.items.push_back(table);
      }
    }
  }
  s.finish();
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Section s(root, "");
  if (s.has("seed")) cfg.seed = s.size("seed", 0);
  cfg.train.seed = cfg.seed;
  if (s.has("features")) cfg.network.features = parse_features(s.child("features"));
  if (s.has("network")) {
    cfg.has_network = true;
    parse_network(s.child("network"), cfg);
  }
  if (s.has("train")) parse_train(s.child("train"), cfg.train);
  if (s.has("synthetic")) {
    cfg.has_synthetic = true;
    parse_synthetic(s.child("synthetic"), cfg);
  }
  if (s.has("cluster")) {
    cfg.has_cluster = true;
    parse_cluster(s.child("cluster"), cfg.cluster);
  }
  if (s.has("paradigm")) {
    cfg.has_paradigm = true;
    parse_paradigm_section(s.child("paradigm"), cfg);
  }
  if (s.has("tables")) {
    cfg.has_tables = true;
    parse_tables(s.child("tables"), cfg.tables);
  }
  s.finish();

  const FeatureConfig& f = cfg.network.features;
  cfg.synthetic.seed = cfg.seed;
  cfg.synthetic.dense_width = f.dense_width;
  cfg.synthetic.cardinalities.clear();
  for (const auto& field : f.sparse) cfg.synthetic.cardinalities.push_back(field.rows);
  if (cfg.has_synthetic) validate_at("synthetic", [&] { cfg.synthetic.validate(); });
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<root>", "cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string network_to_json(const NetworkSpec& spec) {
  json features;
  features["dim"] = spec.features.dim;
  features["dense_width"] = spec.features.dense_width;
  features["dense_hidden"] = spec.features.dense_hidden;
  features["sparse"] = json::array();
  for (const auto& f : spec.features.sparse) features["sparse"].push_back({{"name", f.name}, {"rows", f.rows}});
  json layers = json::array();
  for (const auto& layer : spec.layers) {
    json mods = json::array();
    for (const auto& m : layer.modules) {
      mods.push_back({{"kind", module_kind_name(m.kind)},
                      {"l", m.l},
                      {"heads", m.heads},
                      {"ffn_width", m.ffn_width},
                      {"channels", m.channels},
                      {"kernel", m.kernel}});
    }
    layers.push_back({{"modules", mods}, {"ensemble", ensemble_name(layer.ensemble)}, {"dense_token", layer.dense_token}});
  }
  json network;
  network["layers"] = layers;
  network["head"] = {{"hidden", spec.head.hidden}, {"bias_only", spec.head.bias_only}};
  network["norm_epsilon"] = spec.norm_epsilon;
  return json{{"features", features}, {"network", network}}.dump(2);
}

// ---------------------------------------------------------------------------

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

double last_eval_ne(const MetricLog& log) {
  for (auto it = log.rows.rbegin(); it != log.rows.rend(); ++it) {
    if (std::isfinite(it->eval_ne)) return it->eval_ne;
  }
  throw std::invalid_argument("metrics file has no evaluated row");
}

}  // namespace

TrainOutcome cmd_train(const ExperimentConfig& config, const fs::path& out_dir,
                       const std::optional<fs::path>& baseline) {
  if (!config.has_network) throw ConfigError("network", "train needs a network section");
  if (config.network.layers.empty()) throw ConfigError("network.layers", "train needs at least one layer");
  if (!config.has_synthetic) throw ConfigError("synthetic", "train needs a synthetic data section");
  std::optional<double> baseline_ne;
  if (baseline) {
    std::ifstream in(*baseline);
    if (!in) throw std::runtime_error("cannot read baseline metrics " + baseline->string());
    baseline_ne = last_eval_ne(MetricLog::read_csv(in));
  }

  const Dataset train_set = generate_synthetic(config.synthetic, config.train_samples, 0);
  const Dataset eval_set = generate_synthetic(config.synthetic, config.eval_samples, 1);
  Rng rng(config.seed);
  DhenNetwork net(config.network, rng);
  const MetricLog log = train(net, train_set, eval_set, config.train);

  TrainOutcome outcome;
  outcome.final_eval_ne = last_eval_ne(log);
  if (baseline_ne) {
    outcome.baseline_eval_ne = baseline_ne;
    outcome.ne_diff_percent = (outcome.final_eval_ne - *baseline_ne) / *baseline_ne * 100.0;
  }

  ensure_dir(out_dir);
  {
    auto out = open_out(out_dir / "metrics.csv");
    log.write_csv(out);
  }
  {
    auto out = open_out(out_dir / "summary.txt");
    out << "final_eval_ne," << fmt(outcome.final_eval_ne) << '\n';
    out << "steps," << config.train.steps << '\n';
    out << "parameters," << net.parameter_count() << '\n';
    if (baseline_ne) {
      out << "baseline," << baseline->filename().string() << '\n';
      out << "baseline_eval_ne," << fmt(*baseline_ne) << '\n';
      out << "ne_diff_percent," << fmt(*outcome.ne_diff_percent) << '\n';
    }
  }
  {
    json model = json::parse(network_to_json(config.network));
    model["seed"] = config.seed;
    json params = json::object();
    for (Param* p : net.parameters()) {
      params[p->name] = {{"shape", p->value.shape()}, {"values", p->value.values()}};
    }
    model["parameters"] = params;
    auto out = open_out(out_dir / "trained_model.json");
    out << model.dump() << '\n';
  }
  return outcome;
}

PlanOutcome cmd_plan(const ExperimentConfig& config, const fs::path& out_dir) {
  if (!config.has_tables) throw ConfigError("tables", "plan needs a tables section");
  const TablesSection& t = config.tables;
  const std::size_t devices = t.devices.value_or(config.has_cluster ? config.cluster.gpus() : 1);
  const double batch = t.batch.value_or(1.0);
  const sim::CostWeights defaults = sim::default_cost_weights(config.cluster);
  const sim::CostWeights weights{t.alpha.value_or(defaults.alpha), t.beta.value_or(defaults.beta)};

  PlanOutcome outcome;
  outcome.shards = sharding::slice_tables(t.items, devices, batch, weights);
  outcome.placement = sharding::lpt_place(std::span<const sharding::ShardCost>(outcome.shards), devices);
  std::vector<double> costs;
  for (const auto& s : outcome.shards) costs.push_back(s.cost);
  if (sharding::brute_force_feasible(costs.size(), devices)) {
    outcome.optimum = sharding::brute_force_place(costs, devices);
    outcome.ratio = *outcome.optimum > 0.0 ? outcome.placement.makespan / *outcome.optimum : 1.0;
  }

  ensure_dir(out_dir);
  {
    auto out = open_out(out_dir / "plan.csv");
    out << "shard,table,col_begin,col_end,cols,cost,device\n";
    for (std::size_t i = 0; i < outcome.shards.size(); ++i) {
      const auto& s = outcome.shards[i];
      out << i << ',' << t.items[s.table].name << ',' << s.col_begin << ',' << s.col_end << ',' << s.cols() << ','
          << fmt(s.cost) << ',' << outcome.placement.device_of[i] << '\n';
    }
  }
  {
    auto out = open_out(out_dir / "balance.txt");
    out << "devices," << devices << '\n';
    out << "shards," << outcome.shards.size() << '\n';
    for (std::size_t d = 0; d < devices; ++d) out << "load." << d << ',' << fmt(outcome.placement.loads[d]) << '\n';
    out << "makespan," << fmt(outcome.placement.makespan) << '\n';
    out << "lpt_bound," << fmt(sharding::lpt_bound(devices)) << '\n';
    if (outcome.optimum) {
      out << "optimum," << fmt(*outcome.optimum) << '\n';
      out << "ratio," << fmt(*outcome.ratio) << '\n';
    } else {
      out << "optimum,skipped (instance beyond the exhaustive-search limit)\n";
    }
  }
  return outcome;
}

sim::DenseModelProfile resolve_profile(const ExperimentConfig& config, std::optional<std::size_t> layers) {
  if (config.profile) {
    const ProfileOverride& p = *config.profile;
    std::size_t n = layers.value_or(p.layers ? p.layers : config.network.layers.size());
    if (n == 0) throw ConfigError("network.profile.layers", "profile needs a layer count");
    if (p.reference) return sim::reference_profile(n);
    return sim::uniform_profile(n, p.param_bytes, p.activation_bytes, p.flops, p.optimizer_multiplier);
  }
  if (!config.has_network || config.network.layers.empty()) {
    throw ConfigError("network", "simulation needs network layers or network.profile");
  }
  NetworkSpec spec = config.network;
  if (layers) {
    if (*layers == 0) throw ConfigError("--layers", "layer counts must be positive");
    spec.layers.clear();
    for (std::size_t i = 0; i < *layers; ++i) spec.layers.push_back(config.network.layers[i % config.network.layers.size()]);
    validate_at("network.layers", [&] { spec.validate(); });
  }
  return sim::profile_from_network(spec);
}

sim::EmbeddingPlan resolve_plan(const ExperimentConfig& config) {
  const std::size_t gpus = config.cluster.gpus();
  if (!config.has_tables) return sim::empty_plan(gpus);
  const TablesSection& t = config.tables;
  if (t.devices && *t.devices != gpus) {
    throw ConfigError("tables.devices", "plan is for " + std::to_string(*t.devices) + " devices but the cluster has " +
                                            std::to_string(gpus) + " GPUs");
  }
  const sim::CostWeights defaults = sim::default_cost_weights(config.cluster);
  const sim::CostWeights weights{t.alpha.value_or(defaults.alpha), t.beta.value_or(defaults.beta)};
  return sim::make_plan(t.items, gpus, t.batch.value_or(static_cast<double>(config.global_batch)), weights);
}

namespace {

void require_sim_sections(const ExperimentConfig& config) {
  if (!config.has_cluster) throw ConfigError("cluster", "simulation needs a cluster section");
  if (!config.has_paradigm) throw ConfigError("paradigm", "simulation needs a paradigm section");
}

}  // namespace

sim::SimReport cmd_simulate(const ExperimentConfig& config, sim::ParadigmKind paradigm, const fs::path& out_dir) {
  require_sim_sections(config);
  sim::ParadigmSpec p = config.paradigm;
  p.kind = paradigm;
  validate_at("paradigm", [&] { p.validate(); });
  const sim::SimReport report =
      sim::simulate_iteration(p, resolve_profile(config), config.cluster, resolve_plan(config), config.global_batch);
  ensure_dir(out_dir);
  auto out = open_out(out_dir / ("simulate_" + std::string(sim::paradigm_name(paradigm)) + ".csv"));
  sim::write_report_csv(report, out);
  return report;
}

std::vector<std::size_t> default_sweep() { return {4, 8, 12, 16, 20, 24, 28, 32}; }

std::vector<std::size_t> parse_layer_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size() || v == 0 || item[0] == '-') {
      throw ConfigError("--layers", "expected a comma-separated list of positive integers, got '" + text + "'");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("--layers", "empty layer list");
  return out;
}

std::vector<sim::ComparisonRow> cmd_compare(const ExperimentConfig& config, const std::vector<std::size_t>& layers,
                                            const fs::path& out_dir) {
  require_sim_sections(config);
  if (layers.empty()) throw ConfigError("--layers", "empty layer list");
  std::vector<sim::SweepPoint> sweep;
  for (std::size_t n : layers) sweep.push_back({n, resolve_profile(config, n)});
  const auto rows =
      sim::compare_paradigms(sweep, config.cluster, config.paradigm, resolve_plan(config), config.global_batch);
  ensure_dir(out_dir);
  auto out = open_out(out_dir / "compare.csv");
  sim::write_comparison_csv(rows, out);
  return rows;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"DHEN recommendation model: training, embedding sharding plans and training-cluster simulation"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir = "out";
  std::string baseline;
  std::string paradigm = "hsdp";
  std::string layers;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("config", config_path, "JSON experiment config")->required();
    cmd->add_option("--out", out_dir, "output directory")->capture_default_str();
  };
  CLI::App* train_cmd = app.add_subcommand("train", "train on synthetic data and write metrics");
  add_common(train_cmd);
  train_cmd->add_option("--baseline", baseline, "metrics.csv of a baseline run for the NE diff");
  CLI::App* plan_cmd = app.add_subcommand("plan", "slice and place embedding tables");
  add_common(plan_cmd);
  CLI::App* sim_cmd = app.add_subcommand("simulate", "simulate one training iteration");
  add_common(sim_cmd);
  sim_cmd->add_option("--paradigm", paradigm, "dp, fsdp or hsdp")->capture_default_str();
  CLI::App* cmp_cmd = app.add_subcommand("compare", "sweep layer counts over all paradigms");
  add_common(cmp_cmd);
  cmp_cmd->add_option("--layers", layers, "comma-separated layer counts (default 4,8,...,32)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (sim_cmd->parsed()) {
      // Reject a bad flag before touching the config.
      (void)sim::parse_paradigm(paradigm);
    }
    const ExperimentConfig config = load_config(config_path);
    if (train_cmd->parsed()) {
      const TrainOutcome r =
          cmd_train(config, out_dir, baseline.empty() ? std::nullopt : std::optional<fs::path>(baseline));
      std::cout << "final eval NE " << fmt(r.final_eval_ne) << '\n';
      if (r.ne_diff_percent) std::cout << "NE diff vs baseline " << fmt(*r.ne_diff_percent) << " %\n";
    } else if (plan_cmd->parsed()) {
      const PlanOutcome r = cmd_plan(config, out_dir);
      std::cout << r.shards.size() << " shards, makespan " << fmt(r.placement.makespan);
      if (r.ratio) std::cout << ", ratio to optimum " << fmt(*r.ratio);
      std::cout << '\n';
    } else if (sim_cmd->parsed()) {
      const sim::SimReport r = cmd_simulate(config, sim::parse_paradigm(paradigm), out_dir);
      std::cout << sim::report_summary(r);
    } else if (cmp_cmd->parsed()) {
      const auto rows = cmd_compare(config, layers.empty() ? default_sweep() : parse_layer_list(layers), out_dir);
      sim::write_comparison_csv(rows, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error at " << e.what() << '\n';
    return 2;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace dhen::cli
