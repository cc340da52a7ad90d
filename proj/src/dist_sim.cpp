#include "dhen/dist_sim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace dhen::sim {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool positive(double v) { return v > 0.0; }

double max_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
}

}  // namespace

void ClusterSpec::validate() const {
  if (hosts == 0 || gpus_per_host == 0) throw std::invalid_argument("cluster needs at least one host and one gpu per host");
  if (!positive(hbm_bytes) || !positive(peak_flops) || !positive(hbm_bandwidth) || !positive(intra_bandwidth) ||
      !positive(cross_bandwidth) || !positive(host_link_bandwidth)) {
    throw std::invalid_argument("cluster capacities and bandwidths must be positive");
  }
  if (!(efficiency > 0.0 && efficiency <= 1.0)) throw std::invalid_argument("cluster efficiency must lie in (0, 1]");
  if (!(intra_latency >= 0.0) || !(cross_latency >= 0.0)) {
    throw std::invalid_argument("cluster latencies must be non-negative");
  }
}

CostWeights default_cost_weights(const ClusterSpec& cluster) {
  return {1.0 / cluster.peak_flops, 1.0 / cluster.cross_bandwidth};
}

const char* paradigm_name(ParadigmKind kind) {
  switch (kind) {
    case ParadigmKind::kDP: return "dp";
    case ParadigmKind::kFSDP: return "fsdp";
    case ParadigmKind::kHSDP: return "hsdp";
  }
  return "unknown";
}

ParadigmKind parse_paradigm(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (ParadigmKind k : {ParadigmKind::kDP, ParadigmKind::kFSDP, ParadigmKind::kHSDP}) {
    if (lower == paradigm_name(k)) return k;
  }
  throw std::invalid_argument("unknown paradigm '" + name + "' (expected dp, fsdp or hsdp)");
}

void ParadigmSpec::validate() const {
  if (collective_bytes == 0 || embedding_bytes == 0) throw std::invalid_argument("byte widths must be positive");
  if (prefetch && kind == ParadigmKind::kDP) {
    throw std::invalid_argument("prefetch needs a sharded paradigm (fsdp or hsdp)");
  }
}

double DenseModelProfile::total_param_bytes() const {
  return std::accumulate(layer_param_bytes.begin(), layer_param_bytes.end(), 0.0);
}

double DenseModelProfile::total_flops() const { return std::accumulate(layer_flops.begin(), layer_flops.end(), 0.0); }

double DenseModelProfile::max_layer_param_bytes() const { return max_of(layer_param_bytes); }

void DenseModelProfile::validate() const {
  if (layer_param_bytes.empty()) throw std::invalid_argument("profile needs at least one layer");
  if (layer_activation_bytes.size() != layer_param_bytes.size() || layer_flops.size() != layer_param_bytes.size()) {
    throw std::invalid_argument("profile per-layer vectors differ in length");
  }
  auto nonneg = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return x >= 0.0 && std::isfinite(x); });
  };
  if (!nonneg(layer_param_bytes) || !nonneg(layer_activation_bytes) || !nonneg(layer_flops)) {
    throw std::invalid_argument("profile entries must be finite and non-negative");
  }
  if (!(optimizer_multiplier >= 0.0) || !positive(param_dtype_bytes)) {
    throw std::invalid_argument("profile optimizer multiplier must be >= 0 and dtype bytes > 0");
  }
}

namespace {

// Rough count of values a module keeps for its backward pass.
double module_activation_elements(const ModuleSpec& spec, double m, double d) {
  const double l = static_cast<double>(spec.l);
  switch (spec.kind) {
    case ModuleKind::kDotInteraction:
      return m * m + m * (m - 1) / 2 + l * d;
    case ModuleKind::kSelfAttention: {
      const double f = static_cast<double>(spec.resolved_ffn_width(static_cast<std::size_t>(d)));
      return 8 * m * d + 2 * static_cast<double>(spec.heads) * m * m + 2 * m * f + l * d;
    }
    case ModuleKind::kConvolution:
      return 2 * static_cast<double>(spec.channels) * m * d + m * d + l * d;
    case ModuleKind::kLinear:
      return l * d;
    case ModuleKind::kCrossNet:
      return d * d + 2 * l * d;
  }
  return 0.0;
}

}  // namespace

DenseModelProfile profile_from_network(const NetworkSpec& spec, double optimizer_multiplier,
                                       double param_dtype_bytes) {
  spec.validate();
  const FlopBreakdown flops = flop_breakdown(spec);
  const FlopBreakdown params = parameter_breakdown(spec);
  DenseModelProfile out;
  out.optimizer_multiplier = optimizer_multiplier;
  out.param_dtype_bytes = param_dtype_bytes;
  const double bytes = param_dtype_bytes;
  const double d = static_cast<double>(spec.features.dim);

  if (spec.head.bias_only) {
    out.layer_param_bytes = {bytes};
    out.layer_activation_bytes = {bytes};
    out.layer_flops = {0.0};
    return out;
  }

  const auto counts = spec.token_counts();
  double feature_act = static_cast<double>(spec.features.token_count()) * d;
  for (auto w : spec.features.dense_hidden) feature_act += 2.0 * static_cast<double>(w);
  out.layer_param_bytes.push_back(bytes * static_cast<double>(params.features));
  out.layer_activation_bytes.push_back(bytes * feature_act);
  out.layer_flops.push_back(static_cast<double>(flops.features));

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const double module_in = static_cast<double>(counts[i] + (layer.dense_token ? 1 : 0));
    double act = module_in * d + 3.0 * static_cast<double>(counts[i + 1]) * d;
    for (const auto& m : layer.modules) act += module_activation_elements(m, module_in, d);
    out.layer_param_bytes.push_back(bytes * static_cast<double>(params.layers[i]));
    out.layer_activation_bytes.push_back(bytes * act);
    out.layer_flops.push_back(static_cast<double>(flops.layers[i]));
  }

  double head_act = d + 1.0;
  for (auto w : spec.head.hidden) head_act += 2.0 * static_cast<double>(w);
  out.layer_param_bytes.push_back(bytes * static_cast<double>(params.head));
  out.layer_activation_bytes.push_back(bytes * head_act);
  out.layer_flops.push_back(static_cast<double>(flops.head));
  return out;
}

DenseModelProfile uniform_profile(std::size_t layers, double param_bytes, double activation_bytes, double flops,
                                  double optimizer_multiplier) {
  DenseModelProfile out;
  out.layer_param_bytes.assign(layers, param_bytes);
  out.layer_activation_bytes.assign(layers, activation_bytes);
  out.layer_flops.assign(layers, flops);
  out.optimizer_multiplier = optimizer_multiplier;
  return out;
}

DenseModelProfile reference_profile(std::size_t layers) {
  return uniform_profile(layers, kReferenceLayerParamBytes, kReferenceLayerActivationBytes, kReferenceLayerFlops);
}

std::vector<TableSpec> reference_tables() {
  std::vector<TableSpec> out;
  for (int i = 0; i < 64; ++i) out.push_back({"t" + std::to_string(i), 10'000'000, 256, 4, 20.0});
  return out;
}

// ---------------------------------------------------------------------------

const char* collective_name(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::kAllGather: return "allgather";
    case CollectiveKind::kReduceScatter: return "reducescatter";
    case CollectiveKind::kAllReduce: return "allreduce";
    case CollectiveKind::kAllToAll: return "alltoall";
  }
  return "unknown";
}

double collective_bytes(CollectiveKind kind, double payload, std::size_t participants) {
  if (participants == 0) throw std::invalid_argument("collective needs at least one participant");
  if (!(payload >= 0.0)) throw std::invalid_argument("collective payload must be non-negative");
  if (participants == 1) return 0.0;
  const double n = static_cast<double>(participants);
  const double share = payload * (n - 1.0) / n;
  return kind == CollectiveKind::kAllReduce ? 2.0 * share : share;
}

double collective_time(CollectiveKind kind, double payload, std::size_t participants, double bandwidth,
                       double latency) {
  const double bytes = collective_bytes(kind, payload, participants);
  if (participants <= 1) return 0.0;
  const double n = static_cast<double>(participants);
  double steps = 1.0;
  switch (kind) {
    case CollectiveKind::kAllGather:
    case CollectiveKind::kReduceScatter: steps = n - 1.0; break;
    case CollectiveKind::kAllReduce: steps = 2.0 * (n - 1.0); break;
    case CollectiveKind::kAllToAll: steps = 1.0; break;
  }
  return steps * latency + bytes / bandwidth;
}

// ---------------------------------------------------------------------------

void EmbeddingPlan::validate(std::size_t devices) const {
  if (placement.loads.size() != devices) {
    throw PlanMismatchError("plan is for " + std::to_string(placement.loads.size()) + " devices, cluster has " +
                            std::to_string(devices));
  }
  if (placement.device_of.size() != shards.size()) {
    throw PlanMismatchError("placement covers " + std::to_string(placement.device_of.size()) + " shards, plan has " +
                            std::to_string(shards.size()));
  }
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> ranges(tables.size());
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const ShardCost& s = shards[i];
    if (s.table >= tables.size()) throw PlanMismatchError("shard " + std::to_string(i) + " names an unknown table");
    if (placement.device_of[i] >= devices) throw PlanMismatchError("shard " + std::to_string(i) + " placed off-cluster");
    if (s.col_begin >= s.col_end) throw PlanMismatchError("shard " + std::to_string(i) + " has no columns");
    ranges[s.table].push_back({s.col_begin, s.col_end});
  }
  for (std::size_t t = 0; t < tables.size(); ++t) {
    auto& r = ranges[t];
    std::sort(r.begin(), r.end());
    std::size_t next = 0;
    for (auto [b, e] : r) {
      if (b != next) break;
      next = e;
    }
    if (r.empty() || next != tables[t].cols || r.front().first != 0 ||
        std::adjacent_find(r.begin(), r.end(), [](auto a, auto b) { return a.second != b.first; }) != r.end()) {
      throw PlanMismatchError("shards of table '" + tables[t].name + "' do not partition its columns");
    }
  }
}

std::vector<double> EmbeddingPlan::device_bytes(std::size_t dtype_bytes) const {
  std::vector<double> out(devices(), 0.0);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const TableSpec& t = tables[shards[i].table];
    out[placement.device_of[i]] +=
        static_cast<double>(t.rows) * static_cast<double>(shards[i].cols()) * static_cast<double>(dtype_bytes);
  }
  return out;
}

std::vector<double> EmbeddingPlan::device_columns() const {
  std::vector<double> out(devices(), 0.0);
  for (std::size_t i = 0; i < shards.size(); ++i) out[placement.device_of[i]] += static_cast<double>(shards[i].cols());
  return out;
}

std::vector<double> EmbeddingPlan::device_lookup_columns() const {
  std::vector<double> out(devices(), 0.0);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    out[placement.device_of[i]] += tables[shards[i].table].pooled_lookups * static_cast<double>(shards[i].cols());
  }
  return out;
}

EmbeddingPlan make_plan(std::vector<TableSpec> tables, std::size_t devices, double batch,
                        const CostWeights& weights) {
  EmbeddingPlan plan;
  plan.shards = sharding::slice_tables(tables, devices, batch, weights);
  plan.placement = sharding::lpt_place(std::span<const ShardCost>(plan.shards), devices);
  plan.tables = std::move(tables);
  return plan;
}

EmbeddingPlan empty_plan(std::size_t devices) {
  EmbeddingPlan plan;
  plan.placement.loads.assign(devices, 0.0);
  return plan;
}

// ---------------------------------------------------------------------------

namespace {

// HSDP with one GPU per host has no intra-host group; its shard group is the
// whole cluster, which is FSDP.
ParadigmKind effective_kind(ParadigmKind kind, const ClusterSpec& cluster) {
  if (kind == ParadigmKind::kHSDP && cluster.gpus_per_host == 1) return ParadigmKind::kFSDP;
  return kind;
}

}  // namespace

std::size_t shard_group_size(ParadigmKind kind, const ClusterSpec& cluster) {
  switch (effective_kind(kind, cluster)) {
    case ParadigmKind::kDP: return 1;
    case ParadigmKind::kFSDP: return cluster.gpus();
    case ParadigmKind::kHSDP: return cluster.gpus_per_host;
  }
  return 1;
}

double param_residency_cap(ParadigmKind kind, const ClusterSpec& cluster) {
  return cluster.hbm_bytes * static_cast<double>(shard_group_size(kind, cluster));
}

MemoryReport memory_footprint(const ParadigmSpec& paradigm, const DenseModelProfile& profile,
                              const ClusterSpec& cluster, double batch_per_gpu, double embedding_bytes) {
  paradigm.validate();
  profile.validate();
  cluster.validate();
  if (!positive(batch_per_gpu)) throw std::invalid_argument("batch per gpu must be positive");
  const double n = static_cast<double>(shard_group_size(paradigm.kind, cluster));
  const double s = profile.total_param_bytes();
  const double largest = profile.max_layer_param_bytes();

  MemoryReport out;
  out.param_shard = s / n;
  // The persistent shard plus the rest of the largest layer while it is gathered.
  const double working = n == 1.0 ? s : s / n + largest * (n - 1.0) / n;
  out.params = working;
  out.grads = working;
  out.optimizer = paradigm.cpu_offload ? 0.0 : profile.optimizer_multiplier * s / n;
  const auto& act = profile.layer_activation_bytes;
  out.activations = batch_per_gpu * (paradigm.activation_checkpointing
                                         ? max_of(act)
                                         : std::accumulate(act.begin(), act.end(), 0.0));
  out.prefetch = paradigm.prefetch && n > 1.0 ? largest : 0.0;
  out.embeddings = embedding_bytes;
  out.total = out.params + out.grads + out.optimizer + out.activations + out.prefetch + out.embeddings;
  out.capacity = cluster.hbm_bytes;
  out.feasible = out.total <= cluster.hbm_bytes;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string signature(const ParadigmSpec& p, const DenseModelProfile& profile, const ClusterSpec& c,
                      const EmbeddingPlan& plan, std::size_t global_batch) {
  std::ostringstream out;
  out << paradigm_name(p.kind) << '|' << p.activation_checkpointing << p.cpu_offload << p.prefetch << '|'
      << p.embedding_bytes << '|' << c.hosts << 'x' << c.gpus_per_host;
  for (double v : {c.hbm_bytes, c.peak_flops, c.efficiency, c.hbm_bandwidth, c.intra_bandwidth, c.intra_latency,
                   c.cross_bandwidth, c.cross_latency, c.host_link_bandwidth, profile.optimizer_multiplier,
                   profile.param_dtype_bytes}) {
    out << '|' << fmt(v);
  }
  for (const auto* v : {&profile.layer_param_bytes, &profile.layer_activation_bytes, &profile.layer_flops}) {
    out << '|';
    for (double x : *v) out << fmt(x) << ',';
  }
  out << '|' << global_batch << '|';
  for (std::size_t i = 0; i < plan.shards.size(); ++i) {
    const auto& s = plan.shards[i];
    const auto& t = plan.tables[s.table];
    out << t.rows << ':' << s.cols() << ':' << t.pooled_lookups << '@' << plan.placement.device_of[i] << ',';
  }
  return out.str();
}

class Ledger {
 public:
  Ledger(const ClusterSpec& cluster, SimReport& report) : cluster_(cluster), report_(report) {}

  // Records one collective issued once per layer; wire bytes are computed
  // from the summed payload, time from the per-layer calls. Returns the
  // per-layer times.
  std::vector<double> add(const std::string& name, CollectiveKind kind, const std::vector<double>& payloads,
                          std::size_t participants, bool spans_hosts, bool dense) {
    const LinkClass link = spans_hosts ? LinkClass::kCrossHost : LinkClass::kIntraHost;
    const double bw = spans_hosts ? cluster_.cross_bandwidth : cluster_.intra_bandwidth;
    const double lat = spans_hosts ? cluster_.cross_latency : cluster_.intra_latency;
    CollectiveRecord rec;
    rec.name = name;
    rec.kind = kind;
    rec.participants = participants;
    rec.link = link;
    rec.dense = dense;
    std::vector<double> times;
    for (double p : payloads) {
      rec.payload += p;
      times.push_back(collective_time(kind, p, participants, bw, lat));
      rec.time += times.back();
    }
    rec.bytes = collective_bytes(kind, rec.payload, participants);
    (spans_hosts ? report_.cross_bytes : report_.intra_bytes) += rec.bytes;
    if (dense) (spans_hosts ? report_.dense_cross_bytes : report_.dense_intra_bytes) += rec.bytes;
    report_.comm_time += rec.time;
    report_.collectives.push_back(rec);
    return times;
  }

 private:
  const ClusterSpec& cluster_;
  SimReport& report_;
};

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

SimReport simulate_iteration(const ParadigmSpec& paradigm, const DenseModelProfile& profile,
                             const ClusterSpec& cluster, const EmbeddingPlan& plan, std::size_t global_batch) {
  cluster.validate();
  paradigm.validate();
  profile.validate();
  const std::size_t gpus = cluster.gpus();
  plan.validate(gpus);
  if (global_batch == 0) throw std::invalid_argument("global batch must be positive");

  SimReport report;
  report.paradigm = paradigm;
  report.signature = signature(paradigm, profile, cluster, plan, global_batch);
  const double batch = static_cast<double>(global_batch);
  const double local_batch = batch / static_cast<double>(gpus);
  const double embedding_resident = max_of(plan.device_bytes(paradigm.embedding_bytes));
  report.memory = memory_footprint(paradigm, profile, cluster, local_batch, embedding_resident);
  report.feasible = report.memory.feasible;
  if (!report.feasible) return report;

  const ParadigmKind kind = effective_kind(paradigm.kind, cluster);
  const std::size_t group = shard_group_size(kind, cluster);
  const bool multi_host = cluster.hosts > 1;
  const double rate = cluster.peak_flops * cluster.efficiency;
  const double wire_scale = static_cast<double>(paradigm.collective_bytes) / profile.param_dtype_bytes;
  Ledger ledger(cluster, report);
  PhaseTimes& ph = report.phases;

  std::vector<double> dense_payload;
  for (double p : profile.layer_param_bytes) dense_payload.push_back(p * wire_scale);
  const double s_bytes = profile.total_param_bytes();

  // Embedding lookups: model parallel over every GPU.
  if (!plan.shards.empty()) {
    const double cols = max_of(plan.device_columns());
    const double lookup_cols = max_of(plan.device_lookup_columns());
    const std::vector<double> a2a{batch * cols * static_cast<double>(paradigm.collective_bytes)};
    ph.a2a_forward = ledger.add("embedding_alltoall_fwd", CollectiveKind::kAllToAll, a2a, gpus, multi_host, false)[0];
    ph.a2a_backward = ledger.add("embedding_alltoall_bwd", CollectiveKind::kAllToAll, a2a, gpus, multi_host, false)[0];
    ph.embedding_lookup = batch * lookup_cols * static_cast<double>(paradigm.embedding_bytes) / cluster.hbm_bandwidth;
    ph.embedding_update = 2.0 * ph.embedding_lookup;
  }

  const std::size_t layers = profile.layer_count();
  std::vector<double> fwd(layers), bwd(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    fwd[i] = local_batch * profile.layer_flops[i] / rate;
    bwd[i] = 2.0 * fwd[i] + (paradigm.activation_checkpointing ? fwd[i] : 0.0);
  }
  ph.dense_forward = sum(fwd);
  ph.dense_backward = sum(bwd);

  double async_stream = 0.0;
  if (kind == ParadigmKind::kDP) {
    async_stream = sum(ledger.add("dense_allreduce", CollectiveKind::kAllReduce, {s_bytes * wire_scale}, gpus,
                                  multi_host, true));
  } else {
    const bool group_spans_hosts = kind == ParadigmKind::kFSDP && multi_host;
    const auto ag_f = ledger.add("dense_allgather_fwd", CollectiveKind::kAllGather, dense_payload, group,
                                 group_spans_hosts, true);
    const auto ag_b = ledger.add("dense_allgather_bwd", CollectiveKind::kAllGather, dense_payload, group,
                                 group_spans_hosts, true);
    if (paradigm.prefetch) {
      // Layer i's gather hides under the compute of the layer before it in
      // execution order.
      ph.forward_allgather = ag_f[0];
      for (std::size_t i = 1; i < layers; ++i) ph.forward_allgather += std::max(0.0, ag_f[i] - fwd[i - 1]);
      ph.backward_allgather = ag_b[layers - 1];
      for (std::size_t i = layers - 1; i-- > 0;) ph.backward_allgather += std::max(0.0, ag_b[i] - bwd[i + 1]);
    } else {
      ph.forward_allgather = sum(ag_f);
      ph.backward_allgather = sum(ag_b);
    }
    async_stream += sum(ledger.add("dense_reducescatter", CollectiveKind::kReduceScatter, dense_payload, group,
                                   group_spans_hosts, true));
    if (kind == ParadigmKind::kHSDP) {
      std::vector<double> shard_payload;
      for (double p : dense_payload) shard_payload.push_back(p / static_cast<double>(cluster.gpus_per_host));
      async_stream += sum(ledger.add("dense_allreduce_cross", CollectiveKind::kAllReduce, shard_payload,
                                     cluster.hosts, multi_host, true));
    }
  }
  ph.gradient_sync = std::max(0.0, async_stream - ph.dense_backward);

  if (paradigm.cpu_offload) {
    ph.offload_transfer = 2.0 * s_bytes / static_cast<double>(group) / cluster.host_link_bandwidth;
    report.comm_time += ph.offload_transfer;
  }

  report.compute_time = ph.embedding_lookup + ph.dense_forward + ph.dense_backward + ph.embedding_update;
  report.exposed_comm = ph.a2a_forward + ph.forward_allgather + ph.backward_allgather + ph.gradient_sync +
                        ph.a2a_backward + ph.offload_transfer;
  report.overlapped_comm = std::max(0.0, report.comm_time - report.exposed_comm);
  report.iteration_time = report.compute_time + report.exposed_comm;
  report.qps = report.iteration_time > 0.0 ? batch / report.iteration_time : std::numeric_limits<double>::infinity();
  return report;
}

void write_report_csv(const SimReport& r, std::ostream& out) {
  auto row = [&](const std::string& section, const std::string& item, const std::string& value) {
    out << section << ',' << item << ',' << value << '\n';
  };
  out << "section,item,value\n";
  row("verdict", "memory", r.feasible ? "feasible" : "infeasible");
  const MemoryReport& m = r.memory;
  row("memory", "params_bytes", fmt(m.params));
  row("memory", "grads_bytes", fmt(m.grads));
  row("memory", "optimizer_bytes", fmt(m.optimizer));
  row("memory", "activations_bytes", fmt(m.activations));
  row("memory", "prefetch_bytes", fmt(m.prefetch));
  row("memory", "embeddings_bytes", fmt(m.embeddings));
  row("memory", "param_shard_bytes", fmt(m.param_shard));
  row("memory", "peak_bytes", fmt(m.total));
  row("memory", "capacity_bytes", fmt(m.capacity));
  if (!r.feasible) return;
  const PhaseTimes& p = r.phases;
  row("phase", "embedding_alltoall_fwd_s", fmt(p.a2a_forward));
  row("phase", "embedding_lookup_s", fmt(p.embedding_lookup));
  row("phase", "dense_fwd_s", fmt(p.dense_forward));
  row("phase", "dense_fwd_allgather_exposed_s", fmt(p.forward_allgather));
  row("phase", "dense_bwd_s", fmt(p.dense_backward));
  row("phase", "dense_bwd_allgather_exposed_s", fmt(p.backward_allgather));
  row("phase", "gradient_sync_exposed_s", fmt(p.gradient_sync));
  row("phase", "embedding_alltoall_bwd_s", fmt(p.a2a_backward));
  row("phase", "embedding_update_s", fmt(p.embedding_update));
  row("phase", "offload_transfer_s", fmt(p.offload_transfer));
  for (const auto& c : r.collectives) {
    row("collective", c.name + ".kind", collective_name(c.kind));
    row("collective", c.name + ".participants", std::to_string(c.participants));
    row("collective", c.name + ".link", c.link == LinkClass::kCrossHost ? "cross-host" : "intra-host");
    row("collective", c.name + ".payload_bytes", fmt(c.payload));
    row("collective", c.name + ".wire_bytes", fmt(c.bytes));
    row("collective", c.name + ".time_s", fmt(c.time));
  }
  row("bytes", "intra_host", fmt(r.intra_bytes));
  row("bytes", "cross_host", fmt(r.cross_bytes));
  row("bytes", "dense_intra_host", fmt(r.dense_intra_bytes));
  row("bytes", "dense_cross_host", fmt(r.dense_cross_bytes));
  row("time", "compute_s", fmt(r.compute_time));
  row("time", "comm_s", fmt(r.comm_time));
  row("time", "exposed_comm_s", fmt(r.exposed_comm));
  row("time", "overlapped_comm_s", fmt(r.overlapped_comm));
  row("time", "iteration_s", fmt(r.iteration_time));
  row("time", "qps", fmt(r.qps));
}

std::string report_summary(const SimReport& r) {
  char buf[512];
  if (!r.feasible) {
    std::snprintf(buf, sizeof buf, "%s: infeasible (peak %.3f GB > HBM %.3f GB)\n", paradigm_name(r.paradigm.kind),
                  r.memory.total / 1e9, r.memory.capacity / 1e9);
    return buf;
  }
  std::snprintf(buf, sizeof buf,
                "%s: feasible, peak %.3f GB of %.3f GB\n"
                "  iteration %.6f s (compute %.6f s, exposed comm %.6f s, overlapped %.6f s), %.1f samples/s\n"
                "  wire bytes per gpu: intra-host %.6g, cross-host %.6g\n",
                paradigm_name(r.paradigm.kind), r.memory.total / 1e9, r.memory.capacity / 1e9, r.iteration_time,
                r.compute_time, r.exposed_comm, r.overlapped_comm, r.qps, r.intra_bytes, r.cross_bytes);
  return buf;
}

std::vector<ComparisonRow> compare_paradigms(std::span<const SweepPoint> sweep, const ClusterSpec& cluster,
                                             const ParadigmSpec& options, const EmbeddingPlan& plan,
                                             std::size_t global_batch) {
  if (sweep.empty()) throw std::invalid_argument("compare_paradigms: empty sweep");
  std::vector<ComparisonRow> rows;
  for (const auto& point : sweep) {
    for (ParadigmKind kind : {ParadigmKind::kDP, ParadigmKind::kFSDP, ParadigmKind::kHSDP}) {
      ParadigmSpec p = options;
      p.kind = kind;
      if (kind == ParadigmKind::kDP) p.prefetch = false;
      const SimReport r = simulate_iteration(p, point.profile, cluster, plan, global_batch);
      rows.push_back({point.layers, kind, r.feasible, r.iteration_time, r.qps, r.memory.total});
    }
  }
  return rows;
}

void write_comparison_csv(std::span<const ComparisonRow> rows, std::ostream& out) {
  out << "layers,paradigm,feasible,iteration_s,qps,peak_memory_bytes\n";
  for (const auto& r : rows) {
    out << r.layers << ',' << paradigm_name(r.kind) << ',' << (r.feasible ? "feasible" : "infeasible") << ','
        << (r.feasible ? fmt(r.iteration_time) : "") << ',' << (r.feasible ? fmt(r.qps) : "infeasible") << ','
        << fmt(r.peak_memory) << '\n';
  }
}

double optimization_delta(const SimReport& base, const SimReport& optimized) {
  if (base.signature != optimized.signature) {
    throw std::invalid_argument("optimization_delta: reports come from different configurations");
  }
  if (optimized.paradigm.collective_bytes > base.paradigm.collective_bytes) {
    throw std::invalid_argument("optimization_delta: optimized collective width exceeds the base width");
  }
  if (!base.feasible || !optimized.feasible) throw std::invalid_argument("optimization_delta: infeasible report");
  if (optimized.iteration_time == base.iteration_time) return 1.0;
  return base.iteration_time / optimized.iteration_time;
}

}  // namespace dhen::sim
