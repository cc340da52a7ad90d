#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhen/network.hpp"
#include "dhen/sharding.hpp"

namespace dhen::sim {

using sharding::CostWeights;
using sharding::Placement;
using sharding::ShardCost;
using sharding::TableSpec;

struct ClusterSpec {
  std::size_t hosts = 16;
  std::size_t gpus_per_host = 8;
  double hbm_bytes = 40e9;
  double peak_flops = 312e12;
  double efficiency = 0.4;
  // Embedding lookups and sparse updates stream at this rate; infinity makes
  // them free.
  double hbm_bandwidth = 1.555e12;
  double intra_bandwidth = 600e9;
  double intra_latency = 5e-6;
  double cross_bandwidth = 25e9;
  double cross_latency = 1e-5;
  // GPU <-> host memory, used for optimizer offload.
  double host_link_bandwidth = 32e9;

  std::size_t gpus() const { return hosts * gpus_per_host; }
  void validate() const;
};

// Planner weights in seconds: alpha = 1/peak flops, beta = 1/cross-host bandwidth.
CostWeights default_cost_weights(const ClusterSpec& cluster);

enum class ParadigmKind { kDP, kFSDP, kHSDP };

const char* paradigm_name(ParadigmKind kind);
// Accepts dp, fsdp and hsdp (case-insensitive).
ParadigmKind parse_paradigm(const std::string& name);

struct ParadigmSpec {
  ParadigmKind kind = ParadigmKind::kHSDP;
  bool activation_checkpointing = false;
  bool cpu_offload = false;
  std::size_t collective_bytes = 4;
  std::size_t embedding_bytes = 4;
  bool prefetch = false;

  // Prefetch needs sharded parameters to fetch.
  void validate() const;
};

struct DenseModelProfile {
  std::vector<double> layer_param_bytes;
  // Per sample.
  std::vector<double> layer_activation_bytes;
  // Per sample, forward only.
  std::vector<double> layer_flops;
  double optimizer_multiplier = 2.0;
  double param_dtype_bytes = 4.0;

  std::size_t layer_count() const { return layer_param_bytes.size(); }
  double total_param_bytes() const;
  double total_flops() const;
  double max_layer_param_bytes() const;
  void validate() const;
};

// Stages are the feature MLP, each ensemble layer, then the head. Flops come
// from flop_breakdown, byte counts from parameter_breakdown.
DenseModelProfile profile_from_network(const NetworkSpec& spec, double optimizer_multiplier = 2.0,
                                       double param_dtype_bytes = 4.0);

// Uniform profile with `layers` identical layers.
DenseModelProfile uniform_profile(std::size_t layers, double param_bytes, double activation_bytes, double flops,
                                  double optimizer_multiplier = 2.0);

// Calibrated large-model profile used for the paradigm sweeps: per layer
// 100M fp32 parameters, each applied to 64 tokens, 0.5 MiB of activations per
// sample.
DenseModelProfile reference_profile(std::size_t layers);
inline constexpr double kReferenceLayerParamBytes = 4e8;
inline constexpr double kReferenceLayerFlops = 2.0 * 1e8 * 64.0;
inline constexpr double kReferenceLayerActivationBytes = 524288.0;
inline constexpr std::size_t kReferenceGlobalBatch = 65536;

// 64 tables of 10M rows x 256 columns, 20 pooled lookups each.
std::vector<TableSpec> reference_tables();

// ---------------------------------------------------------------------------

enum class CollectiveKind { kAllGather, kReduceScatter, kAllReduce, kAllToAll };

const char* collective_name(CollectiveKind kind);

// Per-participant bytes on the wire under ring algorithms.
double collective_bytes(CollectiveKind kind, double payload, std::size_t participants);

// steps * latency + collective_bytes / bandwidth.
double collective_time(CollectiveKind kind, double payload, std::size_t participants, double bandwidth,
                       double latency);

enum class LinkClass { kIntraHost, kCrossHost };

// ---------------------------------------------------------------------------

struct EmbeddingPlan {
  std::vector<TableSpec> tables;
  std::vector<ShardCost> shards;
  Placement placement;

  std::size_t devices() const { return placement.loads.size(); }
  // Throws std::invalid_argument if shards, placement and tables disagree or
  // the plan is for a different device count.
  void validate(std::size_t devices) const;
  // Bytes of embedding rows resident on each device.
  std::vector<double> device_bytes(std::size_t dtype_bytes) const;
  // Embedding columns served by each device.
  std::vector<double> device_columns() const;
  // Pooled lookup columns (pooled x cols) served by each device per sample.
  std::vector<double> device_lookup_columns() const;
};

// Slices and LPT-places tables over the given device count.
EmbeddingPlan make_plan(std::vector<TableSpec> tables, std::size_t devices, double batch,
                        const CostWeights& weights);

// An empty plan for `devices` devices.
EmbeddingPlan empty_plan(std::size_t devices);

// ---------------------------------------------------------------------------

struct MemoryReport {
  double params = 0.0;
  double grads = 0.0;
  double optimizer = 0.0;
  double activations = 0.0;
  double prefetch = 0.0;
  double embeddings = 0.0;
  // Persistent shard of the dense parameters: S / shard group size.
  double param_shard = 0.0;
  double total = 0.0;
  double capacity = 0.0;
  bool feasible = false;
};

// Number of GPUs the dense parameters are sharded over (1 for DP).
std::size_t shard_group_size(ParadigmKind kind, const ClusterSpec& cluster);

// Largest dense parameter bytes whose persistent shard fits in HBM.
double param_residency_cap(ParadigmKind kind, const ClusterSpec& cluster);

MemoryReport memory_footprint(const ParadigmSpec& paradigm, const DenseModelProfile& profile,
                              const ClusterSpec& cluster, double batch_per_gpu, double embedding_bytes = 0.0);

struct CollectiveRecord {
  std::string name;
  CollectiveKind kind = CollectiveKind::kAllGather;
  double payload = 0.0;
  std::size_t participants = 1;
  LinkClass link = LinkClass::kIntraHost;
  double bytes = 0.0;
  double time = 0.0;
  bool dense = false;
};

struct PhaseTimes {
  double a2a_forward = 0.0;
  double embedding_lookup = 0.0;
  double dense_forward = 0.0;
  double forward_allgather = 0.0;  // exposed
  double dense_backward = 0.0;
  double backward_allgather = 0.0;  // exposed
  double gradient_sync = 0.0;       // exposed part of the asynchronous stream
  double a2a_backward = 0.0;
  double embedding_update = 0.0;  // includes the sparse optimizer
  double offload_transfer = 0.0;
};

struct SimReport {
  ParadigmSpec paradigm;
  // Everything that defined the run except the collective byte width.
  std::string signature;
  MemoryReport memory;
  bool feasible = false;
  PhaseTimes phases;
  std::vector<CollectiveRecord> collectives;
  double intra_bytes = 0.0;
  double cross_bytes = 0.0;
  double dense_intra_bytes = 0.0;
  double dense_cross_bytes = 0.0;
  double compute_time = 0.0;
  double comm_time = 0.0;
  double exposed_comm = 0.0;
  double overlapped_comm = 0.0;
  double iteration_time = 0.0;
  double qps = 0.0;

  double wire_bytes() const { return intra_bytes + cross_bytes; }
};

class PlanMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Infeasible configurations produce a verdict-only report (no timings).
SimReport simulate_iteration(const ParadigmSpec& paradigm, const DenseModelProfile& profile,
                             const ClusterSpec& cluster, const EmbeddingPlan& plan, std::size_t global_batch);

// Rows `section,item,value`; the paradigm name is not part of the file.
void write_report_csv(const SimReport& report, std::ostream& out);
std::string report_summary(const SimReport& report);

struct ComparisonRow {
  std::size_t layers = 0;
  ParadigmKind kind = ParadigmKind::kDP;
  bool feasible = false;
  double iteration_time = 0.0;
  double qps = 0.0;
  double peak_memory = 0.0;
};

struct SweepPoint {
  std::size_t layers = 0;
  DenseModelProfile profile;
};

// One row per (layer count, paradigm) in sweep order, DP/FSDP/HSDP.
std::vector<ComparisonRow> compare_paradigms(std::span<const SweepPoint> sweep, const ClusterSpec& cluster,
                                             const ParadigmSpec& options, const EmbeddingPlan& plan,
                                             std::size_t global_batch);

// Header `layers,paradigm,feasible,iteration_s,qps,peak_memory_bytes`.
void write_comparison_csv(std::span<const ComparisonRow> rows, std::ostream& out);

// base.iteration_time / optimized.iteration_time; both reports must come
// from the same configuration apart from the collective width, with the
// optimized width no larger.
double optimization_delta(const SimReport& base, const SimReport& optimized);

}  // namespace dhen::sim
