#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dhen::sharding {

struct TableSpec {
  std::string name;
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t dtype_bytes = 4;
  double pooled_lookups = 1.0;

  void validate() const;
};

// A contiguous column range [col_begin, col_end) of one table.
struct ShardCost {
  std::size_t table = 0;
  std::size_t col_begin = 0;
  std::size_t col_end = 0;
  double cost = 0.0;

  std::size_t cols() const { return col_end - col_begin; }
};

// alpha weighs lookup volume (compute), beta weighs bytes sent (communication).
struct CostWeights {
  double alpha = 1.0;
  double beta = 1.0;
};

// alpha * batch * pooled * cols + beta * batch * cols * dtype_bytes.
double shard_cost(const TableSpec& table, std::size_t shard_cols, double batch, const CostWeights& weights);

class SlicingError : public std::invalid_argument {
 public:
  SlicingError(const std::string& message, std::vector<std::string> tables)
      : std::invalid_argument(message), tables_(std::move(tables)) {}
  const std::vector<std::string>& tables() const { return tables_; }

 private:
  std::vector<std::string> tables_;
};

// Splits every table whose cost exceeds total/num_devices into
// ceil(cost / cap) column shards whose widths differ by at most one; other
// tables stay whole. Throws SlicingError listing tables too narrow to split.
std::vector<ShardCost> slice_tables(std::span<const TableSpec> tables, std::size_t num_devices, double batch,
                                    const CostWeights& weights);

// Column widths of an even split of cols into parts (larger parts first).
std::vector<std::size_t> even_split(std::size_t cols, std::size_t parts);

struct Placement {
  std::vector<std::size_t> device_of;  // indexed like the input shards
  std::vector<double> loads;
  double makespan = 0.0;
};

// Longest-processing-time greedy: costs descending (ties by index), each to
// the least-loaded device (ties by lowest device).
Placement lpt_place(std::span<const double> costs, std::size_t num_devices);
Placement lpt_place(std::span<const ShardCost> shards, std::size_t num_devices);

// Worst-case LPT ratio 4/3 - 1/(3m).
double lpt_bound(std::size_t num_devices);

inline constexpr double kBruteForceLimit = 1e7;

class OracleTooLargeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

bool brute_force_feasible(std::size_t num_shards, std::size_t num_devices);

// Exact minimum makespan by exhaustive assignment. Refuses instances with
// num_devices^num_shards > kBruteForceLimit.
double brute_force_place(std::span<const double> costs, std::size_t num_devices);

}  // namespace dhen::sharding
