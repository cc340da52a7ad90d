#include "dhen/sharding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dhen::sharding {

void TableSpec::validate() const {
  if (rows == 0 || cols == 0 || dtype_bytes == 0 || !(pooled_lookups > 0.0)) {
    throw std::invalid_argument("table '" + name + "': rows, cols, dtype bytes and pooled lookups must be positive");
  }
}

double shard_cost(const TableSpec& table, std::size_t shard_cols, double batch, const CostWeights& weights) {
  const double cols = static_cast<double>(shard_cols);
  return weights.alpha * (batch * table.pooled_lookups * cols) +
         weights.beta * (batch * cols * static_cast<double>(table.dtype_bytes));
}

std::vector<std::size_t> even_split(std::size_t cols, std::size_t parts) {
  std::vector<std::size_t> widths(parts, cols / parts);
  for (std::size_t i = 0; i < cols % parts; ++i) ++widths[i];
  return widths;
}

namespace {

// ceil(cost / cap) with cap = total / devices, computed as cost * devices / total
// so a table holding the whole cost maps to exactly `devices` shards.
std::size_t shard_count(double cost, double total, std::size_t devices) {
  const double ratio = cost * static_cast<double>(devices) / total;
  const double nearest = std::round(ratio);
  if (std::abs(ratio - nearest) <= 1e-12 * std::max(1.0, ratio)) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(ratio));
}

}  // namespace

std::vector<ShardCost> slice_tables(std::span<const TableSpec> tables, std::size_t num_devices, double batch,
                                    const CostWeights& weights) {
  if (num_devices == 0) throw std::invalid_argument("slice_tables: need at least one device");
  if (!(batch > 0.0)) throw std::invalid_argument("slice_tables: batch must be positive");
  std::vector<double> costs;
  double total = 0.0;
  for (const auto& t : tables) {
    t.validate();
    costs.push_back(shard_cost(t, t.cols, batch, weights));
    total += costs.back();
  }
  const double cap = total / static_cast<double>(num_devices);

  std::vector<ShardCost> shards;
  std::vector<std::string> too_narrow;
  std::string message;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const TableSpec& t = tables[i];
    std::size_t parts = 1;
    if (costs[i] > cap) parts = shard_count(costs[i], total, num_devices);
    if (parts > t.cols) {
      too_narrow.push_back(t.name);
      message += (message.empty() ? "" : "; ") + std::string("table '") + t.name + "' has " +
                 std::to_string(t.cols) + " columns but needs " + std::to_string(parts) + " shards";
      continue;
    }
    std::size_t begin = 0;
    for (std::size_t w : even_split(t.cols, parts)) {
      shards.push_back({i, begin, begin + w, shard_cost(t, w, batch, weights)});
      begin += w;
    }
  }
  if (!too_narrow.empty()) throw SlicingError(message, std::move(too_narrow));
  return shards;
}

Placement lpt_place(std::span<const double> costs, std::size_t num_devices) {
  if (num_devices == 0) throw std::invalid_argument("lpt_place: need at least one device");
  Placement out;
  out.device_of.assign(costs.size(), 0);
  out.loads.assign(num_devices, 0.0);
  std::vector<std::size_t> order(costs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return costs[a] > costs[b]; });
  for (std::size_t idx : order) {
    std::size_t best = 0;
    for (std::size_t dev = 1; dev < num_devices; ++dev) {
      if (out.loads[dev] < out.loads[best]) best = dev;
    }
    out.device_of[idx] = best;
    out.loads[best] += costs[idx];
  }
  out.makespan = *std::max_element(out.loads.begin(), out.loads.end());
  return out;
}

Placement lpt_place(std::span<const ShardCost> shards, std::size_t num_devices) {
  std::vector<double> costs;
  costs.reserve(shards.size());
  for (const auto& s : shards) costs.push_back(s.cost);
  return lpt_place(costs, num_devices);
}

double lpt_bound(std::size_t num_devices) {
  return 4.0 / 3.0 - 1.0 / (3.0 * static_cast<double>(num_devices));
}

bool brute_force_feasible(std::size_t num_shards, std::size_t num_devices) {
  return static_cast<double>(num_shards) * std::log(static_cast<double>(std::max<std::size_t>(num_devices, 1))) <=
         std::log(kBruteForceLimit) + 1e-12;
}

namespace {

void search(std::span<const double> costs, std::size_t next, std::vector<double>& loads, double current_max,
            double& best) {
  if (current_max >= best) return;
  if (next == costs.size()) {
    best = current_max;
    return;
  }
  for (std::size_t dev = 0; dev < loads.size(); ++dev) {
    loads[dev] += costs[next];
    search(costs, next + 1, loads, std::max(current_max, loads[dev]), best);
    loads[dev] -= costs[next];
  }
}

}  // namespace

double brute_force_place(std::span<const double> costs, std::size_t num_devices) {
  if (num_devices == 0) throw std::invalid_argument("brute_force_place: need at least one device");
  if (!brute_force_feasible(costs.size(), num_devices)) {
    throw OracleTooLargeError("brute_force_place: " + std::to_string(num_devices) + "^" +
                              std::to_string(costs.size()) + " assignments exceed the search limit");
  }
  if (costs.empty()) return 0.0;
  std::vector<double> loads(num_devices, 0.0);
  double best = std::numeric_limits<double>::infinity();
  search(costs, 0, loads, 0.0, best);
  return best;
}

}  // namespace dhen::sharding
