// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace optgqa {

enum class BandwidthClass { High, Limited };

struct HardwareProfile {
    std::size_t compute_units = 1;
    BandwidthClass bandwidth = BandwidthClass::High;
    std::size_t memory_bytes = 1;
};

struct GroupingPlan {
    std::size_t num_groups = 0;       // kv heads
    std::size_t heads_per_group = 0;  // query heads sharing one kv head

    bool operator==(const GroupingPlan&) const = default;
};

class NoFeasibleGrouping : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Chooses how query heads are grouped over shared kv heads.
class GroupingPolicy {
public:
    virtual ~GroupingPolicy() = default;
    virtual GroupingPlan select(const HardwareProfile& profile, std::size_t num_heads, std::size_t head_size,
                                std::size_t kv_budget_bytes) const = 0;
};

/// Enumerates divisor pairs (num_groups, num_heads / num_groups) whose
/// per-token KV footprint 2 * num_groups * head_size * 4 fits the budget.
///
/// High bandwidth: the largest such num_groups (most parallelism).
/// Limited bandwidth: the smallest num_groups whose heads_per_group does not
/// exceed compute_units (fewest kv reads).
class DivisorGroupingPolicy final : public GroupingPolicy {
public:
    GroupingPlan select(const HardwareProfile& profile, std::size_t num_heads, std::size_t head_size,
                        std::size_t kv_budget_bytes) const override;
};

/// DivisorGroupingPolicy. Throws NoFeasibleGrouping when no pair qualifies.
GroupingPlan select_grouping(const HardwareProfile& profile, std::size_t num_heads, std::size_t head_size,
                             std::size_t kv_budget_bytes);

using RequestId = std::uint64_t;

struct Request {
    RequestId id = 0;
    std::uint64_t seq_id = 0;
    std::size_t remaining_steps = 1;
    std::size_t cost = 1;
};

struct WorkerState {
    std::size_t id = 0;
    std::deque<Request> queue;
    std::size_t load = 0;  // sum of queued costs
};

struct LoadStats {
    std::size_t max_load = 0;
    std::size_t min_load = 0;
    std::size_t imbalance = 0;
};

/// Least-loaded dispatcher over a fixed set of workers with FIFO service.
/// Not internally synchronized: admit and step form one serialized command
/// stream.
class Scheduler {
public:
    explicit Scheduler(std::size_t num_workers);

    /// Queues the request on the least-loaded worker (lowest id on ties) and
    /// returns that worker's id. Throws std::invalid_argument for a reused id,
    /// zero remaining steps or zero cost.
    std::size_t admit(const Request& request);

    /// Advances the head request of every nonempty worker by one step and
    /// returns the ids that finished, in worker order.
    std::vector<RequestId> step();

    LoadStats load_stats() const noexcept;
    const std::vector<WorkerState>& workers() const noexcept { return workers_; }
    bool idle() const noexcept;

private:
    std::vector<WorkerState> workers_;
    std::unordered_set<RequestId> seen_;
};

}  // namespace optgqa
