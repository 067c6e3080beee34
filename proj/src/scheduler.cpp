// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "optgqa/scheduler.hpp"

#include <algorithm>
#include <optional>
#include <string>

#include "optgqa/paged_kv.hpp"

namespace optgqa {

GroupingPlan DivisorGroupingPolicy::select(const HardwareProfile& profile, std::size_t num_heads,
                                           std::size_t head_size, std::size_t kv_budget_bytes) const {
    if (num_heads == 0 || head_size == 0) throw std::invalid_argument("select_grouping: num_heads and head_size must be positive");
    if (profile.compute_units == 0 || profile.memory_bytes == 0) {
        throw std::invalid_argument("select_grouping: hardware profile fields must be positive");
    }
    std::optional<GroupingPlan> best;
    for (std::size_t groups = 1; groups <= num_heads; ++groups) {
        if (num_heads % groups != 0) continue;
        if (kv_bytes_per_token(groups, head_size) > kv_budget_bytes) continue;
        const GroupingPlan plan{groups, num_heads / groups};
        if (profile.bandwidth == BandwidthClass::High) {
            best = plan;  // ascending scan: the last fit has the most groups
        } else if (plan.heads_per_group <= profile.compute_units) {
            best = plan;  // first fit has the fewest groups
            break;
        }
    }
    if (!best) {
        throw NoFeasibleGrouping("select_grouping: no divisor pair of " + std::to_string(num_heads) +
                                 " heads fits a " + std::to_string(kv_budget_bytes) + "-byte per-token KV budget" +
                                 (profile.bandwidth == BandwidthClass::Limited
                                      ? " with at most " + std::to_string(profile.compute_units) + " heads per group"
                                      : ""));
    }
    return *best;
}

GroupingPlan select_grouping(const HardwareProfile& profile, std::size_t num_heads, std::size_t head_size,
                             std::size_t kv_budget_bytes) {
    return DivisorGroupingPolicy{}.select(profile, num_heads, head_size, kv_budget_bytes);
}

Scheduler::Scheduler(std::size_t num_workers) {
    if (num_workers == 0) throw std::invalid_argument("scheduler: need at least one worker");
    workers_.resize(num_workers);
    for (std::size_t i = 0; i < num_workers; ++i) workers_[i].id = i;
}

std::size_t Scheduler::admit(const Request& request) {
    if (request.remaining_steps == 0) throw std::invalid_argument("scheduler: request has no steps");
    if (request.cost == 0) throw std::invalid_argument("scheduler: request cost must be positive");
    if (seen_.contains(request.id)) {
        throw std::invalid_argument("scheduler: duplicate request id " + std::to_string(request.id));
    }
    // min_element returns the first minimum, i.e. the lowest worker id on ties.
    auto it = std::ranges::min_element(workers_, {}, &WorkerState::load);
    seen_.insert(request.id);
    it->queue.push_back(request);
    it->load += request.cost;
    return it->id;
}

std::vector<RequestId> Scheduler::step() {
    std::vector<RequestId> done;
    for (auto& w : workers_) {
        if (w.queue.empty()) continue;
        Request& head = w.queue.front();
        if (--head.remaining_steps == 0) {
            done.push_back(head.id);
            w.load -= head.cost;
            w.queue.pop_front();
        }
    }
    return done;
}

LoadStats Scheduler::load_stats() const noexcept {
    auto [lo, hi] = std::ranges::minmax_element(workers_, {}, &WorkerState::load);
    return {hi->load, lo->load, hi->load - lo->load};
}

bool Scheduler::idle() const noexcept {
    return std::ranges::all_of(workers_, [](const WorkerState& w) { return w.queue.empty(); });
}

}  // namespace optgqa
