// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "optgqa/attention.hpp"

namespace optgqa {

enum class ReportFormat { Csv, Json };

/// A bench configuration violates a constraint; what() names it.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct BenchConfig {
    std::size_t num_heads = 8;
    std::size_t num_kv_heads = 2;
    std::size_t head_size = 32;
    std::size_t block_size = 16;
    std::size_t num_blocks = 64;  // per worker pool
    std::size_t batch = 4;
    std::size_t prompt_len = 64;
    std::size_t gen_len = 32;
    BiasMode bias = BiasMode::causal();
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    bool single_thread = true;
    bool warmup = true;
    ReportFormat format = ReportFormat::Json;
    std::string output_path;  // empty: stdout

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;
};

struct MetricsReport {
    double latency_ms = 0.0;
    double gen_throughput_tok_s = 0.0;
    double all_throughput_tok_s = 0.0;
    std::size_t peak_kv_bytes = 0;
    double pool_utilization = 0.0;
    double pool_fragmentation = 0.0;
    std::size_t worker_imbalance = 0;

    BenchConfig config;
    std::size_t generated_tokens = 0;
    std::size_t all_tokens = 0;
    std::uint64_t token_digest = 0;  // FNV-1a over every sequence's token stream
};

/// Runs prefill plus decode for every sequence of a seeded synthetic model
/// and measures it. Throws ConfigError or PoolExhausted.
MetricsReport run_bench(const BenchConfig& cfg);

struct RunComparison {
    double latency_delta_pct = 0.0;
    double gen_throughput_delta_pct = 0.0;
    double all_throughput_delta_pct = 0.0;
};

/// Percentage change 100 * (b - a) / a per metric. Throws
/// std::invalid_argument if a baseline metric is zero.
RunComparison compare_runs(const MetricsReport& a, const MetricsReport& b);

std::string to_json(const MetricsReport& report);
std::string to_csv(const MetricsReport& report);
std::string to_json(const RunComparison& cmp);
MetricsReport report_from_json(const std::string& text);
MetricsReport report_from_csv(const std::string& text);

/// Loads a report, picking the parser from the extension (.csv, otherwise JSON).
MetricsReport load_report(const std::filesystem::path& path);

std::string render_report(const MetricsReport& report, ReportFormat format);

}  // namespace optgqa
