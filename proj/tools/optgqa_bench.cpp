// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale latency/throughput benchmark for grouped-query paged attention.
//
//   optgqa_bench --num-heads 8 --num-kv-heads 2 --format json --out run.json
//   optgqa_bench --compare baseline.json candidate.json

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "optgqa/bench.hpp"
#include "optgqa/paged_kv.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitCapacity = 3;
constexpr int kExitRuntime = 4;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grouped-query paged attention benchmark"};
    optgqa::BenchConfig cfg;
    std::string bias = "causal";
    std::string format = "json";
    std::vector<std::string> compare;

    app.add_option("--num-heads", cfg.num_heads, "Query heads")->capture_default_str();
    app.add_option("--num-kv-heads", cfg.num_kv_heads, "Key/value heads")->capture_default_str();
    app.add_option("--head-size", cfg.head_size, "Per-head dimension")->capture_default_str();
    app.add_option("--block-size", cfg.block_size, "Tokens per KV block")->capture_default_str();
    app.add_option("--num-blocks", cfg.num_blocks, "Blocks per worker pool")->capture_default_str();
    app.add_option("--batch", cfg.batch, "Number of sequences")->capture_default_str();
    app.add_option("--prompt-len", cfg.prompt_len, "Prompt tokens per sequence")->capture_default_str();
    app.add_option("--gen-len", cfg.gen_len, "Generated tokens per sequence")->capture_default_str();
    app.add_option("--bias", bias, "causal | local:<w> | alibi")->capture_default_str();
    app.add_option("--seed", cfg.seed, "RNG seed for the synthetic model")->capture_default_str();
    app.add_option("--workers", cfg.workers, "Simulated decode workers")->capture_default_str();
    bool single_thread = false;
    app.add_flag("--single-thread", single_thread, "Run workers sequentially for reproducible ordering");
    bool no_warmup = false;
    app.add_flag("--no-warmup", no_warmup, "Skip the untimed warm-up run");
    app.add_option("--format", format, "Report format")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
    app.add_option("--out", cfg.output_path, "Write the report here instead of stdout");
    app.add_option("--compare", compare, "Print percentage deltas from report A to report B")->expected(2);

    CLI11_PARSE(app, argc, argv);

    try {
        if (!compare.empty()) {
            const auto a = optgqa::load_report(compare[0]);
            const auto b = optgqa::load_report(compare[1]);
            std::cout << optgqa::to_json(optgqa::compare_runs(a, b));
            return 0;
        }

        cfg.bias = optgqa::BiasMode::parse(bias);
        cfg.format = format == "csv" ? optgqa::ReportFormat::Csv : optgqa::ReportFormat::Json;
        cfg.single_thread = single_thread;
        cfg.warmup = !no_warmup;

        const optgqa::MetricsReport report = optgqa::run_bench(cfg);
        const std::string text = optgqa::render_report(report, cfg.format);
        if (cfg.output_path.empty()) {
            std::cout << text;
        } else {
            std::ofstream out(cfg.output_path, std::ios::binary);
            if (!out) {
                std::cerr << "error: cannot write " << cfg.output_path << "\n";
                return kExitRuntime;
            }
            out << text;
        }
    } catch (const optgqa::PoolExhausted& e) {
        std::cerr << "capacity error: " << e.what() << "\n";
        return kExitCapacity;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
