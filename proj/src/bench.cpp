// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "optgqa/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <exception>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "optgqa/paged_kv.hpp"
#include "optgqa/scheduler.hpp"

namespace optgqa {

namespace {

using ordered_json = nlohmann::ordered_json;

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

Tensor gaussian(Shape shape, float stddev, std::mt19937_64& rng) {
    std::normal_distribution<float> dist(0.0f, stddev);
    Tensor t(std::move(shape));
    for (float& x : t.data()) x = dist(rng);
    return t;
}

std::size_t argmax(std::span<const float> xs) {
    return static_cast<std::size_t>(std::distance(xs.begin(), std::ranges::max_element(xs)));
}

/// Seeded stand-in for a transformer layer: token embeddings plus one
/// attention projection. The next token is the argmax of the attention output.
struct SyntheticModel {
    AttentionConfig attn;
    std::optional<AlibiSlopes> slopes;
    Tensor embedding;  // [vocab, model_dim], vocab == model_dim
    ProjectionWeights weights;
    std::vector<std::vector<std::size_t>> prompts;

    static SyntheticModel make(const BenchConfig& cfg) {
        std::mt19937_64 rng(cfg.seed);
        AttentionConfig attn(cfg.num_heads, cfg.num_kv_heads, cfg.head_size, cfg.bias);
        const std::size_t dim = attn.hidden_size();
        const float w_std = 1.0f / std::sqrt(static_cast<float>(dim));
        Tensor embedding = gaussian({dim, dim}, 1.0f, rng);
        Tensor wq = gaussian({dim, cfg.num_heads * cfg.head_size}, w_std, rng);
        Tensor wk = gaussian({dim, cfg.num_kv_heads * cfg.head_size}, w_std, rng);
        Tensor wv = gaussian({dim, cfg.num_kv_heads * cfg.head_size}, w_std, rng);
        std::uniform_int_distribution<std::size_t> token(0, dim - 1);
        std::vector<std::vector<std::size_t>> prompts(cfg.batch);
        for (auto& p : prompts) {
            p.resize(cfg.prompt_len);
            for (auto& t : p) t = token(rng);
        }
        std::optional<AlibiSlopes> slopes;
        if (cfg.bias.kind == BiasKind::Alibi) slopes = alibi_slopes(cfg.num_heads);
        return SyntheticModel{attn, std::move(slopes), std::move(embedding),
                              ProjectionWeights(attn, std::move(wq), std::move(wk), std::move(wv)), std::move(prompts)};
    }

    Tensor embed(std::span<const std::size_t> tokens) const {
        const std::size_t dim = embedding.dim(1);
        Tensor x({tokens.size(), dim});
        auto xd = x.data();
        for (std::size_t i = 0; i < tokens.size(); ++i) std::ranges::copy(embedding.row(tokens[i]), xd.begin() + i * dim);
        return x;
    }
};

struct SequenceState {
    BlockTable table;
    std::vector<std::size_t> generated;
    std::size_t next_input = 0;
    std::size_t worker = 0;
};

class BenchRun {
public:
    BenchRun(const BenchConfig& cfg, const SyntheticModel& model) : cfg_(cfg), model_(model) {
        const PoolConfig pc{cfg.num_blocks, cfg.block_size, cfg.num_kv_heads, cfg.head_size};
        pools_.reserve(cfg.workers);
        for (std::size_t w = 0; w < cfg.workers; ++w) pools_.emplace_back(pc);
        seqs_.resize(cfg.batch);
        for (std::size_t s = 0; s < cfg.batch; ++s) seqs_[s].table = BlockTable(s);
    }

    MetricsReport run() {
        Scheduler sched(cfg_.workers);
        std::size_t imbalance = 0;
        for (std::size_t s = 0; s < cfg_.batch; ++s) {
            if (cfg_.gen_len > 0) {
                seqs_[s].worker = sched.admit(Request{s, s, cfg_.gen_len, 1});
            } else {
                seqs_[s].worker = s % cfg_.workers;
            }
        }
        // Imbalance is sampled once the batch is admitted and after every step.
        imbalance = sched.load_stats().imbalance;

        const auto start = std::chrono::steady_clock::now();
        for_each_worker([&](std::size_t w) {
            for (std::size_t s = 0; s < cfg_.batch; ++s)
                if (seqs_[s].worker == w) prefill(s);
        });
        sample_memory();

        while (!sched.idle()) {
            for_each_worker([&](std::size_t w) {
                const auto& queue = sched.workers()[w].queue;
                if (!queue.empty()) decode_step(queue.front().seq_id);
            });
            const std::vector<RequestId> done = sched.step();
            sample_memory();
            imbalance = std::max(imbalance, sched.load_stats().imbalance);
            for (RequestId id : done) pools_[seqs_[id].worker].release(seqs_[id].table);
        }
        const auto stop = std::chrono::steady_clock::now();

        MetricsReport r;
        r.config = cfg_;
        r.latency_ms = std::chrono::duration<double, std::milli>(stop - start).count();
        r.generated_tokens = cfg_.batch * cfg_.gen_len;
        r.all_tokens = cfg_.batch * (cfg_.prompt_len + cfg_.gen_len);
        const double seconds = r.latency_ms / 1000.0;
        if (seconds > 0.0) {
            r.gen_throughput_tok_s = static_cast<double>(r.generated_tokens) / seconds;
            r.all_throughput_tok_s = static_cast<double>(r.all_tokens) / seconds;
        }
        r.peak_kv_bytes = peak_bytes_;
        r.pool_utilization = peak_utilization_;
        r.pool_fragmentation = peak_fragmentation_;
        r.worker_imbalance = imbalance;
        r.token_digest = digest();
        return r;
    }

private:
    template <typename Fn>
    void for_each_worker(Fn&& fn) {
        if (cfg_.single_thread || cfg_.workers == 1) {
            for (std::size_t w = 0; w < cfg_.workers; ++w) fn(w);
            return;
        }
        // One thread per worker; each touches only its own pool and sequences.
        std::vector<std::exception_ptr> errors(cfg_.workers);
        {
            std::vector<std::jthread> threads;
            threads.reserve(cfg_.workers);
            for (std::size_t w = 0; w < cfg_.workers; ++w) {
                threads.emplace_back([&, w] {
                    try {
                        fn(w);
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
            }
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    void prefill(std::size_t s) {
        SequenceState& seq = seqs_[s];
        const auto& prompt = model_.prompts[s];
        if (prompt.empty()) return;
        const std::size_t p = prompt.size();
        const AttentionConfig& attn = model_.attn;
        Projection proj = project_block(model_.embed(prompt), model_.weights);
        pools_[seq.worker].append_kv(seq.table, proj.k, proj.v);
        const BiasMatrix bias = build_bias(attn, p, p, model_.slopes);
        const Tensor out = attention_forward(reshape(std::move(proj.q), {1, p, attn.num_heads(), attn.head_size()}),
                                             reshape(std::move(proj.k), {1, p, attn.num_kv_heads(), attn.head_size()}),
                                             reshape(std::move(proj.v), {1, p, attn.num_kv_heads(), attn.head_size()}),
                                             attn, bias);
        seq.next_input = argmax(out.row(p - 1));
    }

    void decode_step(std::size_t s) {
        SequenceState& seq = seqs_[s];
        BlockPool& pool = pools_[seq.worker];
        const AttentionConfig& attn = model_.attn;
        const std::size_t input = seq.next_input;
        Projection proj = project_block(model_.embed(std::span<const std::size_t>(&input, 1)), model_.weights);
        pool.append_kv(seq.table, proj.k, proj.v);
        const Tensor out = paged_decode_attention(pool, seq.table, reshape(std::move(proj.q), {attn.num_heads(), attn.head_size()}),
                                                  attn, model_.slopes);
        seq.next_input = argmax(out.data());
        seq.generated.push_back(seq.next_input);
    }

    void sample_memory() {
        std::size_t bytes = 0, allocated = 0, blocks = 0, unused_slots = 0;
        for (const BlockPool& pool : pools_) {
            bytes += pool.allocated_bytes();
            allocated += pool.allocated_count();
            blocks += pool.config().num_blocks;
            for (BlockId id = 0; id < pool.config().num_blocks; ++id)
                if (!pool.is_free(id)) unused_slots += cfg_.block_size - pool.fill(id);
        }
        if (bytes > peak_bytes_ || (bytes == 0 && peak_bytes_ == 0)) {
            peak_bytes_ = bytes;
            peak_utilization_ = static_cast<double>(allocated) / static_cast<double>(blocks);
            peak_fragmentation_ =
                allocated ? static_cast<double>(unused_slots) / static_cast<double>(allocated * cfg_.block_size) : 0.0;
        }
    }

    std::uint64_t digest() const {
        std::uint64_t h = 14695981039346656037ull;
        auto mix = [&h](std::uint64_t x) {
            for (int i = 0; i < 8; ++i) {
                h ^= (x >> (8 * i)) & 0xffu;
                h *= 1099511628211ull;
            }
        };
        for (std::size_t s = 0; s < seqs_.size(); ++s) {
            mix(s);
            for (std::size_t t : seqs_[s].generated) mix(t);
        }
        return h;
    }

    const BenchConfig& cfg_;
    const SyntheticModel& model_;
    std::vector<BlockPool> pools_;
    std::vector<SequenceState> seqs_;
    std::size_t peak_bytes_ = 0;
    double peak_utilization_ = 0.0;
    double peak_fragmentation_ = 0.0;
};

std::string format_double(double x) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, end);
}

ordered_json config_json(const MetricsReport& r) {
    const BenchConfig& c = r.config;
    return ordered_json{
        {"num_heads", c.num_heads},
        {"num_kv_heads", c.num_kv_heads},
        {"head_size", c.head_size},
        {"block_size", c.block_size},
        {"num_blocks", c.num_blocks},
        {"batch", c.batch},
        {"prompt_len", c.prompt_len},
        {"gen_len", c.gen_len},
        {"bias", c.bias.to_string()},
        {"seed", c.seed},
        {"workers", c.workers},
        {"single_thread", c.single_thread},
        {"generated_tokens", r.generated_tokens},
        {"all_tokens", r.all_tokens},
        {"token_digest", r.token_digest},
    };
}

void config_from_json(const ordered_json& j, MetricsReport& r) {
    BenchConfig& c = r.config;
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.num_kv_heads = j.at("num_kv_heads").get<std::size_t>();
    c.head_size = j.at("head_size").get<std::size_t>();
    c.block_size = j.at("block_size").get<std::size_t>();
    c.num_blocks = j.at("num_blocks").get<std::size_t>();
    c.batch = j.at("batch").get<std::size_t>();
    c.prompt_len = j.at("prompt_len").get<std::size_t>();
    c.gen_len = j.at("gen_len").get<std::size_t>();
    c.bias = BiasMode::parse(j.at("bias").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.workers = j.at("workers").get<std::size_t>();
    c.single_thread = j.at("single_thread").get<bool>();
    r.generated_tokens = j.at("generated_tokens").get<std::size_t>();
    r.all_tokens = j.at("all_tokens").get<std::size_t>();
    r.token_digest = j.at("token_digest").get<std::uint64_t>();
}

ordered_json report_json(const MetricsReport& r) {
    return ordered_json{
        {"latency_ms", r.latency_ms},
        {"gen_throughput_tok_s", r.gen_throughput_tok_s},
        {"all_throughput_tok_s", r.all_throughput_tok_s},
        {"peak_kv_bytes", r.peak_kv_bytes},
        {"pool_utilization", r.pool_utilization},
        {"pool_fragmentation", r.pool_fragmentation},
        {"worker_imbalance", r.worker_imbalance},
        {"config", config_json(r)},
    };
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, sep)) out.push_back(field);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double delta_pct(double a, double b, const char* metric) {
    if (a == 0.0) throw std::invalid_argument(std::string("compare_runs: baseline ") + metric + " is zero");
    return 100.0 * (b - a) / a;
}

}  // namespace

void BenchConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("invalid bench config: " + what);
    };
    require(num_heads > 0, "num_heads must be positive");
    require(num_kv_heads > 0, "num_kv_heads must be positive");
    require(head_size > 0, "head_size must be positive");
    require(num_heads % num_kv_heads == 0, "num_heads (" + std::to_string(num_heads) +
                                               ") must be a multiple of num_kv_heads (" + std::to_string(num_kv_heads) + ")");
    require(block_size > 0, "block_size must be positive");
    require(num_blocks > 0, "num_blocks must be positive");
    require(batch > 0, "batch must be positive");
    require(workers > 0, "workers must be positive");
    require(prompt_len + gen_len > 0, "prompt_len + gen_len must be positive");
    require(bias.kind != BiasKind::LocalWindow || bias.window > 0, "local window must be positive");
    const std::size_t needed = batch * ceil_div(prompt_len + gen_len, block_size);
    require(needed <= num_blocks, "pool capacity: batch x ceil((prompt_len + gen_len) / block_size) = " +
                                      std::to_string(needed) + " blocks exceeds num_blocks = " + std::to_string(num_blocks));
}

MetricsReport run_bench(const BenchConfig& cfg) {
    cfg.validate();
    const SyntheticModel model = SyntheticModel::make(cfg);
    if (cfg.warmup) BenchRun(cfg, model).run();
    return BenchRun(cfg, model).run();
}

RunComparison compare_runs(const MetricsReport& a, const MetricsReport& b) {
    return RunComparison{
        delta_pct(a.latency_ms, b.latency_ms, "latency_ms"),
        delta_pct(a.gen_throughput_tok_s, b.gen_throughput_tok_s, "gen_throughput_tok_s"),
        delta_pct(a.all_throughput_tok_s, b.all_throughput_tok_s, "all_throughput_tok_s"),
    };
}

std::string to_json(const MetricsReport& report) { return report_json(report).dump(2) + "\n"; }

std::string to_json(const RunComparison& cmp) {
    const ordered_json j{
        {"latency_delta_pct", cmp.latency_delta_pct},
        {"gen_throughput_delta_pct", cmp.gen_throughput_delta_pct},
        {"all_throughput_delta_pct", cmp.all_throughput_delta_pct},
    };
    return j.dump(2) + "\n";
}

std::string to_csv(const MetricsReport& report) {
    const ordered_json j = report_json(report);
    std::string header, row;
    auto add = [&](const std::string& name, const ordered_json& v) {
        if (!header.empty()) {
            header += ',';
            row += ',';
        }
        header += name;
        if (v.is_string()) {
            row += v.get<std::string>();
        } else if (v.is_number_float()) {
            row += format_double(v.get<double>());
        } else {
            row += v.dump();
        }
    };
    for (const auto& [key, value] : j.items()) {
        if (key == "config") {
            for (const auto& [ck, cv] : value.items()) add("config." + ck, cv);
        } else {
            add(key, value);
        }
    }
    return header + "\n" + row + "\n";
}

MetricsReport report_from_json(const std::string& text) {
    const ordered_json j = ordered_json::parse(text);
    MetricsReport r;
    r.latency_ms = j.at("latency_ms").get<double>();
    r.gen_throughput_tok_s = j.at("gen_throughput_tok_s").get<double>();
    r.all_throughput_tok_s = j.at("all_throughput_tok_s").get<double>();
    r.peak_kv_bytes = j.at("peak_kv_bytes").get<std::size_t>();
    r.pool_utilization = j.at("pool_utilization").get<double>();
    r.pool_fragmentation = j.at("pool_fragmentation").get<double>();
    r.worker_imbalance = j.at("worker_imbalance").get<std::size_t>();
    config_from_json(j.at("config"), r);
    return r;
}

MetricsReport report_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string header_line, row_line;
    if (!std::getline(is, header_line) || !std::getline(is, row_line)) {
        throw std::invalid_argument("report csv: expected a header row and a data row");
    }
    const auto names = split(header_line, ',');
    const auto values = split(row_line, ',');
    if (names.size() != values.size()) throw std::invalid_argument("report csv: header and row lengths differ");
    ordered_json j, config;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const std::string& name = names[i];
        const bool in_config = name.starts_with("config.");
        ordered_json v;
        if (name == "config.bias") {
            v = values[i];
        } else {
            v = ordered_json::parse(values[i]);
        }
        if (in_config) {
            config[name.substr(7)] = v;
        } else {
            j[name] = v;
        }
    }
    j["config"] = config;
    return report_from_json(j.dump());
}

MetricsReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return path.extension() == ".csv" ? report_from_csv(ss.str()) : report_from_json(ss.str());
}

std::string render_report(const MetricsReport& report, ReportFormat format) {
    return format == ReportFormat::Csv ? to_csv(report) : to_json(report);
}

}  // namespace optgqa
