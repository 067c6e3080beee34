// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "optgqa/attention.hpp"
#include "optgqa/bench.hpp"
#include "optgqa/paged_kv.hpp"
#include "optgqa/scheduler.hpp"

namespace py = pybind11;
using namespace optgqa;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
    FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

std::optional<AlibiSlopes> default_slopes(const AttentionConfig& cfg, std::optional<AlibiSlopes> slopes) {
    if (!slopes && cfg.bias().kind == BiasKind::Alibi) return alibi_slopes(cfg.num_heads());
    return slopes;
}

}  // namespace

PYBIND11_MODULE(_optgqa, m) {
    m.doc() = "Grouped-query attention kernels, paged KV cache, scheduler and bench harness";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<PoolExhausted>(m, "PoolExhausted", PyExc_MemoryError);
    py::register_exception<NoFeasibleGrouping>(m, "NoFeasibleGrouping", PyExc_ValueError);

    py::class_<BiasMode>(m, "BiasMode")
        .def_static("causal", &BiasMode::causal)
        .def_static("local", &BiasMode::local, py::arg("window"))
        .def_static("alibi", &BiasMode::alibi)
        .def_static("parse", &BiasMode::parse)
        .def_readonly("window", &BiasMode::window)
        .def("__eq__", [](const BiasMode& a, const BiasMode& b) { return a == b; })
        .def("__str__", [](const BiasMode& b) { return b.to_string(); })
        .def("__repr__", [](const BiasMode& b) { return "BiasMode('" + b.to_string() + "')"; });

    py::class_<AttentionConfig>(m, "AttentionConfig")
        .def(py::init([](std::size_t h, std::size_t hkv, std::size_t d, const py::object& bias) {
                 const BiasMode mode = py::isinstance<py::str>(bias) ? BiasMode::parse(bias.cast<std::string>())
                                                                     : bias.cast<BiasMode>();
                 return AttentionConfig(h, hkv, d, mode);
             }),
             py::arg("num_heads"), py::arg("num_kv_heads"), py::arg("head_size"), py::arg("bias") = "causal")
        .def_property_readonly("num_heads", &AttentionConfig::num_heads)
        .def_property_readonly("num_kv_heads", &AttentionConfig::num_kv_heads)
        .def_property_readonly("head_size", &AttentionConfig::head_size)
        .def_property_readonly("group_size", &AttentionConfig::group_size)
        .def_property_readonly("scale", &AttentionConfig::scale)
        .def_property_readonly("bias", &AttentionConfig::bias);

    m.def("alibi_slopes", &alibi_slopes, py::arg("num_heads"));
    m.def(
        "build_bias",
        [](const AttentionConfig& cfg, std::size_t q_len, std::size_t k_len, std::optional<AlibiSlopes> slopes) {
            return to_array(build_bias(cfg, q_len, k_len, default_slopes(cfg, std::move(slopes))).values());
        },
        py::arg("cfg"), py::arg("q_len"), py::arg("k_len"), py::arg("slopes") = py::none());
    m.def(
        "attention_forward",
        [](const FloatArray& q, const FloatArray& k, const FloatArray& v, const AttentionConfig& cfg) {
            const Tensor tq = to_tensor(q);
            if (tq.rank() != 4 || k.ndim() != 4) throw ShapeError("attention_forward: q, k, v must be rank 4");
            const auto bias = build_bias(cfg, tq.dim(1), static_cast<std::size_t>(k.shape(1)), default_slopes(cfg, {}));
            return to_array(attention_forward(tq, to_tensor(k), to_tensor(v), cfg, bias));
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("cfg"));
    m.def(
        "reference_attention",
        [](const FloatArray& q, const FloatArray& k, const FloatArray& v, const AttentionConfig& cfg) {
            const Tensor tq = to_tensor(q);
            if (tq.rank() != 4 || k.ndim() != 4) throw ShapeError("reference_attention: q, k, v must be rank 4");
            const auto bias = build_bias(cfg, tq.dim(1), static_cast<std::size_t>(k.shape(1)), default_slopes(cfg, {}));
            return to_array(reference_masked_attention(tq, repeat_kv_heads(to_tensor(k), cfg.group_size()),
                                                       repeat_kv_heads(to_tensor(v), cfg.group_size()), bias));
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("cfg"));

    py::class_<PoolConfig>(m, "PoolConfig")
        .def(py::init<std::size_t, std::size_t, std::size_t, std::size_t>(), py::arg("num_blocks"),
             py::arg("block_size"), py::arg("num_kv_heads"), py::arg("head_size"))
        .def_readonly("num_blocks", &PoolConfig::num_blocks)
        .def_readonly("block_size", &PoolConfig::block_size)
        .def_property_readonly("bytes_per_block", &PoolConfig::bytes_per_block)
        .def_property_readonly("total_bytes", &PoolConfig::total_bytes);

    py::class_<BlockTable>(m, "BlockTable")
        .def(py::init<SeqId>(), py::arg("seq_id"))
        .def_property_readonly("seq_id", &BlockTable::seq_id)
        .def_property_readonly("blocks", &BlockTable::blocks)
        .def_property_readonly("token_count", &BlockTable::token_count);

    py::class_<UtilizationMetrics>(m, "UtilizationMetrics")
        .def_readonly("utilization", &UtilizationMetrics::utilization)
        .def_readonly("internal_fragmentation", &UtilizationMetrics::internal_fragmentation)
        .def_readonly("hot_blocks", &UtilizationMetrics::hot_blocks);

    py::class_<BlockPool>(m, "BlockPool")
        .def(py::init<PoolConfig>(), py::arg("config"))
        .def_property_readonly("free_count", &BlockPool::free_count)
        .def_property_readonly("allocated_count", &BlockPool::allocated_count)
        .def_property_readonly("allocated_bytes", &BlockPool::allocated_bytes)
        .def("ref_count", &BlockPool::ref_count)
        .def("append_kv",
             [](BlockPool& p, BlockTable& t, const FloatArray& k, const FloatArray& v) {
                 p.append_kv(t, to_tensor(k), to_tensor(v));
             })
        .def("gather_kv",
             [](const BlockPool& p, const BlockTable& t) {
                 auto [k, v] = p.gather_kv(t);
                 return py::make_tuple(to_array(k), to_array(v));
             })
        .def("fork_sequence", &BlockPool::fork_sequence, py::arg("table"), py::arg("new_seq"))
        .def("release", &BlockPool::release)
        .def("utilization_metrics", &BlockPool::utilization_metrics)
        .def("check_invariants", &BlockPool::check_invariants)
        .def("decode",
             [](const BlockPool& p, const BlockTable& t, const FloatArray& q, const AttentionConfig& cfg) {
                 return to_array(paged_decode_attention(p, t, to_tensor(q), cfg, default_slopes(cfg, {})));
             },
             py::arg("table"), py::arg("q"), py::arg("cfg"));

    py::enum_<BandwidthClass>(m, "BandwidthClass")
        .value("High", BandwidthClass::High)
        .value("Limited", BandwidthClass::Limited);
    py::class_<HardwareProfile>(m, "HardwareProfile")
        .def(py::init<std::size_t, BandwidthClass, std::size_t>(), py::arg("compute_units"), py::arg("bandwidth"),
             py::arg("memory_bytes"));
    py::class_<GroupingPlan>(m, "GroupingPlan")
        .def_readonly("num_groups", &GroupingPlan::num_groups)
        .def_readonly("heads_per_group", &GroupingPlan::heads_per_group)
        .def("__iter__", [](const GroupingPlan& g) {
            return py::iter(py::make_tuple(g.num_groups, g.heads_per_group));
        });
    m.def("select_grouping", &select_grouping, py::arg("profile"), py::arg("num_heads"), py::arg("head_size"),
          py::arg("kv_budget_bytes"));

    py::class_<Request>(m, "Request")
        .def(py::init<RequestId, SeqId, std::size_t, std::size_t>(), py::arg("id"), py::arg("seq_id"),
             py::arg("remaining_steps") = 1, py::arg("cost") = 1);
    py::class_<LoadStats>(m, "LoadStats")
        .def_readonly("max_load", &LoadStats::max_load)
        .def_readonly("min_load", &LoadStats::min_load)
        .def_readonly("imbalance", &LoadStats::imbalance);
    py::class_<Scheduler>(m, "Scheduler")
        .def(py::init<std::size_t>(), py::arg("num_workers"))
        .def("admit", &Scheduler::admit)
        .def("step", &Scheduler::step)
        .def("load_stats", &Scheduler::load_stats)
        .def("idle", &Scheduler::idle);

    py::class_<BenchConfig>(m, "BenchConfig")
        .def(py::init<>())
        .def_readwrite("num_heads", &BenchConfig::num_heads)
        .def_readwrite("num_kv_heads", &BenchConfig::num_kv_heads)
        .def_readwrite("head_size", &BenchConfig::head_size)
        .def_readwrite("block_size", &BenchConfig::block_size)
        .def_readwrite("num_blocks", &BenchConfig::num_blocks)
        .def_readwrite("batch", &BenchConfig::batch)
        .def_readwrite("prompt_len", &BenchConfig::prompt_len)
        .def_readwrite("gen_len", &BenchConfig::gen_len)
        .def_property(
            "bias", [](const BenchConfig& c) { return c.bias.to_string(); },
            [](BenchConfig& c, const std::string& s) { c.bias = BiasMode::parse(s); })
        .def_readwrite("seed", &BenchConfig::seed)
        .def_readwrite("workers", &BenchConfig::workers)
        .def_readwrite("single_thread", &BenchConfig::single_thread)
        .def_readwrite("warmup", &BenchConfig::warmup)
        .def("validate", &BenchConfig::validate);

    py::class_<MetricsReport>(m, "MetricsReport")
        .def_readonly("latency_ms", &MetricsReport::latency_ms)
        .def_readonly("gen_throughput_tok_s", &MetricsReport::gen_throughput_tok_s)
        .def_readonly("all_throughput_tok_s", &MetricsReport::all_throughput_tok_s)
        .def_readonly("peak_kv_bytes", &MetricsReport::peak_kv_bytes)
        .def_readonly("pool_utilization", &MetricsReport::pool_utilization)
        .def_readonly("pool_fragmentation", &MetricsReport::pool_fragmentation)
        .def_readonly("worker_imbalance", &MetricsReport::worker_imbalance)
        .def_readonly("generated_tokens", &MetricsReport::generated_tokens)
        .def_readonly("all_tokens", &MetricsReport::all_tokens)
        .def_readonly("token_digest", &MetricsReport::token_digest)
        .def("to_json", [](const MetricsReport& r) { return to_json(r); })
        .def("to_csv", [](const MetricsReport& r) { return to_csv(r); });

    py::class_<RunComparison>(m, "RunComparison")
        .def_readonly("latency_delta_pct", &RunComparison::latency_delta_pct)
        .def_readonly("gen_throughput_delta_pct", &RunComparison::gen_throughput_delta_pct)
        .def_readonly("all_throughput_delta_pct", &RunComparison::all_throughput_delta_pct);

    m.def("run_bench", &run_bench, py::arg("config"), py::call_guard<py::gil_scoped_release>());
    m.def("compare_runs", &compare_runs, py::arg("baseline"), py::arg("candidate"));
    m.def("report_from_json", &report_from_json);
    m.def("load_report", [](const std::string& path) { return load_report(path); });
}
