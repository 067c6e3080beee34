// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "optgqa/attention.hpp"
#include "test_support.hpp"

using namespace optgqa;
using optgqa::testing::bitwise_equal;
using optgqa::testing::random_tensor;

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

std::optional<AlibiSlopes> slopes_for(const AttentionConfig& cfg) {
    if (cfg.bias().kind == BiasKind::Alibi) return alibi_slopes(cfg.num_heads());
    return std::nullopt;
}

}  // namespace

TEST_CASE("attention config") {
    const AttentionConfig cfg(8, 2, 16);
    CHECK(cfg.group_size() == 4);
    CHECK(cfg.hidden_size() == 128);
    CHECK(cfg.scale() == 1.0f / std::sqrt(16.0f));
    CHECK_THROWS_AS(AttentionConfig(6, 4, 8), std::invalid_argument);
    CHECK_THROWS_AS(AttentionConfig(0, 1, 8), std::invalid_argument);
    CHECK_THROWS_AS(BiasMode::local(0), std::invalid_argument);
}

TEST_CASE("bias mode parsing") {
    CHECK(BiasMode::parse("causal") == BiasMode::causal());
    CHECK(BiasMode::parse("alibi") == BiasMode::alibi());
    CHECK(BiasMode::parse("local:8") == BiasMode::local(8));
    CHECK(BiasMode::parse("local:8").to_string() == "local:8");
    CHECK_THROWS_AS(BiasMode::parse("local:"), std::invalid_argument);
    CHECK_THROWS_AS(BiasMode::parse("local:x"), std::invalid_argument);
    CHECK_THROWS_AS(BiasMode::parse("sliding"), std::invalid_argument);
}

TEST_CASE("alibi slopes") {
    CHECK(alibi_slopes(1) == AlibiSlopes{std::exp2f(-8.0f)});
    CHECK(alibi_slopes(4) == AlibiSlopes{0.25f, 0.0625f, 0.015625f, 0.00390625f});
    const AlibiSlopes eight = alibi_slopes(8);
    for (int h = 0; h < 8; ++h) CHECK(eight[h] == std::ldexp(1.0f, -(h + 1)));

    SUBCASE("power-of-two counts are strictly decreasing") {
        for (std::size_t n : {1u, 2u, 4u, 8u, 16u, 32u, 64u}) {
            const AlibiSlopes s = alibi_slopes(n);
            for (std::size_t h = 0; h < n; ++h) {
                CHECK(s[h] == static_cast<float>(std::exp2(-8.0 * double(h + 1) / double(n))));
                if (h) CHECK(s[h] < s[h - 1]);
            }
        }
    }
    SUBCASE("non-power-of-two counts interleave the doubled schedule") {
        // 6 heads: base 4 -> 2^-2, 2^-4, 2^-6, 2^-8; then 2^-1, 2^-3 from the 8-head schedule.
        CHECK(alibi_slopes(6) == AlibiSlopes{0.25f, 0.0625f, 0.015625f, 0.00390625f, 0.5f, 0.125f});
        for (std::size_t n = 1; n <= 40; ++n) {
            const AlibiSlopes s = alibi_slopes(n);
            REQUIRE(s.size() == n);
            for (float x : s) CHECK(x > 0.0f);
            std::vector<float> sorted = s;
            std::sort(sorted.begin(), sorted.end());
            CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
        }
    }
}

TEST_CASE("kv_head_index") {
    CHECK(kv_head_index(0, AttentionConfig(8, 2, 4)) == 0);
    CHECK(kv_head_index(5, AttentionConfig(8, 2, 4)) == 1);
    CHECK(kv_head_index(3, AttentionConfig(4, 4, 4)) == 3);
    CHECK_THROWS_AS(kv_head_index(8, AttentionConfig(8, 2, 4)), std::out_of_range);
    const AttentionConfig cfg(12, 3, 4);
    for (std::size_t h = 0; h < 12; ++h) CHECK(kv_head_index(h, cfg) == h / 4);
}

TEST_CASE("build_bias") {
    SUBCASE("single decode query sees the whole prefix") {
        const BiasMatrix b = build_bias(AttentionConfig(1, 1, 4), 1, 3);
        CHECK(b.head(0) == Tensor::matrix(1, 3, {0, 0, 0}));
    }
    SUBCASE("square causal mask") {
        const BiasMatrix b = build_bias(AttentionConfig(2, 1, 4), 3, 3);
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) CHECK(b.at(h, i, j) == (j > i ? -kInf : 0.0f));
    }
    SUBCASE("alibi decode row") {
        const AttentionConfig cfg(1, 1, 4, BiasMode::alibi());
        const BiasMatrix b = build_bias(cfg, 1, 4, AlibiSlopes{0.5f});
        CHECK(b.head(0) == Tensor::matrix(1, 4, {-1.5f, -1.0f, -0.5f, 0.0f}));
    }
    SUBCASE("local window") {
        const BiasMatrix b = build_bias(AttentionConfig(1, 1, 4, BiasMode::local(2)), 2, 5);
        // query rows sit at positions 3 and 4
        CHECK(b.head(0) == Tensor::matrix(2, 5, {-kInf, -kInf, 0, 0, -kInf, -kInf, -kInf, -kInf, 0, 0}));
    }
    SUBCASE("invariants over many shapes") {
        for (auto mode : {BiasMode::causal(), BiasMode::local(3), BiasMode::alibi()}) {
            const AttentionConfig cfg(4, 2, 8, mode);
            const auto slopes = slopes_for(cfg);
            for (std::size_t q = 0; q <= 6; ++q) {
                for (std::size_t k = q; k <= 9; ++k) {
                    const BiasMatrix b = build_bias(cfg, q, k, slopes);
                    for (std::size_t h = 0; h < 4; ++h)
                        for (std::size_t i = 0; i < q; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                                const std::size_t pos = i + (k - q);
                                const bool masked = j > pos || (mode.kind == BiasKind::LocalWindow && pos - j >= 3);
                                const float v = b.at(h, i, j);
                                CHECK((v == -kInf) == masked);
                                if (!masked && mode.kind == BiasKind::Alibi) {
                                    CHECK(v <= 0.0f);
                                    CHECK(v == (*slopes)[h] * (float(j) - float(pos)));
                                }
                            }
                }
            }
        }
    }
    SUBCASE("errors") {
        const AttentionConfig causal(2, 1, 4);
        const AttentionConfig alibi(2, 1, 4, BiasMode::alibi());
        CHECK_THROWS_AS(build_bias(causal, 3, 2), std::invalid_argument);
        CHECK_THROWS_AS(build_bias(alibi, 1, 2), std::invalid_argument);
        CHECK_THROWS_AS(build_bias(alibi, 1, 2, AlibiSlopes{0.5f}), std::invalid_argument);
        CHECK_THROWS_AS(build_bias(causal, 1, 2, AlibiSlopes{0.5f, 0.25f}), std::invalid_argument);
    }
}

TEST_CASE("attention_scores") {
    SUBCASE("zeros") {
        const AttentionConfig cfg(1, 1, 4);
        CHECK(attention_scores(Tensor({2, 4}), Tensor({3, 4}), cfg, Tensor({2, 3})) == Tensor({2, 3}));
    }
    SUBCASE("all-ones head_size 4") {
        const AttentionConfig cfg(1, 1, 4);
        const Tensor ones = Tensor::matrix(1, 4, {1, 1, 1, 1});
        CHECK(attention_scores(ones, ones, cfg, Tensor({1, 1}))(0, 0) == 2.0f);
    }
    SUBCASE("matches triple-loop oracle under causal bias") {
        std::mt19937_64 rng(11);
        const AttentionConfig cfg(1, 1, 8);
        const Tensor q = random_tensor({3, 8}, rng), k = random_tensor({3, 8}, rng);
        const Tensor bias = build_bias(cfg, 3, 3).head(0);
        const Tensor s = attention_scores(q, k, cfg, bias);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                if (j > i) {
                    CHECK(s(i, j) == -kInf);
                    continue;
                }
                double dot = 0.0;
                for (std::size_t t = 0; t < 8; ++t) dot += double(q(i, t)) * double(k(j, t));
                CHECK(s(i, j) == doctest::Approx(dot / std::sqrt(8.0)).epsilon(1e-5));
            }
    }
    SUBCASE("shape errors") {
        const AttentionConfig cfg(1, 1, 4);
        CHECK_THROWS_AS(attention_scores(Tensor({2, 3}), Tensor({2, 4}), cfg, Tensor({2, 2})), ShapeError);
        CHECK_THROWS_AS(attention_scores(Tensor({2, 4}), Tensor({2, 4}), cfg, Tensor({2, 3})), ShapeError);
    }
}

TEST_CASE("reference_masked_attention") {
    const AttentionConfig cfg(2, 2, 4);
    std::mt19937_64 rng(12);
    SUBCASE("zero values give zero output") {
        const Tensor q = random_tensor({1, 3, 2, 4}, rng), k = random_tensor({1, 3, 2, 4}, rng);
        CHECK(reference_masked_attention(q, k, Tensor({1, 3, 2, 4}), build_bias(cfg, 3, 3)) == Tensor({1, 3, 8}));
    }
    SUBCASE("uniform scores average the values") {
        // q = 0 makes every raw score 0; a prefix-free (q_len 1) row sees all keys.
        const Tensor k = random_tensor({1, 4, 2, 4}, rng), v = random_tensor({1, 4, 2, 4}, rng);
        const Tensor out = reference_masked_attention(Tensor({1, 1, 2, 4}), k, v, build_bias(cfg, 1, 4));
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t t = 0; t < 4; ++t) {
                double mean = 0.0;
                for (std::size_t j = 0; j < 4; ++j) mean += v.data()[(j * 2 + h) * 4 + t] / 4.0;
                CHECK(out.data()[h * 4 + t] == doctest::Approx(mean).epsilon(1e-6));
            }
    }
    SUBCASE("two-token causal closed form") {
        const AttentionConfig one(1, 1, 4);
        const Tensor q = random_tensor({1, 2, 1, 4}, rng), k = random_tensor({1, 2, 1, 4}, rng),
                     v = random_tensor({1, 2, 1, 4}, rng);
        const Tensor out = reference_masked_attention(q, k, v, build_bias(one, 2, 2));
        auto d = [&](std::size_t i, std::size_t j) {
            double s = 0.0;
            for (std::size_t t = 0; t < 4; ++t) s += double(q.data()[i * 4 + t]) * double(k.data()[j * 4 + t]);
            return s / 2.0;
        };
        const double w = 1.0 / (1.0 + std::exp(d(1, 1) - d(1, 0)));
        for (std::size_t t = 0; t < 4; ++t) {
            CHECK(out.data()[t] == v.data()[t]);
            const double expect = w * v.data()[t] + (1.0 - w) * v.data()[4 + t];
            CHECK(out.data()[4 + t] == doctest::Approx(expect).epsilon(1e-5));
        }
    }
}

TEST_CASE("attention_forward") {
    std::mt19937_64 rng(13);
    SUBCASE("single token returns its value per head group") {
        const AttentionConfig cfg(4, 2, 3);
        const Tensor q = random_tensor({1, 1, 4, 3}, rng), k = random_tensor({1, 1, 2, 3}, rng),
                     v = random_tensor({1, 1, 2, 3}, rng);
        const Tensor out = attention_forward(q, k, v, cfg, build_bias(cfg, 1, 1));
        for (std::size_t h = 0; h < 4; ++h)
            for (std::size_t t = 0; t < 3; ++t) CHECK(out.data()[h * 3 + t] == v.data()[(h / 2) * 3 + t]);
    }
    SUBCASE("MHA case is bit-identical to the reference") {
        const AttentionConfig cfg(4, 4, 8);
        const Tensor q = random_tensor({2, 5, 4, 8}, rng), k = random_tensor({2, 5, 4, 8}, rng),
                     v = random_tensor({2, 5, 4, 8}, rng);
        const BiasMatrix bias = build_bias(cfg, 5, 5);
        CHECK(attention_forward(q, k, v, cfg, bias) == reference_masked_attention(q, k, v, bias));
    }
    SUBCASE("GQA matches reference with duplicated kv heads") {
        const AttentionConfig cfg(4, 2, 8);
        const Tensor q = random_tensor({1, 4, 4, 8}, rng), k = random_tensor({1, 4, 2, 8}, rng),
                     v = random_tensor({1, 4, 2, 8}, rng);
        const BiasMatrix bias = build_bias(cfg, 4, 4);
        const Tensor got = attention_forward(q, k, v, cfg, bias);
        const Tensor want = reference_masked_attention(q, repeat_kv_heads(k, 2), repeat_kv_heads(v, 2), bias);
        CHECK(got.shape() == Shape{1, 4, 32});
        CHECK(max_abs_diff(got, want) <= 1e-5f);
    }
    SUBCASE("matches double-precision brute force for every bias mode") {
        for (auto mode : {BiasMode::causal(), BiasMode::local(2), BiasMode::alibi()}) {
            const AttentionConfig cfg(6, 3, 5, mode);
            const auto slopes = slopes_for(cfg);
            const std::size_t q_len = 3, k_len = 7;
            const Tensor q = random_tensor({1, q_len, 6, 5}, rng), k = random_tensor({1, k_len, 3, 5}, rng),
                         v = random_tensor({1, k_len, 3, 5}, rng);
            const Tensor out = attention_forward(q, k, v, cfg, build_bias(cfg, q_len, k_len, slopes));
            for (std::size_t h = 0; h < 6; ++h) {
                const std::size_t kvh = h / 2;
                std::vector<std::vector<float>> keys(k_len), values(k_len);
                for (std::size_t j = 0; j < k_len; ++j) {
                    auto kr = k.row(j * 3 + kvh), vr = v.row(j * 3 + kvh);
                    keys[j].assign(kr.begin(), kr.end());
                    values[j].assign(vr.begin(), vr.end());
                }
                for (std::size_t i = 0; i < q_len; ++i) {
                    auto qr = q.row(i * 6 + h);
                    const auto want = optgqa::testing::brute_force_head({qr.begin(), qr.end()}, keys, values,
                                                                        i + k_len - q_len, mode,
                                                                        slopes ? (*slopes)[h] : 0.0);
                    for (std::size_t t = 0; t < 5; ++t)
                        CHECK(out.data()[(i * 6 + h) * 5 + t] == doctest::Approx(want[t]).epsilon(1e-5));
                }
            }
        }
    }
    SUBCASE("empty sequence returns an empty tensor") {
        const AttentionConfig cfg(2, 1, 4);
        const Tensor out = attention_forward(Tensor({1, 0, 2, 4}), Tensor({1, 0, 1, 4}), Tensor({1, 0, 1, 4}), cfg,
                                             build_bias(cfg, 0, 0));
        CHECK(out.shape() == Shape{1, 0, 8});
    }
    SUBCASE("errors") {
        const AttentionConfig cfg(4, 2, 4);
        const Tensor q({1, 2, 4, 4}), kv({1, 2, 2, 4});
        CHECK_THROWS_AS(attention_forward(q, Tensor({1, 2, 4, 4}), Tensor({1, 2, 4, 4}), cfg, build_bias(cfg, 2, 2)),
                        ShapeError);
        CHECK_THROWS_AS(attention_forward(q, kv, kv, cfg, build_bias(cfg, 1, 2)), ShapeError);
        CHECK_THROWS_AS(attention_forward(Tensor({2, 4, 4}), kv, kv, cfg, build_bias(cfg, 2, 2)), ShapeError);
    }
}

TEST_CASE("masking soundness") {
    std::mt19937_64 rng(14);
    for (auto mode : {BiasMode::causal(), BiasMode::local(3)}) {
        const AttentionConfig cfg(4, 2, 8, mode);
        const std::size_t len = 10;
        const Tensor q = random_tensor({1, len, 4, 8}, rng), k = random_tensor({1, len, 2, 8}, rng),
                     v = random_tensor({1, len, 2, 8}, rng);
        const BiasMatrix bias = build_bias(cfg, len, len);
        const Tensor base = attention_forward(q, k, v, cfg, bias);
        // Perturb position 5: rows 0..4 cannot see it causally, rows 8 and 9 fall outside a width-3 window.
        Tensor k2 = k, v2 = v;
        for (std::size_t x = 5 * 16; x < 6 * 16; ++x) {
            k2.data()[x] += 3.0f;
            v2.data()[x] -= 7.0f;
        }
        const Tensor pert = attention_forward(q, k2, v2, cfg, bias);
        for (std::size_t i = 0; i < len; ++i) {
            const bool sees = i >= 5 && (mode.kind != BiasKind::LocalWindow || i - 5 < 3);
            auto a = base.row(i), b = pert.row(i);
            const bool same = std::equal(a.begin(), a.end(), b.begin());
            CHECK(same != sees);
        }
    }
}

TEST_CASE("alibi weights decay with distance") {
    const AttentionConfig cfg(8, 8, 4, BiasMode::alibi());
    const auto slopes = alibi_slopes(8);
    const BiasMatrix bias = build_bias(cfg, 1, 16, slopes);
    for (std::size_t h = 0; h < 8; ++h) {
        Tensor raw = attention_scores(Tensor({1, 4}), Tensor({16, 4}), cfg, bias.head(h));
        for (std::size_t j = 1; j < 16; ++j) CHECK(raw(0, j) - raw(0, j - 1) == slopes[h]);
        const Tensor w = row_softmax(raw);
        for (std::size_t j = 1; j < 16; ++j) CHECK(w(0, j - 1) < w(0, j));
    }
}

TEST_CASE("argmax of a score row is invariant to positive scaling of q") {
    std::mt19937_64 rng(15);
    const AttentionConfig cfg(1, 1, 8);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor q = random_tensor({4, 8}, rng), k = random_tensor({6, 8}, rng);
        Tensor q3 = q;
        for (float& x : q3.data()) x *= 3.0f;
        const Tensor bias = build_bias(cfg, 4, 6).head(0);
        const Tensor a = attention_scores(q, k, cfg, bias), b = attention_scores(q3, k, cfg, bias);
        for (std::size_t i = 0; i < 4; ++i) {
            auto ra = a.row(i), rb = b.row(i);
            CHECK(std::max_element(ra.begin(), ra.end()) - ra.begin() == std::max_element(rb.begin(), rb.end()) - rb.begin());
        }
    }
}

TEST_CASE("repeat_kv_heads") {
    const Tensor kv({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(repeat_kv_heads(kv, 2) == Tensor({1, 1, 4, 2}, {1, 2, 1, 2, 3, 4, 3, 4}));
    CHECK(bitwise_equal(repeat_kv_heads(kv, 1), kv));
}
