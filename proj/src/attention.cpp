// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "optgqa/attention.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace optgqa {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

std::vector<float> geometric_slopes(std::size_t n) {
    std::vector<float> slopes(n);
    for (std::size_t h = 0; h < n; ++h) {
        slopes[h] = static_cast<float>(std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(n)));
    }
    return slopes;
}

float dot(std::span<const float> a, std::span<const float> b) noexcept {
    float acc = 0.0f;
    for (std::size_t t = 0; t < a.size(); ++t) acc += a[t] * b[t];
    return acc;
}

void require_rank4(const Tensor& t, const char* what) {
    if (t.rank() != 4) {
        throw ShapeError(std::string("attention: ") + what + " must be [batch, seq, heads, head_size], got " +
                         to_string(t.shape()));
    }
}

}  // namespace

BiasMode BiasMode::local(std::size_t window) {
    if (window == 0) throw std::invalid_argument("bias: local window must be positive");
    return {BiasKind::LocalWindow, window};
}

BiasMode BiasMode::parse(const std::string& text) {
    if (text == "causal") return causal();
    if (text == "alibi") return alibi();
    constexpr std::string_view prefix = "local:";
    if (text.starts_with(prefix)) {
        const std::string digits = text.substr(prefix.size());
        if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
            throw std::invalid_argument("bias: bad local window in '" + text + "'");
        }
        return local(std::stoul(digits));
    }
    throw std::invalid_argument("bias: expected causal, alibi or local:<w>, got '" + text + "'");
}

std::string BiasMode::to_string() const {
    switch (kind) {
        case BiasKind::Causal:
            return "causal";
        case BiasKind::LocalWindow:
            return "local:" + std::to_string(window);
        case BiasKind::Alibi:
            return "alibi";
    }
    return "causal";
}

AttentionConfig::AttentionConfig(std::size_t num_heads, std::size_t num_kv_heads, std::size_t head_size,
                                 BiasMode bias)
    : num_heads_(num_heads), num_kv_heads_(num_kv_heads), head_size_(head_size), bias_(bias) {
    if (num_heads == 0 || num_kv_heads == 0 || head_size == 0) {
        throw std::invalid_argument("attention config: num_heads, num_kv_heads and head_size must be positive");
    }
    if (num_heads % num_kv_heads != 0) {
        throw std::invalid_argument("attention config: num_heads (" + std::to_string(num_heads) +
                                    ") is not a multiple of num_kv_heads (" + std::to_string(num_kv_heads) + ")");
    }
    if (bias.kind == BiasKind::LocalWindow && bias.window == 0) {
        throw std::invalid_argument("attention config: local window must be positive");
    }
    scale_ = 1.0f / std::sqrt(static_cast<float>(head_size));
}

AlibiSlopes alibi_slopes(std::size_t num_heads) {
    if (num_heads == 0) throw std::invalid_argument("alibi_slopes: num_heads must be positive");
    const std::size_t base = std::bit_floor(num_heads);
    AlibiSlopes slopes = geometric_slopes(base);
    if (base != num_heads) {
        const std::vector<float> extra = geometric_slopes(2 * base);
        for (std::size_t i = 0; slopes.size() < num_heads; i += 2) slopes.push_back(extra[i]);
    }
    return slopes;
}

std::size_t kv_head_index(std::size_t head, const AttentionConfig& cfg) {
    if (head >= cfg.num_heads()) {
        throw std::out_of_range("kv_head_index: head " + std::to_string(head) + " out of range for " +
                                std::to_string(cfg.num_heads()) + " heads");
    }
    return head / cfg.group_size();
}

BiasMatrix::BiasMatrix(Tensor values) : values_(std::move(values)) {
    if (values_.rank() != 3) throw ShapeError("bias: expected [heads, q_len, k_len], got " + to_string(values_.shape()));
}

Tensor BiasMatrix::head(std::size_t h) const {
    if (h >= num_heads()) throw std::out_of_range("bias: head " + std::to_string(h) + " out of range");
    const std::size_t n = q_len() * k_len();
    auto src = values_.data().subspan(h * n, n);
    return Tensor({q_len(), k_len()}, std::vector<float>(src.begin(), src.end()));
}

float bias_value(const BiasMode& mode, float slope, std::size_t query_pos, std::size_t key_pos) noexcept {
    if (key_pos > query_pos) return kNegInf;
    const std::size_t distance = query_pos - key_pos;
    switch (mode.kind) {
        case BiasKind::Causal:
            return 0.0f;
        case BiasKind::LocalWindow:
            return distance >= mode.window ? kNegInf : 0.0f;
        case BiasKind::Alibi:
            return -(slope * static_cast<float>(distance));
    }
    return 0.0f;
}

BiasMatrix build_bias(const AttentionConfig& cfg, std::size_t q_len, std::size_t k_len,
                      const std::optional<AlibiSlopes>& slopes) {
    if (k_len < q_len) {
        throw std::invalid_argument("build_bias: k_len (" + std::to_string(k_len) + ") < q_len (" +
                                    std::to_string(q_len) + ")");
    }
    const bool alibi = cfg.bias().kind == BiasKind::Alibi;
    if (alibi && !slopes) throw std::invalid_argument("build_bias: ALiBi mode requires slopes");
    if (!alibi && slopes) throw std::invalid_argument("build_bias: slopes given but bias mode is not ALiBi");
    if (alibi && slopes->size() != cfg.num_heads()) {
        throw std::invalid_argument("build_bias: expected " + std::to_string(cfg.num_heads()) + " slopes, got " +
                                    std::to_string(slopes->size()));
    }

    const std::size_t offset = k_len - q_len;
    Tensor values({cfg.num_heads(), q_len, k_len});
    auto out = values.data();
    std::size_t idx = 0;
    for (std::size_t h = 0; h < cfg.num_heads(); ++h) {
        const float slope = alibi ? (*slopes)[h] : 0.0f;
        for (std::size_t i = 0; i < q_len; ++i)
            for (std::size_t j = 0; j < k_len; ++j) out[idx++] = bias_value(cfg.bias(), slope, i + offset, j);
    }
    return BiasMatrix(std::move(values));
}

Tensor attention_scores(const Tensor& q, const Tensor& k, const AttentionConfig& cfg, const Tensor& bias) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != cfg.head_size() || k.dim(1) != cfg.head_size()) {
        throw ShapeError("attention_scores: q " + to_string(q.shape()) + " and k " + to_string(k.shape()) +
                         " must both have head_size " + std::to_string(cfg.head_size()));
    }
    if (bias.shape() != Shape{q.dim(0), k.dim(0)}) {
        throw ShapeError("attention_scores: bias " + to_string(bias.shape()) + " does not span " +
                         to_string({q.dim(0), k.dim(0)}));
    }
    Tensor out({q.dim(0), k.dim(0)});
    for (std::size_t i = 0; i < q.dim(0); ++i) {
        for (std::size_t j = 0; j < k.dim(0); ++j) {
            const float b = bias(i, j);
            out(i, j) = (b == kNegInf) ? kNegInf : cfg.scale() * dot(q.row(i), k.row(j)) + b;
        }
    }
    return out;
}

Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionConfig& cfg,
                         const BiasMatrix& bias) {
    require_rank4(q, "q");
    require_rank4(k, "k");
    require_rank4(v, "v");
    const std::size_t batch = q.dim(0), q_len = q.dim(1), k_len = k.dim(1), dh = cfg.head_size();
    if (q.dim(2) != cfg.num_heads() || q.dim(3) != dh) {
        throw ShapeError("attention_forward: q " + to_string(q.shape()) + " does not match " +
                         std::to_string(cfg.num_heads()) + " heads of size " + std::to_string(dh));
    }
    if (k.shape() != v.shape() || k.dim(0) != batch || k.dim(2) != cfg.num_kv_heads() || k.dim(3) != dh) {
        throw ShapeError("attention_forward: k " + to_string(k.shape()) + " / v " + to_string(v.shape()) +
                         " do not match batch " + std::to_string(batch) + " with " +
                         std::to_string(cfg.num_kv_heads()) + " kv heads of size " + std::to_string(dh));
    }
    Tensor out({batch, q_len, cfg.hidden_size()});
    if (q_len == 0) return out;
    if (bias.num_heads() != cfg.num_heads() || bias.q_len() != q_len || bias.k_len() != k_len) {
        throw ShapeError("attention_forward: bias " + to_string(bias.values().shape()) + " does not span " +
                         to_string({cfg.num_heads(), q_len, k_len}));
    }

    const std::size_t group = cfg.group_size();
    const float scale = cfg.scale();
    auto qd = q.data();
    auto kd = k.data();
    auto vd = v.data();
    auto od = out.data();
    std::vector<float> weights(k_len);

    // Flat offsets: q/out rows are [b][i][h][:], k/v rows are [b][j][kvh][:].
    auto q_row = [&](std::size_t b, std::size_t i, std::size_t h) {
        return qd.subspan(((b * q_len + i) * cfg.num_heads() + h) * dh, dh);
    };
    auto kv_off = [&](std::size_t b, std::size_t j, std::size_t kvh) {
        return ((b * k_len + j) * cfg.num_kv_heads() + kvh) * dh;
    };

    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t kvh = 0; kvh < cfg.num_kv_heads(); ++kvh) {
            // Every query head of the group reads this kv head in place.
            for (std::size_t h = kvh * group; h < (kvh + 1) * group; ++h) {
                for (std::size_t i = 0; i < q_len; ++i) {
                    auto qi = q_row(b, i, h);
                    for (std::size_t j = 0; j < k_len; ++j) {
                        const float bij = bias.at(h, i, j);
                        weights[j] = (bij == kNegInf) ? kNegInf : scale * dot(qi, kd.subspan(kv_off(b, j, kvh), dh)) + bij;
                    }
                    if (!softmax_inplace(weights)) {
                        throw MaskedRowError("attention_forward: query " + std::to_string(i) + " of head " +
                                             std::to_string(h) + " attends to nothing");
                    }
                    auto o = od.subspan(((b * q_len + i) * cfg.num_heads() + h) * dh, dh);
                    for (std::size_t j = 0; j < k_len; ++j) {
                        if (bias.at(h, i, j) == kNegInf) continue;
                        const float w = weights[j];
                        auto vj = vd.subspan(kv_off(b, j, kvh), dh);
                        for (std::size_t t = 0; t < dh; ++t) o[t] += w * vj[t];
                    }
                }
            }
        }
    }
    return out;
}

Tensor reference_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const BiasMatrix& bias) {
    require_rank4(q, "q");
    require_rank4(k, "k");
    require_rank4(v, "v");
    const std::size_t batch = q.dim(0), q_len = q.dim(1), heads = q.dim(2), dh = q.dim(3);
    const std::size_t k_len = k.dim(1);
    if (k.shape() != v.shape() || k.dim(0) != batch || k.dim(2) != heads || k.dim(3) != dh) {
        throw ShapeError("reference_masked_attention: k/v " + to_string(k.shape()) + " must carry one head per query head of q " +
                         to_string(q.shape()));
    }
    Tensor out({batch, q_len, heads * dh});
    if (q_len == 0) return out;
    if (bias.num_heads() != heads || bias.q_len() != q_len || bias.k_len() != k_len) {
        throw ShapeError("reference_masked_attention: bias " + to_string(bias.values().shape()) + " does not span " +
                         to_string({heads, q_len, k_len}));
    }
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    auto at = [](const Tensor& t, std::size_t b, std::size_t s, std::size_t h, std::size_t d) {
        return t.data()[((b * t.dim(1) + s) * t.dim(2) + h) * t.dim(3) + d];
    };

    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            // raw(i, j) = scale * q_i . k_j + bias(i, j)
            Tensor raw({q_len, k_len});
            for (std::size_t i = 0; i < q_len; ++i) {
                for (std::size_t j = 0; j < k_len; ++j) {
                    const float bij = bias.at(h, i, j);
                    if (bij == kNegInf) {
                        raw(i, j) = kNegInf;
                        continue;
                    }
                    float d = 0.0f;
                    for (std::size_t t = 0; t < dh; ++t) d += at(q, b, i, h, t) * at(k, b, j, h, t);
                    raw(i, j) = scale * d + bij;
                }
            }
            const Tensor weights = row_softmax(raw);
            auto od = out.data();
            for (std::size_t i = 0; i < q_len; ++i) {
                for (std::size_t t = 0; t < dh; ++t) {
                    float acc = 0.0f;
                    for (std::size_t j = 0; j < k_len; ++j) {
                        if (raw(i, j) == kNegInf) continue;
                        acc += weights(i, j) * at(v, b, j, h, t);
                    }
                    od[(b * q_len + i) * heads * dh + h * dh + t] = acc;
                }
            }
        }
    }
    return out;
}

Tensor repeat_kv_heads(const Tensor& kv, std::size_t group) {
    require_rank4(kv, "kv");
    if (group == 0) throw std::invalid_argument("repeat_kv_heads: group must be positive");
    const std::size_t batch = kv.dim(0), seq = kv.dim(1), kv_heads = kv.dim(2), dh = kv.dim(3);
    Tensor out({batch, seq, kv_heads * group, dh});
    auto src = kv.data();
    auto dst = out.data();
    std::size_t o = 0;
    for (std::size_t row = 0; row < batch * seq; ++row) {
        for (std::size_t kvh = 0; kvh < kv_heads; ++kvh) {
            auto head = src.subspan((row * kv_heads + kvh) * dh, dh);
            for (std::size_t g = 0; g < group; ++g)
                for (float x : head) dst[o++] = x;
        }
    }
    return out;
}

}  // namespace optgqa
