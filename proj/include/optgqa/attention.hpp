// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "optgqa/tensor.hpp"

namespace optgqa {

enum class BiasKind { Causal, LocalWindow, Alibi };

/// How scores are biased before the softmax. LocalWindow and Alibi both
/// include the causal constraint.
struct BiasMode {
    BiasKind kind = BiasKind::Causal;
    std::size_t window = 0;  // LocalWindow only

    static BiasMode causal() { return {BiasKind::Causal, 0}; }
    static BiasMode local(std::size_t window);
    static BiasMode alibi() { return {BiasKind::Alibi, 0}; }

    /// Parses "causal", "alibi" or "local:<w>".
    static BiasMode parse(const std::string& text);
    std::string to_string() const;

    bool operator==(const BiasMode&) const = default;
};

/// Head geometry shared by every attention path.
class AttentionConfig {
public:
    /// Throws std::invalid_argument unless all counts are positive and
    /// num_heads is a multiple of num_kv_heads.
    AttentionConfig(std::size_t num_heads, std::size_t num_kv_heads, std::size_t head_size,
                    BiasMode bias = BiasMode::causal());

    std::size_t num_heads() const noexcept { return num_heads_; }
    std::size_t num_kv_heads() const noexcept { return num_kv_heads_; }
    std::size_t head_size() const noexcept { return head_size_; }
    /// Query heads per kv head.
    std::size_t group_size() const noexcept { return num_heads_ / num_kv_heads_; }
    std::size_t hidden_size() const noexcept { return num_heads_ * head_size_; }
    /// 1/sqrt(head_size) in float32.
    float scale() const noexcept { return scale_; }
    const BiasMode& bias() const noexcept { return bias_; }

private:
    std::size_t num_heads_;
    std::size_t num_kv_heads_;
    std::size_t head_size_;
    float scale_;
    BiasMode bias_;
};

/// One positive slope per query head.
using AlibiSlopes = std::vector<float>;

/// Geometric ALiBi schedule 2^(-8(h+1)/n). For a head count that is not a
/// power of two, the closest lower power of two p gets the base schedule and
/// the remaining n-p heads take every other slope of the 2p schedule.
AlibiSlopes alibi_slopes(std::size_t num_heads);

/// KV head serving query head `head`: head / group_size.
std::size_t kv_head_index(std::size_t head, const AttentionConfig& cfg);

/// Additive bias of shape [num_heads x q_len x k_len], -inf where masked.
/// Queries are the trailing q_len positions of a k_len context, so query i
/// sits at absolute position i + (k_len - q_len).
class BiasMatrix {
public:
    BiasMatrix() = default;
    explicit BiasMatrix(Tensor values);

    std::size_t num_heads() const noexcept { return values_.rank() == 3 ? values_.dim(0) : 0; }
    std::size_t q_len() const noexcept { return values_.rank() == 3 ? values_.dim(1) : 0; }
    std::size_t k_len() const noexcept { return values_.rank() == 3 ? values_.dim(2) : 0; }

    float at(std::size_t head, std::size_t i, std::size_t j) const noexcept {
        return values_.data()[(head * q_len() + i) * k_len() + j];
    }
    /// [q_len x k_len] slice for one head.
    Tensor head(std::size_t head) const;
    const Tensor& values() const noexcept { return values_; }

private:
    Tensor values_;
};

/// Bias for a single (query position, key position) pair in absolute
/// context coordinates. `slope` is ignored unless the mode is Alibi.
float bias_value(const BiasMode& mode, float slope, std::size_t query_pos, std::size_t key_pos) noexcept;

/// Throws std::invalid_argument if k_len < q_len, or if slopes are missing
/// (or sized wrong) in Alibi mode, or supplied in any other mode.
BiasMatrix build_bias(const AttentionConfig& cfg, std::size_t q_len, std::size_t k_len,
                      const std::optional<AlibiSlopes>& slopes = std::nullopt);

/// scale * q k^T + bias for one head. q is [q_len x head_size], k is
/// [k_len x head_size], bias is [q_len x k_len].
Tensor attention_scores(const Tensor& q, const Tensor& k, const AttentionConfig& cfg, const Tensor& bias);

/// Grouped-query attention forward pass.
///
/// q is [batch, q_len, num_heads, head_size]; k and v are
/// [batch, k_len, num_kv_heads, head_size]. Each query head reads the kv
/// head given by kv_head_index; K/V are never duplicated. The result is
/// [batch, q_len, num_heads * head_size].
Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionConfig& cfg,
                         const BiasMatrix& bias);

/// Straightforward triple-loop attention over K/V that already carry one
/// head per query head. Used as the correctness oracle.
Tensor reference_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const BiasMatrix& bias);

/// Materializes each kv head `group` times along the head axis of a
/// [batch, seq, kv_heads, head_size] tensor.
Tensor repeat_kv_heads(const Tensor& kv, std::size_t group);

}  // namespace optgqa
