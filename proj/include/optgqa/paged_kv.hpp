// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "optgqa/attention.hpp"
#include "optgqa/tensor.hpp"

namespace optgqa {

using BlockId = std::uint32_t;
using SeqId = std::uint64_t;

/// Bytes of K plus V for one token at float32.
constexpr std::size_t kv_bytes_per_token(std::size_t num_kv_heads, std::size_t head_size) noexcept {
    return 2 * num_kv_heads * head_size * sizeof(float);
}

struct PoolConfig {
    std::size_t num_blocks = 0;
    std::size_t block_size = 0;  // tokens per block
    std::size_t num_kv_heads = 0;
    std::size_t head_size = 0;

    std::size_t capacity_tokens() const noexcept { return num_blocks * block_size; }
    std::size_t token_floats() const noexcept { return num_kv_heads * head_size; }
    std::size_t bytes_per_token() const noexcept { return kv_bytes_per_token(num_kv_heads, head_size); }
    std::size_t bytes_per_block() const noexcept { return block_size * bytes_per_token(); }
    std::size_t total_bytes() const noexcept { return num_blocks * bytes_per_block(); }
};

/// The pool cannot supply the blocks an operation needs. Nothing was committed.
class PoolExhausted : public std::runtime_error {
public:
    PoolExhausted(std::size_t requested, std::size_t available);
    std::size_t requested() const noexcept { return requested_; }
    std::size_t available() const noexcept { return available_; }

private:
    std::size_t requested_;
    std::size_t available_;
};

/// Logical-to-physical page map of one sequence.
class BlockTable {
public:
    BlockTable() = default;
    explicit BlockTable(SeqId seq) : seq_(seq) {}

    SeqId seq_id() const noexcept { return seq_; }
    const std::vector<BlockId>& blocks() const noexcept { return blocks_; }
    std::size_t token_count() const noexcept { return token_count_; }

private:
    friend class BlockPool;
    SeqId seq_ = 0;
    std::vector<BlockId> blocks_;
    std::size_t token_count_ = 0;
};

struct UtilizationMetrics {
    double utilization = 0.0;             // allocated / num_blocks
    double internal_fragmentation = 0.0;  // unused slots / allocated slots
    std::vector<BlockId> hot_blocks;      // allocated blocks by access count, descending
};

/// Fixed pool of KV pages, allocated in full at construction.
///
/// Each block stores K for block_size tokens followed by V for block_size
/// tokens; within each half the layout is [token][kv_head][head_size].
/// Full blocks may be shared between sequences by reference count. A block
/// that is only partially filled always has exactly one owner, so appends
/// never write into shared storage.
///
/// Threading: append_kv, fork_sequence and release mutate the pool and need
/// exclusive access. gather_kv and paged_decode_attention only read block
/// storage and bump atomic access counters; they may run concurrently with
/// each other but not with a mutation touching the same blocks.
class BlockPool {
public:
    /// Throws std::invalid_argument if any extent is zero.
    explicit BlockPool(PoolConfig cfg);

    BlockPool(const BlockPool&) = delete;
    BlockPool& operator=(const BlockPool&) = delete;
    BlockPool(BlockPool&&) noexcept = default;
    BlockPool& operator=(BlockPool&&) noexcept = default;

    const PoolConfig& config() const noexcept { return cfg_; }
    std::size_t free_count() const noexcept { return free_list_.size(); }
    std::size_t allocated_count() const noexcept { return cfg_.num_blocks - free_list_.size(); }
    std::size_t allocated_bytes() const noexcept { return allocated_count() * cfg_.bytes_per_block(); }

    std::uint32_t ref_count(BlockId id) const;
    std::uint64_t access_count(BlockId id) const;
    /// Tokens written into block `id`.
    std::size_t fill(BlockId id) const;
    bool is_free(BlockId id) const;
    /// Free block ids in ascending order.
    std::vector<BlockId> free_blocks() const;

    /// Writes t tokens (k, v are [t, num_kv_heads, head_size]) at the end of
    /// the sequence, topping up the partial tail block before allocating.
    /// Strong guarantee: throws PoolExhausted without touching pool or table.
    void append_kv(BlockTable& table, const Tensor& k_tokens, const Tensor& v_tokens);

    /// All cached tokens of the sequence, in order, as two
    /// [token_count, num_kv_heads, head_size] tensors.
    std::pair<Tensor, Tensor> gather_kv(const BlockTable& table) const;

    /// New table sharing every full block of `table`. A partial tail block is
    /// copied into a freshly allocated block.
    BlockTable fork_sequence(const BlockTable& table, SeqId new_seq);

    /// Drops the table's references and empties it.
    void release(BlockTable& table);

    /// K and V of one cached token.
    std::span<const float> key(BlockId id, std::size_t slot) const;
    std::span<const float> value(BlockId id, std::size_t slot) const;

    UtilizationMetrics utilization_metrics() const;

    /// Records a read of `id` for hotness ranking.
    void touch(BlockId id) const noexcept;

    /// Checks that the free list and reference counts agree; returns a
    /// description of the first violation, or an empty string.
    std::string check_invariants() const;

private:
    std::vector<BlockId> allocate(std::size_t n);
    void check_table(const BlockTable& table) const;
    std::span<float> key_mut(BlockId id, std::size_t slot);
    std::span<float> value_mut(BlockId id, std::size_t slot);

    PoolConfig cfg_;
    std::vector<float> storage_;
    std::vector<BlockId> free_list_;  // used as a stack; back() is allocated next
    std::vector<std::uint32_t> ref_counts_;
    std::vector<std::size_t> fill_;
    std::unique_ptr<std::atomic<std::uint64_t>[]> access_;
};

/// Query/key/value projection matrices.
class ProjectionWeights {
public:
    /// wq is [model_dim, num_heads*head_size]; wk and wv are
    /// [model_dim, num_kv_heads*head_size].
    ProjectionWeights(const AttentionConfig& cfg, Tensor wq, Tensor wk, Tensor wv);

    std::size_t model_dim() const noexcept { return wq_.dim(0); }
    const AttentionConfig& config() const noexcept { return cfg_; }
    const Tensor& wq() const noexcept { return wq_; }
    const Tensor& wk() const noexcept { return wk_; }
    const Tensor& wv() const noexcept { return wv_; }

private:
    AttentionConfig cfg_;
    Tensor wq_;
    Tensor wk_;
    Tensor wv_;
};

struct Projection {
    Tensor q;  // [t, num_heads, head_size]
    Tensor k;  // [t, num_kv_heads, head_size]
    Tensor v;  // [t, num_kv_heads, head_size]
};

/// Projects an input block x [t, model_dim] to per-head q, k, v.
Projection project_block(const Tensor& x_block, const ProjectionWeights& w);

/// One decode step against the paged cache.
///
/// q is [num_heads, head_size] for the query at the newest position. Blocks
/// are visited in logical order and each head keeps a running maximum,
/// denominator and weighted accumulator, rescaled whenever the maximum grows,
/// so the full score row is never materialized. Returns [num_heads, head_size].
Tensor paged_decode_attention(const BlockPool& pool, const BlockTable& table, const Tensor& q,
                              const AttentionConfig& cfg, const std::optional<AlibiSlopes>& slopes = std::nullopt);

/// Line-oriented snapshot of the free list, block states and tables.
std::string debug_dump(const BlockPool& pool, std::span<const BlockTable> tables);

}  // namespace optgqa
