// Copyright 2026 The optgqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "optgqa/paged_kv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace optgqa {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

PoolExhausted::PoolExhausted(std::size_t requested, std::size_t available)
    : std::runtime_error("block pool exhausted: need " + std::to_string(requested) + " blocks, " +
                         std::to_string(available) + " free"),
      requested_(requested),
      available_(available) {}

BlockPool::BlockPool(PoolConfig cfg) : cfg_(cfg) {
    if (cfg.num_blocks == 0 || cfg.block_size == 0 || cfg.num_kv_heads == 0 || cfg.head_size == 0) {
        throw std::invalid_argument("block pool: num_blocks, block_size, num_kv_heads and head_size must be positive");
    }
    if (cfg.num_blocks > std::numeric_limits<BlockId>::max()) {
        throw std::invalid_argument("block pool: num_blocks exceeds block id range");
    }
    storage_.assign(cfg.num_blocks * 2 * cfg.block_size * cfg.token_floats(), 0.0f);
    ref_counts_.assign(cfg.num_blocks, 0);
    fill_.assign(cfg.num_blocks, 0);
    access_ = std::make_unique<std::atomic<std::uint64_t>[]>(cfg.num_blocks);
    free_list_.resize(cfg.num_blocks);
    // Descending, so the lowest id is handed out first.
    for (std::size_t i = 0; i < cfg.num_blocks; ++i) free_list_[i] = static_cast<BlockId>(cfg.num_blocks - 1 - i);
}

std::uint32_t BlockPool::ref_count(BlockId id) const {
    if (id >= cfg_.num_blocks) throw std::out_of_range("block pool: block id " + std::to_string(id) + " out of range");
    return ref_counts_[id];
}

std::uint64_t BlockPool::access_count(BlockId id) const {
    if (id >= cfg_.num_blocks) throw std::out_of_range("block pool: block id " + std::to_string(id) + " out of range");
    return access_[id].load(std::memory_order_relaxed);
}

std::size_t BlockPool::fill(BlockId id) const {
    if (id >= cfg_.num_blocks) throw std::out_of_range("block pool: block id " + std::to_string(id) + " out of range");
    return fill_[id];
}

bool BlockPool::is_free(BlockId id) const { return ref_count(id) == 0; }

std::vector<BlockId> BlockPool::free_blocks() const {
    std::vector<BlockId> ids = free_list_;
    std::sort(ids.begin(), ids.end());
    return ids;
}

void BlockPool::touch(BlockId id) const noexcept { access_[id].fetch_add(1, std::memory_order_relaxed); }

std::span<const float> BlockPool::key(BlockId id, std::size_t slot) const {
    const std::size_t n = cfg_.token_floats();
    return std::span<const float>(storage_).subspan((id * 2 * cfg_.block_size + slot) * n, n);
}

std::span<const float> BlockPool::value(BlockId id, std::size_t slot) const {
    const std::size_t n = cfg_.token_floats();
    return std::span<const float>(storage_).subspan(((id * 2 + 1) * cfg_.block_size + slot) * n, n);
}

std::span<float> BlockPool::key_mut(BlockId id, std::size_t slot) {
    const std::size_t n = cfg_.token_floats();
    return std::span<float>(storage_).subspan((id * 2 * cfg_.block_size + slot) * n, n);
}

std::span<float> BlockPool::value_mut(BlockId id, std::size_t slot) {
    const std::size_t n = cfg_.token_floats();
    return std::span<float>(storage_).subspan(((id * 2 + 1) * cfg_.block_size + slot) * n, n);
}

std::vector<BlockId> BlockPool::allocate(std::size_t n) {
    if (n > free_list_.size()) throw PoolExhausted(n, free_list_.size());
    std::vector<BlockId> ids(free_list_.end() - static_cast<std::ptrdiff_t>(n), free_list_.end());
    std::reverse(ids.begin(), ids.end());
    free_list_.resize(free_list_.size() - n);
    for (BlockId id : ids) {
        ref_counts_[id] = 1;
        fill_[id] = 0;
        access_[id].store(0, std::memory_order_relaxed);
    }
    return ids;
}

void BlockPool::check_table(const BlockTable& table) const {
    if (ceil_div(table.token_count_, cfg_.block_size) != table.blocks_.size()) {
        throw std::logic_error("block table " + std::to_string(table.seq_) + ": " +
                               std::to_string(table.blocks_.size()) + " blocks for " +
                               std::to_string(table.token_count_) + " tokens");
    }
    for (BlockId id : table.blocks_) {
        if (id >= cfg_.num_blocks || ref_counts_[id] == 0) {
            throw std::logic_error("block table " + std::to_string(table.seq_) + ": dangling block id " +
                                   std::to_string(id));
        }
    }
}

void BlockPool::append_kv(BlockTable& table, const Tensor& k_tokens, const Tensor& v_tokens) {
    const Shape token_shape{cfg_.num_kv_heads, cfg_.head_size};
    if (k_tokens.rank() != 3 || k_tokens.shape() != v_tokens.shape() ||
        Shape{k_tokens.dim(1), k_tokens.dim(2)} != token_shape) {
        throw ShapeError("append_kv: k " + to_string(k_tokens.shape()) + " / v " + to_string(v_tokens.shape()) +
                         " must both be [t, " + std::to_string(cfg_.num_kv_heads) + ", " +
                         std::to_string(cfg_.head_size) + "]");
    }
    const std::size_t t = k_tokens.dim(0);
    if (t == 0) throw std::invalid_argument("append_kv: no tokens to append");
    check_table(table);

    const std::size_t bs = cfg_.block_size;
    const std::size_t tail_room = table.blocks_.size() * bs - table.token_count_;
    const std::size_t needed = t > tail_room ? ceil_div(t - tail_room, bs) : 0;
    if (tail_room > 0 && ref_counts_[table.blocks_.back()] != 1) {
        throw std::logic_error("append_kv: partial tail block " + std::to_string(table.blocks_.back()) + " is shared");
    }
    // Everything that can fail happens before the first write.
    std::vector<BlockId> fresh = allocate(needed);
    table.blocks_.reserve(table.blocks_.size() + fresh.size());
    table.blocks_.insert(table.blocks_.end(), fresh.begin(), fresh.end());

    const std::size_t n = cfg_.token_floats();
    auto kd = k_tokens.data();
    auto vd = v_tokens.data();
    for (std::size_t i = 0; i < t; ++i) {
        const std::size_t pos = table.token_count_ + i;
        const BlockId id = table.blocks_[pos / bs];
        const std::size_t slot = pos % bs;
        std::copy_n(kd.begin() + static_cast<std::ptrdiff_t>(i * n), n, key_mut(id, slot).begin());
        std::copy_n(vd.begin() + static_cast<std::ptrdiff_t>(i * n), n, value_mut(id, slot).begin());
        fill_[id] = slot + 1;
    }
    table.token_count_ += t;
}

std::pair<Tensor, Tensor> BlockPool::gather_kv(const BlockTable& table) const {
    check_table(table);
    const std::size_t n = cfg_.token_floats();
    const std::size_t bs = cfg_.block_size;
    Tensor k({table.token_count_, cfg_.num_kv_heads, cfg_.head_size});
    Tensor v({table.token_count_, cfg_.num_kv_heads, cfg_.head_size});
    auto kd = k.data();
    auto vd = v.data();
    for (std::size_t b = 0; b < table.blocks_.size(); ++b) {
        const BlockId id = table.blocks_[b];
        touch(id);
        const std::size_t count = std::min(bs, table.token_count_ - b * bs);
        for (std::size_t slot = 0; slot < count; ++slot) {
            const std::size_t pos = b * bs + slot;
            std::ranges::copy(key(id, slot), kd.begin() + static_cast<std::ptrdiff_t>(pos * n));
            std::ranges::copy(value(id, slot), vd.begin() + static_cast<std::ptrdiff_t>(pos * n));
        }
    }
    return {std::move(k), std::move(v)};
}

BlockTable BlockPool::fork_sequence(const BlockTable& table, SeqId new_seq) {
    check_table(table);
    const std::size_t bs = cfg_.block_size;
    const bool partial_tail = table.token_count_ % bs != 0;
    BlockTable forked(new_seq);
    forked.token_count_ = table.token_count_;
    forked.blocks_ = table.blocks_;
    if (partial_tail) {
        const BlockId src = table.blocks_.back();
        const BlockId dst = allocate(1).front();
        const std::size_t used = table.token_count_ % bs;
        for (std::size_t slot = 0; slot < used; ++slot) {
            std::ranges::copy(key(src, slot), key_mut(dst, slot).begin());
            std::ranges::copy(value(src, slot), value_mut(dst, slot).begin());
        }
        fill_[dst] = used;
        forked.blocks_.back() = dst;
    }
    const std::size_t shared = forked.blocks_.size() - (partial_tail ? 1 : 0);
    for (std::size_t b = 0; b < shared; ++b) ++ref_counts_[forked.blocks_[b]];
    return forked;
}

void BlockPool::release(BlockTable& table) {
    check_table(table);
    for (BlockId id : table.blocks_) {
        if (--ref_counts_[id] == 0) {
            fill_[id] = 0;
            free_list_.push_back(id);
        }
    }
    table.blocks_.clear();
    table.token_count_ = 0;
}

UtilizationMetrics BlockPool::utilization_metrics() const {
    UtilizationMetrics m;
    const std::size_t allocated = allocated_count();
    m.utilization = static_cast<double>(allocated) / static_cast<double>(cfg_.num_blocks);
    std::size_t unused = 0;
    for (BlockId id = 0; id < cfg_.num_blocks; ++id) {
        if (ref_counts_[id] == 0) continue;
        unused += cfg_.block_size - fill_[id];
        m.hot_blocks.push_back(id);
    }
    if (allocated > 0) {
        m.internal_fragmentation = static_cast<double>(unused) / static_cast<double>(allocated * cfg_.block_size);
    }
    std::ranges::stable_sort(m.hot_blocks, [this](BlockId a, BlockId b) {
        return access_[a].load(std::memory_order_relaxed) > access_[b].load(std::memory_order_relaxed);
    });
    return m;
}

std::string BlockPool::check_invariants() const {
    std::vector<bool> in_free(cfg_.num_blocks, false);
    for (BlockId id : free_list_) {
        if (id >= cfg_.num_blocks) return "free list holds out-of-range id " + std::to_string(id);
        if (in_free[id]) return "block " + std::to_string(id) + " appears twice in the free list";
        in_free[id] = true;
    }
    for (BlockId id = 0; id < cfg_.num_blocks; ++id) {
        if (in_free[id] != (ref_counts_[id] == 0)) {
            return "block " + std::to_string(id) + " ref_count " + std::to_string(ref_counts_[id]) +
                   (in_free[id] ? " but on the free list" : " but missing from the free list");
        }
        if (fill_[id] > cfg_.block_size) return "block " + std::to_string(id) + " overfilled";
    }
    return {};
}

ProjectionWeights::ProjectionWeights(const AttentionConfig& cfg, Tensor wq, Tensor wk, Tensor wv)
    : cfg_(cfg), wq_(std::move(wq)), wk_(std::move(wk)), wv_(std::move(wv)) {
    const std::size_t q_cols = cfg.num_heads() * cfg.head_size();
    const std::size_t kv_cols = cfg.num_kv_heads() * cfg.head_size();
    if (wq_.rank() != 2 || wk_.rank() != 2 || wv_.rank() != 2 || wq_.dim(1) != q_cols || wk_.dim(1) != kv_cols ||
        wv_.dim(1) != kv_cols || wk_.dim(0) != wq_.dim(0) || wv_.dim(0) != wq_.dim(0)) {
        throw ShapeError("projection weights: W_Q " + to_string(wq_.shape()) + ", W_K " + to_string(wk_.shape()) +
                         ", W_V " + to_string(wv_.shape()) + " inconsistent with " + std::to_string(q_cols) +
                         " query and " + std::to_string(kv_cols) + " kv columns");
    }
}

Projection project_block(const Tensor& x_block, const ProjectionWeights& w) {
    if (x_block.rank() != 2 || x_block.dim(1) != w.model_dim()) {
        throw ShapeError("project_block: x_block " + to_string(x_block.shape()) + " needs " +
                         std::to_string(w.model_dim()) + " columns");
    }
    const std::size_t t = x_block.dim(0);
    const auto& cfg = w.config();
    return Projection{
        reshape(matmul(x_block, w.wq()), {t, cfg.num_heads(), cfg.head_size()}),
        reshape(matmul(x_block, w.wk()), {t, cfg.num_kv_heads(), cfg.head_size()}),
        reshape(matmul(x_block, w.wv()), {t, cfg.num_kv_heads(), cfg.head_size()}),
    };
}

Tensor paged_decode_attention(const BlockPool& pool, const BlockTable& table, const Tensor& q,
                              const AttentionConfig& cfg, const std::optional<AlibiSlopes>& slopes) {
    const PoolConfig& pc = pool.config();
    const std::size_t dh = cfg.head_size();
    if (q.shape() != Shape{cfg.num_heads(), dh}) {
        throw ShapeError("paged_decode_attention: q " + to_string(q.shape()) + " must be [" +
                         std::to_string(cfg.num_heads()) + ", " + std::to_string(dh) + "]");
    }
    if (pc.num_kv_heads != cfg.num_kv_heads() || pc.head_size != dh) {
        throw ShapeError("paged_decode_attention: pool stores " + std::to_string(pc.num_kv_heads) + " kv heads of size " +
                         std::to_string(pc.head_size) + ", config expects " + std::to_string(cfg.num_kv_heads()) +
                         " of size " + std::to_string(dh));
    }
    const bool alibi = cfg.bias().kind == BiasKind::Alibi;
    if (alibi != slopes.has_value() || (alibi && slopes->size() != cfg.num_heads())) {
        throw std::invalid_argument("paged_decode_attention: ALiBi mode needs exactly one slope per head, other modes none");
    }
    const std::size_t k_len = table.token_count();
    if (k_len == 0) throw std::invalid_argument("paged_decode_attention: empty sequence");

    const std::size_t bs = pc.block_size;
    const std::size_t query_pos = k_len - 1;
    // Blocks wholly outside a local window contribute nothing and are skipped.
    std::size_t first_block = 0;
    if (cfg.bias().kind == BiasKind::LocalWindow && k_len > cfg.bias().window) {
        first_block = (k_len - cfg.bias().window) / bs;
    }

    const std::size_t heads = cfg.num_heads();
    std::vector<float> running_max(heads, kNegInf);
    std::vector<float> denom(heads, 0.0f);
    std::vector<float> acc(heads * dh, 0.0f);
    std::vector<float> scores(bs);
    const float scale = cfg.scale();
    const auto& blocks = table.blocks();

    for (std::size_t b = first_block; b < blocks.size(); ++b) {
        const BlockId id = blocks[b];
        if (pool.is_free(id)) throw std::logic_error("paged_decode_attention: dangling block id " + std::to_string(id));
        pool.touch(id);
        const std::size_t base = b * bs;
        const std::size_t count = std::min(bs, k_len - base);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t kvh = h / cfg.group_size();
            const float slope = alibi ? (*slopes)[h] : 0.0f;
            auto qh = q.row(h);
            float block_max = kNegInf;
            for (std::size_t s = 0; s < count; ++s) {
                const float bias = bias_value(cfg.bias(), slope, query_pos, base + s);
                if (bias == kNegInf) {
                    scores[s] = kNegInf;
                    continue;
                }
                auto kh = pool.key(id, s).subspan(kvh * dh, dh);
                float dot = 0.0f;
                for (std::size_t t = 0; t < dh; ++t) dot += qh[t] * kh[t];
                scores[s] = scale * dot + bias;
                block_max = std::max(block_max, scores[s]);
            }
            if (block_max == kNegInf) continue;

            const float new_max = std::max(running_max[h], block_max);
            const float rescale = std::exp(running_max[h] - new_max);  // 0 on the first live block
            float* a = acc.data() + h * dh;
            float d = denom[h] * rescale;
            for (std::size_t t = 0; t < dh; ++t) a[t] *= rescale;
            for (std::size_t s = 0; s < count; ++s) {
                if (scores[s] == kNegInf) continue;
                const float p = std::exp(scores[s] - new_max);
                d += p;
                auto vh = pool.value(id, s).subspan(kvh * dh, dh);
                for (std::size_t t = 0; t < dh; ++t) a[t] += p * vh[t];
            }
            denom[h] = d;
            running_max[h] = new_max;
        }
    }

    Tensor out({heads, dh});
    auto od = out.data();
    for (std::size_t h = 0; h < heads; ++h) {
        const float inv = 1.0f / denom[h];
        for (std::size_t t = 0; t < dh; ++t) od[h * dh + t] = acc[h * dh + t] * inv;
    }
    return out;
}

std::string debug_dump(const BlockPool& pool, std::span<const BlockTable> tables) {
    const PoolConfig& c = pool.config();
    std::ostringstream os;
    os << "pool blocks=" << c.num_blocks << " block_size=" << c.block_size << " kv_heads=" << c.num_kv_heads
       << " head_size=" << c.head_size << " free=" << pool.free_count() << '\n';
    os << "free";
    for (BlockId id : pool.free_blocks()) os << ' ' << id;
    os << '\n';
    for (BlockId id = 0; id < c.num_blocks; ++id) {
        if (pool.is_free(id)) continue;
        os << "block " << id << " ref=" << pool.ref_count(id) << " fill=" << pool.fill(id) << '\n';
    }
    for (const BlockTable& t : tables) {
        os << "table seq=" << t.seq_id() << " tokens=" << t.token_count() << " blocks=";
        for (std::size_t i = 0; i < t.blocks().size(); ++i) os << (i ? "," : "") << t.blocks()[i];
        os << '\n';
    }
    return os.str();
}

}  // namespace optgqa
