#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pyramidat/errors.hpp"
#include "pyramidat/image.hpp"
#include "pyramidat/rng.hpp"
#include "pyramidat/tensor.hpp"
#include "pyramidat/threading.hpp"

namespace pyramidat {

struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int embed_dim = 64;
    int depth = 6;
    int n_heads = 4;
    int mlp_dim = 128;
    int n_classes = 10;
    int in_channels = 3;
    float dropout_p = 0.1f;
    float stochdepth_p = 0.1f;

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || embed_dim <= 0 || depth <= 0 ||
            n_heads <= 0 || mlp_dim <= 0 || n_classes <= 0 || in_channels <= 0)
            throw ConfigError("model dimensions must be positive");
        if (image_size % patch_size != 0)
            throw ConfigError("patch_size must divide image_size");
        if (embed_dim % n_heads != 0)
            throw ConfigError("embed_dim must be divisible by n_heads");
        if (!(dropout_p >= 0.0f && dropout_p < 1.0f))
            throw ConfigError("dropout_p must lie in [0,1)");
        if (!(stochdepth_p >= 0.0f && stochdepth_p < 1.0f))
            throw ConfigError("stochdepth_p must lie in [0,1)");
    }

    int grid() const { return image_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int n_tokens() const { return 1 + n_patches(); }
    int patch_dim() const { return patch_size * patch_size * in_channels; }
    int head_dim() const { return embed_dim / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Dropout / stochastic depth realizations
// ---------------------------------------------------------------------------

enum class DropMode { matched, unmatched, disabled_adv, disabled_all };
enum class Branch { clean, attack, adversarial };

/// A concrete realization usable in a forward pass. Masks and gates are pure
/// functions of (seed, site path, batch index, unit index), so the same
/// realization reproduces the same masks in any forward pass, any chunking,
/// and any thread count.
struct DropRealization {
    bool enabled = false;
    std::uint64_t seed = 0;
    float dropout_p = 0.0f;
    float stochdepth_p = 0.0f;

    static DropRealization disabled_all() { return DropRealization{}; }
};

/// One sampled dropout/stochastic-depth configuration for a training step.
struct DropConfig {
    DropMode mode = DropMode::matched;
    std::uint64_t seed = 0;
    float dropout_p = 0.0f;
    float stochdepth_p = 0.0f;

    DropRealization realize(Branch branch) const {
        DropRealization r;
        r.dropout_p = dropout_p;
        r.stochdepth_p = stochdepth_p;
        switch (mode) {
            case DropMode::matched:
                r.enabled = true;
                r.seed = seed;
                break;
            case DropMode::unmatched:
                r.enabled = true;
                r.seed = branch == Branch::clean ? key_stream(seed, "clean_branch")
                                                 : key_stream(seed, "adv_branch");
                break;
            case DropMode::disabled_adv:
                r.enabled = branch == Branch::clean;
                r.seed = seed;
                break;
            case DropMode::disabled_all:
                r.enabled = false;
                break;
        }
        if (!r.enabled) {
            r.dropout_p = 0.0f;
            r.stochdepth_p = 0.0f;
        }
        return r;
    }
};

inline DropConfig sample_drop_config(const ModelConfig& config, DropMode mode,
                                     std::uint64_t seed) {
    DropConfig d;
    d.mode = mode;
    d.seed = key_stream(seed, "drop_config");
    d.dropout_p = config.dropout_p;
    d.stochdepth_p = config.stochdepth_p;
    return d;
}

/// Optional instrumentation: captures the realized keep masks (one byte per
/// unit) and stochastic-depth gates of a forward pass.
struct MaskRecorder {
    std::map<std::string, std::vector<std::uint8_t>> sites;

    void prepare(const ModelConfig& config, int batch) {
        const int nt = config.n_tokens();
        const std::size_t tok_units =
            static_cast<std::size_t>(batch) * nt * config.embed_dim;
        const std::size_t mlp_units =
            static_cast<std::size_t>(batch) * nt * config.mlp_dim;
        sites["embed"] = std::vector<std::uint8_t>(tok_units);
        for (int b = 0; b < config.depth; ++b) {
            const std::string p = "block" + std::to_string(b);
            sites[p + "/attn_out"] = std::vector<std::uint8_t>(tok_units);
            sites[p + "/mlp_hidden"] = std::vector<std::uint8_t>(mlp_units);
            sites[p + "/mlp_out"] = std::vector<std::uint8_t>(tok_units);
            sites[p + "/gate"] = std::vector<std::uint8_t>(static_cast<std::size_t>(batch));
        }
    }
};

namespace detail {

// Dropout keep decisions come from 16-bit lanes of a counter hash: unit i of
// row (seed, site, batch index) keeps iff lane < floor(keep_p * 65536).
inline std::uint32_t keep_threshold(float dropout_p) {
    const double keep = 1.0 - static_cast<double>(dropout_p);
    return static_cast<std::uint32_t>(keep * 65536.0);
}

inline bool unit_keep(std::uint64_t row_key, std::size_t unit, std::uint32_t threshold) {
    const std::uint64_t h = splitmix64(row_key + (unit >> 2));
    const std::uint32_t lane = static_cast<std::uint32_t>(h >> (16 * (unit & 3))) & 0xffffu;
    return lane < threshold;
}

inline bool gate_keep(std::uint64_t seed, std::uint64_t site_key, std::uint64_t batch_index,
                      float stochdepth_p) {
    return key_uniform(key_mix(seed, site_key, batch_index)) >= stochdepth_p;
}

struct DropSiteKeys {
    std::uint64_t embed = 0;
    struct Block {
        std::uint64_t attn_out = 0, mlp_hidden = 0, mlp_out = 0, gate = 0;
    };
    std::vector<Block> blocks;

    static DropSiteKeys make(int depth) {
        DropSiteKeys k;
        k.embed = tag_hash("embed");
        k.blocks.resize(static_cast<std::size_t>(depth));
        for (int b = 0; b < depth; ++b) {
            const std::string p = "block" + std::to_string(b);
            k.blocks[b].attn_out = tag_hash(p + "/attn_out");
            k.blocks[b].mlp_hidden = tag_hash(p + "/mlp_hidden");
            k.blocks[b].mlp_out = tag_hash(p + "/mlp_out");
            k.blocks[b].gate = tag_hash(p + "/gate");
        }
        return k;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamEntry {
    std::string path;
    std::size_t offset = 0;
    std::vector<int> shape;

    std::size_t size() const {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }
};

namespace detail {

struct BlockOffsets {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    std::size_t ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct VitOffsets {
    std::size_t patch_w, patch_b, cls_token, pos_embed;
    std::vector<BlockOffsets> blocks;
    std::size_t lnf_g, lnf_b, head_w, head_b;
    std::size_t total = 0;
};

}  // namespace detail

/// All learnable tensors of the backbone in one flat buffer, with a registry
/// mapping layer paths to (offset, shape). The flat layout keeps optimizer
/// updates and checkpoint IO trivial.
template <class S>
struct ModelParams {
    ModelConfig config;
    std::vector<ParamEntry> entries;
    AVector<S> values;
    detail::VitOffsets off;

    std::size_t size() const { return values.size(); }

    const ParamEntry* find(const std::string& path) const {
        for (const auto& e : entries)
            if (e.path == path) return &e;
        return nullptr;
    }

    template <class T>
    ModelParams<T> cast() const {
        ModelParams<T> out;
        out.config = config;
        out.entries = entries;
        out.off = off;
        out.values.resize(values.size());
        for (std::size_t i = 0; i < values.size(); ++i)
            out.values[i] = static_cast<T>(values[i]);
        return out;
    }
};

namespace detail {

template <class S>
void add_param(ModelParams<S>& p, const std::string& path, std::vector<int> shape,
               std::size_t& cursor, std::size_t& slot) {
    ParamEntry e;
    e.path = path;
    e.shape = std::move(shape);
    e.offset = cursor;
    slot = cursor;
    cursor += e.size();
    p.entries.push_back(std::move(e));
}

}  // namespace detail

template <class S>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams<S> p;
    p.config = config;
    const int D = config.embed_dim;
    std::size_t cursor = 0;
    detail::add_param(p, "patch_embed/kernel", {config.patch_dim(), D}, cursor, p.off.patch_w);
    detail::add_param(p, "patch_embed/bias", {D}, cursor, p.off.patch_b);
    detail::add_param(p, "cls_token", {D}, cursor, p.off.cls_token);
    detail::add_param(p, "pos_embed", {config.n_tokens(), D}, cursor, p.off.pos_embed);
    p.off.blocks.resize(static_cast<std::size_t>(config.depth));
    for (int b = 0; b < config.depth; ++b) {
        const std::string pre = "block" + std::to_string(b) + "/";
        auto& ob = p.off.blocks[b];
        detail::add_param(p, pre + "ln1/gamma", {D}, cursor, ob.ln1_g);
        detail::add_param(p, pre + "ln1/beta", {D}, cursor, ob.ln1_b);
        detail::add_param(p, pre + "attn/qkv/kernel", {D, 3 * D}, cursor, ob.qkv_w);
        detail::add_param(p, pre + "attn/qkv/bias", {3 * D}, cursor, ob.qkv_b);
        detail::add_param(p, pre + "attn/proj/kernel", {D, D}, cursor, ob.proj_w);
        detail::add_param(p, pre + "attn/proj/bias", {D}, cursor, ob.proj_b);
        detail::add_param(p, pre + "ln2/gamma", {D}, cursor, ob.ln2_g);
        detail::add_param(p, pre + "ln2/beta", {D}, cursor, ob.ln2_b);
        detail::add_param(p, pre + "mlp/fc1/kernel", {D, config.mlp_dim}, cursor, ob.fc1_w);
        detail::add_param(p, pre + "mlp/fc1/bias", {config.mlp_dim}, cursor, ob.fc1_b);
        detail::add_param(p, pre + "mlp/fc2/kernel", {config.mlp_dim, D}, cursor, ob.fc2_w);
        detail::add_param(p, pre + "mlp/fc2/bias", {D}, cursor, ob.fc2_b);
    }
    detail::add_param(p, "ln_final/gamma", {D}, cursor, p.off.lnf_g);
    detail::add_param(p, "ln_final/beta", {D}, cursor, p.off.lnf_b);
    detail::add_param(p, "head/kernel", {D, config.n_classes}, cursor, p.off.head_w);
    detail::add_param(p, "head/bias", {config.n_classes}, cursor, p.off.head_b);
    p.off.total = cursor;
    p.values.assign(cursor, S(0));

    // Truncated-normal initialization: kernels at Xavier scale
    // sqrt(2 / (fan_in + fan_out)), embeddings at 0.02, affine norms at 1/0.
    Rng rng(key_stream(seed, "init_params"));
    for (const auto& e : p.entries) {
        S* v = p.values.data() + e.offset;
        const std::size_t n = e.size();
        const bool is_gamma = e.path.ends_with("gamma");
        const bool is_bias = e.path.ends_with("bias") || e.path.ends_with("beta");
        if (is_gamma) {
            std::fill(v, v + n, S(1));
        } else if (is_bias) {
            std::fill(v, v + n, S(0));
        } else {
            double stddev = 0.02;
            if (e.path.ends_with("kernel") && e.shape.size() == 2)
                stddev = std::sqrt(2.0 / (e.shape[0] + e.shape[1]));
            for (std::size_t i = 0; i < n; ++i)
                v[i] = static_cast<S>(rng.truncated_normal(stddev));
        }
    }
    return p;
}

/// Exact learnable-parameter count for a config, by shape arithmetic.
inline std::size_t param_count(const ModelConfig& config) {
    const std::size_t D = static_cast<std::size_t>(config.embed_dim);
    const std::size_t M = static_cast<std::size_t>(config.mlp_dim);
    const std::size_t K = static_cast<std::size_t>(config.n_classes);
    std::size_t n = 0;
    n += static_cast<std::size_t>(config.patch_dim()) * D + D;  // patch embedding
    n += D;                                                     // cls token
    n += static_cast<std::size_t>(config.n_tokens()) * D;       // positional embedding
    std::size_t block = 2 * D;          // ln1
    block += D * 3 * D + 3 * D;         // qkv
    block += D * D + D;                 // attention projection
    block += 2 * D;                     // ln2
    block += D * M + M + M * D + D;     // mlp
    n += static_cast<std::size_t>(config.depth) * block;
    n += 2 * D;                         // final ln
    n += D * K + K;                     // head
    return n;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<MatRM<S>>;
template <class S>
using CMapM = Eigen::Map<const MatRM<S>>;
template <class S>
using RowV = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using MapR = Eigen::Map<RowV<S>>;
template <class S>
using CMapR = Eigen::Map<const RowV<S>>;

inline constexpr double kLnEps = 1e-6;

// tanh-approximate gelu and its derivative
template <class S>
inline S gelu(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S u = c * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
}

template <class S>
inline S gelu_grad(S x) {
    const S c = S(0.7978845608028654);
    const S u = c * (x + S(0.044715) * x * x * x);
    const S t = std::tanh(u);
    const S du = c * (S(1) + S(0.134145) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

template <class S>
struct BlockCache {
    MatRM<S> x_in;      // block input (pre-ln1)
    MatRM<S> ln1_out;
    MatRM<S> qkv;
    MatRM<S> probs;     // (chunk*heads*N) x N attention rows
    MatRM<S> attn_cat;  // pre-projection concatenated heads
    MatRM<S> x_mid;     // after attention residual (pre-ln2)
    MatRM<S> ln2_out;
    MatRM<S> mlp_pre;   // fc1 output, pre-gelu
    MatRM<S> mlp_hidden_dropped;
    Eigen::Matrix<S, Eigen::Dynamic, 1> mu1, r1, mu2, r2;
};

template <class S>
struct ChunkCache {
    int begin = 0, count = 0;
    MatRM<S> patches;  // (count*n_patches) x patch_dim
    std::vector<BlockCache<S>> blocks;
    MatRM<S> x_final;  // input to final layer norm
    Eigen::Matrix<S, Eigen::Dynamic, 1> muf, rf;
    MatRM<S> cls_normed;  // count x D
};

// Layer norm over the last dimension with affine params; caches mean and
// inverse stddev per row.
template <class S>
void layer_norm(const MatRM<S>& x, const S* gamma, const S* beta, MatRM<S>& out,
                Eigen::Matrix<S, Eigen::Dynamic, 1>& mu,
                Eigen::Matrix<S, Eigen::Dynamic, 1>& rstd) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    out.resize(rows, cols);
    mu.resize(rows);
    rstd.resize(rows);
    CMapR<S> g(gamma, cols), bta(beta, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const S m = x.row(i).mean();
        const S var = (x.row(i).array() - m).square().mean();
        const S r = S(1) / std::sqrt(var + S(kLnEps));
        mu(i) = m;
        rstd(i) = r;
        out.row(i) = (((x.row(i).array() - m) * r) * g.array() + bta.array()).matrix();
    }
}

template <class S>
void layer_norm_backward(const MatRM<S>& dy, const MatRM<S>& x,
                         const Eigen::Matrix<S, Eigen::Dynamic, 1>& mu,
                         const Eigen::Matrix<S, Eigen::Dynamic, 1>& rstd, const S* gamma,
                         MatRM<S>& dx, S* dgamma, S* dbeta) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    dx.resize(rows, cols);
    CMapR<S> g(gamma, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const S r = rstd(i);
        RowV<S> xhat = ((x.row(i).array() - mu(i)) * r).matrix();
        RowV<S> dyg = (dy.row(i).array() * g.array()).matrix();
        const S mean_dyg = dyg.mean();
        const S mean_dyg_xhat = (dyg.array() * xhat.array()).mean();
        dx.row(i) =
            ((dyg.array() - mean_dyg - xhat.array() * mean_dyg_xhat) * r).matrix();
        if (dgamma) {
            MapR<S>(dgamma, cols).array() += (dy.row(i).array() * xhat.array());
            MapR<S>(dbeta, cols).array() += dy.row(i).array();
        }
    }
}

// Applies an in-place dropout site; returns without touching data when the
// realization keeps everything. Recording writes one byte per unit.
template <class S>
void apply_dropout(MatRM<S>& x, const DropRealization& drop, std::uint64_t site_key,
                   int batch_offset, int count, MaskRecorder* rec, const std::string& site_name) {
    const Eigen::Index rows_per_sample = x.rows() / count;
    const Eigen::Index cols = x.cols();
    const std::size_t units = static_cast<std::size_t>(rows_per_sample) * cols;
    std::uint8_t* rec_bits = nullptr;
    if (rec) {
        auto it = rec->sites.find(site_name);
        if (it != rec->sites.end())
            rec_bits = it->second.data() + static_cast<std::size_t>(batch_offset) * units;
    }
    const bool active = drop.enabled && drop.dropout_p > 0.0f;
    if (!active) {
        if (rec_bits)
            std::fill(rec_bits, rec_bits + static_cast<std::size_t>(count) * units, 1);
        return;
    }
    const std::uint32_t threshold = keep_threshold(drop.dropout_p);
    const S inv_keep = S(1) / (S(1) - S(drop.dropout_p));
    for (int b = 0; b < count; ++b) {
        const std::uint64_t row_key =
            key_mix(drop.seed, site_key, static_cast<std::uint64_t>(batch_offset + b));
        S* base = x.data() + static_cast<std::size_t>(b) * units;
        std::uint8_t* rb = rec_bits ? rec_bits + static_cast<std::size_t>(b) * units : nullptr;
        for (std::size_t u = 0; u < units; ++u) {
            const bool keep = unit_keep(row_key, u, threshold);
            base[u] = keep ? base[u] * inv_keep : S(0);
            if (rb) rb[u] = keep ? 1 : 0;
        }
    }
}

// Backward of the same site: re-derives the identical mask from the keys.
template <class S>
void apply_dropout_backward(MatRM<S>& dx, const DropRealization& drop, std::uint64_t site_key,
                            int batch_offset, int count) {
    const bool active = drop.enabled && drop.dropout_p > 0.0f;
    if (!active) return;
    const Eigen::Index rows_per_sample = dx.rows() / count;
    const std::size_t units = static_cast<std::size_t>(rows_per_sample) * dx.cols();
    const std::uint32_t threshold = keep_threshold(drop.dropout_p);
    const S inv_keep = S(1) / (S(1) - S(drop.dropout_p));
    for (int b = 0; b < count; ++b) {
        const std::uint64_t row_key =
            key_mix(drop.seed, site_key, static_cast<std::uint64_t>(batch_offset + b));
        S* base = dx.data() + static_cast<std::size_t>(b) * units;
        for (std::size_t u = 0; u < units; ++u) {
            base[u] = unit_keep(row_key, u, threshold) ? base[u] * inv_keep : S(0);
        }
    }
}

// Residual-branch scale for one sample: gate / keep_prob (inverted scaling),
// or exactly zero when the block is dropped for that sample.
template <class S>
S branch_scale(const DropRealization& drop, std::uint64_t gate_key, int batch_index,
               MaskRecorder* rec, const std::string& site_name) {
    bool keep = true;
    S scale = S(1);
    if (drop.enabled && drop.stochdepth_p > 0.0f) {
        keep = gate_keep(drop.seed, gate_key, static_cast<std::uint64_t>(batch_index),
                         drop.stochdepth_p);
        scale = keep ? S(1) / (S(1) - S(drop.stochdepth_p)) : S(0);
    }
    if (rec) {
        auto it = rec->sites.find(site_name);
        if (it != rec->sites.end()) it->second[static_cast<std::size_t>(batch_index)] = keep;
    }
    return scale;
}

}  // namespace detail

/// Gradient accumulation target for backward passes.
template <class S>
struct Gradients {
    AVector<S> values;

    explicit Gradients(std::size_t n) : values(n, S(0)) {}
    void reset() { std::fill(values.begin(), values.end(), S(0)); }
    void add(const Gradients& other) {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] += other.values[i];
    }
};

namespace detail {

/// Forward over one contiguous chunk of samples. `pixels` is the full-batch
/// tensor; rows [begin, begin+count) are consumed and logits for exactly
/// those samples are written to `logits` (count x n_classes). Gate scales per
/// sample are returned for reuse in backward.
template <class S>
void forward_chunk(const ModelParams<S>& params, const Tensor<S>& pixels, int begin, int count,
                   const DropRealization& drop, const DropSiteKeys& keys,
                   Eigen::Ref<MatRM<S>, 0, Eigen::OuterStride<>> logits, ChunkCache<S>* cache,
                   MaskRecorder* rec,
                   std::vector<S>* gate_scales_out) {
    const ModelConfig& cfg = params.config;
    const int N = cfg.n_tokens();
    const int D = cfg.embed_dim;
    const int P = cfg.patch_size;
    const int G = cfg.grid();
    const int C = cfg.in_channels;
    const int pd = cfg.patch_dim();
    const int heads = cfg.n_heads;
    const int dh = cfg.head_dim();
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const S* V = params.values.data();

    // Patchify rows [begin, begin+count).
    MatRM<S> patches(static_cast<Eigen::Index>(count) * cfg.n_patches(), pd);
    for (int b = 0; b < count; ++b) {
        for (int p = 0; p < cfg.n_patches(); ++p) {
            const int py = p / G, px = p % G;
            S* row = patches.row(static_cast<Eigen::Index>(b) * cfg.n_patches() + p).data();
            for (int dy = 0; dy < P; ++dy) {
                const int iy = py * P + dy;
                for (int dx = 0; dx < P; ++dx) {
                    const int ix = px * P + dx;
                    const S* src = &pixels.at(begin + b, iy, ix, 0);
                    S* dst = row + (dy * P + dx) * C;
                    for (int c = 0; c < C; ++c) dst[c] = src[c];
                }
            }
        }
    }

    CMapM<S> Wp(V + params.off.patch_w, pd, D);
    CMapR<S> bp(V + params.off.patch_b, D);
    MatRM<S> emb = patches * Wp;
    emb.rowwise() += bp;

    CMapM<S> pos(V + params.off.pos_embed, N, D);
    CMapR<S> cls(V + params.off.cls_token, D);
    MatRM<S> x(static_cast<Eigen::Index>(count) * N, D);
    for (int b = 0; b < count; ++b) {
        x.row(static_cast<Eigen::Index>(b) * N) = cls + pos.row(0);
        x.middleRows(static_cast<Eigen::Index>(b) * N + 1, cfg.n_patches()) =
            emb.middleRows(static_cast<Eigen::Index>(b) * cfg.n_patches(), cfg.n_patches());
        x.middleRows(static_cast<Eigen::Index>(b) * N + 1, cfg.n_patches()) +=
            pos.bottomRows(cfg.n_patches());
    }
    apply_dropout(x, drop, keys.embed, begin, count, rec, "embed");

    if (cache) {
        cache->begin = begin;
        cache->count = count;
        cache->patches = patches;
        cache->blocks.resize(static_cast<std::size_t>(cfg.depth));
    }
    std::vector<S> gate_scales(static_cast<std::size_t>(cfg.depth) * count, S(1));

    MatRM<S> ln_out, qkv, attn_cat(static_cast<Eigen::Index>(count) * N, D), y, hidden;
    Eigen::Matrix<S, Eigen::Dynamic, 1> mu, rstd;
    for (int blk = 0; blk < cfg.depth; ++blk) {
        const auto& ob = params.off.blocks[blk];
        const auto& kb = keys.blocks[blk];
        const std::string bp_name = "block" + std::to_string(blk);
        BlockCache<S>* bc = cache ? &cache->blocks[blk] : nullptr;
        if (bc) bc->x_in = x;

        layer_norm(x, V + ob.ln1_g, V + ob.ln1_b, ln_out, mu, rstd);
        if (bc) {
            bc->ln1_out = ln_out;
            bc->mu1 = mu;
            bc->r1 = rstd;
        }
        CMapM<S> Wqkv(V + ob.qkv_w, D, 3 * D);
        CMapR<S> bqkv(V + ob.qkv_b, 3 * D);
        qkv = ln_out * Wqkv;
        qkv.rowwise() += bqkv;
        if (bc) bc->qkv = qkv;

        if (bc) bc->probs.resize(static_cast<Eigen::Index>(count) * heads * N, N);
        MatRM<S> probs_local;
        for (int b = 0; b < count; ++b) {
            for (int h = 0; h < heads; ++h) {
                auto Q = qkv.block(static_cast<Eigen::Index>(b) * N, h * dh, N, dh);
                auto K = qkv.block(static_cast<Eigen::Index>(b) * N, D + h * dh, N, dh);
                auto Vh = qkv.block(static_cast<Eigen::Index>(b) * N, 2 * D + h * dh, N, dh);
                MatRM<S> scores = (Q * K.transpose()) * scale;
                for (Eigen::Index i = 0; i < scores.rows(); ++i) {
                    const S mx = scores.row(i).maxCoeff();
                    scores.row(i) = (scores.row(i).array() - mx).exp();
                    scores.row(i) /= scores.row(i).sum();
                }
                attn_cat.block(static_cast<Eigen::Index>(b) * N, h * dh, N, dh).noalias() =
                    scores * Vh;
                if (bc)
                    bc->probs.middleRows(
                        (static_cast<Eigen::Index>(b) * heads + h) * N, N) = scores;
            }
        }
        if (bc) bc->attn_cat = attn_cat;

        CMapM<S> Wproj(V + ob.proj_w, D, D);
        CMapR<S> bproj(V + ob.proj_b, D);
        y = attn_cat * Wproj;
        y.rowwise() += bproj;
        apply_dropout(y, drop, kb.attn_out, begin, count, rec, bp_name + "/attn_out");

        for (int b = 0; b < count; ++b) {
            const S g = branch_scale<S>(drop, kb.gate, begin + b, rec, bp_name + "/gate");
            gate_scales[static_cast<std::size_t>(blk) * count + b] = g;
            x.middleRows(static_cast<Eigen::Index>(b) * N, N) +=
                g * y.middleRows(static_cast<Eigen::Index>(b) * N, N);
        }
        if (bc) bc->x_mid = x;

        layer_norm(x, V + ob.ln2_g, V + ob.ln2_b, ln_out, mu, rstd);
        if (bc) {
            bc->ln2_out = ln_out;
            bc->mu2 = mu;
            bc->r2 = rstd;
        }
        CMapM<S> W1(V + ob.fc1_w, D, cfg.mlp_dim);
        CMapR<S> b1(V + ob.fc1_b, cfg.mlp_dim);
        hidden = ln_out * W1;
        hidden.rowwise() += b1;
        if (bc) bc->mlp_pre = hidden;
        for (Eigen::Index i = 0; i < hidden.size(); ++i)
            hidden.data()[i] = gelu(hidden.data()[i]);
        apply_dropout(hidden, drop, kb.mlp_hidden, begin, count, rec, bp_name + "/mlp_hidden");
        if (bc) bc->mlp_hidden_dropped = hidden;

        CMapM<S> W2(V + ob.fc2_w, cfg.mlp_dim, D);
        CMapR<S> b2(V + ob.fc2_b, D);
        y = hidden * W2;
        y.rowwise() += b2;
        apply_dropout(y, drop, kb.mlp_out, begin, count, rec, bp_name + "/mlp_out");
        for (int b = 0; b < count; ++b) {
            const S g = gate_scales[static_cast<std::size_t>(blk) * count + b];
            x.middleRows(static_cast<Eigen::Index>(b) * N, N) +=
                g * y.middleRows(static_cast<Eigen::Index>(b) * N, N);
        }
    }

    if (cache) cache->x_final = x;
    layer_norm(x, V + params.off.lnf_g, V + params.off.lnf_b, ln_out, mu, rstd);
    if (cache) {
        cache->muf = mu;
        cache->rf = rstd;
    }
    MatRM<S> cls_rows(count, D);
    for (int b = 0; b < count; ++b)
        cls_rows.row(b) = ln_out.row(static_cast<Eigen::Index>(b) * N);
    if (cache) cache->cls_normed = cls_rows;

    CMapM<S> Wh(V + params.off.head_w, D, cfg.n_classes);
    CMapR<S> bh(V + params.off.head_b, cfg.n_classes);
    logits.noalias() = cls_rows * Wh;
    logits.rowwise() += bh;

    if (gate_scales_out) *gate_scales_out = std::move(gate_scales);
}

/// Backward over one chunk. `dlogits` holds the gradient rows for exactly the
/// chunk's samples (count x n_classes). Accumulates parameter gradients into
/// `grads` (when non-null) and pixel gradients into `dpixels` (when non-null).
/// The same DropRealization that produced the cache must be passed so masks
/// are regenerated identically.
template <class S>
void backward_chunk(const ModelParams<S>& params, const ChunkCache<S>& cache,
                    const Eigen::Ref<const MatRM<S>, 0, Eigen::OuterStride<>>& dlogits,
                    const DropRealization& drop,
                    const DropSiteKeys& keys, const std::vector<S>& gate_scales,
                    Gradients<S>* grads, Tensor<S>* dpixels) {
    const ModelConfig& cfg = params.config;
    const int N = cfg.n_tokens();
    const int D = cfg.embed_dim;
    const int heads = cfg.n_heads;
    const int dh = cfg.head_dim();
    const int begin = cache.begin;
    const int count = cache.count;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const S* V = params.values.data();
    S* G = grads ? grads->values.data() : nullptr;

    // Head.
    CMapM<S> Wh(V + params.off.head_w, D, cfg.n_classes);
    MatRM<S> dcls(count, D);
    dcls.noalias() = dlogits * Wh.transpose();
    if (G) {
        MapM<S>(G + params.off.head_w, D, cfg.n_classes).noalias() +=
            cache.cls_normed.transpose() * dlogits;
        MapR<S>(G + params.off.head_b, cfg.n_classes) += dlogits.colwise().sum();
    }

    // Final layer norm: upstream gradient is zero except at cls rows.
    MatRM<S> dln(static_cast<Eigen::Index>(count) * N, D);
    dln.setZero();
    for (int b = 0; b < count; ++b)
        dln.row(static_cast<Eigen::Index>(b) * N) = dcls.row(b);
    MatRM<S> dx;
    layer_norm_backward(dln, cache.x_final, cache.muf, cache.rf, V + params.off.lnf_g, dx,
                        G ? G + params.off.lnf_g : nullptr, G ? G + params.off.lnf_b : nullptr);

    MatRM<S> dy, dhidden, dln2, dqkv, dattn, dln1;
    for (int blk = cfg.depth - 1; blk >= 0; --blk) {
        const auto& ob = params.off.blocks[blk];
        const auto& kb = keys.blocks[blk];
        const BlockCache<S>& bc = cache.blocks[blk];

        // MLP residual branch.
        dy = dx;
        for (int b = 0; b < count; ++b) {
            const S g = gate_scales[static_cast<std::size_t>(blk) * count + b];
            dy.middleRows(static_cast<Eigen::Index>(b) * N, N) *= g;
        }
        apply_dropout_backward(dy, drop, kb.mlp_out, begin, count);
        CMapM<S> W2(V + ob.fc2_w, cfg.mlp_dim, D);
        dhidden.noalias() = dy * W2.transpose();
        if (G) {
            MapM<S>(G + ob.fc2_w, cfg.mlp_dim, D).noalias() +=
                bc.mlp_hidden_dropped.transpose() * dy;
            MapR<S>(G + ob.fc2_b, D) += dy.colwise().sum();
        }
        apply_dropout_backward(dhidden, drop, kb.mlp_hidden, begin, count);
        for (Eigen::Index i = 0; i < dhidden.size(); ++i)
            dhidden.data()[i] *= gelu_grad(bc.mlp_pre.data()[i]);
        CMapM<S> W1(V + ob.fc1_w, D, cfg.mlp_dim);
        MatRM<S> dln_out;
        dln_out.noalias() = dhidden * W1.transpose();
        if (G) {
            MapM<S>(G + ob.fc1_w, D, cfg.mlp_dim).noalias() +=
                bc.ln2_out.transpose() * dhidden;
            MapR<S>(G + ob.fc1_b, cfg.mlp_dim) += dhidden.colwise().sum();
        }
        layer_norm_backward(dln_out, bc.x_mid, bc.mu2, bc.r2, V + ob.ln2_g, dln2,
                            G ? G + ob.ln2_g : nullptr, G ? G + ob.ln2_b : nullptr);
        dx += dln2;  // dx now holds the gradient at x_mid

        // Attention residual branch.
        dy = dx;
        for (int b = 0; b < count; ++b) {
            const S g = gate_scales[static_cast<std::size_t>(blk) * count + b];
            dy.middleRows(static_cast<Eigen::Index>(b) * N, N) *= g;
        }
        apply_dropout_backward(dy, drop, kb.attn_out, begin, count);
        CMapM<S> Wproj(V + ob.proj_w, D, D);
        dattn.noalias() = dy * Wproj.transpose();
        if (G) {
            MapM<S>(G + ob.proj_w, D, D).noalias() += bc.attn_cat.transpose() * dy;
            MapR<S>(G + ob.proj_b, D) += dy.colwise().sum();
        }

        dqkv.resize(static_cast<Eigen::Index>(count) * N, 3 * D);
        dqkv.setZero();
        for (int b = 0; b < count; ++b) {
            for (int h = 0; h < heads; ++h) {
                auto P = bc.probs.middleRows((static_cast<Eigen::Index>(b) * heads + h) * N, N);
                auto Q = bc.qkv.block(static_cast<Eigen::Index>(b) * N, h * dh, N, dh);
                auto K = bc.qkv.block(static_cast<Eigen::Index>(b) * N, D + h * dh, N, dh);
                auto Vh = bc.qkv.block(static_cast<Eigen::Index>(b) * N, 2 * D + h * dh, N, dh);
                auto dOh = dattn.block(static_cast<Eigen::Index>(b) * N, h * dh, N, dh);
                MatRM<S> dP = dOh * Vh.transpose();
                MatRM<S> dS(N, N);
                for (int i = 0; i < N; ++i) {
                    const S dot = dP.row(i).dot(P.row(i));
                    dS.row(i) =
                        (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * scale;
                }
                dqkv.block(static_cast<Eigen::Index>(b) * N, h * dh, N, dh).noalias() = dS * K;
                dqkv.block(static_cast<Eigen::Index>(b) * N, D + h * dh, N, dh).noalias() =
                    dS.transpose() * Q;
                dqkv.block(static_cast<Eigen::Index>(b) * N, 2 * D + h * dh, N, dh).noalias() =
                    P.transpose() * dOh;
            }
        }

        CMapM<S> Wqkv(V + ob.qkv_w, D, 3 * D);
        MatRM<S> dln_out2;
        dln_out2.noalias() = dqkv * Wqkv.transpose();
        if (G) {
            MapM<S>(G + ob.qkv_w, D, 3 * D).noalias() += bc.ln1_out.transpose() * dqkv;
            MapR<S>(G + ob.qkv_b, 3 * D) += dqkv.colwise().sum();
        }
        layer_norm_backward(dln_out2, bc.x_in, bc.mu1, bc.r1, V + ob.ln1_g, dln1,
                            G ? G + ob.ln1_g : nullptr, G ? G + ob.ln1_b : nullptr);
        dx += dln1;  // gradient at the block input
    }

    // Embedding.
    apply_dropout_backward(dx, drop, keys.embed, begin, count);
    if (G) {
        MapM<S> dpos(G + params.off.pos_embed, N, D);
        MapR<S> dclsg(G + params.off.cls_token, D);
        for (int b = 0; b < count; ++b) {
            dpos += dx.middleRows(static_cast<Eigen::Index>(b) * N, N);
            dclsg += dx.row(static_cast<Eigen::Index>(b) * N);
        }
    }
    MatRM<S> demb(static_cast<Eigen::Index>(count) * cfg.n_patches(), D);
    for (int b = 0; b < count; ++b)
        demb.middleRows(static_cast<Eigen::Index>(b) * cfg.n_patches(), cfg.n_patches()) =
            dx.middleRows(static_cast<Eigen::Index>(b) * N + 1, cfg.n_patches());
    if (G) {
        MapM<S>(G + params.off.patch_w, cfg.patch_dim(), D).noalias() +=
            cache.patches.transpose() * demb;
        MapR<S>(G + params.off.patch_b, D) += demb.colwise().sum();
    }
    if (dpixels) {
        CMapM<S> Wp(V + params.off.patch_w, cfg.patch_dim(), D);
        MatRM<S> dpatches = demb * Wp.transpose();
        const int P = cfg.patch_size, Gr = cfg.grid(), C = cfg.in_channels;
        for (int b = 0; b < count; ++b) {
            for (int p = 0; p < cfg.n_patches(); ++p) {
                const int py = p / Gr, px = p % Gr;
                const S* row =
                    dpatches.row(static_cast<Eigen::Index>(b) * cfg.n_patches() + p).data();
                for (int dy2 = 0; dy2 < P; ++dy2) {
                    const int iy = py * P + dy2;
                    for (int dx2 = 0; dx2 < P; ++dx2) {
                        const int ix = px * P + dx2;
                        S* dst = &dpixels->at(begin + b, iy, ix, 0);
                        const S* src = row + (dy2 * P + dx2) * C;
                        for (int c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline constexpr int kForwardChunk = 16;

/// Full-batch forward pass; returns logits (B x n_classes). Pure in
/// (params, pixels, drop); safe to call concurrently on disjoint batches.
template <class S>
Tensor<S> forward(const ModelParams<S>& params, const Tensor<S>& pixels,
                  const DropRealization& drop, MaskRecorder* recorder = nullptr,
                  int threads = 1) {
    const ModelConfig& cfg = params.config;
    if (pixels.ndim() != 4 || pixels.dim(1) != cfg.image_size ||
        pixels.dim(2) != cfg.image_size || pixels.dim(3) != cfg.in_channels)
        throw StructureError("input tensor does not match model image shape");
    const int B = pixels.dim(0);
    if (recorder) recorder->prepare(cfg, B);
    Tensor<S> logits({B, cfg.n_classes});
    detail::MapM<S> lm(logits.data(), B, cfg.n_classes);
    const auto keys = detail::DropSiteKeys::make(cfg.depth);
    run_chunked(B, kForwardChunk, threads, [&](int, int begin, int end, int) {
        detail::forward_chunk<S>(params, pixels, begin, end - begin, drop, keys,
                                 lm.middleRows(begin, end - begin), nullptr, recorder,
                                 nullptr);
    });
    return logits;
}

template <class S>
Tensor<S> forward(const ModelParams<S>& params, const ImageBatch<S>& batch,
                  const DropRealization& drop, MaskRecorder* recorder = nullptr,
                  int threads = 1) {
    return forward(params, batch.pixels, drop, recorder, threads);
}

/// Softmax cross-entropy over logits rows against integer targets.
/// Returns summed loss (double accumulation), per-example losses, gradient
/// w.r.t. logits scaled by `weight`, and argmax-correctness flags
/// (ties broken toward the lowest class index).
template <class S>
struct CrossEntropy {
    double loss_sum = 0.0;
    std::vector<double> per_example;
    Tensor<S> dlogits;
    std::vector<std::uint8_t> correct;
};

template <class S>
CrossEntropy<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                                      S grad_weight) {
    const int B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(targets.size()) != B)
        throw StructureError("target count does not match logits rows");
    CrossEntropy<S> out;
    out.per_example.resize(B);
    out.dlogits = Tensor<S>({B, K});
    out.correct.resize(B);
    for (int i = 0; i < B; ++i) {
        const S* row = logits.data() + static_cast<std::size_t>(i) * K;
        S mx = row[0];
        int arg = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > mx) {
                mx = row[k];
                arg = k;
            }
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
        const double lse = std::log(denom) + static_cast<double>(mx);
        const int y = targets[i];
        if (y < 0 || y >= K) throw StructureError("target label out of range");
        const double loss = lse - static_cast<double>(row[y]);
        out.per_example[i] = loss;
        out.loss_sum += loss;
        out.correct[i] = (arg == y) ? 1 : 0;
        S* drow = out.dlogits.data() + static_cast<std::size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(row[k] - mx)) / denom;
            drow[k] = grad_weight * static_cast<S>(p - (k == y ? 1.0 : 0.0));
        }
    }
    return out;
}

enum class GradKind { params_and_input, params_only, input_only };

/// One fused forward+backward over a batch. Loss is the mean cross-entropy
/// toward `targets`. Parameter gradients (into `grads`) and/or input-pixel
/// gradients (into `dpixels`) are accumulated according to `kind`.
/// Reproducible for a fixed thread count; exact reference behavior at
/// threads == 1.
template <class S>
struct BatchResult {
    double mean_loss = 0.0;
    int n_correct = 0;
    Tensor<S> logits;
};

template <class S>
BatchResult<S> forward_backward(const ModelParams<S>& params, const Tensor<S>& pixels,
                                const std::vector<int>& targets, const DropRealization& drop,
                                GradKind kind, Gradients<S>* grads, Tensor<S>* dpixels,
                                MaskRecorder* recorder = nullptr, int threads = 1,
                                S loss_scale = S(1)) {
    const ModelConfig& cfg = params.config;
    const int B = pixels.dim(0);
    if (recorder) recorder->prepare(cfg, B);
    if (dpixels) {
        *dpixels = Tensor<S>(pixels.shape());
    }
    const bool want_params = kind != GradKind::input_only && grads != nullptr;
    const bool want_input = kind != GradKind::params_only && dpixels != nullptr;
    const auto keys = detail::DropSiteKeys::make(cfg.depth);

    BatchResult<S> result;
    result.logits = Tensor<S>({B, cfg.n_classes});
    detail::MapM<S> lm(result.logits.data(), B, cfg.n_classes);

    const int n_chunks = (B + kForwardChunk - 1) / kForwardChunk;
    std::vector<double> chunk_loss(static_cast<std::size_t>(n_chunks), 0.0);
    std::vector<int> chunk_correct(static_cast<std::size_t>(n_chunks), 0);
    const int n_workers = std::max(1, std::min(threads, n_chunks));
    std::vector<Gradients<S>> worker_grads;
    if (want_params) worker_grads.assign(n_workers, Gradients<S>(params.size()));

    run_chunked(B, kForwardChunk, threads, [&](int chunk_id, int begin, int end, int slot) {
        const int count = end - begin;
        detail::ChunkCache<S> cache;
        std::vector<S> gate_scales;
        detail::forward_chunk<S>(params, pixels, begin, count, drop, keys,
                                 lm.middleRows(begin, count), &cache, recorder, &gate_scales);

        Tensor<S> chunk_logits({count, cfg.n_classes});
        detail::MapM<S>(chunk_logits.data(), count, cfg.n_classes) =
            lm.middleRows(begin, count);
        std::vector<int> chunk_targets(targets.begin() + begin, targets.begin() + end);
        auto ce =
            softmax_cross_entropy(chunk_logits, chunk_targets, loss_scale / static_cast<S>(B));
        chunk_loss[chunk_id] = ce.loss_sum;
        for (auto c : ce.correct) chunk_correct[chunk_id] += c;

        detail::backward_chunk<S>(params, cache,
                                  detail::CMapM<S>(ce.dlogits.data(), count, cfg.n_classes),
                                  drop, keys, gate_scales,
                               want_params ? &worker_grads[slot] : nullptr,
                               want_input ? dpixels : nullptr);
    });

    if (want_params) {
        for (int t = 0; t < n_workers; ++t) grads->add(worker_grads[t]);
    }
    double total = 0.0;
    int correct = 0;
    for (int c = 0; c < n_chunks; ++c) {
        total += chunk_loss[c];
        correct += chunk_correct[c];
    }
    result.mean_loss = total / B;
    result.n_correct = correct;
    return result;
}

}  // namespace pyramidat
