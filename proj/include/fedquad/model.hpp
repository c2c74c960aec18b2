#pragma once

// Miniature adapter-tuned model.
//
// Each block computes
//   u = x W_in^T  + s_in  * (x A_in^T)  B_in^T
//   v = gelu(u)
//   z = x + v W_out^T + s_out * (v A_out^T) B_out^T
//   y = layer_norm(z)
// with frozen W_in, W_out and norm parameters, and trainable low-rank
// adapters (A, B) scaled by s = alpha / rank. A linear head maps the last
// block's output to class logits.
//
// Trainable layers are a contiguous suffix of the stack; only layers at or
// above the lowest trainable one keep activations for the backward pass, and
// the lowest `quantized` of those keep them as int8 blocks.

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fedquad/configuration.hpp"
#include "fedquad/quant.hpp"
#include "fedquad/rng.hpp"
#include "fedquad/tensor.hpp"

namespace fedquad {

struct ModelDims {
    int layers = 6;
    int hidden = 32;
    int ffn = 64;
    int rank = 4;
    int classes = 3;
    double lora_alpha = 0.0;  // 0 selects the default 2 * rank

    double alpha() const { return lora_alpha > 0.0 ? lora_alpha : 2.0 * rank; }

    void validate() const {
        if (layers < 1) throw std::invalid_argument("ModelDims: layers must be >= 1");
        if (hidden < 2 || ffn < 2) throw std::invalid_argument("ModelDims: hidden and ffn must be >= 2");
        if (classes < 2) throw std::invalid_argument("ModelDims: classes must be >= 2");
        if (rank < 1 || 2 * rank > std::min(hidden, ffn))
            throw std::invalid_argument("ModelDims: rank must satisfy 1 <= r <= min(hidden, ffn)/2");
    }
};

struct LoraAdapter {
    Matrix a;  // rank x in
    Matrix b;  // out x rank
    int rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }

    /// A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0, so the adapter starts as a no-op.
    static LoraAdapter make(int out, int in, int rank, double alpha, RngStream& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        return {Matrix::uniform(rank, in, -bound, bound, rng), Matrix::zeros(out, rank), rank, alpha};
    }
};

/// Adapter parameter slots, in the fixed order used for gradients, optimizer
/// state and exports.
enum AdapterSlot : int { kInA = 0, kInB = 1, kOutA = 2, kOutB = 3 };
inline constexpr int kAdapterSlots = 4;
using LayerParams = std::array<Matrix, kAdapterSlots>;

struct ModelLayer {
    Matrix w_in;       // ffn x hidden, frozen
    Matrix w_out;      // hidden x ffn, frozen
    Matrix norm_gain;  // 1 x hidden, frozen
    Matrix norm_bias;  // 1 x hidden, frozen
    LoraAdapter adapter_in;
    LoraAdapter adapter_out;
    bool trainable = false;
    bool quantize_activations = false;
    bool skipped = false;  // bypassed entirely (sub-model construction)

    Matrix& param(int slot) {
        switch (slot) {
            case kInA: return adapter_in.a;
            case kInB: return adapter_in.b;
            case kOutA: return adapter_out.a;
            case kOutB: return adapter_out.b;
        }
        throw std::out_of_range("ModelLayer::param: bad slot");
    }
    const Matrix& param(int slot) const { return const_cast<ModelLayer*>(this)->param(slot); }

    LayerParams params() const { return {adapter_in.a, adapter_in.b, adapter_out.a, adapter_out.b}; }
};

struct HeadParams {
    Matrix w;  // classes x hidden
    Matrix b;  // 1 x classes
};

struct LayeredModel {
    ModelDims dims;
    std::vector<ModelLayer> layers;
    HeadParams head;
    QuantSpec quant;
    int active_rank = 0;  // adapter components >= active_rank receive zero gradient

    int num_layers() const { return static_cast<int>(layers.size()); }

    /// Lowest trainable layer index, or L when only the head trains.
    int lowest_trainable() const {
        for (int l = 0; l < num_layers(); ++l)
            if (layers[l].trainable) return l;
        return num_layers();
    }

    static LayeredModel init(const ModelDims& dims, RngStream& rng, QuantSpec quant = {}) {
        dims.validate();
        quant.validate();
        LayeredModel m;
        m.dims = dims;
        m.quant = quant;
        m.active_rank = dims.rank;
        const double alpha = dims.alpha();
        for (int l = 0; l < dims.layers; ++l) {
            ModelLayer layer;
            layer.w_in = Matrix::normal(dims.ffn, dims.hidden, 1.0 / std::sqrt(static_cast<double>(dims.hidden)), rng);
            layer.w_out = Matrix::normal(dims.hidden, dims.ffn, 1.0 / std::sqrt(static_cast<double>(dims.ffn)), rng);
            layer.norm_gain = Matrix(1, dims.hidden, 1.0);
            layer.norm_bias = Matrix(1, dims.hidden, 0.0);
            layer.adapter_in = LoraAdapter::make(dims.ffn, dims.hidden, dims.rank, alpha, rng);
            layer.adapter_out = LoraAdapter::make(dims.hidden, dims.ffn, dims.rank, alpha, rng);
            m.layers.push_back(std::move(layer));
        }
        m.head.w = Matrix::normal(dims.classes, dims.hidden, 1.0 / std::sqrt(static_cast<double>(dims.hidden)), rng);
        m.head.b = Matrix::zeros(1, dims.classes);
        m.layers.back().trainable = true;
        return m;
    }
};

/// Trainable set = top `depth` layers; quantized set = lowest `quantized` of those.
inline void apply_configuration(LayeredModel& model, const Configuration& cfg) {
    const int L = model.num_layers();
    cfg.validate(L);
    const int first = L - cfg.depth;
    for (int l = 0; l < L; ++l) {
        auto& layer = model.layers[l];
        layer.trainable = l >= first;
        layer.quantize_activations = l >= first && l < first + cfg.quantized;
        layer.skipped = false;
    }
}

/// Sub-model layout: `selected` layers train, every other layer is bypassed.
inline void apply_submodel(LayeredModel& model, std::span<const int> selected) {
    const int L = model.num_layers();
    if (selected.empty()) throw std::invalid_argument("apply_submodel: empty layer selection");
    std::vector<bool> pick(L, false);
    for (int l : selected) {
        if (l < 0 || l >= L) throw std::out_of_range("apply_submodel: layer index out of range");
        if (pick[l]) throw std::invalid_argument("apply_submodel: duplicate layer index");
        pick[l] = true;
    }
    for (int l = 0; l < L; ++l) {
        model.layers[l].trainable = pick[l];
        model.layers[l].skipped = !pick[l];
        model.layers[l].quantize_activations = false;
    }
}

inline void set_active_rank(LayeredModel& model, int rank) {
    if (rank < 1 || rank > model.dims.rank) throw std::out_of_range("set_active_rank: rank out of range");
    model.active_rank = rank;
}

// ---------------------------------------------------------------------------
// Activation storage

struct StoredActivation {
    std::variant<Matrix, QuantizedTensor> value;

    bool quantized() const { return std::holds_alternative<QuantizedTensor>(value); }

    std::size_t bytes() const {
        if (const auto* q = std::get_if<QuantizedTensor>(&value)) return stored_bytes(*q);
        const auto& m = std::get<Matrix>(value);
        return full_bytes(m.rows(), m.cols());
    }

    Matrix restore() const {
        if (const auto* q = std::get_if<QuantizedTensor>(&value)) return dequantize(*q);
        return std::get<Matrix>(value);
    }
};

/// Inputs of the projections, GELU and LayerNorm for one block.
struct LayerActivations {
    StoredActivation input;      // x, into W_in / A_in
    StoredActivation pre_gelu;   // u
    StoredActivation post_gelu;  // v, into W_out / A_out
    StoredActivation pre_norm;   // z

    bool quantized() const { return input.quantized(); }
    std::size_t bytes() const { return input.bytes() + pre_gelu.bytes() + post_gelu.bytes() + pre_norm.bytes(); }
};

struct ActivationStore {
    std::vector<std::optional<LayerActivations>> layers;
    Matrix head_input;  // always full precision; the fixed part of the footprint
    std::size_t measured_bytes = 0;

    std::size_t entry_count() const {
        std::size_t n = 0;
        for (const auto& e : layers) n += e.has_value();
        return n;
    }
    std::size_t quantized_count() const {
        std::size_t n = 0;
        for (const auto& e : layers) n += e.has_value() && e->quantized();
        return n;
    }
};

struct ForwardResult {
    Matrix logits;
    ActivationStore store;
};

namespace detail {

inline Matrix adapted_projection(const Matrix& x, const Matrix& w, const LoraAdapter& ad) {
    Matrix out = matmul_nt(x, w);
    const Matrix low = matmul_nt(matmul_nt(x, ad.a), ad.b);
    axpy(out, ad.scaling(), low);
    return out;
}

struct BlockOutputs {
    Matrix u, v, z, y;
};

inline BlockOutputs block_forward(const ModelLayer& layer, const Matrix& x) {
    BlockOutputs o;
    o.u = adapted_projection(x, layer.w_in, layer.adapter_in);
    o.v = gelu(o.u);
    o.z = add(x, adapted_projection(o.v, layer.w_out, layer.adapter_out));
    o.y = layer_norm(o.z, layer.norm_gain, layer.norm_bias).out;
    return o;
}

inline StoredActivation keep(Matrix m, bool quantized, const QuantSpec& spec, RngStream& rng) {
    if (quantized) return {quantize(m, spec, rng)};
    return {std::move(m)};
}

inline void check_width(const LayeredModel& model, const Matrix& batch) {
    if (batch.cols() != static_cast<std::size_t>(model.dims.hidden))
        throw ShapeError("forward: batch width " + std::to_string(batch.cols()) + " != hidden " +
                         std::to_string(model.dims.hidden));
}

}  // namespace detail

/// Training forward pass. Stochastic rounding draws from `rng`.
inline ForwardResult forward(const LayeredModel& model, const Matrix& batch, RngStream& rng) {
    detail::check_width(model, batch);
    const int L = model.num_layers();
    const int lowest = model.lowest_trainable();
    ForwardResult res;
    res.store.layers.resize(L);
    Matrix x = batch;
    for (int l = 0; l < L; ++l) {
        const auto& layer = model.layers[l];
        if (layer.skipped) continue;
        auto o = detail::block_forward(layer, x);
        if (l >= lowest) {
            const bool q = layer.quantize_activations;
            LayerActivations acts{detail::keep(std::move(x), q, model.quant, rng), detail::keep(std::move(o.u), q, model.quant, rng),
                                  detail::keep(std::move(o.v), q, model.quant, rng), detail::keep(std::move(o.z), q, model.quant, rng)};
            res.store.measured_bytes += acts.bytes();
            res.store.layers[l] = std::move(acts);
        }
        x = std::move(o.y);
    }
    res.logits = add_row_broadcast(matmul_nt(x, model.head.w), model.head.b);
    res.store.measured_bytes += full_bytes(x.rows(), x.cols());
    res.store.head_input = std::move(x);
    return res;
}

/// Inference pass; honors skipped layers, stores nothing.
inline Matrix predict(const LayeredModel& model, const Matrix& batch) {
    detail::check_width(model, batch);
    Matrix x = batch;
    for (const auto& layer : model.layers) {
        if (layer.skipped) continue;
        x = detail::block_forward(layer, x).y;
    }
    return add_row_broadcast(matmul_nt(x, model.head.w), model.head.b);
}

// ---------------------------------------------------------------------------
// Backward

struct LoraGradients {
    std::vector<std::optional<LayerParams>> layers;  // present only for trainable layers
    HeadParams head;

    std::size_t layer_count() const {
        std::size_t n = 0;
        for (const auto& e : layers) n += e.has_value();
        return n;
    }
};

struct BackwardResult {
    double loss = 0.0;
    LoraGradients grads;
};

namespace detail {

inline void mask_rank(LayerParams& g, int active_rank) {
    for (int slot : {kInA, kOutA})
        for (std::size_t r = static_cast<std::size_t>(active_rank); r < g[slot].rows(); ++r)
            for (auto& v : g[slot].row(r)) v = 0.0;
    for (int slot : {kInB, kOutB})
        for (std::size_t i = 0; i < g[slot].rows(); ++i)
            for (std::size_t r = static_cast<std::size_t>(active_rank); r < g[slot].cols(); ++r) g[slot](i, r) = 0.0;
}

}  // namespace detail

inline BackwardResult backward(const LayeredModel& model, const ActivationStore& store, const Matrix& logits,
                               std::span<const int> labels) {
    const int L = model.num_layers();
    const int lowest = model.lowest_trainable();
    if (store.layers.size() != static_cast<std::size_t>(L)) throw std::invalid_argument("backward: store layer count mismatch");
    for (int l = 0; l < L; ++l) {
        const auto& layer = model.layers[l];
        const bool expected = !layer.skipped && l >= lowest;
        const auto& entry = store.layers[l];
        if (entry.has_value() != expected || (entry && entry->quantized() != layer.quantize_activations))
            throw std::invalid_argument("backward: activation store does not match configuration at layer " + std::to_string(l));
    }
    if (store.head_input.rows() != logits.rows()) throw ShapeError("backward: store/logits batch mismatch");

    BackwardResult res;
    auto ce = softmax_cross_entropy(logits, labels);
    res.loss = ce.loss;
    res.grads.layers.resize(L);
    res.grads.head.w = matmul_tn(ce.dlogits, store.head_input);
    res.grads.head.b = column_sum(ce.dlogits);
    Matrix dy = matmul(ce.dlogits, model.head.w);

    for (int l = L - 1; l >= lowest; --l) {
        const auto& layer = model.layers[l];
        if (layer.skipped) continue;
        const auto& acts = *store.layers[l];
        const Matrix x = acts.input.restore();
        const Matrix u = acts.pre_gelu.restore();
        const Matrix v = acts.post_gelu.restore();
        const Matrix z = acts.pre_norm.restore();

        const auto ln = layer_norm(z, layer.norm_gain, layer.norm_bias);
        const Matrix dz = layer_norm_backward(ln.cache, layer.norm_gain, dy).dx;

        const auto& ad_out = layer.adapter_out;
        const double s_out = ad_out.scaling();
        const Matrix t_out = matmul(dz, ad_out.b);  // n x r
        Matrix dv = matmul(dz, layer.w_out);
        axpy(dv, s_out, matmul(t_out, ad_out.a));
        const Matrix du = gelu_backward(u, dv);

        const auto& ad_in = layer.adapter_in;
        const double s_in = ad_in.scaling();
        const Matrix t_in = matmul(du, ad_in.b);  // n x r

        if (layer.trainable) {
            LayerParams g;
            g[kInA] = scale(matmul_tn(t_in, x), s_in);
            g[kInB] = scale(matmul_tn(du, matmul_nt(x, ad_in.a)), s_in);
            g[kOutA] = scale(matmul_tn(t_out, v), s_out);
            g[kOutB] = scale(matmul_tn(dz, matmul_nt(v, ad_out.a)), s_out);
            if (model.active_rank < model.dims.rank) detail::mask_rank(g, model.active_rank);
            res.grads.layers[l] = std::move(g);
        }
        if (l > lowest) {
            Matrix dx = dz;
            axpy(dx, 1.0, matmul(du, layer.w_in));
            axpy(dx, s_in, matmul(t_in, ad_in.a));
            dy = std::move(dx);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Optimizers

namespace detail {

/// Visits every (parameter, gradient) pair the current configuration trains.
/// Ids: 4*layer + slot for adapters, 4*L and 4*L+1 for head weight and bias.
template <typename Fn>
void for_each_trainable(LayeredModel& model, const LoraGradients& grads, Fn&& fn) {
    const int L = model.num_layers();
    if (grads.layers.size() != static_cast<std::size_t>(L)) throw std::invalid_argument("optimizer: gradient layer count mismatch");
    for (int l = 0; l < L; ++l) {
        auto& layer = model.layers[l];
        if (layer.trainable != grads.layers[l].has_value())
            throw std::invalid_argument("optimizer: gradients do not match trainable set at layer " + std::to_string(l));
        if (!layer.trainable) continue;
        for (int s = 0; s < kAdapterSlots; ++s) fn(kAdapterSlots * l + s, layer.param(s), (*grads.layers[l])[s]);
    }
    fn(kAdapterSlots * L, model.head.w, grads.head.w);
    fn(kAdapterSlots * L + 1, model.head.b, grads.head.b);
}

}  // namespace detail

namespace detail {

/// False for adapter entries outside the active rank; those stay frozen,
/// weight decay included.
inline bool rank_active(const LayeredModel& model, int id, std::size_t index, const Matrix& p) {
    const int L = model.num_layers();
    if (id >= kAdapterSlots * L || model.active_rank >= model.dims.rank) return true;
    const int slot = id % kAdapterSlots;
    const auto r = static_cast<std::size_t>(model.active_rank);
    if (slot == kInA || slot == kOutA) return index / p.cols() < r;
    return index % p.cols() < r;
}

}  // namespace detail

inline void sgd_step(LayeredModel& model, const LoraGradients& grads, double lr) {
    detail::for_each_trainable(model, grads, [&](int id, Matrix& p, const Matrix& g) {
        for (std::size_t i = 0; i < p.size(); ++i)
            if (detail::rank_active(model, id, i, p)) p.data()[i] -= lr * g.data()[i];
    });
}

struct AdamWParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    AdamWParams params;
    long step = 0;
    std::map<int, std::pair<Matrix, Matrix>> moments;
};

/// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
inline void adamw_step(LayeredModel& model, AdamWState& state, const LoraGradients& grads, double lr) {
    ++state.step;
    const auto& hp = state.params;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    detail::for_each_trainable(model, grads, [&](int id, Matrix& p, const Matrix& g) {
        auto [it, fresh] = state.moments.try_emplace(id, Matrix(p.rows(), p.cols()), Matrix(p.rows(), p.cols()));
        auto& [m, v] = it->second;
        if (!m.same_shape(g)) throw ShapeError("adamw_step: gradient shape changed for parameter " + std::to_string(id));
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!detail::rank_active(model, id, i, p)) continue;
            const double gi = g.data()[i];
            double& mi = m.data()[i];
            double& vi = v.data()[i];
            mi = hp.beta1 * mi + (1.0 - hp.beta1) * gi;
            vi = hp.beta2 * vi + (1.0 - hp.beta2) * gi * gi;
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            double& pi = p.data()[i];
            pi -= lr * (mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * pi);
        }
    });
}

// ---------------------------------------------------------------------------
// Adapter exchange

/// What a device uploads: current adapter values for its trainable layers plus the head.
struct AdapterSnapshot {
    std::vector<std::optional<LayerParams>> layers;
    HeadParams head;

    std::size_t layer_count() const {
        std::size_t n = 0;
        for (const auto& e : layers) n += e.has_value();
        return n;
    }
};

/// Server-side adapter state: every layer slot filled.
struct GlobalAdapters {
    std::vector<LayerParams> layers;
    HeadParams head;
};

inline AdapterSnapshot export_updates(const LayeredModel& model) {
    AdapterSnapshot snap;
    snap.layers.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        if (model.layers[l].trainable) snap.layers[l] = model.layers[l].params();
    snap.head = model.head;
    return snap;
}

inline GlobalAdapters export_all(const LayeredModel& model) {
    GlobalAdapters g;
    for (const auto& layer : model.layers) g.layers.push_back(layer.params());
    g.head = model.head;
    return g;
}

inline void import_global(LayeredModel& model, const GlobalAdapters& global) {
    if (global.layers.size() != model.layers.size())
        throw std::invalid_argument("import_global: layer count mismatch (" + std::to_string(global.layers.size()) + " vs " +
                                    std::to_string(model.layers.size()) + ")");
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        for (int s = 0; s < kAdapterSlots; ++s) {
            if (!global.layers[l][s].same_shape(layer.param(s))) throw ShapeError("import_global: adapter shape mismatch");
            layer.param(s) = global.layers[l][s];
        }
    }
    if (!global.head.w.same_shape(model.head.w) || !global.head.b.same_shape(model.head.b))
        throw ShapeError("import_global: head shape mismatch");
    model.head = global.head;
}

}  // namespace fedquad
