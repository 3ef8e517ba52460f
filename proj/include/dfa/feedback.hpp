#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "dfa/network.hpp"

namespace dfa {

// ---- strategies ---------------------------------------------------------------

enum class EpKind { bp, dfa_original, dfa_modular, dfa_conv, dfa_groupconv, dfa_rnn_triangular };

// Tagged choice of error-propagation rule. bp_ratio is consumed by the hybrid
// optimizers, not by the backward pass itself.
struct EpStrategy {
    EpKind kind = EpKind::bp;
    int groups = 1;
    double sparsity = 0.0;
    bool binary = false;
    double bp_ratio = 0.0;
    bool bw_init = false;          // seed backward weights from the forward weights
    bool literal_exponent = true;  // block exponent T-j as printed; false uses path length j-i+1
    double feedback_scale = 0.0;   // extra multiplier on every feedback projection; 0 keeps 1

    void validate() const {
        if (groups < 1) throw std::invalid_argument("strategy: groups must be >= 1");
        if (sparsity < 0.0 || sparsity >= 1.0) throw std::invalid_argument("strategy: sparsity in [0,1)");
        if (bp_ratio < 0.0 || bp_ratio > 1.0) throw std::invalid_argument("strategy: bp_ratio in [0,1]");
    }

    static EpStrategy bp() { return {}; }
    static EpStrategy original() { return {EpKind::dfa_original, 1, 0, false, 0, false, true, 0}; }
    static EpStrategy modular() { return {EpKind::dfa_modular, 1, 0, false, 0, false, true, 0}; }
    static EpStrategy conv_dfa() { return {EpKind::dfa_conv, 1, 0, true, 0, false, true, 0}; }
    static EpStrategy group_conv(int g) { return {EpKind::dfa_groupconv, g, 0, true, 0, false, true, 0}; }
    static EpStrategy rnn_triangular(double sparsity = 0, bool binary = false, bool bw_init = false) {
        return {EpKind::dfa_rnn_triangular, 1, sparsity, binary, 0, bw_init, true, 0};
    }
};

inline const char* ep_kind_name(EpKind k) {
    switch (k) {
        case EpKind::bp: return "bp";
        case EpKind::dfa_original: return "dfa_original";
        case EpKind::dfa_modular: return "dfa_modular";
        case EpKind::dfa_conv: return "dfa_conv";
        case EpKind::dfa_groupconv: return "dfa_groupconv";
        case EpKind::dfa_rnn_triangular: return "dfa_rnn";
    }
    return "?";
}

// ---- feedback weight encodings ---------------------------------------------------

// Dense projection (n_dest x n_src). When signed_sparse is set the values are
// already masked (and binarized to {-1,0,+1} if requested) and the bitmap is
// kept for serialization and nonzero accounting.
template <class S>
struct DenseFw {
    TensorT<S> values;
    S scale = S(1);
    bool signed_sparse = false;
    std::vector<std::uint8_t> mask;

    double nonzero_fraction() const {
        std::size_t nz = 0;
        for (std::size_t i = 0; i < values.numel(); ++i) nz += values[i] != S(0);
        return static_cast<double>(nz) / static_cast<double>(values.numel());
    }
};

// Backward kernel pair of the convolutional strategies: a grouped 1x1 channel
// projection D2 followed by a grouped, dilated k x k kernel D1.
template <class S>
struct ConvPairFw {
    TensorT<S> d1;  // (C_dest, C_dest/G, k, k), taps stored undilated
    TensorT<S> d2;  // (C_dest, C_src/G, 1, 1)
    int dilation = 1;
    int groups = 1;
    bool shuffle = false;
    S scale = S(1);
};

// Block upper-triangular HT x HT matrix; block (i,j) kept only for i <= j and
// never read below the diagonal.
template <class S>
struct TriangularFw {
    std::size_t block = 0;  // H
    std::size_t steps = 0;  // T
    std::vector<TensorT<S>> blocks;  // index i*steps+j, valid for i <= j
    S scale = S(1);

    const TensorT<S>& at(std::size_t i, std::size_t j) const { return blocks[i * steps + j]; }
    TensorT<S>& at(std::size_t i, std::size_t j) { return blocks[i * steps + j]; }
};

template <class S>
using FeedbackVariant = std::variant<DenseFw<S>, ConvPairFw<S>, TriangularFw<S>>;

// All backward weights for one (plan, strategy) pair. Fixed at construction;
// training never mutates them (checksummed every epoch).
template <class S>
struct FeedbackSetT {
    EpStrategy strategy;

    // feedforward strategies: per destination layer (empty for the last layer)
    std::vector<std::optional<FeedbackVariant<S>>> per_layer;

    // recurrent strategies
    std::vector<DenseFw<S>> dec_to_cell;  // per step: (H x V); S^fc or the original D per step
    std::vector<DenseFw<S>> dec_to_emb;   // original DFA only: per step (H x V)
    std::optional<TriangularFw<S>> cell_to_emb;  // triangular S^rnn

    std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* p, std::size_t n) {
            const unsigned char* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        auto mix_tensor = [&](const TensorT<S>& t) { mix(t.data(), t.numel() * sizeof(S)); };
        for (const auto& opt : per_layer) {
            if (!opt) continue;
            if (const auto* d = std::get_if<DenseFw<S>>(&*opt)) mix_tensor(d->values);
            if (const auto* c = std::get_if<ConvPairFw<S>>(&*opt)) {
                mix_tensor(c->d1);
                mix_tensor(c->d2);
            }
            if (const auto* t = std::get_if<TriangularFw<S>>(&*opt))
                for (std::size_t i = 0; i < t->steps; ++i)
                    for (std::size_t j = i; j < t->steps; ++j) mix_tensor(t->at(i, j));
        }
        for (const auto& d : dec_to_cell) mix_tensor(d.values);
        for (const auto& d : dec_to_emb) mix_tensor(d.values);
        if (cell_to_emb)
            for (std::size_t i = 0; i < cell_to_emb->steps; ++i)
                for (std::size_t j = i; j < cell_to_emb->steps; ++j) mix_tensor(cell_to_emb->at(i, j));
        return h;
    }
};

// ---- shape bookkeeping --------------------------------------------------------------

struct LayerDims {
    std::size_t ch = 0, h = 0, w = 0;  // conv outputs
    std::size_t features = 0;          // dense outputs
    bool is_conv = false;
    std::size_t numel() const { return is_conv ? ch * h * w : features; }
};

// Static per-layer output dims of a feedforward plan given the per-sample input
// shape (C,H,W) or (features).
inline std::vector<LayerDims> layer_dims(const NetworkPlan& plan, const std::vector<std::size_t>& input_shape) {
    std::vector<LayerDims> out;
    LayerDims cur;
    if (input_shape.size() == 3) {
        cur.is_conv = true;
        cur.ch = input_shape[0];
        cur.h = input_shape[1];
        cur.w = input_shape[2];
    } else if (input_shape.size() == 1) {
        cur.features = input_shape[0];
    } else {
        throw std::invalid_argument("layer_dims: input shape must be (C,H,W) or (features)");
    }
    for (const auto& l : plan.layers) {
        LayerDims next;
        if (l.kind == LayerKind::conv) {
            if (!cur.is_conv) throw std::invalid_argument("layer_dims: conv after dense");
            next.is_conv = true;
            next.ch = l.conv.out_channels;
            next.h = l.conv.out_dim((int)cur.h);
            next.w = l.conv.out_dim((int)cur.w);
        } else if (l.kind == LayerKind::dense) {
            if (static_cast<std::size_t>(l.in) != cur.numel())
                throw std::invalid_argument("layer_dims: dense input mismatch");
            next.features = l.out;
        } else {
            throw std::invalid_argument("layer_dims: feedforward plans only");
        }
        out.push_back(next);
        cur = next;
    }
    return out;
}

// ---- dilation / receptive field -----------------------------------------------------

// Dilation of the direct backward hop from `from_layer`'s error to
// `to_layer`'s error: the product of the strides of the skipped forward
// layers.
inline int compute_dilation(const NetworkPlan& plan, std::size_t from_layer, std::size_t to_layer) {
    if (to_layer >= from_layer) throw std::invalid_argument("compute_dilation: destination must precede source");
    int d = 1;
    for (std::size_t l = to_layer + 1; l <= from_layer; ++l)
        if (plan.layers[l].kind == LayerKind::conv) d *= plan.layers[l].conv.stride;
    return d;
}

// Composed receptive field of the forward layers between the two errors.
inline int composed_receptive_field(const NetworkPlan& plan, std::size_t from_layer, std::size_t to_layer) {
    int rf = 1;
    int jump = 1;
    for (std::size_t l = to_layer + 1; l <= from_layer; ++l) {
        const auto& c = plan.layers[l].conv;
        rf += (c.kernel - 1) * jump;
        jump *= c.stride;
    }
    return rf;
}

// Backward kernel size whose dilated extent covers the composed receptive
// field; bumped so the extent stays odd and "same" padding is symmetric.
inline int backward_kernel_size(int receptive_field, int dilation) {
    int k = (receptive_field - 1 + dilation - 1) / dilation + 1;
    if (dilation % 2 == 1 && k % 2 == 0) ++k;
    return k;
}

// ---- backward result -----------------------------------------------------------------

template <class S>
struct BackwardResultT {
    // errors[layer][step]: dL/d(pre-activation); one step for feedforward nets
    std::vector<std::vector<TensorT<S>>> errors;
    ParamsT<S> grads;
};

namespace detail {

// Local weight-gradient rule shared by BP and every DFA strategy:
// G = error x input (conv: correlation of the layer input with the error).
template <class S>
void accumulate_layer_grad(const NetworkPlan& plan, const ActivationTapeT<S>& tape, std::size_t layer,
                           const TensorT<S>& err, ParamsT<S>& grads) {
    const auto& l = plan.layers[layer];
    const TensorT<S>& input = layer == 0 ? tape.input : tape.post[layer - 1][0];
    if (l.kind == LayerKind::dense) {
        TensorT<S> g = matmul_tn(err, as_rows(input));
        axpy(S(1), g, grads.layers[layer].w[0]);
    } else {
        TensorT<S> g = conv2d_backward_weight(err, input, l.conv);
        axpy(S(1), g, grads.layers[layer].w[0]);
    }
}

template <class S>
TensorT<S> reshape_to(const TensorT<S>& flat_rows, const TensorT<S>& like) {
    return flat_rows.reshaped(like.shape());
}

} // namespace detail

// Weight gradients from per-layer errors via the shared local rule.
template <class S>
ParamsT<S> grads_from_errors(const NetworkPlan& plan, const ParamsT<S>& params, const ActivationTapeT<S>& tape,
                             const std::vector<std::vector<TensorT<S>>>& errors) {
    ParamsT<S> grads = params.zeros_like();
    for (std::size_t i = 0; i < plan.layers.size(); ++i)
        detail::accumulate_layer_grad(plan, tape, i, errors[i][0], grads);
    return grads;
}

// ---- back-propagation ------------------------------------------------------------------

// Chain-rule error propagation; output_error is dL/d(network output).
template <class S>
BackwardResultT<S> bp_backward(const NetworkPlan& plan, const ParamsT<S>& params, const ActivationTapeT<S>& tape,
                               const TensorT<S>& output_error);

namespace detail {

template <class S>
BackwardResultT<S> bp_backward_ff(const NetworkPlan& plan, const ParamsT<S>& params, const ActivationTapeT<S>& tape,
                                  const TensorT<S>& output_error) {
    const std::size_t L = plan.layers.size();
    if (tape.pre.size() != L || tape.pre.back().empty()) throw std::invalid_argument("bp_backward: missing tape");
    BackwardResultT<S> r;
    r.errors.resize(L);
    r.grads = params.zeros_like();

    std::vector<TensorT<S>> dpost(L);  // accumulators of dL/d(post-activation)
    dpost[L - 1] = output_error.reshaped(tape.post[L - 1][0].shape());

    for (std::size_t ii = L; ii-- > 0;) {
        const auto& l = plan.layers[ii];
        TensorT<S> dp = hadamard(dpost[ii], apply_activation(tape.pre[ii][0], l.act, true));
        r.errors[ii].push_back(dp);
        detail::accumulate_layer_grad(plan, tape, ii, dp, r.grads);
        if (l.residual_from >= 0) {
            auto& acc = dpost[l.residual_from];
            TensorT<S> skip = dp.reshaped(tape.post[l.residual_from][0].shape());
            if (acc.empty())
                acc = skip;
            else
                axpy(S(1), skip, acc);
        }
        if (ii == 0) break;
        TensorT<S> dprev;
        if (l.kind == LayerKind::dense) {
            dprev = matmul(dp, params.layers[ii].w[0]);  // (B,out)*(out,in)
            dprev = dprev.reshaped(tape.post[ii - 1][0].shape());
        } else {
            const auto& prev = tape.post[ii - 1][0];
            dprev = conv2d_backward_input(dp, params.layers[ii].w[0], l.conv, (int)prev.dim(2), (int)prev.dim(3));
        }
        auto& acc = dpost[ii - 1];
        if (acc.empty())
            acc = dprev;
        else
            axpy(S(1), dprev, acc);
    }
    return r;
}

// One-step cell backward. dh is dL/dh_t; dc_next is the cell-state error
// arriving from step t+1 (empty tensor when absent). Accumulates the weight
// gradients, returns the errors flowing to h_{t-1}, c_{t-1} and x_t, and the
// stacked per-step error dh * outact' used by the feedback strategies.
template <class S>
struct CellBack {
    TensorT<S> dh_prev, dc_prev, dx, stacked;
};

template <class S>
CellBack<S> cell_backward_step(const NetworkPlan& plan, const ParamsT<S>& params, const ActivationTapeT<S>& tape,
                               std::size_t t, const TensorT<S>& dh, const TensorT<S>& dc_next, ParamsT<S>& grads) {
    const auto& spec = plan.layers[1];
    const auto& w = params.layers[1].w;
    auto& gw = grads.layers[1].w;
    const TensorT<S>& x = tape.post[0][t];
    const std::size_t B = x.dim(0), H = (std::size_t)spec.out;
    TensorT<S> h_prev = t > 0 ? tape.post[1][t - 1] : TensorT<S>({B, H});

    CellBack<S> out;
    switch (spec.kind) {
        case LayerKind::vanilla_rnn_cell: {
            TensorT<S> dp = hadamard(dh, apply_activation(tape.pre[1][t], spec.act, true));
            axpy(S(1), matmul_tn(dp, x), gw[0]);
            axpy(S(1), matmul_tn(dp, h_prev), gw[1]);
            out.dh_prev = matmul(dp, w[1]);
            out.dx = matmul(dp, w[0]);
            out.stacked = dp;
            break;
        }
        case LayerKind::lstm_cell: {
            const auto& ex = tape.cell[1][t];
            const TensorT<S>&gi = ex[0], &gf = ex[1], &gg = ex[2], &go = ex[3], &c = ex[4], &tc = ex[5];
            TensorT<S> c_prev = t > 0 ? tape.cell[1][t - 1][4] : TensorT<S>({B, H});
            TensorT<S> dc(c.shape());
            for (std::size_t k = 0; k < dc.numel(); ++k) {
                S v = dh[k] * go[k] * (S(1) - tc[k] * tc[k]);
                if (!dc_next.empty()) v += dc_next[k];
                dc[k] = v;
            }
            TensorT<S> da_i(c.shape()), da_f(c.shape()), da_g(c.shape()), da_o(c.shape());
            for (std::size_t k = 0; k < dc.numel(); ++k) {
                da_i[k] = dc[k] * gg[k] * gi[k] * (S(1) - gi[k]);
                da_f[k] = dc[k] * c_prev[k] * gf[k] * (S(1) - gf[k]);
                da_g[k] = dc[k] * gi[k] * (S(1) - gg[k] * gg[k]);
                da_o[k] = dh[k] * tc[k] * go[k] * (S(1) - go[k]);
            }
            const TensorT<S>* das[4] = {&da_i, &da_f, &da_g, &da_o};
            out.dx = TensorT<S>({B, (std::size_t)spec.in});
            out.dh_prev = TensorT<S>({B, H});
            for (int g = 0; g < 4; ++g) {
                axpy(S(1), matmul_tn(*das[g], x), gw[g]);
                axpy(S(1), matmul_tn(*das[g], h_prev), gw[4 + g]);
                axpy(S(1), matmul(*das[g], w[g]), out.dx);
                axpy(S(1), matmul(*das[g], w[4 + g]), out.dh_prev);
            }
            out.dc_prev = hadamard(dc, gf);
            out.stacked = TensorT<S>(dh.shape());
            for (std::size_t k = 0; k < dh.numel(); ++k) out.stacked[k] = dh[k] * go[k] * (S(1) - tc[k] * tc[k]);
            break;
        }
        case LayerKind::gru_cell: {
            const auto& ex = tape.cell[1][t];
            const TensorT<S>&z = ex[0], &rr = ex[1], &n = ex[2], &hh = ex[3];
            TensorT<S> da_n(z.shape()), da_z(z.shape()), da_r(z.shape()), dhh(z.shape());
            out.dh_prev = TensorT<S>({B, H});
            for (std::size_t k = 0; k < z.numel(); ++k) {
                const S dn = dh[k] * (S(1) - z[k]);
                const S dz = dh[k] * (h_prev[k] - n[k]);
                out.dh_prev[k] = dh[k] * z[k];
                da_n[k] = dn * (S(1) - n[k] * n[k]);
                dhh[k] = da_n[k] * rr[k];
                const S dr = da_n[k] * hh[k];
                da_z[k] = dz * z[k] * (S(1) - z[k]);
                da_r[k] = dr * rr[k] * (S(1) - rr[k]);
            }
            axpy(S(1), matmul_tn(da_z, x), gw[0]);
            axpy(S(1), matmul_tn(da_r, x), gw[1]);
            axpy(S(1), matmul_tn(da_n, x), gw[2]);
            axpy(S(1), matmul_tn(da_z, h_prev), gw[3]);
            axpy(S(1), matmul_tn(da_r, h_prev), gw[4]);
            axpy(S(1), matmul_tn(dhh, h_prev), gw[5]);
            out.dx = matmul(da_z, w[0]);
            axpy(S(1), matmul(da_r, w[1]), out.dx);
            axpy(S(1), matmul(da_n, w[2]), out.dx);
            axpy(S(1), matmul(da_z, w[3]), out.dh_prev);
            axpy(S(1), matmul(da_r, w[4]), out.dh_prev);
            axpy(S(1), matmul(dhh, w[5]), out.dh_prev);
            out.stacked = TensorT<S>(dh.shape());
            for (std::size_t k = 0; k < dh.numel(); ++k) out.stacked[k] = dh[k] * z[k] * (S(1) - n[k] * n[k]);
            break;
        }
        default:
            throw std::invalid_argument("cell_backward_step: not a cell");
    }
    return out;
}

// Back-propagation through time; weight gradients of the shared cell are
// integrated over every unfolded step.
template <class S>
BackwardResultT<S> bp_backward_rnn(const NetworkPlan& plan, const ParamsT<S>& params, const ActivationTapeT<S>& tape,
                                   const TensorT<S>& output_error) {
    const std::size_t T = tape.steps;
    const std::size_t B = tape.tokens.batch;
    const auto& dec = plan.layers[2];
    const std::size_t V = dec.out;
    const std::size_t H = plan.layers[1].out;

    BackwardResultT<S> r;
    r.errors.assign(3, std::vector<TensorT<S>>(T));
    r.grads = params.zeros_like();

    TensorT<S> dh_next, dc_next;
    for (std::size_t tt = T; tt-- > 0;) {
        // decoder
        TensorT<S> eout({B, V});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t v = 0; v < V; ++v) eout(b, v) = output_error[(tt * B + b) * V + v];
        TensorT<S> efc = hadamard(eout, apply_activation(tape.pre[2][tt], dec.act, true));
        r.errors[2][tt] = efc;
        axpy(S(1), matmul_tn(efc, tape.post[1][tt]), r.grads.layers[2].w[0]);

        TensorT<S> dh = matmul(efc, params.layers[2].w[0]);  // (B,H)
        if (!dh_next.empty()) axpy(S(1), dh_next, dh);

        auto cb = detail::cell_backward_step(plan, params, tape, tt, dh, dc_next, r.grads);
        r.errors[1][tt] = cb.stacked;
        dh_next = cb.dh_prev;
        dc_next = cb.dc_prev;

        // embedding (identity activation by default; honor f' regardless)
        TensorT<S> demb = hadamard(cb.dx, apply_activation(tape.pre[0][tt], plan.layers[0].act, true));
        r.errors[0][tt] = demb;
        auto& gemb = r.grads.layers[0].w[0];  // (H, vocab)
        for (std::size_t b = 0; b < B; ++b) {
            const int id = tape.tokens.at(tt, b);
            for (std::size_t j = 0; j < H; ++j) gemb(j, id) += demb(b, j);
        }
    }
    return r;
}

} // namespace detail

template <class S>
BackwardResultT<S> bp_backward(const NetworkPlan& plan, const ParamsT<S>& params, const ActivationTapeT<S>& tape,
                               const TensorT<S>& output_error) {
    if (plan.recurrent()) return detail::bp_backward_rnn(plan, params, tape, output_error);
    return detail::bp_backward_ff(plan, params, tape, output_error);
}

// ---- feedback construction -------------------------------------------------------------

namespace detail {

template <class S>
void fill_uniform(TensorT<S>& t, double bound, Rng& rng) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(-bound, bound));
}

template <class S>
void fill_sign(TensorT<S>& t, Rng& rng) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform() < 0.5 ? S(-1) : S(1);
}

// Which module's source error feeds this destination layer.
inline std::size_t source_module_of(const NetworkPlan& plan, std::size_t dest) {
    const auto mods = plan.modules();
    const std::size_t m = plan.module_of(dest);
    return dest + 1 == mods[m].second ? m + 1 : m;
}

// Layer whose (already computed) error acts as the module source; the final
// module reads the last layer's error.
inline std::size_t source_layer_of_module(const NetworkPlan& plan, std::size_t m) {
    const auto mods = plan.modules();
    return mods[m].second - 1;
}

template <class S>
TensorT<S> matrix_power(const TensorT<S>& m, int e) {
    TensorT<S> acc = TensorT<S>::identity(m.dim(0));
    for (int i = 0; i < e; ++i) acc = matmul(acc, m);
    return acc;
}

} // namespace detail

// Bernoulli(1 - sparsity) bitmap, fixed per training run.
inline std::vector<std::uint8_t> make_mask(std::size_t n, double sparsity, Rng& rng) {
    std::vector<std::uint8_t> m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = rng.uniform() >= sparsity ? 1 : 0;
    return m;
}

// S = sign(D o R) when binary, D o R otherwise; sign(0) = 0 so masking and
// binarization commute.
template <class S>
DenseFw<S> sparsify_binarize(const TensorT<S>& d, const std::vector<std::uint8_t>& mask, bool binary) {
    if (mask.size() != d.numel()) throw std::invalid_argument("sparsify_binarize: mask size mismatch");
    DenseFw<S> out;
    out.values = TensorT<S>(d.shape());
    for (std::size_t i = 0; i < d.numel(); ++i) {
        const S v = mask[i] ? d[i] : S(0);
        out.values[i] = binary ? (v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0))) : v;
    }
    out.signed_sparse = true;
    out.mask = mask;
    return out;
}

// Block upper-triangular backward weight: block (i,j) = D_ij^(T-j) for i <= j,
// zeros below the diagonal.
template <class S>
TriangularFw<S> build_triangular_bw(std::size_t H, std::size_t T, std::uint64_t seed, bool literal_exponent = true,
                                    const TensorT<S>* base = nullptr) {
    Rng rng = Rng::stream(seed, /*tag=*/3);
    TriangularFw<S> tri;
    tri.block = H;
    tri.steps = T;
    tri.blocks.assign(T * T, TensorT<S>());
    const double bound = 1.0 / std::sqrt((double)H);
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = i; j < T; ++j) {
            TensorT<S> d({H, H});
            if (base)
                d = *base;
            else
                detail::fill_uniform(d, bound, rng);
            const int e = literal_exponent ? (int)(T - j) : (int)(j - i + 1);
            tri.at(i, j) = detail::matrix_power(d, e);
        }
    return tri;
}

// Apply Eq.-style masking/binarization to every stored block; one mask per
// block column, shared across rows.
template <class S>
void sparsify_binarize_triangular(TriangularFw<S>& tri, double sparsity, bool binary, Rng& rng) {
    const std::size_t n = tri.block * tri.block;
    for (std::size_t j = 0; j < tri.steps; ++j) {
        const auto mask = make_mask(n, sparsity, rng);
        for (std::size_t i = 0; i <= j; ++i) {
            auto& b = tri.at(i, j);
            for (std::size_t k = 0; k < n; ++k) {
                S v = mask[k] ? b[k] : S(0);
                if (binary) v = v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
                b[k] = v;
            }
        }
    }
}

// Mean recurrent weight of the cell (the multiple gate weights are averaged
// for LSTM/GRU).
template <class S>
TensorT<S> average_recurrent_weight(const NetworkPlan& plan, const ParamsT<S>& params) {
    const auto& spec = plan.layers[1];
    const auto& w = params.layers[1].w;
    const std::size_t gates = detail::gate_count(spec.kind);
    TensorT<S> avg(w[gates].shape());
    for (std::size_t g = 0; g < gates; ++g) axpy(S(1), w[gates + g], avg);
    scale_inplace(avg, S(1) / S(gates));
    return avg;
}

// Build every backward weight for the plan/strategy. input_shape is the
// per-sample shape (C,H,W) or (features) for feedforward plans. params are
// consulted only when the strategy initializes backward weights from the
// forward ones.
template <class S>
FeedbackSetT<S> build_feedback(const NetworkPlan& plan, const EpStrategy& strategy, std::uint64_t seed,
                               const std::vector<std::size_t>& input_shape = {},
                               const ParamsT<S>* params = nullptr) {
    plan.validate();
    strategy.validate();
    FeedbackSetT<S> fb;
    fb.strategy = strategy;
    if (strategy.kind == EpKind::bp) return fb;

    Rng rng = Rng::stream(seed, /*tag=*/2);
    const S extra = strategy.feedback_scale > 0 ? (S)strategy.feedback_scale : S(1);

    if (plan.recurrent()) {
        const std::size_t T = plan.time_steps;
        const std::size_t H = plan.layers[1].out;
        const std::size_t V = plan.layers[2].out;
        const double bound = 1.0 / std::sqrt((double)V);
        if (strategy.kind == EpKind::dfa_original || strategy.kind == EpKind::dfa_modular) {
            for (std::size_t t = 0; t < T; ++t) {
                DenseFw<S> d;
                d.values = TensorT<S>({H, V});
                detail::fill_uniform(d.values, bound, rng);
                d.scale = extra;
                fb.dec_to_cell.push_back(std::move(d));
            }
            for (std::size_t t = 0; t < T; ++t) {
                DenseFw<S> d;
                d.values = TensorT<S>({H, V});
                detail::fill_uniform(d.values, bound, rng);
                d.scale = extra;
                fb.dec_to_emb.push_back(std::move(d));
            }
            return fb;
        }
        if (strategy.kind != EpKind::dfa_rnn_triangular)
            throw std::invalid_argument("build_feedback: strategy not applicable to a recurrent plan");

        // per-step decoder-module backward weight S^fc
        Rng mask_rng = Rng::stream(seed, /*tag=*/4);
        for (std::size_t t = 0; t < T; ++t) {
            TensorT<S> d({H, V});
            if (strategy.bw_init) {
                if (!params) throw std::invalid_argument("build_feedback: bw_init needs params");
                d = transpose(params->layers[2].w[0]);
            } else {
                detail::fill_uniform(d, bound, rng);
            }
            DenseFw<S> s = sparsify_binarize(d, make_mask(d.numel(), strategy.sparsity, mask_rng), strategy.binary);
            // binary taps are unit magnitude; normalize by the nonzero fan-in
            const double fan = (double)V * std::max(1.0 - strategy.sparsity, 1e-6);
            s.scale = extra * (strategy.binary ? (S)(1.0 / std::sqrt(fan)) : S(1));
            fb.dec_to_cell.push_back(std::move(s));
        }
        // triangular S^rnn
        TensorT<S> base;
        const TensorT<S>* base_ptr = nullptr;
        if (strategy.bw_init) {
            base = average_recurrent_weight(plan, *params);
            base_ptr = &base;
        }
        TriangularFw<S> tri = build_triangular_bw<S>(H, T, seed, strategy.literal_exponent, base_ptr);
        sparsify_binarize_triangular(tri, strategy.sparsity, strategy.binary, mask_rng);
        const double tri_fan = (double)H * std::max(1.0 - strategy.sparsity, 1e-6);
        tri.scale = extra * (strategy.binary ? (S)(1.0 / std::sqrt(tri_fan)) : S(1));
        fb.cell_to_emb = std::move(tri);
        return fb;
    }

    // feedforward plans
    if (input_shape.empty()) throw std::invalid_argument("build_feedback: feedforward plans need input_shape");
    const auto dims = layer_dims(plan, input_shape);
    const std::size_t L = plan.layers.size();
    fb.per_layer.resize(L);

    const bool conv_kind = strategy.kind == EpKind::dfa_conv || strategy.kind == EpKind::dfa_groupconv;
    const bool use_shuffle = strategy.kind == EpKind::dfa_groupconv;
    const int G = strategy.kind == EpKind::dfa_conv ? 1 : strategy.groups;

    for (std::size_t d = 0; d + 1 < L; ++d) {
        std::size_t src_layer;
        if (strategy.kind == EpKind::dfa_original) {
            src_layer = L - 1;
        } else {
            const std::size_t sm = detail::source_module_of(plan, d);
            src_layer = detail::source_layer_of_module(plan, sm);
        }
        const bool conv_path = conv_kind && plan.layers[d].kind == LayerKind::conv &&
                               plan.layers[src_layer].kind == LayerKind::conv;
        if (conv_path) {
            const std::size_t cd = dims[d].ch, cs = dims[src_layer].ch;
            if (cd % G != 0 || cs % G != 0)
                throw std::invalid_argument("build_feedback: channels not divisible by groups");
            ConvPairFw<S> cp;
            cp.groups = G;
            cp.shuffle = use_shuffle && G > 1;
            cp.dilation = compute_dilation(plan, src_layer, d);
            const int rf = composed_receptive_field(plan, src_layer, d);
            const int k = backward_kernel_size(rf, cp.dilation);
            cp.d1 = TensorT<S>({cd, cd / G, (std::size_t)k, (std::size_t)k});
            cp.d2 = TensorT<S>({cd, cs / G, 1, 1});
            double s1, s2;
            if (strategy.binary) {
                detail::fill_sign(cp.d1, rng);
                detail::fill_sign(cp.d2, rng);
                s1 = 1.0 / std::sqrt((double)(cd / G) * k * k);
                s2 = 1.0 / std::sqrt((double)(cs / G));
            } else {
                detail::fill_uniform(cp.d1, 1.0 / std::sqrt((double)(cd / G) * k * k), rng);
                detail::fill_uniform(cp.d2, 1.0 / std::sqrt((double)(cs / G)), rng);
                s1 = s2 = 1.0;
            }
            cp.scale = (S)(s1 * s2) * extra;
            fb.per_layer[d] = FeedbackVariant<S>(std::move(cp));
        } else {
            DenseFw<S> dn;
            dn.values = TensorT<S>({dims[d].numel(), dims[src_layer].numel()});
            detail::fill_uniform(dn.values, 1.0 / std::sqrt((double)dims[src_layer].numel()), rng);
            dn.scale = extra;
            fb.per_layer[d] = FeedbackVariant<S>(std::move(dn));
        }
    }
    return fb;
}

// Backward weights derived from the freshly initialized forward weights
// (decoder transposed; cell blocks from the averaged recurrent weight).
template <class S>
FeedbackSetT<S> init_bw_from_forward(const NetworkPlan& plan, const ParamsT<S>& params, EpStrategy strategy,
                                     std::uint64_t seed) {
    strategy.bw_init = true;
    return build_feedback(plan, strategy, seed, {}, &params);
}

// ---- feedback application -----------------------------------------------------------------

// Dense projection of a (B, n_src) source error to the destination layout.
template <class S>
TensorT<S> apply_dense_fw(const DenseFw<S>& fw, const TensorT<S>& src_rows) {
    TensorT<S> out = matmul_nt(src_rows, fw.values);
    if (fw.scale != S(1)) scale_inplace(out, fw.scale);
    return out;
}

// Grouped 1x1 projection, optional channel shuffle, nearest-neighbour resize
// to the destination field, then the grouped dilated kernel.
template <class S>
TensorT<S> apply_conv_pair(const ConvPairFw<S>& fw, const TensorT<S>& src, std::size_t dest_h, std::size_t dest_w) {
    ConvSpec s2;
    s2.kernel = 1;
    s2.groups = fw.groups;
    s2.in_channels = (int)src.dim(1);
    s2.out_channels = (int)fw.d2.dim(0);
    TensorT<S> t = conv2d(src, fw.d2, s2);
    if (fw.shuffle) t = channel_shuffle(t, fw.groups);
    t = resize_nearest(t, dest_h, dest_w);
    ConvSpec s1;
    s1.kernel = (int)fw.d1.dim(2);
    s1.dilation = fw.dilation;
    s1.padding = ConvSpec::same_padding(s1.kernel, s1.dilation);
    s1.groups = fw.groups;
    s1.in_channels = (int)t.dim(1);
    s1.out_channels = (int)fw.d1.dim(0);
    TensorT<S> out = conv2d(t, fw.d1, s1);
    if (fw.scale != S(1)) scale_inplace(out, fw.scale);
    return out;
}

namespace detail {

// Shared walk for the feedforward DFA strategies: compute the last layer's
// error from the loss, then fill every destination from its module source.
template <class S>
BackwardResultT<S> dfa_backward_ff(const NetworkPlan& plan, const ParamsT<S>& params, const FeedbackSetT<S>& fb,
                                   const ActivationTapeT<S>& tape, const TensorT<S>& output_error) {
    const std::size_t L = plan.layers.size();
    if (tape.pre.size() != L || tape.pre.back().empty()) throw std::invalid_argument("dfa_backward: missing tape");
    BackwardResultT<S> r;
    r.errors.resize(L);
    for (auto& e : r.errors) e.resize(1);

    r.errors[L - 1][0] =
        hadamard(output_error.reshaped(tape.pre[L - 1][0].shape()),
                 apply_activation(tape.pre[L - 1][0], plan.layers[L - 1].act, true));

    for (std::size_t ii = L - 1; ii-- > 0;) {
        std::size_t src_layer;
        if (fb.strategy.kind == EpKind::dfa_original) {
            src_layer = L - 1;
        } else {
            const std::size_t sm = source_module_of(plan, ii);
            src_layer = source_layer_of_module(plan, sm);
        }
        const TensorT<S>& src = r.errors[src_layer][0];
        const auto& var = fb.per_layer[ii];
        if (!var) throw std::invalid_argument("dfa_backward: missing feedback for layer");
        TensorT<S> projected;
        if (const auto* dn = std::get_if<DenseFw<S>>(&*var)) {
            const std::size_t b = src.dim(0);
            projected = apply_dense_fw(*dn, src.reshaped({b, src.numel() / b}));
            projected = projected.reshaped(tape.pre[ii][0].shape());
        } else if (const auto* cp = std::get_if<ConvPairFw<S>>(&*var)) {
            const auto& dest = tape.pre[ii][0];
            projected = apply_conv_pair(*cp, src, dest.dim(2), dest.dim(3));
        } else {
            throw std::invalid_argument("dfa_backward: bad feedback encoding");
        }
        r.errors[ii][0] = hadamard(projected, apply_activation(tape.pre[ii][0], plan.layers[ii].act, true));
    }
    r.grads = grads_from_errors(plan, params, tape, r.errors);
    return r;
}

} // namespace detail

// Original DFA (every destination projected straight from the loss error).
template <class S>
BackwardResultT<S> dfa_backward_original(const NetworkPlan& plan, const ParamsT<S>& params,
                                         const FeedbackSetT<S>& fb, const ActivationTapeT<S>& tape,
                                         const TensorT<S>& output_error) {
    if (plan.recurrent()) {
        // Fully-connected backward view of the unrolled network: the final
        // step's output error is projected to every cell and embedding step
        // through one (H*T x V) weight per destination layer, future steps
        // included. The decoder itself keeps its per-step loss errors.
        const std::size_t T = tape.steps, B = tape.tokens.batch;
        const auto& dec = plan.layers[2];
        BackwardResultT<S> r;
        r.errors.assign(3, std::vector<TensorT<S>>(T));
        r.grads = params.zeros_like();
        const std::size_t V = dec.out, H = plan.layers[1].out;
        for (std::size_t t = 0; t < T; ++t) {
            TensorT<S> eout({B, V});
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t v = 0; v < V; ++v) eout(b, v) = output_error[(t * B + b) * V + v];
            TensorT<S> efc = hadamard(eout, apply_activation(tape.pre[2][t], dec.act, true));
            r.errors[2][t] = efc;
            axpy(S(1), matmul_tn(efc, tape.post[1][t]), r.grads.layers[2].w[0]);
        }
        const TensorT<S>& efinal = r.errors[2][T - 1];
        for (std::size_t t = 0; t < T; ++t) {
            TensorT<S> dh = apply_dense_fw(fb.dec_to_cell[t], efinal);
            auto cb = detail::cell_backward_step(plan, params, tape, t, dh, TensorT<S>(), r.grads);
            r.errors[1][t] = cb.stacked;

            TensorT<S> demb = hadamard(apply_dense_fw(fb.dec_to_emb[t], efinal),
                                       apply_activation(tape.pre[0][t], plan.layers[0].act, true));
            r.errors[0][t] = demb;
            auto& gemb = r.grads.layers[0].w[0];
            for (std::size_t b = 0; b < B; ++b) {
                const int id = tape.tokens.at(t, b);
                for (std::size_t j = 0; j < H; ++j) gemb(j, id) += demb(b, j);
            }
        }
        return r;
    }
    return detail::dfa_backward_ff(plan, params, fb, tape, output_error);
}

// Modular DFA: direct propagation inside each module, one hop per boundary.
template <class S>
BackwardResultT<S> dfa_backward_modular(const NetworkPlan& plan, const ParamsT<S>& params,
                                        const FeedbackSetT<S>& fb, const ActivationTapeT<S>& tape,
                                        const TensorT<S>& output_error) {
    return detail::dfa_backward_ff(plan, params, fb, tape, output_error);
}

// Convolutional / group-convolutional DFA (Eq. 7 path per destination).
template <class S>
BackwardResultT<S> dfa_backward_conv(const NetworkPlan& plan, const ParamsT<S>& params, const FeedbackSetT<S>& fb,
                                     const ActivationTapeT<S>& tape, const TensorT<S>& output_error) {
    return detail::dfa_backward_ff(plan, params, fb, tape, output_error);
}

// Block-triangular product: out_i = sum_{j >= i} B_ij * in_j for every step at
// once (inputs and outputs are per-step (B, H) rows).
template <class S>
std::vector<TensorT<S>> triangular_apply(const TriangularFw<S>& tri, const std::vector<TensorT<S>>& in) {
    if (in.size() != tri.steps) throw std::invalid_argument("triangular_apply: step count mismatch");
    std::vector<TensorT<S>> out(tri.steps);
    for (std::size_t i = 0; i < tri.steps; ++i) {
        TensorT<S> acc({in[i].dim(0), tri.block});
        for (std::size_t j = i; j < tri.steps; ++j) axpy(S(1), matmul_nt(in[j], tri.at(i, j)), acc);
        if (tri.scale != S(1)) scale_inplace(acc, tri.scale);
        out[i] = std::move(acc);
    }
    return out;
}

// Triangular RNN DFA: decoder errors projected per step through S^fc; the
// stacked cell errors projected through the block-triangular S^rnn to every
// embedding-step error in one multiplication.
template <class S>
BackwardResultT<S> dfa_backward_rnn(const NetworkPlan& plan, const ParamsT<S>& params, const FeedbackSetT<S>& fb,
                                    const ActivationTapeT<S>& tape, const TensorT<S>& output_error) {
    if (!plan.recurrent()) throw std::invalid_argument("dfa_backward_rnn: plan is not recurrent");
    if (!fb.cell_to_emb) throw std::invalid_argument("dfa_backward_rnn: missing triangular feedback");
    const std::size_t T = tape.steps, B = tape.tokens.batch;
    const auto& dec = plan.layers[2];
    const std::size_t V = dec.out, H = plan.layers[1].out;

    BackwardResultT<S> r;
    r.errors.assign(3, std::vector<TensorT<S>>(T));
    r.grads = params.zeros_like();

    for (std::size_t t = 0; t < T; ++t) {
        TensorT<S> eout({B, V});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t v = 0; v < V; ++v) eout(b, v) = output_error[(t * B + b) * V + v];
        TensorT<S> efc = hadamard(eout, apply_activation(tape.pre[2][t], dec.act, true));
        r.errors[2][t] = efc;
        axpy(S(1), matmul_tn(efc, tape.post[1][t]), r.grads.layers[2].w[0]);

        TensorT<S> dh = apply_dense_fw(fb.dec_to_cell[t], efc);
        auto cb = detail::cell_backward_step(plan, params, tape, t, dh, TensorT<S>(), r.grads);
        r.errors[1][t] = cb.stacked;
    }

    // e_emb = (S^rnn e_rnn) * f'(p_rnn), all time steps at once; zero blocks
    // below the diagonal are never touched.
    const auto stacked = triangular_apply(*fb.cell_to_emb, r.errors[1]);
    for (std::size_t i = 0; i < T; ++i) {
        TensorT<S> demb = hadamard(stacked[i], cell_output_derivative(plan, tape, i));
        r.errors[0][i] = demb;
        auto& gemb = r.grads.layers[0].w[0];
        for (std::size_t b = 0; b < B; ++b) {
            const int id = tape.tokens.at(i, b);
            for (std::size_t j = 0; j < H; ++j) gemb(j, id) += demb(b, j);
        }
    }
    return r;
}

// Strategy dispatch used by the training loop.
template <class S>
BackwardResultT<S> ep_backward(const NetworkPlan& plan, const ParamsT<S>& params, const FeedbackSetT<S>& fb,
                               const ActivationTapeT<S>& tape, const TensorT<S>& output_error) {
    switch (fb.strategy.kind) {
        case EpKind::bp: return bp_backward(plan, params, tape, output_error);
        case EpKind::dfa_original: return dfa_backward_original(plan, params, fb, tape, output_error);
        case EpKind::dfa_modular: return dfa_backward_modular(plan, params, fb, tape, output_error);
        case EpKind::dfa_conv:
        case EpKind::dfa_groupconv: return dfa_backward_conv(plan, params, fb, tape, output_error);
        case EpKind::dfa_rnn_triangular: return dfa_backward_rnn(plan, params, fb, tape, output_error);
    }
    throw std::invalid_argument("ep_backward: bad strategy");
}

// ---- alignment -----------------------------------------------------------------------------

// Angle in degrees between two same-sized weight sets (flattened).
template <class S>
double measure_alignment(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("measure_alignment: size mismatch");
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("measure_alignment: zero-norm input");
    double c = dot_flat(a, b) / (na * nb);
    c = std::max(-1.0, std::min(1.0, c));
    return std::acos(c) * 180.0 / 3.14159265358979323846;
}

// Per-destination angle between the dense feedback and the transposed product
// of the forward weights it shortcuts (all-dense plans).
template <class S>
std::vector<double> alignment_profile(const NetworkPlan& plan, const ParamsT<S>& params, const FeedbackSetT<S>& fb) {
    std::vector<double> out;
    if (plan.recurrent() || fb.per_layer.empty()) return out;
    const std::size_t L = plan.layers.size();
    for (std::size_t d = 0; d + 1 < L; ++d) {
        if (plan.layers[d].kind != LayerKind::dense) return {};
        const auto* dn = fb.per_layer[d] ? std::get_if<DenseFw<S>>(&*fb.per_layer[d]) : nullptr;
        if (!dn) return {};
        std::size_t src_layer = fb.strategy.kind == EpKind::dfa_original
                                    ? L - 1
                                    : detail::source_layer_of_module(plan, detail::source_module_of(plan, d));
        TensorT<S> prod = params.layers[src_layer].w[0];
        for (std::size_t l = src_layer; l-- > d + 1;) prod = matmul(prod, params.layers[l].w[0]);
        out.push_back(measure_alignment(dn->values, transpose(prod)));
    }
    return out;
}

} // namespace dfa
