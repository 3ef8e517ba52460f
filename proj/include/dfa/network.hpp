#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dfa/conv.hpp"
#include "dfa/rng.hpp"
#include "dfa/tensor.hpp"

namespace dfa {

enum class LayerKind { dense, conv, vanilla_rnn_cell, lstm_cell, gru_cell, embedding };

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    int in = 0;   // dense/cell input features; embedding vocab size
    int out = 0;  // dense/cell output features; embedding dimension
    ConvSpec conv{};
    Activation act{Act::identity};
    int residual_from = -1;  // earlier layer whose post-activation is added to this pre-activation

    std::size_t out_numel(std::size_t in_h, std::size_t in_w) const {
        if (kind == LayerKind::conv)
            return static_cast<std::size_t>(conv.out_channels) * conv.out_dim((int)in_h) * conv.out_dim((int)in_w);
        return static_cast<std::size_t>(out);
    }
};

// Ordered layer list plus the module partition used by modular / convolutional
// DFA. module_starts holds the first layer index of modules 2..M; module 1
// starts at 0. Recurrent plans are the fixed three-layer form
// [embedding, cell, decoder] with two modules.
struct NetworkPlan {
    std::vector<LayerSpec> layers;
    std::vector<std::size_t> module_starts;
    int time_steps = 1;

    bool recurrent() const {
        for (const auto& l : layers)
            if (l.kind == LayerKind::vanilla_rnn_cell || l.kind == LayerKind::lstm_cell || l.kind == LayerKind::gru_cell)
                return true;
        return false;
    }

    std::size_t module_count() const { return module_starts.size() + 1; }

    // [begin, end) per module
    std::vector<std::pair<std::size_t, std::size_t>> modules() const {
        std::vector<std::pair<std::size_t, std::size_t>> m;
        std::size_t begin = 0;
        for (std::size_t s : module_starts) {
            m.emplace_back(begin, s);
            begin = s;
        }
        m.emplace_back(begin, layers.size());
        return m;
    }

    std::size_t module_of(std::size_t layer) const {
        std::size_t mi = 0;
        for (std::size_t s : module_starts) {
            if (layer < s) break;
            ++mi;
        }
        return mi;
    }

    void validate() const {
        if (layers.empty()) throw std::invalid_argument("plan: no layers");
        std::size_t prev = 0;
        for (std::size_t s : module_starts) {
            if (s <= prev || s >= layers.size()) throw std::invalid_argument("plan: bad module boundary");
            prev = s;
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.residual_from >= 0) {
                if (static_cast<std::size_t>(l.residual_from) >= i)
                    throw std::invalid_argument("plan: residual source must precede layer");
                if (module_of(l.residual_from) != module_of(i))
                    throw std::invalid_argument("plan: residual skip crosses a module boundary");
            }
        }
        if (recurrent()) {
            if (layers.size() != 3 || layers[0].kind != LayerKind::embedding || layers[2].kind != LayerKind::dense ||
                module_starts != std::vector<std::size_t>{2})
                throw std::invalid_argument("plan: recurrent plans are [embedding, cell | decoder] with two modules");
            if (time_steps < 1) throw std::invalid_argument("plan: time_steps must be >= 1");
        }
    }
};

// ---- parameters -------------------------------------------------------------

// Per-layer weight tensors. Conventions:
//   dense      {W (out,in)}
//   conv       {W (oc, ic/g, k, k)}
//   embedding  {W (dim, vocab)}
//   vanilla    {Wx (H,in), Wh (H,H)}
//   lstm       {Wx_i,Wx_f,Wx_g,Wx_o (H,in), Wh_i,Wh_f,Wh_g,Wh_o (H,H)}
//   gru        {Wx_z,Wx_r,Wx_n (H,in), Wh_z,Wh_r,Wh_n (H,H)}
template <class S>
struct LayerParamsT {
    std::vector<TensorT<S>> w;
};

template <class S>
struct ParamsT {
    std::vector<LayerParamsT<S>> layers;

    template <class Fn>
    void for_each(Fn&& fn) {
        for (auto& lp : layers)
            for (auto& t : lp.w) fn(t);
    }
    template <class Fn>
    void for_each(Fn&& fn) const {
        for (const auto& lp : layers)
            for (const auto& t : lp.w) fn(t);
    }

    ParamsT zeros_like() const {
        ParamsT z;
        z.layers.resize(layers.size());
        for (std::size_t i = 0; i < layers.size(); ++i)
            for (const auto& t : layers[i].w) z.layers[i].w.emplace_back(t.shape());
        return z;
    }

    std::size_t tensor_count() const {
        std::size_t n = 0;
        for (const auto& lp : layers) n += lp.w.size();
        return n;
    }
};

using Params = ParamsT<double>;
using Params32 = ParamsT<float>;

namespace detail {
inline std::size_t gate_count(LayerKind k) {
    switch (k) {
        case LayerKind::vanilla_rnn_cell: return 1;
        case LayerKind::lstm_cell: return 4;
        case LayerKind::gru_cell: return 3;
        default: return 0;
    }
}
} // namespace detail

template <class S>
ParamsT<S> init_params(const NetworkPlan& plan, std::uint64_t seed) {
    plan.validate();
    Rng rng = Rng::stream(seed, /*tag=*/1);
    ParamsT<S> p;
    p.layers.resize(plan.layers.size());
    auto fill = [&](TensorT<S>& t, double bound) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(-bound, bound));
    };
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
        const auto& l = plan.layers[i];
        auto& lp = p.layers[i];
        switch (l.kind) {
            case LayerKind::dense: {
                lp.w.emplace_back(std::vector<std::size_t>{(std::size_t)l.out, (std::size_t)l.in});
                fill(lp.w[0], 1.0 / std::sqrt((double)l.in));
                break;
            }
            case LayerKind::conv: {
                const auto& c = l.conv;
                lp.w.emplace_back(std::vector<std::size_t>{(std::size_t)c.out_channels,
                                                           (std::size_t)(c.in_channels / c.groups),
                                                           (std::size_t)c.kernel, (std::size_t)c.kernel});
                fill(lp.w[0], 1.0 / std::sqrt((double)(c.in_channels / c.groups) * c.kernel * c.kernel));
                break;
            }
            case LayerKind::embedding: {
                lp.w.emplace_back(std::vector<std::size_t>{(std::size_t)l.out, (std::size_t)l.in});
                fill(lp.w[0], 0.1);
                break;
            }
            default: {
                const std::size_t gates = detail::gate_count(l.kind);
                for (std::size_t g = 0; g < gates; ++g) {
                    lp.w.emplace_back(std::vector<std::size_t>{(std::size_t)l.out, (std::size_t)l.in});
                    fill(lp.w.back(), 1.0 / std::sqrt((double)l.in));
                }
                for (std::size_t g = 0; g < gates; ++g) {
                    lp.w.emplace_back(std::vector<std::size_t>{(std::size_t)l.out, (std::size_t)l.out});
                    fill(lp.w.back(), 1.0 / std::sqrt((double)l.out));
                }
                break;
            }
        }
    }
    return p;
}

// ---- forward pass ------------------------------------------------------------

// Token ids for recurrent plans, step-major: ids[t * batch + b].
struct TokenBatch {
    std::size_t steps = 0;
    std::size_t batch = 0;
    std::vector<int> ids;

    int at(std::size_t t, std::size_t b) const { return ids[t * batch + b]; }
};

// Every pre-activation p and post-activation o, per layer per step (one step
// for feedforward nets). Populated exactly once per forward pass.
template <class S>
struct ActivationTapeT {
    std::vector<std::vector<TensorT<S>>> pre;
    std::vector<std::vector<TensorT<S>>> post;
    // cell internals per step: lstm {i,f,g,o,c,tanh_c}, gru {z,r,n,hh}
    std::vector<std::vector<std::vector<TensorT<S>>>> cell;
    TensorT<S> input;     // feedforward network input
    TokenBatch tokens;    // recurrent network input
    std::size_t steps = 1;
};

template <class S>
struct ForwardResultT {
    TensorT<S> output;
    ActivationTapeT<S> tape;
};

namespace detail {

template <class S>
TensorT<S> as_rows(const TensorT<S>& x) {
    if (x.rank() == 2) return x;
    std::size_t n = x.dim(0), rest = x.numel() / n;
    return x.reshaped({n, rest});
}

// x (B, in) * W^T with W (out, in) -> (B, out)
template <class S>
TensorT<S> dense_forward(const TensorT<S>& x, const TensorT<S>& w) {
    if (x.dim(1) != w.dim(1)) throw std::invalid_argument("dense: feature count mismatch");
    return matmul_nt(x, w);
}

} // namespace detail

// Feedforward execution (dense / conv plans).
template <class S>
ForwardResultT<S> forward(const NetworkPlan& plan, const ParamsT<S>& params, const TensorT<S>& input) {
    plan.validate();
    if (plan.recurrent()) throw std::invalid_argument("forward: recurrent plan needs a TokenBatch");
    ForwardResultT<S> r;
    auto& tape = r.tape;
    const std::size_t L = plan.layers.size();
    tape.pre.resize(L);
    tape.post.resize(L);
    tape.cell.resize(L);
    tape.input = input;
    tape.steps = 1;

    TensorT<S> cur = input;
    for (std::size_t i = 0; i < L; ++i) {
        const auto& l = plan.layers[i];
        TensorT<S> p;
        switch (l.kind) {
            case LayerKind::dense:
                p = detail::dense_forward(detail::as_rows(cur), params.layers[i].w[0]);
                break;
            case LayerKind::conv:
                p = conv2d(cur, params.layers[i].w[0], l.conv);
                break;
            default:
                throw std::invalid_argument("forward: layer kind not usable in a feedforward plan");
        }
        if (l.residual_from >= 0) {
            const auto& skip = tape.post[l.residual_from][0];
            if (!skip.same_shape(p)) throw std::invalid_argument("forward: residual shape mismatch");
            axpy(S(1), skip, p);
        }
        tape.pre[i].push_back(p);
        tape.post[i].push_back(apply_activation(p, l.act));
        cur = tape.post[i][0];
    }
    r.output = cur;
    return r;
}

// Recurrent execution: cells unrolled over T steps with shared weights.
template <class S>
ForwardResultT<S> forward(const NetworkPlan& plan, const ParamsT<S>& params, const TokenBatch& tokens) {
    plan.validate();
    if (!plan.recurrent()) throw std::invalid_argument("forward: plan is not recurrent");
    if (tokens.steps != static_cast<std::size_t>(plan.time_steps))
        throw std::invalid_argument("forward: token steps disagree with plan");
    const std::size_t T = tokens.steps, B = tokens.batch;
    const auto& emb = plan.layers[0];
    const auto& cellspec = plan.layers[1];
    const auto& dec = plan.layers[2];
    const std::size_t H = cellspec.out;
    const std::size_t V = dec.out;

    ForwardResultT<S> r;
    auto& tape = r.tape;
    tape.pre.assign(3, {});
    tape.post.assign(3, {});
    tape.cell.assign(3, {});
    tape.tokens = tokens;
    tape.steps = T;

    const auto& ew = params.layers[0].w[0]; // (H, vocab)
    TensorT<S> h_prev({B, H});
    TensorT<S> c_prev({B, H});
    r.output = TensorT<S>({T, B, V});

    for (std::size_t t = 0; t < T; ++t) {
        // embedding: one-hot matmul semantics (column gather)
        TensorT<S> ep({B, (std::size_t)emb.out});
        for (std::size_t b = 0; b < B; ++b) {
            const int id = tokens.at(t, b);
            if (id < 0 || id >= emb.in) throw std::invalid_argument("forward: token id out of range");
            for (int j = 0; j < emb.out; ++j) ep(b, j) = ew(j, id);
        }
        tape.pre[0].push_back(ep);
        tape.post[0].push_back(apply_activation(ep, emb.act));
        const TensorT<S>& x = tape.post[0].back();

        const auto& w = params.layers[1].w;
        TensorT<S> h;
        switch (cellspec.kind) {
            case LayerKind::vanilla_rnn_cell: {
                TensorT<S> p = matmul_nt(x, w[0]);
                axpy(S(1), matmul_nt(h_prev, w[1]), p);
                tape.pre[1].push_back(p);
                h = apply_activation(p, cellspec.act);
                break;
            }
            case LayerKind::lstm_cell: {
                auto gate = [&](std::size_t wx, std::size_t wh) {
                    TensorT<S> a = matmul_nt(x, w[wx]);
                    axpy(S(1), matmul_nt(h_prev, w[wh]), a);
                    return a;
                };
                Activation sig{Act::sigmoid}, th{Act::tanh};
                TensorT<S> gi = apply_activation(gate(0, 4), sig);
                TensorT<S> gf = apply_activation(gate(1, 5), sig);
                TensorT<S> gg = apply_activation(gate(2, 6), th);
                TensorT<S> go = apply_activation(gate(3, 7), sig);
                TensorT<S> c({B, H});
                for (std::size_t k = 0; k < c.numel(); ++k) c[k] = gf[k] * c_prev[k] + gi[k] * gg[k];
                TensorT<S> tc = apply_activation(c, th);
                h = hadamard(go, tc);
                tape.pre[1].push_back(c);
                tape.cell[1].push_back({gi, gf, gg, go, c, tc});
                c_prev = c;
                break;
            }
            case LayerKind::gru_cell: {
                Activation sig{Act::sigmoid}, th{Act::tanh};
                TensorT<S> az = matmul_nt(x, w[0]);
                axpy(S(1), matmul_nt(h_prev, w[3]), az);
                TensorT<S> ar = matmul_nt(x, w[1]);
                axpy(S(1), matmul_nt(h_prev, w[4]), ar);
                TensorT<S> z = apply_activation(az, sig);
                TensorT<S> rr = apply_activation(ar, sig);
                TensorT<S> hh = matmul_nt(h_prev, w[5]);
                TensorT<S> an = matmul_nt(x, w[2]);
                for (std::size_t k = 0; k < an.numel(); ++k) an[k] += rr[k] * hh[k];
                TensorT<S> n = apply_activation(an, th);
                h = TensorT<S>({B, H});
                for (std::size_t k = 0; k < h.numel(); ++k) h[k] = (S(1) - z[k]) * n[k] + z[k] * h_prev[k];
                tape.pre[1].push_back(an);
                tape.cell[1].push_back({z, rr, n, hh});
                break;
            }
            default:
                throw std::invalid_argument("forward: bad cell kind");
        }
        tape.post[1].push_back(h);

        TensorT<S> logits = detail::dense_forward(h, params.layers[2].w[0]);
        tape.pre[2].push_back(logits);
        tape.post[2].push_back(apply_activation(logits, dec.act));
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t v = 0; v < V; ++v) r.output[(t * B + b) * V + v] = tape.post[2].back()(b, v);

        h_prev = h;
    }
    return r;
}

// Derivative of the cell output nonlinearity at step t, used by the direct
// feedback path (vanilla: tanh'(p); lstm: o * tanh'(c); gru: z * tanh'(a_n)).
template <class S>
TensorT<S> cell_output_derivative(const NetworkPlan& plan, const ActivationTapeT<S>& tape, std::size_t t) {
    const auto& cellspec = plan.layers[1];
    switch (cellspec.kind) {
        case LayerKind::vanilla_rnn_cell:
            return apply_activation(tape.pre[1][t], cellspec.act, true);
        case LayerKind::lstm_cell: {
            const auto& ex = tape.cell[1][t];
            const TensorT<S>& go = ex[3];
            const TensorT<S>& tc = ex[5];
            TensorT<S> d(go.shape());
            for (std::size_t k = 0; k < d.numel(); ++k) d[k] = go[k] * (S(1) - tc[k] * tc[k]);
            return d;
        }
        case LayerKind::gru_cell: {
            const auto& ex = tape.cell[1][t];
            const TensorT<S>& z = ex[0];
            const TensorT<S>& n = ex[2];
            TensorT<S> d(z.shape());
            for (std::size_t k = 0; k < d.numel(); ++k) d[k] = z[k] * (S(1) - n[k] * n[k]);
            return d;
        }
        default:
            throw std::invalid_argument("cell_output_derivative: not a cell");
    }
}

// ---- loss ---------------------------------------------------------------------

template <class S>
struct LossResultT {
    double loss = 0.0;
    TensorT<S> error;  // dL/dlogits, averaged over rows
};

// Softmax cross-entropy; e_L = softmax(output) - onehot(target), averaged over
// the batch (and time steps for recurrent outputs).
template <class S>
LossResultT<S> loss_and_output_error(const TensorT<S>& output, const std::vector<int>& targets) {
    std::size_t rows, cols;
    if (output.rank() == 2) {
        rows = output.dim(0);
        cols = output.dim(1);
    } else if (output.rank() == 3) {
        rows = output.dim(0) * output.dim(1);
        cols = output.dim(2);
    } else {
        throw std::invalid_argument("loss: expects rank-2 or rank-3 logits");
    }
    if (targets.size() != rows) throw std::invalid_argument("loss: target count mismatch");

    LossResultT<S> r;
    r.error = TensorT<S>(output.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const int label = targets[i];
        if (label < 0 || static_cast<std::size_t>(label) >= cols) throw std::invalid_argument("loss: label out of range");
        const S* row = output.data() + i * cols;
        S* erow = r.error.data() + i * cols;
        S mx = row[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp((double)(row[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) {
            const double sm = std::exp((double)(row[c] - mx)) / z;
            erow[c] = static_cast<S>((sm - (c == (std::size_t)label ? 1.0 : 0.0)) / (double)rows);
        }
        total += -std::log(std::exp((double)(row[label] - mx)) / z);
    }
    r.loss = total / (double)rows;
    return r;
}

// ---- unrolled task graph ---------------------------------------------------------

// Explicit per-timestep layer graph of a recurrent plan; consumed by the
// error-propagation strategies and the latency model.
struct UnrolledGraph {
    struct Node {
        std::size_t layer;
        std::size_t step;
    };
    std::vector<Node> nodes;
    std::vector<std::pair<std::size_t, std::size_t>> edges;  // node index pairs
};

inline UnrolledGraph unfold_rnn(const NetworkPlan& plan, int T) {
    plan.validate();
    if (!plan.recurrent()) throw std::invalid_argument("unfold_rnn: plan is not recurrent");
    if (T < 1) throw std::invalid_argument("unfold_rnn: T must be >= 1");
    UnrolledGraph g;
    const std::size_t L = plan.layers.size();
    auto idx = [&](std::size_t layer, std::size_t t) { return t * L + layer; };
    for (std::size_t t = 0; t < static_cast<std::size_t>(T); ++t)
        for (std::size_t l = 0; l < L; ++l) g.nodes.push_back({l, t});
    for (std::size_t t = 0; t < static_cast<std::size_t>(T); ++t) {
        g.edges.emplace_back(idx(0, t), idx(1, t));  // embedding -> cell
        g.edges.emplace_back(idx(1, t), idx(2, t));  // cell -> decoder
        if (t + 1 < static_cast<std::size_t>(T)) g.edges.emplace_back(idx(1, t), idx(1, t + 1));
    }
    return g;
}

// ---- canned plans -----------------------------------------------------------------

inline LayerSpec conv_layer(int in_ch, int out_ch, int kernel, int stride, Act act, int residual_from = -1) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.conv.kernel = kernel;
    l.conv.stride = stride;
    l.conv.padding = kernel / 2;
    l.conv.in_channels = in_ch;
    l.conv.out_channels = out_ch;
    l.act = Activation{act};
    l.residual_from = residual_from;
    return l;
}

inline LayerSpec dense_layer(int in, int out, Act act) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.in = in;
    l.out = out;
    l.act = Activation{act};
    return l;
}

inline NetworkPlan mlp_plan(const std::vector<int>& dims, Act hidden_act = Act::tanh) {
    NetworkPlan p;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        p.layers.push_back(dense_layer(dims[i], dims[i + 1], i + 2 == dims.size() ? Act::identity : hidden_act));
    return p;
}

// Six sequential convolutions (stride-2 downsampling) and a two-layer head.
inline NetworkPlan mini_vgg_plan(int base = 8, Act act = Act::tanh) {
    NetworkPlan p;
    p.layers = {
        conv_layer(3, base, 3, 1, act),
        conv_layer(base, base, 3, 2, act),
        conv_layer(base, 2 * base, 3, 1, act),
        conv_layer(2 * base, 2 * base, 3, 2, act),
        conv_layer(2 * base, 4 * base, 3, 1, act),
        conv_layer(4 * base, 4 * base, 3, 2, act),
        dense_layer(4 * base * 4 * 4, 64, act),
        dense_layer(64, 10, Act::identity),
    };
    p.module_starts = {2, 4, 6};
    return p;
}

// Same depth with additive skips inside each module.
inline NetworkPlan mini_res_plan(int base = 8, Act act = Act::tanh) {
    NetworkPlan p;
    p.layers = {
        conv_layer(3, base, 3, 1, act),
        conv_layer(base, base, 3, 1, act, /*residual_from=*/0),
        conv_layer(base, 2 * base, 3, 2, act),
        conv_layer(2 * base, 2 * base, 3, 1, act, /*residual_from=*/2),
        conv_layer(2 * base, 4 * base, 3, 2, act),
        conv_layer(4 * base, 4 * base, 3, 1, act, /*residual_from=*/4),
        dense_layer(4 * base * 8 * 8, 64, act),
        dense_layer(64, 10, Act::identity),
    };
    p.module_starts = {2, 4, 6};
    return p;
}

inline NetworkPlan rnn_plan(int vocab, int hidden, int T, LayerKind cell = LayerKind::vanilla_rnn_cell) {
    NetworkPlan p;
    LayerSpec emb;
    emb.kind = LayerKind::embedding;
    emb.in = vocab;
    emb.out = hidden;
    emb.act = Activation{Act::identity};
    LayerSpec c;
    c.kind = cell;
    c.in = hidden;
    c.out = hidden;
    c.act = Activation{Act::tanh};
    p.layers = {emb, c, dense_layer(hidden, vocab, Act::identity)};
    p.module_starts = {2};
    p.time_steps = T;
    return p;
}

} // namespace dfa
