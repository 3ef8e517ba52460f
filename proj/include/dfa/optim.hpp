#pragma once

#include <stdexcept>
#include <vector>

#include "dfa/network.hpp"
#include "dfa/rng.hpp"

namespace dfa {

namespace detail {

template <class S>
std::vector<TensorT<S>> zero_buffers(const ParamsT<S>& params) {
    std::vector<TensorT<S>> v;
    params.for_each([&](const TensorT<S>& t) { v.emplace_back(t.shape()); });
    return v;
}

template <class S, class Fn>
void zip_params(ParamsT<S>& params, const ParamsT<S>& grads, Fn&& fn) {
    if (params.tensor_count() != grads.tensor_count()) throw std::invalid_argument("optimizer: grad layout mismatch");
    std::size_t idx = 0;
    for (std::size_t l = 0; l < params.layers.size(); ++l)
        for (std::size_t t = 0; t < params.layers[l].w.size(); ++t) fn(idx++, params.layers[l].w[t], grads.layers[l].w[t]);
}

} // namespace detail

// ---- classical momentum ---------------------------------------------------------

template <class S>
struct MomentumStateT {
    S lr = S(0.01);
    S momentum = S(0.9);
    std::vector<TensorT<S>> v;

    static MomentumStateT init(const ParamsT<S>& params, S lr, S momentum) {
        MomentumStateT s;
        s.lr = lr;
        s.momentum = momentum;
        s.v = detail::zero_buffers(params);
        return s;
    }
};

template <class S>
void momentum_step(MomentumStateT<S>& st, ParamsT<S>& params, const ParamsT<S>& grads) {
    detail::zip_params(params, grads, [&](std::size_t i, TensorT<S>& w, const TensorT<S>& g) {
        auto& v = st.v[i];
        for (std::size_t k = 0; k < w.numel(); ++k) {
            v[k] = st.momentum * v[k] + g[k];
            w[k] -= st.lr * v[k];
        }
    });
}

// ---- adam ------------------------------------------------------------------------

template <class S>
struct AdamStateT {
    S lr = S(0.001);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    long step = 0;
    std::vector<TensorT<S>> m, v;

    static AdamStateT init(const ParamsT<S>& params, S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8)) {
        AdamStateT s;
        s.lr = lr;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.eps = eps;
        s.m = detail::zero_buffers(params);
        s.v = detail::zero_buffers(params);
        return s;
    }
};

template <class S>
void adam_step(AdamStateT<S>& st, ParamsT<S>& params, const ParamsT<S>& grads) {
    ++st.step;
    const S bc1 = S(1) - std::pow(st.beta1, (S)st.step);
    const S bc2 = S(1) - std::pow(st.beta2, (S)st.step);
    detail::zip_params(params, grads, [&](std::size_t i, TensorT<S>& w, const TensorT<S>& g) {
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t k = 0; k < w.numel(); ++k) {
            m[k] = st.beta1 * m[k] + (S(1) - st.beta1) * g[k];
            v[k] = st.beta2 * v[k] + (S(1) - st.beta2) * g[k] * g[k];
            const S mhat = m[k] / bc1;
            const S vhat = v[k] / bc2;
            w[k] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    });
}

// ---- hybrid DFA custom optimizer ---------------------------------------------------

// Split momentum buffers: the gradient of each iteration is produced by either
// BP or DFA (coin with ratio p) and feeds only its own buffer. DFA iterations
// apply the gamma-mix of the two buffers; BP iterations apply the BP buffer
// alone. The printed (ascending, non-decaying) update rule is kept behind
// literal_update for comparison runs.
template <class S>
struct HdfaStateT {
    S lr = S(0.01);
    S alpha = S(0.9);
    S gamma = S(0.5);
    double p = 0.5;
    bool literal_update = false;
    Rng coin{1};
    std::vector<TensorT<S>> v_bp, v_dfa;

    static HdfaStateT init(const ParamsT<S>& params, S lr, S alpha, S gamma, double p, std::uint64_t seed) {
        if (p < 0.0 || p > 1.0 || gamma < S(0) || gamma > S(1)) throw std::invalid_argument("hdfa: bad hyperparameters");
        HdfaStateT s;
        s.lr = lr;
        s.alpha = alpha;
        s.gamma = gamma;
        s.p = p;
        s.coin = Rng::stream(seed, /*tag=*/5);
        s.v_bp = detail::zero_buffers(params);
        s.v_dfa = detail::zero_buffers(params);
        return s;
    }

    // One coin flip per iteration from a dedicated stream; p = 1 always BP,
    // p = 0 never BP.
    bool draw_is_bp() { return p >= 1.0 || coin.uniform() < p; }
};

template <class S>
void hdfa_apply(HdfaStateT<S>& st, ParamsT<S>& params, const ParamsT<S>& grads, bool bp_branch) {
    detail::zip_params(params, grads, [&](std::size_t i, TensorT<S>& w, const TensorT<S>& g) {
        auto& vb = st.v_bp[i];
        auto& vd = st.v_dfa[i];
        if (st.literal_update) {
            if (bp_branch) {
                for (std::size_t k = 0; k < w.numel(); ++k) {
                    vb[k] += st.alpha * g[k];
                    w[k] += st.lr * vb[k];
                }
            } else {
                for (std::size_t k = 0; k < w.numel(); ++k) {
                    vd[k] += st.alpha * g[k];
                    w[k] += st.lr * (st.gamma * vd[k] + (S(1) - st.gamma) * vb[k]);
                }
            }
            return;
        }
        if (bp_branch) {
            for (std::size_t k = 0; k < w.numel(); ++k) {
                vb[k] = st.alpha * vb[k] + g[k];
                w[k] -= st.lr * vb[k];
            }
        } else {
            for (std::size_t k = 0; k < w.numel(); ++k) {
                vd[k] = st.alpha * vd[k] + g[k];
                w[k] -= st.lr * (st.gamma * vd[k] + (S(1) - st.gamma) * vb[k]);
            }
        }
    });
}

// Convenience wrapper when the caller has already produced the right gradient.
template <class S>
bool hdfa_step(HdfaStateT<S>& st, ParamsT<S>& params, const ParamsT<S>& grads, bool bp_branch) {
    hdfa_apply(st, params, grads, bp_branch);
    return bp_branch;
}

// ---- hybrid adam (RNN variant) -------------------------------------------------------

// Both gradient kinds feed one shared Adam moment pair; the coin only selects
// which error-propagation rule produced the incoming gradient.
template <class S>
struct HdfaAdamStateT {
    AdamStateT<S> adam;
    double p = 0.5;
    Rng coin{1};

    static HdfaAdamStateT init(const ParamsT<S>& params, S lr, double p, std::uint64_t seed, S beta1 = S(0.9),
                               S beta2 = S(0.999), S eps = S(1e-8)) {
        HdfaAdamStateT s;
        s.adam = AdamStateT<S>::init(params, lr, beta1, beta2, eps);
        s.p = p;
        s.coin = Rng::stream(seed, /*tag=*/5);
        return s;
    }

    bool draw_is_bp() { return p >= 1.0 || coin.uniform() < p; }
};

template <class S>
void hdfa_adam_step(HdfaAdamStateT<S>& st, ParamsT<S>& params, const ParamsT<S>& grads) {
    adam_step(st.adam, params, grads);
}

} // namespace dfa
