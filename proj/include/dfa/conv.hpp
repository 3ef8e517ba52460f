#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "dfa/tensor.hpp"

namespace dfa {

// Grouped, dilated 2-D cross-correlation parameters. Forward convolution is
// cross-correlation; the back-prop input gradient uses the 180-degree flipped
// kernel (implemented as a transposed scatter so it holds for any stride).
struct ConvSpec {
    int kernel = 1;
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
    int in_channels = 1;
    int out_channels = 1;

    int extent() const { return dilation * (kernel - 1) + 1; }

    int out_dim(int in) const { return (in + 2 * padding - extent()) / stride + 1; }

    void validate() const {
        if (kernel < 1 || stride < 1 || padding < 0 || dilation < 1 || groups < 1)
            throw std::invalid_argument("conv: bad spec");
        if (in_channels < 1 || out_channels < 1)
            throw std::invalid_argument("conv: bad channel counts");
        if (in_channels % groups != 0 || out_channels % groups != 0)
            throw std::invalid_argument("conv: channels not divisible by groups");
    }

    // "same" padding for stride-1 error propagation; extent must be odd.
    static int same_padding(int kernel, int dilation) {
        return (dilation * (kernel - 1)) / 2;
    }
};

namespace detail {

// col is (icg*k*k) x (oh*ow); rows ordered (channel, kh, kw) so a matrix
// product over col rows accumulates in the same order as a naive loop.
template <class S>
inline void im2col(const S* in, int ih, int iw, int icg, const ConvSpec& s, int oh, int ow, S* col) {
    const int k = s.kernel;
    for (int c = 0; c < icg; ++c) {
        const S* chan = in + static_cast<std::size_t>(c) * ih * iw;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                S* row = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    const int sy = y * s.stride - s.padding + kh * s.dilation;
                    if (sy < 0 || sy >= ih) {
                        for (int x = 0; x < ow; ++x) row[y * ow + x] = S(0);
                        continue;
                    }
                    const S* src = chan + static_cast<std::size_t>(sy) * iw;
                    for (int x = 0; x < ow; ++x) {
                        const int sx = x * s.stride - s.padding + kw * s.dilation;
                        row[y * ow + x] = (sx >= 0 && sx < iw) ? src[sx] : S(0);
                    }
                }
            }
        }
    }
}

template <class S>
inline void col2im(const S* col, int ih, int iw, int icg, const ConvSpec& s, int oh, int ow, S* in) {
    const int k = s.kernel;
    for (int c = 0; c < icg; ++c) {
        S* chan = in + static_cast<std::size_t>(c) * ih * iw;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const S* row = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    const int sy = y * s.stride - s.padding + kh * s.dilation;
                    if (sy < 0 || sy >= ih) continue;
                    S* dst = chan + static_cast<std::size_t>(sy) * iw;
                    for (int x = 0; x < ow; ++x) {
                        const int sx = x * s.stride - s.padding + kw * s.dilation;
                        if (sx >= 0 && sx < iw) dst[sx] += row[y * ow + x];
                    }
                }
            }
        }
    }
}

} // namespace detail

// input (N, C, H, W), weight (OC, IC/G, k, k) -> (N, OC, OH, OW)
template <class S>
inline TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& weight, const ConvSpec& s) {
    s.validate();
    if (input.rank() != 4 || weight.rank() != 4) throw std::invalid_argument("conv2d: expects rank-4 tensors");
    const int n = static_cast<int>(input.dim(0));
    const int ic = static_cast<int>(input.dim(1));
    const int ih = static_cast<int>(input.dim(2));
    const int iw = static_cast<int>(input.dim(3));
    if (ic != s.in_channels) throw std::invalid_argument("conv2d: input channels disagree with spec");
    const int icg = s.in_channels / s.groups;
    const int ocg = s.out_channels / s.groups;
    if (static_cast<int>(weight.dim(0)) != s.out_channels || static_cast<int>(weight.dim(1)) != icg ||
        static_cast<int>(weight.dim(2)) != s.kernel || static_cast<int>(weight.dim(3)) != s.kernel)
        throw std::invalid_argument("conv2d: weight shape disagrees with spec");
    const int oh = s.out_dim(ih);
    const int ow = s.out_dim(iw);
    if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: empty output");

    TensorT<S> out({(std::size_t)n, (std::size_t)s.out_channels, (std::size_t)oh, (std::size_t)ow});
    const std::size_t krows = static_cast<std::size_t>(icg) * s.kernel * s.kernel;
    std::vector<S> col(krows * oh * ow);

    for (int b = 0; b < n; ++b) {
        for (int g = 0; g < s.groups; ++g) {
            const S* in_g = input.data() + ((static_cast<std::size_t>(b) * ic) + g * icg) * ih * iw;
            detail::im2col(in_g, ih, iw, icg, s, oh, ow, col.data());
            const S* w_g = weight.data() + static_cast<std::size_t>(g) * ocg * krows;
            S* out_g = out.data() + ((static_cast<std::size_t>(b) * s.out_channels) + g * ocg) * oh * ow;
            matmul_into(w_g, col.data(), out_g, ocg, krows, static_cast<std::size_t>(oh) * ow);
        }
    }
    return out;
}

// Gradient w.r.t. the input: scatter of W^T * dOut through the forward
// geometry (equivalent to convolving with the flipped kernel at stride 1).
template <class S>
inline TensorT<S> conv2d_backward_input(const TensorT<S>& grad_out, const TensorT<S>& weight, const ConvSpec& s,
                                        int ih, int iw) {
    s.validate();
    const int n = static_cast<int>(grad_out.dim(0));
    const int oh = static_cast<int>(grad_out.dim(2));
    const int ow = static_cast<int>(grad_out.dim(3));
    const int icg = s.in_channels / s.groups;
    const int ocg = s.out_channels / s.groups;
    const std::size_t krows = static_cast<std::size_t>(icg) * s.kernel * s.kernel;

    TensorT<S> grad_in({(std::size_t)n, (std::size_t)s.in_channels, (std::size_t)ih, (std::size_t)iw});
    std::vector<S> wt(krows * ocg);
    std::vector<S> col(krows * oh * ow);

    for (int g = 0; g < s.groups; ++g) {
        const S* w_g = weight.data() + static_cast<std::size_t>(g) * ocg * krows;
        for (int o = 0; o < ocg; ++o)
            for (std::size_t r = 0; r < krows; ++r) wt[r * ocg + o] = w_g[o * krows + r];
        for (int b = 0; b < n; ++b) {
            const S* go = grad_out.data() + ((static_cast<std::size_t>(b) * s.out_channels) + g * ocg) * oh * ow;
            matmul_into(wt.data(), go, col.data(), krows, (std::size_t)ocg, static_cast<std::size_t>(oh) * ow);
            S* gi = grad_in.data() + ((static_cast<std::size_t>(b) * s.in_channels) + g * icg) * ih * iw;
            detail::col2im(col.data(), ih, iw, icg, s, oh, ow, gi);
        }
    }
    return grad_in;
}

// Gradient w.r.t. the weight: dOut * im2col(input)^T, summed over the batch.
template <class S>
inline TensorT<S> conv2d_backward_weight(const TensorT<S>& grad_out, const TensorT<S>& input, const ConvSpec& s) {
    s.validate();
    const int n = static_cast<int>(input.dim(0));
    const int ih = static_cast<int>(input.dim(2));
    const int iw = static_cast<int>(input.dim(3));
    const int oh = static_cast<int>(grad_out.dim(2));
    const int ow = static_cast<int>(grad_out.dim(3));
    const int icg = s.in_channels / s.groups;
    const int ocg = s.out_channels / s.groups;
    const std::size_t krows = static_cast<std::size_t>(icg) * s.kernel * s.kernel;
    const std::size_t cols = static_cast<std::size_t>(oh) * ow;

    TensorT<S> grad_w({(std::size_t)s.out_channels, (std::size_t)icg, (std::size_t)s.kernel, (std::size_t)s.kernel});
    std::vector<S> col(krows * cols);
    std::vector<S> colt(cols * krows);

    for (int b = 0; b < n; ++b) {
        for (int g = 0; g < s.groups; ++g) {
            const S* in_g = input.data() + ((static_cast<std::size_t>(b) * s.in_channels) + g * icg) * ih * iw;
            detail::im2col(in_g, ih, iw, icg, s, oh, ow, col.data());
            for (std::size_t r = 0; r < krows; ++r)
                for (std::size_t c = 0; c < cols; ++c) colt[c * krows + r] = col[r * cols + c];
            const S* go = grad_out.data() + ((static_cast<std::size_t>(b) * s.out_channels) + g * ocg) * oh * ow;
            S* gw = grad_w.data() + static_cast<std::size_t>(g) * ocg * krows;
            // accumulate over batch: gw += go * colt
            for (int o = 0; o < ocg; ++o) {
                const S* go_o = go + static_cast<std::size_t>(o) * cols;
                S* gw_o = gw + static_cast<std::size_t>(o) * krows;
                for (std::size_t c = 0; c < cols; ++c) {
                    const S v = go_o[c];
                    if (v == S(0)) continue;
                    const S* ct = colt.data() + c * krows;
                    for (std::size_t r = 0; r < krows; ++r) gw_o[r] += v * ct[r];
                }
            }
        }
    }
    return grad_w;
}

// k x k kernel -> (d*(k-1)+1)^2 with the original taps at stride d.
template <class S>
inline TensorT<S> dilate_kernel(const TensorT<S>& weight, int d) {
    if (d < 1) throw std::invalid_argument("dilate_kernel: dilation must be >= 1");
    if (weight.rank() != 4) throw std::invalid_argument("dilate_kernel: expects rank-4 kernel");
    if (d == 1) return weight;
    const std::size_t oc = weight.dim(0), icg = weight.dim(1), k = weight.dim(2);
    const std::size_t ke = d * (k - 1) + 1;
    TensorT<S> out({oc, icg, ke, ke});
    for (std::size_t o = 0; o < oc; ++o)
        for (std::size_t c = 0; c < icg; ++c)
            for (std::size_t y = 0; y < k; ++y)
                for (std::size_t x = 0; x < k; ++x)
                    out(o, c, y * d, x * d) = weight(o, c, y, x);
    return out;
}

// ShuffleNet permutation: channel layout (G, C/G) transposed to (C/G, G).
template <class S>
inline TensorT<S> channel_shuffle(const TensorT<S>& x, int groups) {
    if (x.rank() != 4) throw std::invalid_argument("channel_shuffle: expects rank-4 tensor");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (groups < 1 || c % groups != 0) throw std::invalid_argument("channel_shuffle: channels not divisible by groups");
    if (groups == 1) return x;
    const std::size_t per = c / groups;
    const std::size_t hw = h * w;
    TensorT<S> out(x.shape());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t g = ch / per, r = ch % per;
            const std::size_t dst = r * groups + g;
            const S* src = x.data() + (b * c + ch) * hw;
            std::copy(src, src + hw, out.data() + (b * c + dst) * hw);
        }
    }
    return out;
}

// 180-degree spatial reversal of each k x k slice.
template <class S>
inline TensorT<S> flip180(const TensorT<S>& weight) {
    if (weight.rank() != 4) throw std::invalid_argument("flip180: expects rank-4 kernel");
    const std::size_t oc = weight.dim(0), icg = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    TensorT<S> out(weight.shape());
    for (std::size_t o = 0; o < oc; ++o)
        for (std::size_t c = 0; c < icg; ++c)
            for (std::size_t y = 0; y < kh; ++y)
                for (std::size_t x = 0; x < kw; ++x)
                    out(o, c, kh - 1 - y, kw - 1 - x) = weight(o, c, y, x);
    return out;
}

// Nearest-neighbour spatial resize of a (N, C, H, W) tensor.
template <class S>
inline TensorT<S> resize_nearest(const TensorT<S>& x, std::size_t oh, std::size_t ow) {
    if (x.rank() != 4) throw std::invalid_argument("resize_nearest: expects rank-4 tensor");
    const std::size_t n = x.dim(0), c = x.dim(1), ih = x.dim(2), iw = x.dim(3);
    if (ih == oh && iw == ow) return x;
    TensorT<S> out({n, c, oh, ow});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < oh; ++y) {
                const std::size_t sy = y * ih / oh;
                for (std::size_t x2 = 0; x2 < ow; ++x2) {
                    const std::size_t sx = x2 * iw / ow;
                    out(b, ch, y, x2) = x(b, ch, sy, sx);
                }
            }
    return out;
}

} // namespace dfa
