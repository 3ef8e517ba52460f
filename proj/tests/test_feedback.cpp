#include "doctest.h"

#include "dfa/feedback.hpp"
#include "oracles.hpp"

using dfa::Act;
using dfa::EpKind;
using dfa::EpStrategy;
using dfa::NetworkPlan;
using dfa::Tensor;
using dfa::TokenBatch;

namespace {

std::vector<double> flatten_params(const dfa::Params& p) {
    std::vector<double> out;
    p.for_each([&](const Tensor& t) { out.insert(out.end(), t.raw().begin(), t.raw().end()); });
    return out;
}

dfa::Params unflatten_params(const dfa::Params& like, const std::vector<double>& flat) {
    dfa::Params p = like;
    std::size_t off = 0;
    p.for_each([&](Tensor& t) {
        std::copy(flat.begin() + off, flat.begin() + off + t.numel(), t.raw().begin());
        off += t.numel();
    });
    return p;
}

// Max relative error of BP gradients vs central finite differences of the
// softmax cross-entropy loss, at 64-bit.
double bp_fd_check(const NetworkPlan& plan, const dfa::Params& params, const Tensor& input,
                   const std::vector<int>& targets) {
    auto fr = dfa::forward(plan, params, input);
    auto lr = dfa::loss_and_output_error(fr.output, targets);
    auto br = dfa::bp_backward(plan, params, fr.tape, lr.error);
    auto f = [&](const std::vector<double>& flat) {
        auto p = unflatten_params(params, flat);
        auto out = dfa::forward(plan, p, input);
        return dfa::loss_and_output_error(out.output, targets).loss;
    };
    auto fd = oracle::fd_gradient(f, flatten_params(params));
    return oracle::max_rel_err(flatten_params(br.grads), fd, 1e-6);
}

double bp_fd_check_rnn(const NetworkPlan& plan, const dfa::Params& params, const TokenBatch& tokens,
                       const std::vector<int>& targets) {
    auto fr = dfa::forward(plan, params, tokens);
    auto lr = dfa::loss_and_output_error(fr.output, targets);
    auto br = dfa::bp_backward(plan, params, fr.tape, lr.error);
    auto f = [&](const std::vector<double>& flat) {
        auto p = unflatten_params(params, flat);
        auto out = dfa::forward(plan, p, tokens);
        return dfa::loss_and_output_error(out.output, targets).loss;
    };
    auto fd = oracle::fd_gradient(f, flatten_params(params));
    return oracle::max_rel_err(flatten_params(br.grads), fd, 1e-6);
}

} // namespace

TEST_CASE("bp gradients match finite differences on an MLP") {
    NetworkPlan plan = dfa::mlp_plan({6, 8, 7, 4});
    auto params = dfa::init_params<double>(plan, 31);
    dfa::Rng rng(32);
    Tensor in = oracle::random_tensor<double>({3, 6}, rng);
    CHECK(bp_fd_check(plan, params, in, {1, 0, 3}) < 1e-6);
}

TEST_CASE("bp gradients match finite differences on a small CNN") {
    NetworkPlan plan;
    plan.layers = {dfa::conv_layer(2, 4, 3, 1, Act::tanh), dfa::conv_layer(4, 4, 3, 2, Act::tanh),
                   dfa::dense_layer(4 * 4 * 4, 3, Act::identity)};
    auto params = dfa::init_params<double>(plan, 33);
    dfa::Rng rng(34);
    Tensor in = oracle::random_tensor<double>({2, 2, 7, 7}, rng);
    CHECK(bp_fd_check(plan, params, in, {0, 2}) < 1e-6);
}

TEST_CASE("bp gradients match finite differences with residual skips") {
    NetworkPlan plan;
    plan.layers = {dfa::conv_layer(2, 4, 3, 1, Act::tanh), dfa::conv_layer(4, 4, 3, 1, Act::tanh, 0),
                   dfa::dense_layer(4 * 6 * 6, 3, Act::identity)};
    auto params = dfa::init_params<double>(plan, 35);
    dfa::Rng rng(36);
    Tensor in = oracle::random_tensor<double>({2, 2, 6, 6}, rng);
    CHECK(bp_fd_check(plan, params, in, {2, 1}) < 1e-6);
}

TEST_CASE("bptt gradients match finite differences for all cell kinds") {
    for (dfa::LayerKind cell : {dfa::LayerKind::vanilla_rnn_cell, dfa::LayerKind::lstm_cell, dfa::LayerKind::gru_cell}) {
        NetworkPlan plan = dfa::rnn_plan(6, 4, 4, cell);
        auto params = dfa::init_params<double>(plan, 41);
        TokenBatch tb{4, 2, {1, 2, 3, 4, 5, 0, 2, 3}};
        std::vector<int> targets{2, 3, 4, 5, 0, 1, 3, 4};
        CHECK(bp_fd_check_rnn(plan, params, tb, targets) < 1e-4);
    }
}

TEST_CASE("identity weights propagate the loss error unchanged") {
    NetworkPlan plan;
    plan.layers = {dfa::dense_layer(3, 3, Act::identity), dfa::dense_layer(3, 3, Act::identity),
                   dfa::dense_layer(3, 3, Act::identity)};
    dfa::Params params;
    params.layers.resize(3);
    for (int i = 0; i < 3; ++i) params.layers[i].w.push_back(Tensor::identity(3));
    dfa::Rng rng(51);
    Tensor in = oracle::random_tensor<double>({2, 3}, rng);
    auto fr = dfa::forward(plan, params, in);
    Tensor eL = oracle::random_tensor<double>({2, 3}, rng);
    auto br = dfa::bp_backward(plan, params, fr.tape, eL);
    for (int i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < eL.numel(); ++k) CHECK(br.errors[i][0][k] == eL[k]);
}

TEST_CASE("one linear layer with mse recovers the normal-equation gradient") {
    NetworkPlan plan;
    plan.layers = {dfa::dense_layer(4, 1, Act::identity)};
    auto params = dfa::init_params<double>(plan, 61);
    dfa::Rng rng(62);
    const std::size_t m = 8;
    Tensor x = oracle::random_tensor<double>({m, 4}, rng);
    Tensor y = oracle::random_tensor<double>({m, 1}, rng);
    auto fr = dfa::forward(plan, params, x);
    // mse loss (1/m)*sum (xw - y)^2 has dL/dout = 2(xw - y)/m
    Tensor e({m, 1});
    for (std::size_t i = 0; i < m; ++i) e(i, 0) = 2.0 * (fr.output(i, 0) - y(i, 0)) / (double)m;
    auto br = dfa::bp_backward(plan, params, fr.tape, e);
    // closed form 2 X^T (Xw - y) / m
    for (std::size_t j = 0; j < 4; ++j) {
        double want = 0;
        for (std::size_t i = 0; i < m; ++i) want += 2.0 * x(i, j) * (fr.output(i, 0) - y(i, 0)) / (double)m;
        CHECK(br.grads.layers[0].w[0](0, j) == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("original dfa identity and zero cases") {
    NetworkPlan plan;
    plan.layers = {dfa::dense_layer(3, 3, Act::identity), dfa::dense_layer(3, 3, Act::identity)};
    auto params = dfa::init_params<double>(plan, 71);
    auto fb = dfa::build_feedback<double>(plan, EpStrategy::original(), 72, {3});
    // overwrite the feedback with the identity
    std::get<dfa::DenseFw<double>>(*fb.per_layer[0]).values = Tensor::identity(3);

    dfa::Rng rng(73);
    Tensor in = oracle::random_tensor<double>({2, 3}, rng);
    auto fr = dfa::forward(plan, params, in);
    Tensor eL = oracle::random_tensor<double>({2, 3}, rng);
    auto br = dfa::dfa_backward_original(plan, params, fb, fr.tape, eL);
    for (std::size_t k = 0; k < eL.numel(); ++k) CHECK(br.errors[0][0][k] == eL[k]);

    Tensor zero({2, 3});
    auto bz = dfa::dfa_backward_original(plan, params, fb, fr.tape, zero);
    for (int i = 0; i < 2; ++i)
        for (std::size_t k = 0; k < zero.numel(); ++k) CHECK(bz.errors[i][0][k] == 0.0);
}

TEST_CASE("original dfa matches a dense matmul oracle on a 3-layer MLP") {
    NetworkPlan plan = dfa::mlp_plan({5, 7, 6, 4});
    auto params = dfa::init_params<double>(plan, 81);
    auto fb = dfa::build_feedback<double>(plan, EpStrategy::original(), 82, {5});
    dfa::Rng rng(83);
    Tensor in = oracle::random_tensor<double>({3, 5}, rng);
    auto fr = dfa::forward(plan, params, in);
    auto lr = dfa::loss_and_output_error(fr.output, {0, 2, 3});
    auto br = dfa::dfa_backward_original(plan, params, fb, fr.tape, lr.error);

    // oracle: e_i = (D_i e_L) * f'(p_i) with e_L the last-layer error
    Tensor eL = br.errors[2][0];
    for (std::size_t d = 0; d < 2; ++d) {
        const auto& D = std::get<dfa::DenseFw<double>>(*fb.per_layer[d]).values;
        Tensor proj = oracle::matmul_loops(eL, dfa::transpose(D));
        Tensor want = dfa::hadamard(proj, dfa::apply_activation(fr.tape.pre[d][0], plan.layers[d].act, true));
        for (std::size_t k = 0; k < want.numel(); ++k)
            CHECK(br.errors[d][0][k] == doctest::Approx(want[k]).epsilon(1e-12));
    }
}

TEST_CASE("modular dfa with one module is bit-identical to original dfa") {
    NetworkPlan plan = dfa::mlp_plan({5, 7, 6, 4});
    auto params = dfa::init_params<double>(plan, 91);
    auto fb_orig = dfa::build_feedback<double>(plan, EpStrategy::original(), 92, {5});
    auto fb_mod = dfa::build_feedback<double>(plan, EpStrategy::modular(), 92, {5});  // no boundaries: M = 1

    dfa::Rng rng(93);
    Tensor in = oracle::random_tensor<double>({2, 5}, rng);
    auto fr = dfa::forward(plan, params, in);
    auto lr = dfa::loss_and_output_error(fr.output, {1, 3});
    auto a = dfa::dfa_backward_original(plan, params, fb_orig, fr.tape, lr.error);
    auto b = dfa::dfa_backward_modular(plan, params, fb_mod, fr.tape, lr.error);
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t k = 0; k < a.errors[l][0].numel(); ++k) CHECK(a.errors[l][0][k] == b.errors[l][0][k]);
    auto ga = flatten_params(a.grads), gb = flatten_params(b.grads);
    for (std::size_t k = 0; k < ga.size(); ++k) CHECK(ga[k] == gb[k]);
}

TEST_CASE("modular dfa with M=2 matches an explicit two-block construction") {
    NetworkPlan plan = dfa::mlp_plan({5, 7, 6, 5, 4});
    plan.module_starts = {2};  // modules {0,1} and {2,3}
    auto params = dfa::init_params<double>(plan, 101);
    auto fb = dfa::build_feedback<double>(plan, EpStrategy::modular(), 102, {5});

    dfa::Rng rng(103);
    Tensor in = oracle::random_tensor<double>({2, 5}, rng);
    auto fr = dfa::forward(plan, params, in);
    auto lr = dfa::loss_and_output_error(fr.output, {1, 3});
    auto br = dfa::dfa_backward_modular(plan, params, fb, fr.tape, lr.error);

    // hand-built: e_3 = eL (identity act); e_2 = (D2 e_3) f'; e_1 = (D1 e_2) f'; e_0 = (D0 e_1) f'
    auto project = [&](std::size_t dest, const Tensor& src) {
        const auto& D = std::get<dfa::DenseFw<double>>(*fb.per_layer[dest]).values;
        Tensor proj = oracle::matmul_loops(src, dfa::transpose(D));
        return dfa::hadamard(proj, dfa::apply_activation(fr.tape.pre[dest][0], plan.layers[dest].act, true));
    };
    Tensor e3 = br.errors[3][0];
    Tensor e2 = project(2, e3);  // interior of module 2, source = module 2's last-layer error
    Tensor e1 = project(1, e3);  // cross-boundary hop (j = -1), also from module 2's source
    Tensor e0 = project(0, e1);  // interior of module 1, source = module 1's last-layer error
    for (std::size_t k = 0; k < e2.numel(); ++k) CHECK(br.errors[2][0][k] == doctest::Approx(e2[k]).epsilon(1e-12));
    for (std::size_t k = 0; k < e1.numel(); ++k) CHECK(br.errors[1][0][k] == doctest::Approx(e1[k]).epsilon(1e-12));
    for (std::size_t k = 0; k < e0.numel(); ++k) CHECK(br.errors[0][0][k] == doctest::Approx(e0[k]).epsilon(1e-12));
}

TEST_CASE("modular dfa with every layer its own module has BP topology") {
    NetworkPlan plan = dfa::mlp_plan({5, 7, 6, 4});
    plan.module_starts = {1, 2};  // M = L
    auto fb = dfa::build_feedback<double>(plan, EpStrategy::modular(), 112, {5});
    // each destination projects from the adjacent layer's error, like the BP
    // topology but with random weights
    CHECK(std::get<dfa::DenseFw<double>>(*fb.per_layer[0]).values.dim(0) == 7);
    CHECK(std::get<dfa::DenseFw<double>>(*fb.per_layer[0]).values.dim(1) == 6);
    CHECK(std::get<dfa::DenseFw<double>>(*fb.per_layer[1]).values.dim(0) == 6);
    CHECK(std::get<dfa::DenseFw<double>>(*fb.per_layer[1]).values.dim(1) == 4);
    CHECK(!fb.per_layer[2].has_value());
}

TEST_CASE("conv dfa identity reduction") {
    // G=1, k=1, identity channel kernels, equal spatial dims, identity act
    dfa::ConvPairFw<double> cp;
    cp.groups = 1;
    cp.dilation = 1;
    cp.shuffle = false;
    cp.d1 = Tensor({3, 3, 1, 1});
    cp.d2 = Tensor({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) {
        cp.d1(c, c, 0, 0) = 1.0;
        cp.d2(c, c, 0, 0) = 1.0;
    }
    dfa::Rng rng(121);
    Tensor src = oracle::random_tensor<double>({2, 3, 4, 4}, rng);
    Tensor out = dfa::apply_conv_pair(cp, src, 4, 4);
    for (std::size_t k = 0; k < src.numel(); ++k) CHECK(out[k] == src[k]);
}

TEST_CASE("grouped conv pair equals independent per-group applications") {
    dfa::Rng rng(131);
    const int G = 4, C = 8;
    dfa::ConvPairFw<double> cp;
    cp.groups = G;
    cp.dilation = 2;
    cp.shuffle = false;  // shuffle off so groups stay independent
    cp.d1 = oracle::random_tensor<double>({(std::size_t)C, (std::size_t)C / G, 3, 3}, rng);
    cp.d2 = oracle::random_tensor<double>({(std::size_t)C, (std::size_t)C / G, 1, 1}, rng);
    Tensor src = oracle::random_tensor<double>({1, (std::size_t)C, 6, 6}, rng);
    Tensor whole = dfa::apply_conv_pair(cp, src, 6, 6);

    for (int g = 0; g < G; ++g) {
        dfa::ConvPairFw<double> part;
        part.groups = 1;
        part.dilation = 2;
        part.shuffle = false;
        const int cg = C / G;
        part.d1 = Tensor({(std::size_t)cg, (std::size_t)cg, 3, 3});
        part.d2 = Tensor({(std::size_t)cg, (std::size_t)cg, 1, 1});
        for (int o = 0; o < cg; ++o) {
            for (std::size_t k = 0; k < part.d1.numel() / cg; ++k)
                part.d1[o * (part.d1.numel() / cg) + k] = cp.d1[(g * cg + o) * (cp.d1.numel() / C) + k];
            for (std::size_t k = 0; k < part.d2.numel() / cg; ++k)
                part.d2[o * (part.d2.numel() / cg) + k] = cp.d2[(g * cg + o) * (cp.d2.numel() / C) + k];
        }
        Tensor src_g({1, (std::size_t)cg, 6, 6});
        for (int c = 0; c < cg; ++c)
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 6; ++x) src_g(0, c, y, x) = src(0, g * cg + c, y, x);
        Tensor part_out = dfa::apply_conv_pair(part, src_g, 6, 6);
        for (int c = 0; c < cg; ++c)
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 6; ++x) CHECK(whole(0, g * cg + c, y, x) == part_out(0, c, y, x));
    }
}

TEST_CASE("compute_dilation and backward kernel size") {
    NetworkPlan plan;
    plan.layers = {dfa::conv_layer(3, 4, 3, 1, Act::tanh), dfa::conv_layer(4, 4, 3, 1, Act::tanh),
                   dfa::conv_layer(4, 4, 3, 2, Act::tanh), dfa::conv_layer(4, 4, 3, 1, Act::tanh)};
    // adjacent stride-1 hop
    CHECK(dfa::compute_dilation(plan, 1, 0) == 1);
    CHECK(dfa::backward_kernel_size(dfa::composed_receptive_field(plan, 1, 0), 1) == 3);
    // skip two stride-1 convs: dilation stays 1, kernel grows by composition
    NetworkPlan two;
    two.layers = {dfa::conv_layer(3, 4, 3, 1, Act::tanh), dfa::conv_layer(4, 4, 3, 1, Act::tanh),
                  dfa::conv_layer(4, 4, 3, 1, Act::tanh)};
    CHECK(dfa::compute_dilation(two, 2, 0) == 1);
    CHECK(dfa::composed_receptive_field(two, 2, 0) == 5);
    CHECK(dfa::backward_kernel_size(5, 1) == 5);
    // skip one stride-2 conv
    CHECK(dfa::compute_dilation(plan, 2, 1) == 2);
    CHECK_THROWS(dfa::compute_dilation(plan, 1, 1));
}

TEST_CASE("triangular backward weight structure") {
    SUBCASE("T=1 single block equals the drawn base") {
        Tensor base = Tensor::identity(3);
        auto tri = dfa::build_triangular_bw<double>(3, 1, 7, true, &base);
        CHECK(tri.blocks.size() == 1);
        for (std::size_t k = 0; k < 9; ++k) CHECK(tri.at(0, 0)[k] == base[k]);
    }
    SUBCASE("identity base gives identity blocks everywhere above the diagonal") {
        Tensor base = Tensor::identity(4);
        auto tri = dfa::build_triangular_bw<double>(4, 3, 7, true, &base);
        Tensor eye = Tensor::identity(4);
        std::size_t stored = 0;
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                if (i <= j) {
                    ++stored;
                    for (std::size_t k = 0; k < 16; ++k) CHECK(tri.at(i, j)[k] == eye[k]);
                } else {
                    CHECK(tri.at(i, j).empty());
                }
            }
        CHECK(stored == 3 * 4 / 2);
    }
    SUBCASE("literal exponent is T-j") {
        dfa::Rng rng(141);
        Tensor base = oracle::random_tensor<double>({2, 2}, rng);
        auto tri = dfa::build_triangular_bw<double>(2, 3, 7, true, &base);
        Tensor b2 = oracle::matmul_loops(base, base);
        Tensor b3 = oracle::matmul_loops(b2, base);
        // column j=0 -> power 3; j=1 -> power 2; j=2 -> power 1
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(tri.at(0, 0)[k] == doctest::Approx(b3[k]).epsilon(1e-12));
            CHECK(tri.at(0, 1)[k] == doctest::Approx(b2[k]).epsilon(1e-12));
            CHECK(tri.at(0, 2)[k] == doctest::Approx(base[k]).epsilon(1e-12));
        }
    }
    SUBCASE("path-length exponent is j-i+1") {
        dfa::Rng rng(142);
        Tensor base = oracle::random_tensor<double>({2, 2}, rng);
        auto tri = dfa::build_triangular_bw<double>(2, 3, 7, false, &base);
        Tensor b2 = oracle::matmul_loops(base, base);
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(tri.at(0, 0)[k] == doctest::Approx(base[k]).epsilon(1e-12));
            CHECK(tri.at(0, 1)[k] == doctest::Approx(b2[k]).epsilon(1e-12));
            CHECK(tri.at(1, 1)[k] == doctest::Approx(base[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("sparsify_binarize") {
    dfa::Rng rng(151);
    Tensor d = oracle::random_tensor<double>({6, 5}, rng);

    SUBCASE("all-ones mask with binary gives sign(D)") {
        std::vector<std::uint8_t> ones(d.numel(), 1);
        auto s = dfa::sparsify_binarize(d, ones, true);
        for (std::size_t k = 0; k < d.numel(); ++k)
            CHECK(s.values[k] == (d[k] > 0 ? 1.0 : (d[k] < 0 ? -1.0 : 0.0)));
    }
    SUBCASE("all-zero mask gives the zero matrix") {
        std::vector<std::uint8_t> zeros(d.numel(), 0);
        auto s = dfa::sparsify_binarize(d, zeros, false);
        for (std::size_t k = 0; k < d.numel(); ++k) CHECK(s.values[k] == 0.0);
    }
    SUBCASE("sign is idempotent and masking is idempotent") {
        dfa::Rng mrng(152);
        auto mask = dfa::make_mask(d.numel(), 0.4, mrng);
        auto once = dfa::sparsify_binarize(d, mask, true);
        auto twice = dfa::sparsify_binarize(once.values, mask, true);
        for (std::size_t k = 0; k < d.numel(); ++k) CHECK(once.values[k] == twice.values[k]);
        auto masked = dfa::sparsify_binarize(d, mask, false);
        auto remasked = dfa::sparsify_binarize(masked.values, mask, false);
        for (std::size_t k = 0; k < d.numel(); ++k) CHECK(masked.values[k] == remasked.values[k]);
    }
    SUBCASE("98 percent sparsity on a 7000x7000 matrix") {
        dfa::Rng mrng(153);
        dfa::TensorT<float> big({7000, 7000});
        for (std::size_t k = 0; k < big.numel(); ++k) big[k] = (float)mrng.uniform(-1.0, 1.0);
        auto mask = dfa::make_mask(big.numel(), 0.98, mrng);
        auto s = dfa::sparsify_binarize(big, mask, true);
        const double nz = s.nonzero_fraction();
        CHECK(nz > 0.015);
        CHECK(nz < 0.025);
    }
}

TEST_CASE("dfa_backward_rnn matches the dense stacked oracle") {
    NetworkPlan plan = dfa::rnn_plan(6, 4, 3);
    auto params = dfa::init_params<double>(plan, 161);
    auto fb = dfa::build_feedback<double>(plan, EpStrategy::rnn_triangular(), 162);
    TokenBatch tb{3, 2, {1, 2, 3, 4, 5, 0}};
    auto fr = dfa::forward(plan, params, tb);
    auto lr = dfa::loss_and_output_error(fr.output, {2, 3, 4, 5, 0, 1});
    auto br = dfa::dfa_backward_rnn(plan, params, fb, fr.tape, lr.error);

    // dense HT x HT oracle for the stacked product
    const std::size_t H = 4, T = 3, B = 2;
    const auto& tri = *fb.cell_to_emb;
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> stacked(H * T, 0.0);
        for (std::size_t j = 0; j < T; ++j)
            for (std::size_t h = 0; h < H; ++h) stacked[j * H + h] = br.errors[1][j](b, h);
        for (std::size_t i = 0; i < T; ++i) {
            std::vector<double> want(H, 0.0);
            for (std::size_t j = i; j < T; ++j)
                for (std::size_t r = 0; r < H; ++r)
                    for (std::size_t c = 0; c < H; ++c) want[r] += tri.at(i, j)(r, c) * stacked[j * H + c];
            Tensor dfp = dfa::cell_output_derivative(plan, fr.tape, i);
            for (std::size_t r = 0; r < H; ++r)
                CHECK(br.errors[0][i](b, r) == doctest::Approx(want[r] * tri.scale * dfp(b, r)).epsilon(1e-9));
        }
    }
}

TEST_CASE("dfa_backward_rnn trivial cases") {
    NetworkPlan plan = dfa::rnn_plan(5, 3, 1);
    auto params = dfa::init_params<double>(plan, 171);
    auto fb = dfa::build_feedback<double>(plan, EpStrategy::rnn_triangular(), 172);
    // T=1 block-identity triangle
    fb.cell_to_emb->at(0, 0) = Tensor::identity(3);
    fb.cell_to_emb->scale = 1.0;
    TokenBatch tb{1, 2, {1, 2}};
    auto fr = dfa::forward(plan, params, tb);
    auto lr = dfa::loss_and_output_error(fr.output, {2, 3});
    auto br = dfa::dfa_backward_rnn(plan, params, fb, fr.tape, lr.error);
    Tensor dfp = dfa::cell_output_derivative(plan, fr.tape, 0);
    for (std::size_t k = 0; k < br.errors[0][0].numel(); ++k)
        CHECK(br.errors[0][0][k] == doctest::Approx(br.errors[1][0][k] * dfp[k]).epsilon(1e-12));

    Tensor zero(lr.error.shape());
    auto bz = dfa::dfa_backward_rnn(plan, params, fb, fr.tape, zero);
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t k = 0; k < bz.errors[l][0].numel(); ++k) CHECK(bz.errors[l][0][k] == 0.0);
}

TEST_CASE("backward weight initialization from forward weights") {
    SUBCASE("decoder backward weight equals the transposed forward weight") {
        NetworkPlan plan = dfa::rnn_plan(6, 4, 2);
        auto params = dfa::init_params<double>(plan, 181);
        auto fb = dfa::init_bw_from_forward(plan, params, EpStrategy::rnn_triangular(), 182);
        Tensor want = dfa::transpose(params.layers[2].w[0]);
        for (const auto& sfc : fb.dec_to_cell)
            for (std::size_t k = 0; k < want.numel(); ++k) CHECK(sfc.values[k] == want[k]);
    }
    SUBCASE("vanilla rnn average recurrent weight is itself") {
        NetworkPlan plan = dfa::rnn_plan(6, 4, 2);
        auto params = dfa::init_params<double>(plan, 183);
        Tensor avg = dfa::average_recurrent_weight(plan, params);
        for (std::size_t k = 0; k < avg.numel(); ++k) CHECK(avg[k] == params.layers[1].w[1][k]);
    }
    SUBCASE("lstm average is the elementwise mean of the four gate weights") {
        NetworkPlan plan = dfa::rnn_plan(6, 4, 2, dfa::LayerKind::lstm_cell);
        auto params = dfa::init_params<double>(plan, 184);
        Tensor avg = dfa::average_recurrent_weight(plan, params);
        for (std::size_t k = 0; k < avg.numel(); ++k) {
            double want = 0;
            for (int g = 0; g < 4; ++g) want += params.layers[1].w[4 + g][k];
            CHECK(avg[k] == doctest::Approx(want / 4.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("measure_alignment") {
    dfa::Rng rng(191);
    Tensor w = oracle::random_tensor<double>({5, 7}, rng);
    Tensor wt = dfa::transpose(w);
    CHECK(dfa::measure_alignment(wt, wt) == doctest::Approx(0.0).epsilon(1e-9));
    Tensor neg = wt;
    dfa::scale_inplace(neg, -1.0);
    CHECK(dfa::measure_alignment(neg, wt) == doctest::Approx(180.0).epsilon(1e-9));

    // independent random pairs in high dimension concentrate near 90 degrees
    Tensor a({100, 100}), b({100, 100});
    for (std::size_t k = 0; k < a.numel(); ++k) {
        a[k] = rng.normal();
        b[k] = rng.normal();
    }
    const double ang = dfa::measure_alignment(a, b);
    CHECK(ang > 88.0);
    CHECK(ang < 92.0);

    Tensor z2({5, 7});
    CHECK_THROWS(dfa::measure_alignment(z2, w));  // zero norm
}

TEST_CASE("feedback checksum is stable and value-sensitive") {
    NetworkPlan plan = dfa::mlp_plan({5, 6, 4});
    auto fb = dfa::build_feedback<double>(plan, EpStrategy::original(), 201, {5});
    const auto c1 = fb.checksum();
    const auto c2 = fb.checksum();
    CHECK(c1 == c2);
    std::get<dfa::DenseFw<double>>(*fb.per_layer[0]).values[0] += 1.0;
    CHECK(fb.checksum() != c1);
}
