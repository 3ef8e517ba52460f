#include "dfa/cost_model.hpp"

#include <cmath>
#include <stdexcept>

namespace dfa {

void CostReport::add(const std::string& name, const CostComponent& c) {
    breakdown.emplace_back(name, c);
    weight_bytes += c.weight_bytes;
    error_bytes += c.error_bytes;
    ops += c.ops;
}

bool CostReport::reconciles(double tol) const {
    double w = 0, e = 0, o = 0;
    for (const auto& [name, c] : breakdown) {
        (void)name;
        w += c.weight_bytes;
        e += c.error_bytes;
        o += c.ops;
    }
    auto close = [tol](double a, double b) { return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)}); };
    return close(w, weight_bytes) && close(e, error_bytes) && close(o, ops);
}

namespace {

double layer_weights(const CostLayer& l) {
    return l.kind == CostLayer::Kind::conv ? (double)l.k * l.k * l.ich * l.och : (double)l.ich * l.och;
}

double input_error_numel(const CostLayer& l) {
    return l.kind == CostLayer::Kind::conv ? (double)l.ich * l.in_w * l.in_h : (double)l.ich;
}

[[maybe_unused]] double output_error_numel(const CostLayer& l) {
    return l.kind == CostLayer::Kind::conv ? (double)l.och * l.out_w * l.out_h : (double)l.och;
}

std::string layer_name(const NetDescriptor& net, std::size_t i) {
    return net.name + "/L" + std::to_string(i);
}

} // namespace

double conv_mult_count(int k, int ich, int och, int out_w, int out_h, int groups) {
    return (double)k * k * (ich / groups) * och * out_w * out_h;
}

// ---- BP -------------------------------------------------------------------------

CostReport cost_bp(const NetDescriptor& net) {
    CostReport r;
    r.strategy = "bp";
    r.note = "transposed forward weights read once per iteration, first layer excluded";
    if (net.recurrent()) {
        const double H = net.hidden, V = net.vocab, T = net.time_steps, B = net.batch;
        const double g = net.gates();
        CostComponent dec;
        dec.weight_bytes = (double)net.value_bytes * V * H;
        dec.error_bytes = (double)net.value_bytes * T * V;
        dec.ops = 2.0 * B * T * V * H;
        r.add(net.name + "/decoder", dec);
        CostComponent cell;
        cell.weight_bytes = (double)net.value_bytes * g * 2.0 * H * H;
        cell.error_bytes = (double)net.value_bytes * 2.0 * T * H;
        cell.ops = 2.0 * B * T * g * 2.0 * H * H;
        r.add(net.name + "/cell", cell);
        return r;
    }
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& l = net.layers[i];
        CostComponent c;
        if (i > 0) {
            c.weight_bytes = (double)net.value_bytes * layer_weights(l);
            c.ops = 2.0 * (l.kind == CostLayer::Kind::conv
                               ? (double)l.k * l.k * l.ich * l.och * l.in_w * l.in_h
                               : (double)l.ich * l.och);
            c.error_bytes = (double)net.value_bytes * input_error_numel(l);
        }
        r.add(layer_name(net, i), c);
    }
    return r;
}

// ---- original DFA -----------------------------------------------------------------

CostReport cost_dfa_original(const NetDescriptor& net) {
    CostReport r;
    r.strategy = "dfa_original";
    r.note = "class x error connections per weight layer, fully-connected backward view";
    if (net.recurrent()) {
        const double H = net.hidden, V = net.vocab, T = net.time_steps, B = net.batch;
        // per step, per destination layer (cell and embedding): (H x V) weights
        CostComponent cell;
        cell.weight_bytes = (double)net.value_bytes * T * V * H;
        cell.error_bytes = (double)net.value_bytes * T * (V + H);
        cell.ops = 2.0 * B * T * V * H;
        r.add(net.name + "/dec_to_cell", cell);
        CostComponent emb;
        emb.weight_bytes = (double)net.value_bytes * T * V * H;
        emb.error_bytes = (double)net.value_bytes * T * H;
        emb.ops = 2.0 * B * T * V * H;
        r.add(net.name + "/dec_to_emb", emb);
        return r;
    }
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& l = net.layers[i];
        CostComponent c;
        if (i > 0) {
            const double n = input_error_numel(l);
            c.weight_bytes = (double)net.value_bytes * net.classes * n;
            c.ops = 2.0 * net.classes * n;
            c.error_bytes = (double)net.value_bytes * n;
        }
        r.add(layer_name(net, i), c);
    }
    return r;
}

// ---- revised DFA --------------------------------------------------------------------

CostReport cost_dfa_revised(const NetDescriptor& net, int groups, double sparsity, bool binary) {
    if (groups < 1) throw std::invalid_argument("cost_dfa_revised: groups >= 1");
    if (sparsity < 0 || sparsity >= 1) throw std::invalid_argument("cost_dfa_revised: sparsity in [0,1)");
    CostReport r;
    r.strategy = "dfa_revised";
    const double nonzero = 1.0 - sparsity;
    const double bytes_per_weight = binary ? 1.0 / 8.0 : (double)net.value_bytes;

    if (net.recurrent()) {
        const double H = net.hidden, V = net.vocab, T = net.time_steps, B = net.batch;
        r.note = "per-step decoder backward weight plus block upper-triangular cell-to-embedding weight";
        CostComponent dec;
        dec.weight_bytes = T * V * H * nonzero * bytes_per_weight;
        dec.error_bytes = (double)net.value_bytes * T * (V + H);
        dec.ops = 2.0 * B * T * V * H * nonzero;
        r.add(net.name + "/sfc", dec);
        CostComponent tri;
        const double blocks = T * (T + 1) / 2.0;
        tri.weight_bytes = H * H * blocks * nonzero * bytes_per_weight;
        tri.error_bytes = (double)net.value_bytes * T * H;
        tri.ops = 2.0 * B * H * H * blocks * nonzero;
        r.add(net.name + "/triangular", tri);
        return r;
    }

    r.note = "backward kernel pair (k x k grouped + 1 x 1 grouped) per conv layer; the channel "
             "projection folds into 1 x 1 kernels; dilation zeros free";
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& l = net.layers[i];
        CostComponent c;
        const bool pair = l.k > 1;  // 1x1 backward kernels are their own channel projection
        if (l.kind == CostLayer::Kind::conv && !l.shares_error) {
            const double taps = ((double)l.k * l.k * l.och * l.och + (pair ? (double)l.och * l.och : 0.0)) / groups;
            c.weight_bytes = taps * nonzero * bytes_per_weight;
        } else if (l.kind == CostLayer::Kind::dense && i + 1 < net.layers.size()) {
            // interior dense destination keeps a dense projection from the class error
            c.weight_bytes = (double)l.och * net.classes * nonzero * bytes_per_weight;
        }
        if (i > 0 && !l.shares_error) {
            // destination error = this layer's input; source = its output error
            const double wh = (double)l.in_w * l.in_h;
            if (l.kind == CostLayer::Kind::conv) {
                c.ops = 2.0 * ((pair ? (double)l.och * l.ich * wh : 0.0) +
                               (double)l.k * l.k * l.och * l.och * wh / groups) * nonzero;
            } else {
                c.ops = 2.0 * (double)net.classes * l.ich * nonzero;
            }
            c.error_bytes = (double)net.value_bytes * input_error_numel(l);
        }
        r.add(layer_name(net, i), c);
    }
    return r;
}

// ---- hybrid ----------------------------------------------------------------------------

CostReport cost_hybrid(const NetDescriptor& net, int groups, double sparsity, bool binary, double p) {
    if (p < 0 || p > 1) throw std::invalid_argument("cost_hybrid: p in [0,1]");
    CostReport bp = cost_bp(net);
    CostReport dfa = cost_dfa_revised(net, groups, sparsity, binary);
    CostReport r;
    r.strategy = "hybrid";
    r.note = "expectation p * bp + (1-p) * revised";
    CostComponent cb{p * bp.weight_bytes, p * bp.error_bytes, p * bp.ops};
    CostComponent cd{(1 - p) * dfa.weight_bytes, (1 - p) * dfa.error_bytes, (1 - p) * dfa.ops};
    r.add(net.name + "/bp_part", cb);
    r.add(net.name + "/dfa_part", cd);
    return r;
}

// ---- ratio and latency --------------------------------------------------------------------

double feedback_ratio(const NetDescriptor& net, std::size_t layer) {
    const auto& l = net.layers.at(layer);
    if (l.in_w <= 0 || l.in_h <= 0 || l.k <= 0 || l.och <= 0) throw std::invalid_argument("feedback_ratio: zero dims");
    return ((double)l.in_w * l.in_h) / ((double)l.k * l.k) * ((double)net.classes / l.och);
}

double ep_latency(const NetworkPlan& plan, EpKind kind, int workers) {
    plan.validate();
    const double tasks = plan.recurrent() ? (double)plan.time_steps : (double)plan.layers.size();
    double critical;
    if (kind == EpKind::bp) {
        critical = tasks;
    } else if (plan.recurrent()) {
        critical = 1.0;  // all time-step errors at once
    } else {
        critical = (double)plan.module_count();
    }
    if (workers > 0) critical = std::max(critical, std::ceil(tasks / workers));
    return critical;
}

// ---- reference descriptors -------------------------------------------------------------------

namespace {

CostLayer conv_desc(int ich, int och, int in, int out, int k = 3, bool shares = false) {
    CostLayer l;
    l.kind = CostLayer::Kind::conv;
    l.ich = ich;
    l.och = och;
    l.in_w = l.in_h = in;
    l.out_w = l.out_h = out;
    l.k = k;
    l.stride = in / out;
    l.shares_error = shares;
    return l;
}

CostLayer dense_desc(int in, int out) {
    CostLayer l;
    l.kind = CostLayer::Kind::dense;
    l.ich = in;
    l.och = out;
    l.k = 1;
    return l;
}

} // namespace

NetDescriptor vgg16_descriptor() {
    NetDescriptor n;
    n.name = "vgg16";
    n.classes = 10;
    n.layers = {
        conv_desc(3, 64, 32, 32),    conv_desc(64, 64, 32, 32),
        conv_desc(64, 128, 16, 16),  conv_desc(128, 128, 16, 16),
        conv_desc(128, 256, 8, 8),   conv_desc(256, 256, 8, 8),  conv_desc(256, 256, 8, 8),
        conv_desc(256, 512, 4, 4),   conv_desc(512, 512, 4, 4),  conv_desc(512, 512, 4, 4),
        conv_desc(512, 512, 2, 2),   conv_desc(512, 512, 2, 2),  conv_desc(512, 512, 2, 2),
        dense_desc(512, 10),
    };
    return n;
}

NetDescriptor resnet18_descriptor() {
    NetDescriptor n;
    n.name = "resnet18";
    n.classes = 10;
    auto block = [&](int ich, int och, int in, int out, bool down) {
        n.layers.push_back(conv_desc(ich, och, in, out));
        n.layers.push_back(conv_desc(och, och, out, out));
        if (down) n.layers.push_back(conv_desc(ich, och, in, out, 1, /*shares=*/true));
    };
    n.layers.push_back(conv_desc(3, 64, 32, 32));
    block(64, 64, 32, 32, false);
    block(64, 64, 32, 32, false);
    block(64, 128, 32, 16, true);
    block(128, 128, 16, 16, false);
    block(128, 256, 16, 8, true);
    block(256, 256, 8, 8, false);
    block(256, 512, 8, 4, true);
    block(512, 512, 4, 4, false);
    n.layers.push_back(dense_desc(512, 10));
    return n;
}

NetDescriptor resnet50_descriptor() {
    NetDescriptor n;
    n.name = "resnet50";
    n.classes = 10;
    // bottleneck: 1x1 reduce at input resolution, strided 3x3, 1x1 expand
    auto bottleneck = [&](int ich, int mid, int och, int in, int out, bool down) {
        n.layers.push_back(conv_desc(ich, mid, in, in, 1));
        n.layers.push_back(conv_desc(mid, mid, in, out));
        n.layers.push_back(conv_desc(mid, och, out, out, 1));
        if (down) n.layers.push_back(conv_desc(ich, och, in, out, 1, /*shares=*/true));
    };
    n.layers.push_back(conv_desc(3, 64, 32, 32));
    const int stages[4][3] = {{64, 256, 3}, {128, 512, 4}, {256, 1024, 6}, {512, 2048, 3}};
    int ich = 64, in = 32;
    for (int s = 0; s < 4; ++s) {
        const int mid = stages[s][0], och = stages[s][1], blocks = stages[s][2];
        const int out = s == 0 ? in : in / 2;
        bottleneck(ich, mid, och, in, out, true);
        for (int b = 1; b < blocks; ++b) bottleneck(och, mid, och, out, out, false);
        ich = och;
        in = out;
    }
    n.layers.push_back(dense_desc(2048, 10));
    return n;
}

NetDescriptor rnn_descriptor(NetDescriptor::Cell cell, int hidden, int time_steps, int vocab, int batch) {
    NetDescriptor n;
    n.name = cell == NetDescriptor::Cell::vanilla ? "rnn" : (cell == NetDescriptor::Cell::lstm ? "lstm" : "gru");
    n.cell = cell;
    n.hidden = hidden;
    n.time_steps = time_steps;
    n.vocab = vocab;
    n.batch = batch;
    n.classes = vocab;
    return n;
}

NetDescriptor descriptor_from_plan(const NetworkPlan& plan, const std::vector<std::size_t>& input_shape,
                                   const std::string& name) {
    NetDescriptor n;
    n.name = name;
    if (plan.recurrent()) {
        switch (plan.layers[1].kind) {
            case LayerKind::vanilla_rnn_cell: n.cell = NetDescriptor::Cell::vanilla; break;
            case LayerKind::lstm_cell: n.cell = NetDescriptor::Cell::lstm; break;
            default: n.cell = NetDescriptor::Cell::gru; break;
        }
        n.hidden = plan.layers[1].out;
        n.time_steps = plan.time_steps;
        n.vocab = plan.layers[2].out;
        n.classes = n.vocab;
        return n;
    }
    const auto dims = layer_dims(plan, input_shape);
    std::size_t in_w = input_shape.size() == 3 ? input_shape[2] : 1;
    std::size_t ich = input_shape[0];
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
        const auto& l = plan.layers[i];
        CostLayer c;
        if (l.kind == LayerKind::conv) {
            c = conv_desc((int)ich, (int)dims[i].ch, (int)in_w, (int)dims[i].w, l.conv.kernel);
        } else {
            c = dense_desc((int)(i == 0 ? ich : dims[i - 1].numel()), l.out);
        }
        n.layers.push_back(c);
        in_w = dims[i].is_conv ? dims[i].w : 1;
        ich = dims[i].is_conv ? dims[i].ch : dims[i].features;
    }
    n.classes = plan.layers.back().out;
    return n;
}

} // namespace dfa
