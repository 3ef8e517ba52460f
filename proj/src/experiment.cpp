#include "dfa/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dfa/serialize.hpp"

namespace dfa {

namespace fs = std::filesystem;

// ---- config ------------------------------------------------------------------

namespace {

bool parse_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: bad boolean '" + v + "'");
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    ExperimentConfig cfg;
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("config: expected key=value, got '" + line + "'");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    if (key == "plan") plan = value;
    else if (key == "strategy") strategy = value;
    else if (key == "optimizer") optimizer = value;
    else if (key == "cell") cell = value;
    else if (key == "lr") lr = std::stod(value);
    else if (key == "alpha") alpha = std::stod(value);
    else if (key == "gamma") gamma = std::stod(value);
    else if (key == "p") p = std::stod(value);
    else if (key == "groups") groups = std::stoi(value);
    else if (key == "sparsity") sparsity = std::stod(value);
    else if (key == "binary") binary = parse_bool(value);
    else if (key == "bw_init") bw_init = parse_bool(value);
    else if (key == "literal_exponent") literal_exponent = parse_bool(value);
    else if (key == "feedback_scale") feedback_scale = std::stod(value);
    else if (key == "epochs") epochs = std::stoi(value);
    else if (key == "batch") batch = std::stoi(value);
    else if (key == "seed") seed = (std::uint64_t)std::stoull(value);
    else if (key == "dataset") dataset = value;
    else if (key == "subset_train") subset_train = (std::size_t)std::stoull(value);
    else if (key == "subset_test") subset_test = (std::size_t)std::stoull(value);
    else if (key == "augment") augment = parse_bool(value);
    else if (key == "time_steps") time_steps = std::stoi(value);
    else if (key == "hidden") hidden = std::stoi(value);
    else if (key == "base_channels") base_channels = std::stoi(value);
    else if (key == "bp_only_control") bp_only_control = parse_bool(value);
    else if (key == "out_dir") out_dir = value;
    else if (key == "mlp_dims") {
        mlp_dims.clear();
        std::stringstream ss(value);
        std::string tok;
        while (std::getline(ss, tok, ',')) mlp_dims.push_back(std::stoi(tok));
    } else {
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
}

EpStrategy ExperimentConfig::make_strategy() const {
    EpStrategy s;
    if (strategy == "bp") s.kind = EpKind::bp;
    else if (strategy == "dfa_original") s.kind = EpKind::dfa_original;
    else if (strategy == "dfa_modular") s.kind = EpKind::dfa_modular;
    else if (strategy == "dfa_conv") s.kind = EpKind::dfa_conv;
    else if (strategy == "dfa_groupconv") s.kind = EpKind::dfa_groupconv;
    else if (strategy == "dfa_rnn") s.kind = EpKind::dfa_rnn_triangular;
    else throw std::invalid_argument("config: unknown strategy '" + strategy + "'");
    s.groups = s.kind == EpKind::dfa_conv ? 1 : groups;
    s.sparsity = sparsity;
    const bool conv_kind = s.kind == EpKind::dfa_conv || s.kind == EpKind::dfa_groupconv;
    s.binary = binary.value_or(conv_kind);
    s.bp_ratio = p;
    s.bw_init = bw_init;
    s.literal_exponent = literal_exponent;
    s.feedback_scale = feedback_scale;
    s.validate();
    return s;
}

// ---- shared helpers -------------------------------------------------------------

double next_word_accuracy(const TensorT<float>& logits, const std::vector<int>& targets) {
    std::size_t rows, cols;
    if (logits.rank() == 2) {
        rows = logits.dim(0);
        cols = logits.dim(1);
    } else if (logits.rank() == 3) {
        rows = logits.dim(0) * logits.dim(1);
        cols = logits.dim(2);
    } else {
        throw std::invalid_argument("next_word_accuracy: expects rank-2 or rank-3 logits");
    }
    if (rows == 0 || targets.size() != rows) throw std::invalid_argument("next_word_accuracy: empty or mismatched batch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        const float* row = logits.data() + i * cols;
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c)
            if (row[c] > row[best]) best = c;  // ties keep the lowest index
        hits += (int)best == targets[i];
    }
    return 100.0 * (double)hits / (double)rows;
}

namespace {

using P32 = ParamsT<float>;
using F32 = FeedbackSetT<float>;

struct Optimizers {
    std::optional<MomentumStateT<float>> momentum;
    std::optional<AdamStateT<float>> adam;
    std::optional<HdfaStateT<float>> hdfa;
    std::optional<HdfaAdamStateT<float>> hdfa_adam;
};

Optimizers make_optimizers(const ExperimentConfig& cfg, const P32& params) {
    Optimizers o;
    if (cfg.optimizer == "momentum") {
        o.momentum = MomentumStateT<float>::init(params, (float)cfg.lr, (float)cfg.alpha);
    } else if (cfg.optimizer == "adam") {
        o.adam = AdamStateT<float>::init(params, (float)cfg.lr);
    } else if (cfg.optimizer == "hdfa") {
        o.hdfa = HdfaStateT<float>::init(params, (float)cfg.lr, (float)cfg.alpha, (float)cfg.gamma, cfg.p, cfg.seed);
    } else if (cfg.optimizer == "hdfa_adam") {
        o.hdfa_adam = HdfaAdamStateT<float>::init(params, (float)cfg.lr, cfg.p, cfg.seed);
    } else {
        throw std::invalid_argument("config: unknown optimizer '" + cfg.optimizer + "'");
    }
    return o;
}

struct CostSnapshot {
    double weight_bytes = 0, ops = 0;
};

CostSnapshot cost_snapshot(const ExperimentConfig& cfg, const NetworkPlan& plan,
                           const std::vector<std::size_t>& input_shape) {
    NetDescriptor nd = plan.recurrent() ? descriptor_from_plan(plan, {}, cfg.plan)
                                        : descriptor_from_plan(plan, input_shape, cfg.plan);
    nd.batch = cfg.batch;
    const EpStrategy st = cfg.make_strategy();
    CostReport r;
    const bool hybrid = cfg.optimizer == "hdfa" || cfg.optimizer == "hdfa_adam";
    if (cfg.bp_only_control) {
        CostReport bp = cost_bp(nd);
        r = bp;
        r.weight_bytes *= cfg.p;
        r.ops *= cfg.p;
    } else if (hybrid) {
        r = cost_hybrid(nd, st.groups, st.sparsity, st.binary, cfg.p);
    } else {
        switch (st.kind) {
            case EpKind::bp: r = cost_bp(nd); break;
            case EpKind::dfa_original: r = cost_dfa_original(nd); break;
            default: r = cost_dfa_revised(nd, st.groups, st.sparsity, st.binary); break;
        }
    }
    return {r.weight_bytes, r.ops};
}

std::string csv_header_comment(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "# dfatrain metrics v1 plan=" << cfg.plan << " strategy=" << cfg.strategy << " optimizer=" << cfg.optimizer
       << " p=" << cfg.p << " groups=" << cfg.groups << " sparsity=" << cfg.sparsity << " seed=" << cfg.seed;
    return os.str();
}

void write_csv(const std::string& path, const ExperimentConfig& cfg, const std::vector<EpochMetrics>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("experiment: cannot write " + path);
    os << csv_header_comment(cfg) << "\n";
    os << "epoch,train_acc,test_acc,train_loss,test_loss,align_deg,ep_weight_bytes,ep_ops\n";
    char buf[512];
    for (const auto& r : rows) {
        std::string align;
        for (std::size_t i = 0; i < r.align_deg.size(); ++i) {
            char a[32];
            std::snprintf(a, sizeof a, "%.3f", r.align_deg[i]);
            align += (i ? "|" : "") + std::string(a);
        }
        std::snprintf(buf, sizeof buf, "%d,%.4f,%.4f,%.6f,%.6f,%s,%.0f,%.0f\n", r.epoch, r.train_acc, r.test_acc,
                      r.train_loss, r.test_loss, align.c_str(), r.ep_weight_bytes, r.ep_ops);
        os << buf;
    }
}

// accuracy + mean loss over a labeled set, evaluated in chunks
template <class GetBatch>
std::pair<double, double> evaluate_chunks(const NetworkPlan& plan, const P32& params, std::size_t n,
                                          std::size_t chunk, GetBatch&& get) {
    double loss_sum = 0;
    std::size_t hits = 0, rows = 0;
    for (std::size_t at = 0; at < n; at += chunk) {
        const std::size_t take = std::min(chunk, n - at);
        auto [input, labels] = get(at, take);
        auto fr = forward(plan, params, input);
        auto lr = loss_and_output_error(fr.output, labels);
        const std::size_t cols = fr.output.dim(fr.output.rank() - 1);
        const std::size_t r = fr.output.numel() / cols;
        loss_sum += lr.loss * (double)r;
        rows += r;
        for (std::size_t i = 0; i < r; ++i) {
            const float* row = fr.output.data() + i * cols;
            std::size_t best = 0;
            for (std::size_t c = 1; c < cols; ++c)
                if (row[c] > row[best]) best = c;
            hits += (int)best == labels[i];
        }
    }
    return {100.0 * (double)hits / (double)rows, loss_sum / (double)rows};
}

NetworkPlan make_ff_plan(const ExperimentConfig& cfg) {
    if (cfg.plan == "mini_vgg") return mini_vgg_plan(cfg.base_channels);
    if (cfg.plan == "mini_res") return mini_res_plan(cfg.base_channels);
    if (cfg.plan == "mlp") return mlp_plan(cfg.mlp_dims);
    throw std::invalid_argument("config: unknown plan '" + cfg.plan + "'");
}

// gather a batch of images (optionally flattened for dense plans)
TensorT<float> gather_images(const LabeledImages& data, const std::vector<std::size_t>& idx, std::size_t at,
                             std::size_t take, bool flatten) {
    const std::size_t px = 3 * 32 * 32;
    TensorT<float> out(flatten ? std::vector<std::size_t>{take, px} : std::vector<std::size_t>{take, 3, 32, 32});
    for (std::size_t i = 0; i < take; ++i)
        std::copy(data.images.data() + idx[at + i] * px, data.images.data() + (idx[at + i] + 1) * px,
                  out.data() + i * px);
    return out;
}

ExperimentResult run_ff_experiment(const ExperimentConfig& cfg) {
    const NetworkPlan plan = make_ff_plan(cfg);
    const bool dense_plan = cfg.plan == "mlp";
    const std::vector<std::size_t> input_shape =
        dense_plan ? std::vector<std::size_t>{(std::size_t)cfg.mlp_dims[0]} : std::vector<std::size_t>{3, 32, 32};

    if (cfg.dataset.empty()) throw std::runtime_error("experiment: dataset directory required");
    ImageData data = load_cifar10(cfg.dataset, cfg.subset_train, cfg.subset_test, cfg.seed);

    P32 params = init_params<float>(plan, cfg.seed);
    const EpStrategy st = cfg.make_strategy();
    F32 fb = build_feedback<float>(plan, st, cfg.seed, input_shape, &params);
    const std::uint64_t fb_sum = fb.checksum();
    Optimizers opt = make_optimizers(cfg, params);
    const bool hybrid = cfg.optimizer == "hdfa" || cfg.optimizer == "hdfa_adam";
    if (hybrid && st.kind == EpKind::bp && cfg.p < 1.0 && !cfg.bp_only_control)
        throw std::invalid_argument("experiment: hybrid optimizer needs a DFA strategy");

    Rng shuffle_rng = Rng::stream(cfg.seed, 6);
    Rng aug_rng = Rng::stream(cfg.seed, 7);

    ExperimentResult res;
    res.feedback_checksum = fb_sum;
    if (!plan.recurrent() && st.kind != EpKind::bp) res.init_alignment = alignment_profile(plan, params, fb);
    const CostSnapshot snap = cost_snapshot(cfg, plan, input_shape);

    std::vector<std::size_t> order(data.train.count());
    std::iota(order.begin(), order.end(), 0);
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - at);
            TensorT<float> batch = gather_images(data.train, order, at, take, /*flatten=*/false);
            if (cfg.augment) batch = augment_batch(batch, aug_rng);
            if (dense_plan) batch = batch.reshaped({take, (std::size_t)cfg.mlp_dims[0]});
            std::vector<int> labels(take);
            for (std::size_t i = 0; i < take; ++i) labels[i] = data.train.labels[order[at + i]];

            auto fr = forward(plan, params, batch);
            auto lr = loss_and_output_error(fr.output, labels);
            if (!std::isfinite(lr.loss))
                throw std::runtime_error("experiment: non-finite loss at epoch " + std::to_string(epoch));

            if (opt.hdfa || opt.hdfa_adam) {
                const bool bp = opt.hdfa ? opt.hdfa->draw_is_bp() : opt.hdfa_adam->draw_is_bp();
                if (!bp && cfg.bp_only_control) continue;  // control: no update on DFA draws
                auto br = bp ? bp_backward(plan, params, fr.tape, lr.error)
                             : ep_backward(plan, params, fb, fr.tape, lr.error);
                if (opt.hdfa)
                    hdfa_apply(*opt.hdfa, params, br.grads, bp);
                else
                    hdfa_adam_step(*opt.hdfa_adam, params, br.grads);
            } else {
                auto br = ep_backward(plan, params, fb, fr.tape, lr.error);
                if (opt.momentum)
                    momentum_step(*opt.momentum, params, br.grads);
                else
                    adam_step(*opt.adam, params, br.grads);
            }
        }

        if (fb.checksum() != fb_sum) throw std::runtime_error("experiment: feedback weights changed during training");

        EpochMetrics m;
        m.epoch = epoch;
        std::vector<std::size_t> ident(data.train.count());
        std::iota(ident.begin(), ident.end(), 0);
        auto train_eval = evaluate_chunks(plan, params, data.train.count(), 256, [&](std::size_t at, std::size_t take) {
            TensorT<float> b = gather_images(data.train, ident, at, take, dense_plan);
            std::vector<int> l(data.train.labels.begin() + at, data.train.labels.begin() + at + take);
            return std::make_pair(std::move(b), std::move(l));
        });
        std::vector<std::size_t> tid(data.test.count());
        std::iota(tid.begin(), tid.end(), 0);
        auto test_eval = evaluate_chunks(plan, params, data.test.count(), 256, [&](std::size_t at, std::size_t take) {
            TensorT<float> b = gather_images(data.test, tid, at, take, dense_plan);
            std::vector<int> l(data.test.labels.begin() + at, data.test.labels.begin() + at + take);
            return std::make_pair(std::move(b), std::move(l));
        });
        m.train_acc = train_eval.first;
        m.train_loss = train_eval.second;
        m.test_acc = test_eval.first;
        m.test_loss = test_eval.second;
        if (!res.init_alignment.empty()) m.align_deg = alignment_profile(plan, params, fb);
        m.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        m.ep_weight_bytes = snap.weight_bytes;
        m.ep_ops = snap.ops;
        res.epochs.push_back(std::move(m));
    }

    fs::create_directories(cfg.out_dir);
    res.csv_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    res.params_path = (fs::path(cfg.out_dir) / "params.bin").string();
    res.feedback_path = (fs::path(cfg.out_dir) / "feedback.bin").string();
    write_csv(res.csv_path, cfg, res.epochs);
    save_params(res.params_path, params);
    save_feedback(res.feedback_path, fb, cfg.seed);
    std::ofstream timing((fs::path(cfg.out_dir) / "timing.txt").string(), std::ios::trunc);
    timing << "wall_s=" << (res.epochs.empty() ? 0.0 : res.epochs.back().wall_s) << "\n";
    return res;
}

ExperimentResult run_rnn_experiment(const ExperimentConfig& cfg) {
    if (cfg.dataset.empty()) throw std::runtime_error("experiment: corpus path required");
    Corpus corpus = load_text_corpus(cfg.dataset);
    const int vocab = (int)corpus.vocab.size();
    const std::size_t train_n = std::min(cfg.subset_train, corpus.tokens.size());
    const std::size_t test_n = std::min(cfg.subset_test, corpus.tokens.size() - train_n);
    std::vector<int> train_tokens(corpus.tokens.begin(), corpus.tokens.begin() + train_n);
    std::vector<int> test_tokens(corpus.tokens.begin() + train_n, corpus.tokens.begin() + train_n + test_n);

    LayerKind cellk = LayerKind::vanilla_rnn_cell;
    if (cfg.cell == "lstm") cellk = LayerKind::lstm_cell;
    else if (cfg.cell == "gru") cellk = LayerKind::gru_cell;
    else if (cfg.cell != "vanilla") throw std::invalid_argument("config: unknown cell '" + cfg.cell + "'");
    NetworkPlan plan = rnn_plan(vocab, cfg.hidden, cfg.time_steps, cellk);

    auto train_batches = batch_corpus(train_tokens, cfg.time_steps, cfg.batch);
    auto test_batches = batch_corpus(test_tokens, cfg.time_steps, cfg.batch);
    if (train_batches.empty()) throw std::runtime_error("experiment: corpus too small for the batch geometry");

    P32 params = init_params<float>(plan, cfg.seed);
    const EpStrategy st = cfg.make_strategy();
    F32 fb = build_feedback<float>(plan, st, cfg.seed, {}, &params);
    const std::uint64_t fb_sum = fb.checksum();
    Optimizers opt = make_optimizers(cfg, params);
    const bool hybrid = cfg.optimizer == "hdfa" || cfg.optimizer == "hdfa_adam";
    if (hybrid && st.kind == EpKind::bp && cfg.p < 1.0 && !cfg.bp_only_control)
        throw std::invalid_argument("experiment: hybrid optimizer needs a DFA strategy");

    ExperimentResult res;
    res.feedback_checksum = fb_sum;
    const CostSnapshot snap = cost_snapshot(cfg, plan, {});
    const auto t0 = std::chrono::steady_clock::now();

    auto evaluate = [&](const std::vector<SeqBatch>& batches) {
        double loss_sum = 0;
        double acc_sum = 0;
        std::size_t rows = 0;
        for (const auto& sb : batches) {
            auto fr = forward(plan, params, sb.tokens);
            auto lr = loss_and_output_error(fr.output, sb.targets);
            const std::size_t r = sb.targets.size();
            loss_sum += lr.loss * (double)r;
            acc_sum += next_word_accuracy(fr.output, sb.targets) * (double)r;
            rows += r;
        }
        if (rows == 0) return std::make_pair(0.0, 0.0);
        return std::make_pair(acc_sum / (double)rows, loss_sum / (double)rows);
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (const auto& sb : train_batches) {
            auto fr = forward(plan, params, sb.tokens);
            auto lr = loss_and_output_error(fr.output, sb.targets);
            if (!std::isfinite(lr.loss))
                throw std::runtime_error("experiment: non-finite loss at epoch " + std::to_string(epoch));
            if (opt.hdfa || opt.hdfa_adam) {
                const bool bp = opt.hdfa ? opt.hdfa->draw_is_bp() : opt.hdfa_adam->draw_is_bp();
                if (!bp && cfg.bp_only_control) continue;
                auto br = bp ? bp_backward(plan, params, fr.tape, lr.error)
                             : ep_backward(plan, params, fb, fr.tape, lr.error);
                if (opt.hdfa)
                    hdfa_apply(*opt.hdfa, params, br.grads, bp);
                else
                    hdfa_adam_step(*opt.hdfa_adam, params, br.grads);
            } else {
                auto br = ep_backward(plan, params, fb, fr.tape, lr.error);
                if (opt.momentum)
                    momentum_step(*opt.momentum, params, br.grads);
                else
                    adam_step(*opt.adam, params, br.grads);
            }
        }
        if (fb.checksum() != fb_sum) throw std::runtime_error("experiment: feedback weights changed during training");

        EpochMetrics m;
        m.epoch = epoch;
        auto tr = evaluate(train_batches);
        auto te = evaluate(test_batches);
        m.train_acc = tr.first;
        m.train_loss = tr.second;
        m.test_acc = te.first;
        m.test_loss = te.second;
        m.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        m.ep_weight_bytes = snap.weight_bytes;
        m.ep_ops = snap.ops;
        res.epochs.push_back(std::move(m));
    }

    fs::create_directories(cfg.out_dir);
    res.csv_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    res.params_path = (fs::path(cfg.out_dir) / "params.bin").string();
    res.feedback_path = (fs::path(cfg.out_dir) / "feedback.bin").string();
    write_csv(res.csv_path, cfg, res.epochs);
    save_params(res.params_path, params);
    save_feedback(res.feedback_path, fb, cfg.seed);
    std::ofstream timing((fs::path(cfg.out_dir) / "timing.txt").string(), std::ios::trunc);
    timing << "wall_s=" << (res.epochs.empty() ? 0.0 : res.epochs.back().wall_s) << "\n";
    return res;
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    if (cfg.plan == "rnn") return run_rnn_experiment(cfg);
    return run_ff_experiment(cfg);
}

// ---- cost tables ------------------------------------------------------------------

namespace {

void check_affine(const NetDescriptor& net, int groups, double sparsity, bool binary) {
    const double c0 = cost_hybrid(net, groups, sparsity, binary, 0.0).weight_bytes;
    const double c1 = cost_hybrid(net, groups, sparsity, binary, 1.0).weight_bytes;
    const double ch = cost_hybrid(net, groups, sparsity, binary, 0.5).weight_bytes;
    if (std::abs(ch - 0.5 * (c0 + c1)) > 1e-6 * std::max(1.0, ch))
        throw std::logic_error("cost tables: hybrid cost is not affine in p");
}

} // namespace

void emit_cost_tables(const std::string& out_dir) {
    fs::create_directories(out_dir);
    const auto cnn_nets = {vgg16_descriptor(), resnet18_descriptor(), resnet50_descriptor()};
    const auto rnn_nets = {rnn_descriptor(NetDescriptor::Cell::vanilla), rnn_descriptor(NetDescriptor::Cell::lstm),
                           rnn_descriptor(NetDescriptor::Cell::gru)};
    constexpr double MiB = 1 << 20;
    constexpr double MB = 1e6;
    constexpr double GOP = 1e9;

    for (const auto& n : cnn_nets) check_affine(n, 4, 0.0, true);
    for (const auto& n : rnn_nets) check_affine(n, 1, 0.0, true);

    char buf[256];
    {
        std::ofstream a((fs::path(out_dir) / "cnn_ep_memory.csv").string(), std::ios::trunc);
        std::ofstream b((fs::path(out_dir) / "cnn_ep_ops.csv").string(), std::ios::trunc);
        a << "# EP memory transaction per iteration [MiB]; backward weights only, 4-byte scalars, 1-bit binary "
             "kernels; first layer excluded for BP/original DFA; revised DFA pairs a k x k and a 1 x 1 grouped "
             "kernel per conv layer\n";
        b << "# EP operations per example [GOP]; 1 op = one multiply or add with a nonzero weight\n";
        a << "strategy,groups,vgg16,resnet18,resnet50\n";
        b << "strategy,groups,vgg16,resnet18,resnet50\n";
        auto row3 = [&](std::ofstream& os, const std::string& name, const std::string& g, double v1, double v2,
                        double v3) {
            std::snprintf(buf, sizeof buf, "%s,%s,%.3f,%.3f,%.3f\n", name.c_str(), g.c_str(), v1, v2, v3);
            os << buf;
        };
        auto row = [&](std::ofstream& os, const std::string& name, const std::string& g, double v1, double v2,
                       double v3) {
            if (&os == &b) {
                row3(os, name, g, v1, v2, v3);
                return;
            }
            std::snprintf(buf, sizeof buf, "%s,%s,%.2f,%.2f,%.2f\n", name.c_str(), g.c_str(), v1, v2, v3);
            os << buf;
        };
        auto cell = [&](const NetDescriptor& n, int kind, int g, double p) {
            CostReport r;
            if (kind == 0) r = cost_bp(n);
            else if (kind == 1) r = cost_dfa_original(n);
            else if (kind == 2) r = cost_dfa_revised(n, g, 0.0, true);
            else r = cost_hybrid(n, g, 0.0, true, p);
            return r;
        };
        const auto& v = *cnn_nets.begin();
        const auto& r18 = *(cnn_nets.begin() + 1);
        const auto& r50 = *(cnn_nets.begin() + 2);
        row(a, "bp", "-", cost_bp(v).weight_bytes / MiB, cost_bp(r18).weight_bytes / MiB, cost_bp(r50).weight_bytes / MiB);
        row(b, "bp", "-", cost_bp(v).ops / GOP, cost_bp(r18).ops / GOP, cost_bp(r50).ops / GOP);
        row(a, "dfa_original", "-", cost_dfa_original(v).weight_bytes / MiB, cost_dfa_original(r18).weight_bytes / MiB,
            cost_dfa_original(r50).weight_bytes / MiB);
        row(b, "dfa_original", "-", cost_dfa_original(v).ops / GOP, cost_dfa_original(r18).ops / GOP,
            cost_dfa_original(r50).ops / GOP);
        for (int g : {4, 8}) {
            row(a, "dfa_revised", std::to_string(g), cell(v, 2, g, 0).weight_bytes / MiB,
                cell(r18, 2, g, 0).weight_bytes / MiB, cell(r50, 2, g, 0).weight_bytes / MiB);
            row(b, "dfa_revised", std::to_string(g), cell(v, 2, g, 0).ops / GOP, cell(r18, 2, g, 0).ops / GOP,
                cell(r50, 2, g, 0).ops / GOP);
        }
        for (double p : {0.1, 0.3}) {
            for (int g : {4, 8}) {
                std::snprintf(buf, sizeof buf, "hybrid_p%.1f", p);
                row(a, buf, std::to_string(g), cell(v, 3, g, p).weight_bytes / MiB, cell(r18, 3, g, p).weight_bytes / MiB,
                    cell(r50, 3, g, p).weight_bytes / MiB);
                row(b, buf, std::to_string(g), cell(v, 3, g, p).ops / GOP, cell(r18, 3, g, p).ops / GOP,
                    cell(r50, 3, g, p).ops / GOP);
            }
        }
    }
    {
        std::ofstream a((fs::path(out_dir) / "rnn_ep_memory.csv").string(), std::ios::trunc);
        std::ofstream b((fs::path(out_dir) / "rnn_ep_ops.csv").string(), std::ios::trunc);
        a << "# EP memory transaction per iteration [MB, 1e6 bytes]; backward weights only; nonzero values count "
             "under sparsity; binary weights cost 1 bit\n";
        b << "# EP operations per iteration (batch 20) [GOP]; binarization leaves the op count unchanged\n";
        a << "strategy,sparsity,rnn,lstm,gru\n";
        b << "strategy,sparsity,rnn,lstm,gru\n";
        const auto& rn = *rnn_nets.begin();
        const auto& ls = *(rnn_nets.begin() + 1);
        const auto& gr = *(rnn_nets.begin() + 2);
        auto fmt1 = [](double v, char* out, std::size_t n) {
            std::snprintf(out, n, v >= 100.0 ? "%.1f" : "%.2f", v);
        };
        auto row = [&](std::ofstream& os, const std::string& name, const std::string& s, double v1, double v2,
                       double v3) {
            char a1[32], a2[32], a3[32];
            fmt1(v1, a1, sizeof a1);
            fmt1(v2, a2, sizeof a2);
            fmt1(v3, a3, sizeof a3);
            std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%s\n", name.c_str(), s.c_str(), a1, a2, a3);
            os << buf;
        };
        row(a, "bp", "-", cost_bp(rn).weight_bytes / MB, cost_bp(ls).weight_bytes / MB, cost_bp(gr).weight_bytes / MB);
        row(b, "bp", "-", cost_bp(rn).ops / GOP, cost_bp(ls).ops / GOP, cost_bp(gr).ops / GOP);
        row(a, "dfa_original", "-", cost_dfa_original(rn).weight_bytes / MB, cost_dfa_original(ls).weight_bytes / MB,
            cost_dfa_original(gr).weight_bytes / MB);
        row(b, "dfa_original", "-", cost_dfa_original(rn).ops / GOP, cost_dfa_original(ls).ops / GOP,
            cost_dfa_original(gr).ops / GOP);
        row(a, "dfa_revised", "-", cost_dfa_revised(rn, 1, 0, false).weight_bytes / MB,
            cost_dfa_revised(ls, 1, 0, false).weight_bytes / MB, cost_dfa_revised(gr, 1, 0, false).weight_bytes / MB);
        row(b, "dfa_revised", "-", cost_dfa_revised(rn, 1, 0, false).ops / GOP, cost_dfa_revised(ls, 1, 0, false).ops / GOP,
            cost_dfa_revised(gr, 1, 0, false).ops / GOP);
        for (double p : {0.1, 0.2}) {
            double prev_mem = 1e300;
            for (double s : {0.0, 0.8, 0.95, 0.98}) {
                std::snprintf(buf, sizeof buf, "hybrid_p%.1f_binary", p);
                const std::string name = buf;
                std::snprintf(buf, sizeof buf, "%.2f", s);
                const std::string sp = buf;
                const double m1 = cost_hybrid(rn, 1, s, true, p).weight_bytes / MB;
                row(a, name, sp, m1, cost_hybrid(ls, 1, s, true, p).weight_bytes / MB,
                    cost_hybrid(gr, 1, s, true, p).weight_bytes / MB);
                row(b, name, sp, cost_hybrid(rn, 1, s, true, p).ops / GOP, cost_hybrid(ls, 1, s, true, p).ops / GOP,
                    cost_hybrid(gr, 1, s, true, p).ops / GOP);
                if (m1 > prev_mem) throw std::logic_error("cost tables: memory not monotone under sparsity");
                prev_mem = m1;
            }
        }
    }
    {
        std::ofstream os((fs::path(out_dir) / "feedback_ratio_sweep.csv").string(), std::ios::trunc);
        os << "# original/proposed feedback weight count ratio: (w*h)/(k*k) * (classes/och)\n";
        os << "sweep,value,ratio\n";
        NetDescriptor probe;
        probe.classes = 10;
        CostLayer l;
        l.kind = CostLayer::Kind::conv;
        l.in_w = l.in_h = 32;
        l.ich = 16;
        l.och = 64;
        l.k = 3;
        probe.layers.push_back(l);
        for (int wh : {4, 8, 16, 32, 64}) {
            NetDescriptor g = probe;
            g.layers[0].in_w = g.layers[0].in_h = wh;
            std::snprintf(buf, sizeof buf, "feature_size,%d,%.4f\n", wh, feedback_ratio(g, 0));
            os << buf;
        }
        for (int cls : {2, 10, 100, 1000, 10000}) {
            NetDescriptor g = probe;
            g.classes = cls;
            std::snprintf(buf, sizeof buf, "classes,%d,%.4f\n", cls, feedback_ratio(g, 0));
            os << buf;
        }
    }
}

} // namespace dfa
