#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dfa/dataset.hpp"
#include "dfa/experiment.hpp"
#include "dfa/optim.hpp"
#include "dfa/serialize.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using dfa::ExperimentConfig;
using dfa::Tensor32;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_raw_batch(const std::string& path, std::size_t records, unsigned char label = 3) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    std::vector<unsigned char> rec(3073, 7);
    rec[0] = label;
    for (std::size_t i = 0; i < records; ++i) os.write((const char*)rec.data(), 3073);
}

const std::string kDataDir = "tmp_harness_data";

void ensure_synthetic_data() {
    static bool done = false;
    if (done) return;
    dfa::write_synthetic_cifar(kDataDir, 400, 7);
    dfa::write_synthetic_corpus(kDataDir + "/corpus.txt", 12000, 7);
    done = true;
}

} // namespace

TEST_CASE("cifar batch reader enforces the record format") {
    fs::create_directories(kDataDir);
    const std::string big = kDataDir + "/full_batch.bin";
    write_raw_batch(big, 10000);
    auto li = dfa::read_cifar_batch(big);
    CHECK(li.count() == 10000);  // 10000 records per standard batch file
    CHECK(li.labels[0] == 3);

    const std::string ragged = kDataDir + "/ragged.bin";
    {
        std::ofstream os(ragged, std::ios::binary | std::ios::trunc);
        std::vector<char> junk(3073 * 2 + 5, 1);
        os.write(junk.data(), (std::streamsize)junk.size());
    }
    CHECK_THROWS(dfa::read_cifar_batch(ragged));

    const std::string badlabel = kDataDir + "/badlabel.bin";
    write_raw_batch(badlabel, 1, /*label=*/11);
    CHECK_THROWS(dfa::read_cifar_batch(badlabel));
}

TEST_CASE("synthetic cifar loads, subsets and normalizes") {
    ensure_synthetic_data();
    auto data = dfa::load_cifar10(kDataDir, 600, 200, 5);
    CHECK(data.train.count() == 600);
    CHECK(data.test.count() == 200);
    for (int l : data.train.labels) {
        CHECK(l >= 0);
        CHECK(l <= 9);
    }
    // normalized train subset has near-zero mean, unit variance per channel
    for (int c = 0; c < 3; ++c) {
        double sum = 0, sq = 0;
        const std::size_t per = 1024;
        for (std::size_t i = 0; i < data.train.count(); ++i) {
            const float* px = data.train.images.data() + i * 3072 + c * per;
            for (std::size_t p = 0; p < per; ++p) {
                sum += px[p];
                sq += (double)px[p] * px[p];
            }
        }
        const double n = (double)data.train.count() * per;
        CHECK(std::abs(sum / n) < 1e-3);
        CHECK(std::abs(sq / n - 1.0) < 1e-3);
    }
    // deterministic subset given the seed
    auto again = dfa::load_cifar10(kDataDir, 600, 200, 5);
    CHECK(again.train.labels == data.train.labels);
}

TEST_CASE("augmentation keeps the 32x32 shape and only moves pixels") {
    ensure_synthetic_data();
    auto data = dfa::load_cifar10(kDataDir, 32, 16, 5);
    dfa::Rng rng(3);
    Tensor32 batch({4, 3, 32, 32});
    std::copy(data.train.images.data(), data.train.images.data() + batch.numel(), batch.data());
    Tensor32 aug = dfa::augment_batch(batch, rng);
    CHECK(aug.same_shape(batch));
}

TEST_CASE("text corpus tokenization and batching") {
    const std::string path = kDataDir + "/tiny.txt";
    fs::create_directories(kDataDir);
    {
        std::ofstream os(path, std::ios::trunc);
        os << "a b a b";
    }
    auto corpus = dfa::load_text_corpus(path);
    CHECK(corpus.vocab.size() == 3);  // <unk>, a, b
    CHECK(corpus.tokens.size() == 4);

    auto batches = dfa::batch_corpus(corpus.tokens, 2, 1);
    REQUIRE(batches.size() == 1);
    // targets are the inputs shifted by one
    CHECK(batches[0].targets[0] == corpus.tokens[1]);
    CHECK(batches[0].targets[1] == corpus.tokens[2]);

    // batching preserves the token count minus the tail
    std::vector<int> tokens(101);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = (int)(i % 7);
    auto b2 = dfa::batch_corpus(tokens, 4, 5);
    const std::size_t per = tokens.size() / 5;
    CHECK(b2.size() == (per - 1) / 4);
    CHECK(b2.size() * 4 * 5 <= tokens.size());
    for (const auto& sb : b2)
        for (int t : sb.targets) CHECK(t < 7);

    CHECK_THROWS(dfa::load_text_corpus(kDataDir + "/missing.txt"));
}

TEST_CASE("synthetic corpus is deterministic and learnable in structure") {
    ensure_synthetic_data();
    auto corpus = dfa::load_text_corpus(kDataDir + "/corpus.txt");
    CHECK(corpus.tokens.size() == 12000);
    CHECK(corpus.vocab.size() <= 41);
    for (int t : corpus.tokens) CHECK(t < (int)corpus.vocab.size());
}

TEST_CASE("params and feedback serialization round-trips") {
    dfa::NetworkPlan plan = dfa::mini_vgg_plan(4);
    auto params = dfa::init_params<float>(plan, 3);
    fs::create_directories(kDataDir);
    const std::string ppath = kDataDir + "/p.bin";
    dfa::save_params(ppath, params);
    auto loaded = params.zeros_like();
    dfa::load_params(ppath, loaded);
    bool same = true;
    std::size_t idx = 0;
    std::vector<const dfa::TensorT<float>*> orig;
    params.for_each([&](const dfa::TensorT<float>& t) { orig.push_back(&t); });
    loaded.for_each([&](const dfa::TensorT<float>& t) {
        for (std::size_t k = 0; k < t.numel(); ++k) same &= t[k] == (*orig[idx])[k];
        ++idx;
    });
    CHECK(same);

    // conv-pair + dense feedback
    auto fb = dfa::build_feedback<float>(plan, dfa::EpStrategy::group_conv(4), 9, {3, 32, 32}, &params);
    const std::string fpath = kDataDir + "/f.bin";
    dfa::save_feedback(fpath, fb, 9);
    auto fb2 = dfa::load_feedback(fpath, plan);
    CHECK(fb2.checksum() == fb.checksum());

    // triangular + signed-sparse feedback
    dfa::NetworkPlan rplan = dfa::rnn_plan(11, 6, 4);
    auto rparams = dfa::init_params<float>(rplan, 4);
    auto rfb = dfa::build_feedback<float>(rplan, dfa::EpStrategy::rnn_triangular(0.6, true), 10, {}, &rparams);
    const std::string rpath = kDataDir + "/r.bin";
    dfa::save_feedback(rpath, rfb, 10);
    auto rfb2 = dfa::load_feedback(rpath, rplan);
    CHECK(rfb2.checksum() == rfb.checksum());
    CHECK(rfb2.dec_to_cell.size() == rfb.dec_to_cell.size());
    REQUIRE(rfb2.cell_to_emb.has_value());
    CHECK(rfb2.cell_to_emb->steps == 4);
}

TEST_CASE("optimizer state round-trips through the flat binary format") {
    dfa::NetworkPlan plan = dfa::mlp_plan({6, 5, 3});
    auto params = dfa::init_params<float>(plan, 2);
    auto st = dfa::HdfaStateT<float>::init(params, 0.01f, 0.9f, 0.5f, 0.4, 9);
    st.v_bp[0][0] = 1.5f;
    st.v_dfa[1][2] = -2.25f;
    std::vector<const dfa::TensorT<float>*> bufs;
    for (const auto& t : st.v_bp) bufs.push_back(&t);
    for (const auto& t : st.v_dfa) bufs.push_back(&t);
    fs::create_directories(kDataDir);
    dfa::save_optimizer_state(kDataDir + "/opt.bin", {0.01, 0.9, 0.5, 0.4}, bufs);

    auto st2 = dfa::HdfaStateT<float>::init(params, 0.0f, 0.0f, 0.0f, 0.0, 9);
    std::vector<dfa::TensorT<float>*> into;
    for (auto& t : st2.v_bp) into.push_back(&t);
    for (auto& t : st2.v_dfa) into.push_back(&t);
    std::vector<double> scalars;
    dfa::load_optimizer_state(kDataDir + "/opt.bin", scalars, into);
    CHECK(scalars == std::vector<double>{0.01, 0.9, 0.5, 0.4});
    CHECK(st2.v_bp[0][0] == 1.5f);
    CHECK(st2.v_dfa[1][2] == -2.25f);
}

TEST_CASE("experiment runs are deterministic and reducible") {
    ensure_synthetic_data();
    ExperimentConfig cfg;
    cfg.plan = "mlp";
    cfg.mlp_dims = {3072, 32, 10};
    cfg.strategy = "bp";
    cfg.optimizer = "momentum";
    cfg.lr = 0.02;
    cfg.epochs = 2;
    cfg.batch = 32;
    cfg.seed = 11;
    cfg.dataset = kDataDir;
    cfg.subset_train = 256;
    cfg.subset_test = 64;
    cfg.augment = false;
    cfg.out_dir = kDataDir + "/run_a";

    auto a = dfa::run_experiment(cfg);
    REQUIRE(a.epochs.size() == 2);
    for (const auto& m : a.epochs) {
        CHECK(m.train_acc >= 0.0);
        CHECK(m.train_acc <= 100.0);
        CHECK(m.test_acc >= 0.0);
        CHECK(m.test_acc <= 100.0);
    }

    SUBCASE("same seed twice gives byte-identical metrics and checkpoints") {
        ExperimentConfig cfg2 = cfg;
        cfg2.out_dir = kDataDir + "/run_b";
        auto b = dfa::run_experiment(cfg2);
        CHECK(slurp(a.csv_path) == slurp(b.csv_path));
        CHECK(slurp(a.params_path) == slurp(b.params_path));
    }

    SUBCASE("zero epochs writes a header-only csv") {
        ExperimentConfig cfg0 = cfg;
        cfg0.epochs = 0;
        cfg0.out_dir = kDataDir + "/run_zero";
        auto z = dfa::run_experiment(cfg0);
        CHECK(z.epochs.empty());
        std::ifstream is(z.csv_path);
        std::string line;
        int lines = 0;
        while (std::getline(is, line)) ++lines;
        CHECK(lines == 2);  // comment + column header
    }

    SUBCASE("hdfa with p=1 reproduces the momentum-bp trajectory byte for byte") {
        ExperimentConfig ch = cfg;
        ch.strategy = "dfa_original";  // feedback present but never drawn
        ch.optimizer = "hdfa";
        ch.p = 1.0;
        ch.out_dir = kDataDir + "/run_h";
        auto h = dfa::run_experiment(ch);
        CHECK(slurp(a.params_path) == slurp(h.params_path));
        for (std::size_t e = 0; e < a.epochs.size(); ++e) {
            CHECK(a.epochs[e].train_acc == h.epochs[e].train_acc);
            CHECK(a.epochs[e].test_acc == h.epochs[e].test_acc);
            CHECK(a.epochs[e].train_loss == h.epochs[e].train_loss);
            CHECK(a.epochs[e].test_loss == h.epochs[e].test_loss);
        }
    }
}

TEST_CASE("rnn experiment smoke run") {
    ensure_synthetic_data();
    ExperimentConfig cfg;
    cfg.plan = "rnn";
    cfg.strategy = "dfa_rnn";
    cfg.optimizer = "hdfa_adam";
    cfg.cell = "vanilla";
    cfg.lr = 0.002;
    cfg.p = 0.2;
    cfg.epochs = 1;
    cfg.batch = 10;
    cfg.time_steps = 6;
    cfg.hidden = 16;
    cfg.seed = 21;
    cfg.dataset = kDataDir + "/corpus.txt";
    cfg.subset_train = 4000;
    cfg.subset_test = 800;
    cfg.out_dir = kDataDir + "/run_rnn";
    auto r = dfa::run_experiment(cfg);
    REQUIRE(r.epochs.size() == 1);
    CHECK(r.epochs[0].train_acc >= 0.0);
    CHECK(r.epochs[0].train_acc <= 100.0);
    CHECK(fs::exists(r.feedback_path));
}

TEST_CASE("next_word_accuracy") {
    Tensor32 onehot({2, 1, 4});
    onehot[(0 * 1 + 0) * 4 + 2] = 1.0f;
    onehot[(1 * 1 + 0) * 4 + 1] = 1.0f;
    CHECK(dfa::next_word_accuracy(onehot, {2, 1}) == 100.0);

    // uniform logits tie-break to the lowest index
    Tensor32 uniform({1, 2, 5});
    CHECK(dfa::next_word_accuracy(uniform, {0, 3}) == 50.0);

    Tensor32 empty({1, 1, 1});
    CHECK_THROWS(dfa::next_word_accuracy(empty, {}));
}

TEST_CASE("cost tables are emitted with the reference anchors embedded") {
    const std::string dir = kDataDir + "/tables";
    dfa::emit_cost_tables(dir);
    const std::string rnn_mem = slurp(dir + "/rnn_ep_memory.csv");
    CHECK(rnn_mem.find("1863.6") != std::string::npos);
    CHECK(rnn_mem.find("1032.6") != std::string::npos);
    CHECK(rnn_mem.find("26.94") != std::string::npos);
    const std::string cnn_mem = slurp(dir + "/cnn_ep_memory.csv");
    CHECK(cnn_mem.find("56.13") != std::string::npos);
    CHECK(fs::exists(dir + "/feedback_ratio_sweep.csv"));
    CHECK(fs::exists(dir + "/cnn_ep_ops.csv"));
    CHECK(fs::exists(dir + "/rnn_ep_ops.csv"));
}
