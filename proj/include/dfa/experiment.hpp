#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dfa/cost_model.hpp"
#include "dfa/dataset.hpp"
#include "dfa/feedback.hpp"
#include "dfa/network.hpp"
#include "dfa/optim.hpp"

namespace dfa {

// Flat key=value experiment description; CLI flags override file entries.
// The seed fully determines a run: parameter init, feedback init, masks,
// shuffling, augmentation and the hybrid coin all draw from streams derived
// from it.
struct ExperimentConfig {
    std::string plan = "mini_vgg";       // mlp | mini_vgg | mini_res | rnn
    std::string strategy = "bp";         // bp | dfa_original | dfa_modular | dfa_conv | dfa_groupconv | dfa_rnn
    std::string optimizer = "momentum";  // momentum | adam | hdfa | hdfa_adam
    std::string cell = "vanilla";        // vanilla | lstm | gru
    double lr = 0.05;
    double alpha = 0.9;
    double gamma = 0.5;
    double p = 0.0;
    int groups = 4;
    double sparsity = 0.0;
    std::optional<bool> binary;  // default: on for conv strategies, off otherwise
    bool bw_init = false;
    bool literal_exponent = true;
    double feedback_scale = 0.0;
    int epochs = 20;
    int batch = 128;
    std::uint64_t seed = 1;
    std::string dataset;
    std::size_t subset_train = 5000;  // rnn plans: training token count
    std::size_t subset_test = 1000;   // rnn plans: test token count
    bool augment = true;
    int time_steps = 8;
    int hidden = 32;
    int base_channels = 8;
    std::vector<int> mlp_dims{3072, 128, 10};
    bool bp_only_control = false;  // hybrid schedule with the DFA updates dropped
    std::string out_dir = "out";

    static ExperimentConfig from_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    EpStrategy make_strategy() const;
};

struct EpochMetrics {
    int epoch = 0;
    double train_acc = 0, test_acc = 0;
    double train_loss = 0, test_loss = 0;
    std::vector<double> align_deg;
    double wall_s = 0;
    double ep_weight_bytes = 0, ep_ops = 0;
};

struct ExperimentResult {
    std::vector<EpochMetrics> epochs;
    std::vector<double> init_alignment;
    std::uint64_t feedback_checksum = 0;
    std::string csv_path, params_path, feedback_path;
};

// Trains per the config, writes metrics.csv, params.bin, feedback.bin and
// timing.txt under out_dir, and returns the rows. Aborts with a diagnostic on
// a non-finite loss.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Share of positions whose argmax (lowest index wins ties) matches the target,
// in percent. Throws on an empty batch.
double next_word_accuracy(const TensorT<float>& logits, const std::vector<int>& targets);

// Writes the strategy x network cost tables (CNN tables in MiB / GOP per
// example, RNN tables in MB / GOP per iteration) plus the feedback-ratio
// sweeps; self-checks the mixture affinity and sparsity monotonicity.
void emit_cost_tables(const std::string& out_dir);

} // namespace dfa
