#pragma once

#include <array>
#include <string>
#include <vector>

#include "dfa/network.hpp"
#include "dfa/rng.hpp"
#include "dfa/tensor.hpp"

namespace dfa {

// ---- images (CIFAR-10 binary batch format) ---------------------------------

struct LabeledImages {
    TensorT<float> images;  // (N, 3, 32, 32)
    std::vector<int> labels;
    std::size_t count() const { return labels.size(); }
};

struct ImageData {
    LabeledImages train, test;
    std::array<float, 3> mean{}, stddev{};
};

// Raw records from one binary batch file (3073 bytes each: label byte then
// 3072 CHW pixel bytes). Throws on ragged file sizes or labels outside [0,9].
LabeledImages read_cifar_batch(const std::string& file);

// Loads data_batch_*.bin and test_batch.bin from a directory, takes a
// seed-deterministic subset, and normalizes both splits with the per-channel
// mean/std of the selected training subset.
ImageData load_cifar10(const std::string& dir, std::size_t train_subset, std::size_t test_subset, std::uint64_t seed);

// Random 4-pixel-pad crop plus horizontal flip; training split only.
TensorT<float> augment_batch(const TensorT<float>& images, Rng& rng);

// Procedurally generated 10-class dataset written in the CIFAR-10 binary batch
// format (data_batch_1..5.bin + test_batch.bin), for environments without the
// real archive. Classes are oriented gratings with shared color pairs so both
// texture and color matter.
void write_synthetic_cifar(const std::string& dir, std::size_t per_batch, std::uint64_t seed);

// ---- text ----------------------------------------------------------------------

struct Corpus {
    std::vector<int> tokens;
    std::vector<std::string> vocab;  // vocab[0] is "<unk>"
};

// Whitespace tokenization; vocabulary built from the corpus plus "<unk>".
Corpus load_text_corpus(const std::string& path);

struct SeqBatch {
    TokenBatch tokens;
    std::vector<int> targets;  // step-major, next-token ids
};

// Contiguous language-model batching: the stream is split into `batch`
// parallel chunks and cut into length-T windows with targets shifted by one.
std::vector<SeqBatch> batch_corpus(const std::vector<int>& tokens, int T, int batch);

// Deterministic synthetic corpus with first- and second-order structure.
void write_synthetic_corpus(const std::string& path, std::size_t token_count, std::uint64_t seed);

} // namespace dfa
