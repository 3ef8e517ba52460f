#include "dfa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dfa {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kRecordBytes = 3073;  // 1 label + 3 * 32 * 32 pixels
constexpr std::size_t kPixels = 3072;

LabeledImages select_subset(const LabeledImages& pool, std::size_t n, Rng& rng) {
    if (n > pool.count()) throw std::runtime_error("dataset: subset larger than pool");
    std::vector<std::size_t> idx(pool.count());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    LabeledImages out;
    out.images = TensorT<float>({n, 3, 32, 32});
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = idx[i];
        std::copy(pool.images.data() + s * kPixels, pool.images.data() + (s + 1) * kPixels,
                  out.images.data() + i * kPixels);
        out.labels[i] = pool.labels[s];
    }
    return out;
}

} // namespace

LabeledImages read_cifar_batch(const std::string& file) {
    std::ifstream is(file, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("dataset: cannot open " + file);
    const std::size_t bytes = (std::size_t)is.tellg();
    if (bytes == 0 || bytes % kRecordBytes != 0)
        throw std::runtime_error("dataset: malformed record length in " + file);
    const std::size_t n = bytes / kRecordBytes;
    is.seekg(0);

    LabeledImages out;
    out.images = TensorT<float>({n, 3, 32, 32});
    out.labels.resize(n);
    std::vector<unsigned char> rec(kRecordBytes);
    for (std::size_t i = 0; i < n; ++i) {
        is.read(reinterpret_cast<char*>(rec.data()), (std::streamsize)kRecordBytes);
        if (!is) throw std::runtime_error("dataset: truncated record in " + file);
        const int label = rec[0];
        if (label < 0 || label > 9) throw std::runtime_error("dataset: label byte out of range in " + file);
        out.labels[i] = label;
        float* dst = out.images.data() + i * kPixels;
        for (std::size_t p = 0; p < kPixels; ++p) dst[p] = (float)rec[1 + p];
    }
    return out;
}

ImageData load_cifar10(const std::string& dir, std::size_t train_subset, std::size_t test_subset,
                       std::uint64_t seed) {
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) {
        fs::path p = fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin");
        if (fs::exists(p)) train_files.push_back(p.string());
    }
    if (train_files.empty()) throw std::runtime_error("dataset: no data_batch_*.bin under " + dir);
    const fs::path test_path = fs::path(dir) / "test_batch.bin";
    if (!fs::exists(test_path)) throw std::runtime_error("dataset: missing test_batch.bin under " + dir);

    LabeledImages train_pool;
    for (const auto& f : train_files) {
        LabeledImages part = read_cifar_batch(f);
        if (train_pool.count() == 0) {
            train_pool = std::move(part);
        } else {
            const std::size_t n0 = train_pool.count(), n1 = part.count();
            TensorT<float> merged({n0 + n1, 3, 32, 32});
            std::copy(train_pool.images.data(), train_pool.images.data() + n0 * kPixels, merged.data());
            std::copy(part.images.data(), part.images.data() + n1 * kPixels, merged.data() + n0 * kPixels);
            train_pool.images = std::move(merged);
            train_pool.labels.insert(train_pool.labels.end(), part.labels.begin(), part.labels.end());
        }
    }
    LabeledImages test_pool = read_cifar_batch(test_path.string());

    ImageData out;
    Rng tr = Rng::stream(seed, /*tag=*/10);
    Rng te = Rng::stream(seed, /*tag=*/11);
    out.train = select_subset(train_pool, std::min(train_subset, train_pool.count()), tr);
    out.test = select_subset(test_pool, std::min(test_subset, test_pool.count()), te);

    // per-channel statistics of the selected training subset
    for (int c = 0; c < 3; ++c) {
        double sum = 0, sq = 0;
        const std::size_t per = 1024, n = out.train.count();
        for (std::size_t i = 0; i < n; ++i) {
            const float* px = out.train.images.data() + i * kPixels + c * per;
            for (std::size_t p = 0; p < per; ++p) {
                sum += px[p];
                sq += (double)px[p] * px[p];
            }
        }
        const double mean = sum / (double)(n * per);
        const double var = sq / (double)(n * per) - mean * mean;
        out.mean[c] = (float)mean;
        out.stddev[c] = (float)std::sqrt(std::max(var, 1e-8));
    }
    auto normalize = [&](LabeledImages& li) {
        const std::size_t per = 1024;
        for (std::size_t i = 0; i < li.count(); ++i)
            for (int c = 0; c < 3; ++c) {
                float* px = li.images.data() + i * kPixels + c * per;
                for (std::size_t p = 0; p < per; ++p) px[p] = (px[p] - out.mean[c]) / out.stddev[c];
            }
    };
    normalize(out.train);
    normalize(out.test);
    return out;
}

TensorT<float> augment_batch(const TensorT<float>& images, Rng& rng) {
    const std::size_t n = images.dim(0);
    TensorT<float> out(images.shape());
    constexpr int pad = 4, side = 32;
    for (std::size_t i = 0; i < n; ++i) {
        const int dy = (int)rng.uniform_int(2 * pad + 1) - pad;
        const int dx = (int)rng.uniform_int(2 * pad + 1) - pad;
        const bool flip = rng.bernoulli(0.5);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    const int sy = y + dy;
                    int sx = x + dx;
                    if (flip) sx = side - 1 - sx;
                    float v = 0.0f;
                    if (sy >= 0 && sy < side && sx >= 0 && sx < side) v = images(i, c, sy, sx);
                    out(i, c, y, x) = v;
                }
    }
    return out;
}

void write_synthetic_cifar(const std::string& dir, std::size_t per_batch, std::uint64_t seed) {
    fs::create_directories(dir);
    const float palettes[5][3] = {
        {1.0f, 0.35f, 0.35f}, {0.35f, 1.0f, 0.35f}, {0.35f, 0.45f, 1.0f}, {1.0f, 0.9f, 0.25f}, {0.8f, 0.35f, 1.0f}};
    auto write_file = [&](const std::string& name, std::uint64_t tag) {
        Rng rng = Rng::stream(seed, tag);
        std::ofstream os((fs::path(dir) / name).string(), std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("dataset: cannot write " + name);
        std::vector<unsigned char> rec(kRecordBytes);
        for (std::size_t i = 0; i < per_batch; ++i) {
            const int label = (int)rng.uniform_int(10);
            rec[0] = (unsigned char)label;
            // class identity = stripe orientation + a blob on a class-angle
            // ring + tint; orientations repeat the palette so color alone
            // cannot separate all classes
            const double theta = 3.14159265358979 * label / 10.0;
            const double freq = 0.16 + 0.06 * rng.uniform();
            const double phase = rng.uniform(0.0, 6.283185307);
            const double dx = rng.uniform(-3.0, 3.0), dy = rng.uniform(-3.0, 3.0);
            const double bright = rng.uniform(-0.06, 0.06);
            const double blob_x = 15.5 + 9.0 * std::cos(2 * theta) + dx;
            const double blob_y = 15.5 + 9.0 * std::sin(2 * theta) + dy;
            const float* tint = palettes[label % 5];
            const double ct = std::cos(theta), st = std::sin(theta);
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const double u = (x - 15.5 - dx) * ct + (y - 15.5 - dy) * st;
                    const double s = std::sin(6.283185307 * freq * u + phase);
                    const double bx = x - blob_x, by = y - blob_y;
                    const double blob = 0.55 * std::exp(-(bx * bx + by * by) / 18.0);
                    const double base = 0.42 + 0.30 * s + bright;
                    for (int c = 0; c < 3; ++c) {
                        const double noise = rng.uniform(-0.09, 0.09);
                        double v = base * tint[c] + blob + noise;
                        v = std::min(1.0, std::max(0.0, v));
                        rec[1 + c * 1024 + y * 32 + x] = (unsigned char)std::lround(v * 255.0);
                    }
                }
            os.write(reinterpret_cast<const char*>(rec.data()), (std::streamsize)kRecordBytes);
        }
    };
    for (int b = 1; b <= 5; ++b) write_file("data_batch_" + std::to_string(b) + ".bin", 20 + b);
    write_file("test_batch.bin", 26);
}

Corpus load_text_corpus(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("dataset: cannot open corpus " + path);
    std::vector<std::string> words;
    std::string w;
    while (is >> w) words.push_back(w);
    if (words.empty()) throw std::runtime_error("dataset: empty corpus " + path);

    Corpus c;
    c.vocab.push_back("<unk>");
    std::vector<std::string> sorted = words;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    c.vocab.insert(c.vocab.end(), sorted.begin(), sorted.end());

    c.tokens.reserve(words.size());
    for (const auto& word : words) {
        const auto it = std::lower_bound(sorted.begin(), sorted.end(), word);
        c.tokens.push_back(1 + (int)(it - sorted.begin()));
    }
    return c;
}

std::vector<SeqBatch> batch_corpus(const std::vector<int>& tokens, int T, int batch) {
    if (T < 1 || batch < 1) throw std::invalid_argument("batch_corpus: bad T or batch");
    const std::size_t per = tokens.size() / batch;
    if (per < (std::size_t)T + 1) return {};
    const std::size_t windows = (per - 1) / T;
    std::vector<SeqBatch> out(windows);
    for (std::size_t s = 0; s < windows; ++s) {
        auto& sb = out[s];
        sb.tokens.steps = T;
        sb.tokens.batch = batch;
        sb.tokens.ids.resize((std::size_t)T * batch);
        sb.targets.resize((std::size_t)T * batch);
        for (int t = 0; t < T; ++t)
            for (int b = 0; b < batch; ++b) {
                const std::size_t pos = (std::size_t)b * per + s * T + t;
                sb.tokens.ids[(std::size_t)t * batch + b] = tokens[pos];
                sb.targets[(std::size_t)t * batch + b] = tokens[pos + 1];
            }
    }
    return out;
}

void write_synthetic_corpus(const std::string& path, std::size_t token_count, std::uint64_t seed) {
    fs::create_directories(fs::path(path).parent_path().empty() ? "." : fs::path(path).parent_path().string());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("dataset: cannot write corpus " + path);
    Rng rng = Rng::stream(seed, /*tag=*/30);
    const int V = 40;
    int prev = 1, prev2 = 3;
    for (std::size_t i = 0; i < token_count; ++i) {
        int next;
        const double u = rng.uniform();
        // a first-order branch, a delayed-permutation branch that needs the
        // recurrent state, and noise
        if (u < 0.25)
            next = (prev * 7 + 3) % V;
        else if (u < 0.78)
            next = (prev2 * 3 + 5) % V;
        else
            next = (int)rng.uniform_int(V);
        os << 'w' << (next < 10 ? "0" : "") << next << (i % 20 == 19 ? '\n' : ' ');
        prev2 = prev;
        prev = next;
    }
    os << '\n';
}

} // namespace dfa
