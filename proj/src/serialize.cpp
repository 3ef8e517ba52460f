#include "dfa/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dfa {

namespace {

constexpr std::uint32_t kParamsMagic = 0x50414644;    // "DFAP"
constexpr std::uint32_t kFeedbackMagic = 0x57414644;  // "DFAW"
constexpr std::uint32_t kStateMagic = 0x53414644;     // "DFAS"
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("serialize: truncated file");
    return v;
}

void put_tensor(std::ofstream& os, const TensorT<float>& t) {
    put<std::uint32_t>(os, (std::uint32_t)t.rank());
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(float));
}

TensorT<float> get_tensor(std::ifstream& is) {
    const auto rank = get<std::uint32_t>(is);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = (std::size_t)get<std::uint64_t>(is);
    TensorT<float> t(shape);
    is.read(reinterpret_cast<char*>(t.data()), t.numel() * sizeof(float));
    if (!is) throw std::runtime_error("serialize: truncated tensor payload");
    return t;
}

enum Role : std::uint32_t { kPerLayer = 0, kDecToCell = 1, kDecToEmb = 2, kCellToEmb = 3 };
enum Encoding : std::uint32_t { kDense = 0, kConvPair = 1, kTriangular = 2, kSignedSparse = 3 };

void put_dense(std::ofstream& os, const DenseFw<float>& d) {
    put<std::uint32_t>(os, d.signed_sparse ? kSignedSparse : kDense);
    put<double>(os, (double)d.scale);
    if (!d.signed_sparse) {
        put_tensor(os, d.values);
        return;
    }
    put<std::uint32_t>(os, (std::uint32_t)d.values.rank());
    for (std::size_t dim : d.values.shape()) put<std::uint64_t>(os, dim);
    const std::size_t n = d.values.numel();
    std::vector<std::uint8_t> packed((n + 7) / 8, 0);
    std::vector<float> nz;
    nz.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (d.values[i] != 0.0f) {
            packed[i / 8] |= (std::uint8_t)(1u << (i % 8));
            nz.push_back(d.values[i]);
        }
    }
    put<std::uint64_t>(os, (std::uint64_t)nz.size());
    os.write(reinterpret_cast<const char*>(packed.data()), (std::streamsize)packed.size());
    os.write(reinterpret_cast<const char*>(nz.data()), (std::streamsize)(nz.size() * sizeof(float)));
}

DenseFw<float> get_dense(std::ifstream& is, std::uint32_t enc) {
    DenseFw<float> d;
    d.scale = (float)get<double>(is);
    if (enc == kDense) {
        d.values = get_tensor(is);
        return d;
    }
    d.signed_sparse = true;
    const auto rank = get<std::uint32_t>(is);
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) dim = (std::size_t)get<std::uint64_t>(is);
    d.values = TensorT<float>(shape);
    const std::size_t n = d.values.numel();
    const auto nz_count = (std::size_t)get<std::uint64_t>(is);
    std::vector<std::uint8_t> packed((n + 7) / 8);
    is.read(reinterpret_cast<char*>(packed.data()), (std::streamsize)packed.size());
    std::vector<float> nz(nz_count);
    is.read(reinterpret_cast<char*>(nz.data()), (std::streamsize)(nz_count * sizeof(float)));
    if (!is) throw std::runtime_error("serialize: truncated sparse payload");
    d.mask.assign(n, 0);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (packed[i / 8] & (1u << (i % 8))) {
            d.mask[i] = 1;
            d.values[i] = nz[cursor++];
        }
    }
    return d;
}

} // namespace

void save_optimizer_state(const std::string& path, const std::vector<double>& scalars,
                          const std::vector<const TensorT<float>*>& buffers) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("serialize: cannot open " + path);
    put(os, kStateMagic);
    put(os, kVersion);
    put<std::uint32_t>(os, (std::uint32_t)scalars.size());
    for (double v : scalars) put(os, v);
    put<std::uint32_t>(os, (std::uint32_t)buffers.size());
    for (const auto* b : buffers) put_tensor(os, *b);
}

void load_optimizer_state(const std::string& path, std::vector<double>& scalars,
                          const std::vector<TensorT<float>*>& buffers) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("serialize: cannot open " + path);
    if (get<std::uint32_t>(is) != kStateMagic) throw std::runtime_error("serialize: bad state magic");
    if (get<std::uint32_t>(is) != kVersion) throw std::runtime_error("serialize: unsupported version");
    scalars.resize(get<std::uint32_t>(is));
    for (double& v : scalars) v = get<double>(is);
    const auto count = get<std::uint32_t>(is);
    if (count != buffers.size()) throw std::runtime_error("serialize: buffer count mismatch");
    for (auto* b : buffers) {
        TensorT<float> t = get_tensor(is);
        if (!t.same_shape(*b)) throw std::runtime_error("serialize: buffer shape mismatch");
        *b = std::move(t);
    }
}

void save_params(const std::string& path, const ParamsT<float>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("serialize: cannot open " + path);
    put(os, kParamsMagic);
    put(os, kVersion);
    put<std::uint32_t>(os, (std::uint32_t)params.tensor_count());
    params.for_each([&](const TensorT<float>& t) { put_tensor(os, t); });
}

void load_params(const std::string& path, ParamsT<float>& into) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("serialize: cannot open " + path);
    if (get<std::uint32_t>(is) != kParamsMagic) throw std::runtime_error("serialize: bad params magic");
    if (get<std::uint32_t>(is) != kVersion) throw std::runtime_error("serialize: unsupported version");
    const auto count = get<std::uint32_t>(is);
    if (count != into.tensor_count()) throw std::runtime_error("serialize: tensor count mismatch");
    into.for_each([&](TensorT<float>& t) {
        TensorT<float> loaded = get_tensor(is);
        if (!loaded.same_shape(t)) throw std::runtime_error("serialize: tensor shape mismatch");
        t = std::move(loaded);
    });
}

void save_feedback(const std::string& path, const FeedbackSetT<float>& fb, std::uint64_t seed) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("serialize: cannot open " + path);
    put(os, kFeedbackMagic);
    put(os, kVersion);
    put<std::uint64_t>(os, seed);
    std::uint32_t count = 0;
    for (const auto& v : fb.per_layer) count += v.has_value() ? 1 : 0;
    count += (std::uint32_t)(fb.dec_to_cell.size() + fb.dec_to_emb.size() + (fb.cell_to_emb ? 1 : 0));
    put(os, count);

    auto put_record = [&](Role role, std::uint32_t index, const FeedbackVariant<float>& var) {
        put<std::uint32_t>(os, role);
        put<std::uint32_t>(os, index);
        if (const auto* d = std::get_if<DenseFw<float>>(&var)) {
            put_dense(os, *d);
        } else if (const auto* c = std::get_if<ConvPairFw<float>>(&var)) {
            put<std::uint32_t>(os, kConvPair);
            put<double>(os, (double)c->scale);
            put<std::uint32_t>(os, (std::uint32_t)c->dilation);
            put<std::uint32_t>(os, (std::uint32_t)c->groups);
            put<std::uint8_t>(os, c->shuffle ? 1 : 0);
            put_tensor(os, c->d1);
            put_tensor(os, c->d2);
        } else if (const auto* t = std::get_if<TriangularFw<float>>(&var)) {
            put<std::uint32_t>(os, kTriangular);
            put<double>(os, (double)t->scale);
            put<std::uint64_t>(os, t->block);
            put<std::uint64_t>(os, t->steps);
            for (std::size_t i = 0; i < t->steps; ++i)
                for (std::size_t j = i; j < t->steps; ++j) put_tensor(os, t->at(i, j));
        }
    };

    for (std::size_t i = 0; i < fb.per_layer.size(); ++i)
        if (fb.per_layer[i]) put_record(kPerLayer, (std::uint32_t)i, *fb.per_layer[i]);
    for (std::size_t t = 0; t < fb.dec_to_cell.size(); ++t)
        put_record(kDecToCell, (std::uint32_t)t, FeedbackVariant<float>(fb.dec_to_cell[t]));
    for (std::size_t t = 0; t < fb.dec_to_emb.size(); ++t)
        put_record(kDecToEmb, (std::uint32_t)t, FeedbackVariant<float>(fb.dec_to_emb[t]));
    if (fb.cell_to_emb) put_record(kCellToEmb, 0, FeedbackVariant<float>(*fb.cell_to_emb));
}

FeedbackSetT<float> load_feedback(const std::string& path, const NetworkPlan& plan) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("serialize: cannot open " + path);
    if (get<std::uint32_t>(is) != kFeedbackMagic) throw std::runtime_error("serialize: bad feedback magic");
    if (get<std::uint32_t>(is) != kVersion) throw std::runtime_error("serialize: unsupported version");
    (void)get<std::uint64_t>(is);  // seed, informational
    const auto count = get<std::uint32_t>(is);

    FeedbackSetT<float> fb;
    fb.per_layer.resize(plan.layers.size());
    for (std::uint32_t r = 0; r < count; ++r) {
        const auto role = get<std::uint32_t>(is);
        const auto index = get<std::uint32_t>(is);
        const auto enc = get<std::uint32_t>(is);
        FeedbackVariant<float> var = DenseFw<float>{};
        if (enc == kDense || enc == kSignedSparse) {
            var = get_dense(is, enc);
        } else if (enc == kConvPair) {
            ConvPairFw<float> c;
            c.scale = (float)get<double>(is);
            c.dilation = (int)get<std::uint32_t>(is);
            c.groups = (int)get<std::uint32_t>(is);
            c.shuffle = get<std::uint8_t>(is) != 0;
            c.d1 = get_tensor(is);
            c.d2 = get_tensor(is);
            var = std::move(c);
        } else if (enc == kTriangular) {
            TriangularFw<float> t;
            t.scale = (float)get<double>(is);
            t.block = (std::size_t)get<std::uint64_t>(is);
            t.steps = (std::size_t)get<std::uint64_t>(is);
            t.blocks.assign(t.steps * t.steps, TensorT<float>());
            for (std::size_t i = 0; i < t.steps; ++i)
                for (std::size_t j = i; j < t.steps; ++j) t.at(i, j) = get_tensor(is);
            var = std::move(t);
        } else {
            throw std::runtime_error("serialize: unknown encoding");
        }
        switch (role) {
            case kPerLayer: fb.per_layer.at(index) = std::move(var); break;
            case kDecToCell:
                fb.dec_to_cell.resize(std::max<std::size_t>(fb.dec_to_cell.size(), index + 1));
                fb.dec_to_cell[index] = std::get<DenseFw<float>>(var);
                break;
            case kDecToEmb:
                fb.dec_to_emb.resize(std::max<std::size_t>(fb.dec_to_emb.size(), index + 1));
                fb.dec_to_emb[index] = std::get<DenseFw<float>>(var);
                break;
            case kCellToEmb: fb.cell_to_emb = std::get<TriangularFw<float>>(var); break;
            default: throw std::runtime_error("serialize: unknown record role");
        }
    }
    return fb;
}

} // namespace dfa
