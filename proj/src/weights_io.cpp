#include "imccd/errors.hpp"
#include "imccd/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace imccd {

static_assert(std::endian::native == std::endian::little, "weight I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'I', 'M', 'C', 'D'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 7 * 4 + 4;

template <typename Fn>
void for_each_tensor(ModelWeights& w, Fn&& fn) {
    fn(w.token_embedding.flat());
    fn(w.patch_projector.flat());
    for (auto& l : w.layers) {
        fn(std::span<float>(l.attn_norm));
        fn(l.wq.flat());
        fn(l.wk.flat());
        fn(l.wv.flat());
        fn(l.wo.flat());
        fn(std::span<float>(l.ffn_norm));
        fn(l.w1.flat());
        fn(std::span<float>(l.b1));
        fn(l.w2.flat());
        fn(std::span<float>(l.b2));
    }
    fn(std::span<float>(w.final_norm));
    fn(w.head.flat());
    fn(std::span<float>(w.head_bias));
}

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

}  // namespace

std::size_t weight_file_size(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const std::size_t per_layer = d + 4 * d * d + d + d * c.ffn_dim + c.ffn_dim + c.ffn_dim * d + d;
    const std::size_t floats = std::size_t(c.vocab_size) * d + std::size_t(c.patch_dim) * d +
                               c.n_layers * per_layer + d + d * c.vocab_size + c.vocab_size;
    return kHeaderBytes + 4 * floats;
}

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
    check_weights(weights);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open " + path.string() + " for writing");
    out.write(kMagic, 4);
    put_u32(out, kWeightFileVersion);
    const auto& c = weights.config;
    for (std::uint32_t v : {c.d_model, c.n_heads, c.head_dim, c.n_layers, c.vocab_size, c.ffn_dim, c.patch_dim})
        put_u32(out, v);
    out.write(reinterpret_cast<const char*>(&c.rope_base), 4);
    auto& mutable_weights = const_cast<ModelWeights&>(weights);
    for_each_tensor(mutable_weights, [&](std::span<float> t) {
        out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * 4));
    });
    if (!out) throw InputError("write failed for " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open weight file " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < kHeaderBytes) throw FormatError("weight file truncated in header");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic in weight file");

    std::size_t off = 4;
    auto get_u32 = [&]() {
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + off, 4);
        off += 4;
        return v;
    };
    if (const auto version = get_u32(); version != kWeightFileVersion)
        throw FormatError("unsupported weight file version " + std::to_string(version));
    ModelConfig c;
    c.d_model = get_u32();
    c.n_heads = get_u32();
    c.head_dim = get_u32();
    c.n_layers = get_u32();
    c.vocab_size = get_u32();
    c.ffn_dim = get_u32();
    c.patch_dim = get_u32();
    std::memcpy(&c.rope_base, bytes.data() + off, 4);
    off += 4;
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("invalid config in weight file: ") + e.what());
    }
    if (bytes.size() != weight_file_size(c))
        throw FormatError("weight file size " + std::to_string(bytes.size()) + " != expected " +
                          std::to_string(weight_file_size(c)));

    ModelWeights w = zero_weights(c);
    for_each_tensor(w, [&](std::span<float> t) {
        std::memcpy(t.data(), bytes.data() + off, t.size() * 4);
        off += t.size() * 4;
    });
    try {
        check_weights(w);
    } catch (const NumericError& e) {
        throw FormatError(std::string("weight file holds non-finite values: ") + e.what());
    }
    return w;
}

}  // namespace imccd
