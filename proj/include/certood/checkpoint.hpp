#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "certood/network.hpp"

// Self-describing binary checkpoint: magic "GOODCKPT", little-endian u32
// format version, length-prefixed network description and metadata text,
// then each parameter tensor as (rank, extents..., raw float32 values).
// Round-trips are bit-exact.

namespace certood {

struct CheckpointMeta {
    int epoch = 0;
    double epsilon = 0.0;
    double kappa = 0.0;
    double quantile = 1.0;
    std::uint64_t seed = 0;
    std::string method = "plain";
};

namespace detail {

constexpr char kCkptMagic[8] = {'G', 'O', 'O', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw ParseError(std::string("truncated checkpoint while reading ") + what);
    return v;
}

inline void write_text(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_text(std::istream& is, const char* what) {
    const std::uint32_t len = read_u32(is, what);
    std::string s(len, '\0');
    if (!is.read(s.data(), len))
        throw ParseError(std::string("truncated checkpoint while reading ") + what);
    return s;
}

inline std::string meta_to_text(const CheckpointMeta& m) {
    std::ostringstream os;
    os << "epoch " << m.epoch << '\n'
       << "epsilon " << m.epsilon << '\n'
       << "kappa " << m.kappa << '\n'
       << "quantile " << m.quantile << '\n'
       << "seed " << m.seed << '\n'
       << "method " << m.method << '\n';
    return os.str();
}

inline CheckpointMeta meta_from_text(const std::string& text) {
    CheckpointMeta m;
    std::istringstream is(text);
    std::string key;
    while (is >> key) {
        if (key == "epoch") is >> m.epoch;
        else if (key == "epsilon") is >> m.epsilon;
        else if (key == "kappa") is >> m.kappa;
        else if (key == "quantile") is >> m.quantile;
        else if (key == "seed") is >> m.seed;
        else if (key == "method") is >> m.method;
        else { std::string skip; is >> skip; }
    }
    return m;
}

}  // namespace detail

inline void save_checkpoint(const NetworkSpec& spec, const ParamStore& params,
                            const CheckpointMeta& meta, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot open checkpoint for writing: " + path);
    os.write(detail::kCkptMagic, 8);
    detail::write_u32(os, detail::kCkptVersion);
    detail::write_text(os, spec_to_text(spec));
    detail::write_text(os, detail::meta_to_text(meta));
    std::uint32_t count = 0;
    for (const Tensor& t : params.weights)
        if (t.defined()) count += 2;  // weight + bias
    detail::write_u32(os, count);
    auto dump = [&os](const Tensor& t) {
        detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i)
            detail::write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * 4));
    };
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        if (!params.weights[i].defined()) continue;
        dump(params.weights[i]);
        dump(params.biases[i]);
    }
    if (!os) throw ParseError("write failure on checkpoint: " + path);
}

struct Checkpoint {
    NetworkSpec spec;
    ParamStore params;
    CheckpointMeta meta;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open checkpoint: " + path);
    char magic[8] = {};
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw ParseError("bad checkpoint magic in " + path);
    const std::uint32_t version = detail::read_u32(is, "version");
    if (version != detail::kCkptVersion)
        throw ParseError("unsupported checkpoint version " + std::to_string(version) +
                         " (expected " + std::to_string(detail::kCkptVersion) + ")");
    Checkpoint ckpt;
    ckpt.spec = spec_from_text(detail::read_text(is, "network description"));
    ckpt.meta = detail::meta_from_text(detail::read_text(is, "metadata"));
    const std::uint32_t count = detail::read_u32(is, "tensor count");
    auto slurp = [&is, &path]() {
        const std::uint32_t rank = detail::read_u32(is, "tensor rank");
        if (rank > 8) throw ParseError("implausible tensor rank in " + path);
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i)
            shape.push_back(static_cast<int>(detail::read_u32(is, "tensor extent")));
        Tensor t(shape);
        const std::streamsize want = static_cast<std::streamsize>(t.numel() * 4);
        if (!is.read(reinterpret_cast<char*>(t.data()), want))
            throw ParseError("truncated checkpoint: expected " + std::to_string(want) +
                             " bytes of tensor data, got " + std::to_string(is.gcount()));
        return t;
    };
    std::vector<Tensor> flat;
    for (std::uint32_t i = 0; i < count; ++i) flat.push_back(slurp());
    // rebuild the per-layer layout from the spec
    const auto shapes = param_shapes(ckpt.spec);
    std::size_t next = 0;
    for (const auto& [wShape, bShape] : shapes) {
        if (wShape.empty()) {
            ckpt.params.weights.emplace_back();
            ckpt.params.biases.emplace_back();
            continue;
        }
        if (next + 2 > flat.size())
            throw ParseError("checkpoint tensor count does not match network description");
        if (flat[next].shape() != wShape || flat[next + 1].shape() != bShape)
            throw ParseError("checkpoint tensor shapes do not match network description");
        ckpt.params.weights.push_back(flat[next]);
        ckpt.params.biases.push_back(flat[next + 1]);
        next += 2;
    }
    if (next != flat.size())
        throw ParseError("checkpoint holds extra tensors beyond the network description");
    return ckpt;
}

}  // namespace certood
