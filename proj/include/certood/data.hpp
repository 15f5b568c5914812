#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "certood/tensor.hpp"

namespace certood {

/// Images with values in [0,1] plus optional class labels.
struct Dataset {
    Tensor images;  // [N, C, H, W]
    std::vector<int> labels;
    std::string name;

    int count() const { return images.defined() ? images.dim(0) : 0; }

    void check() const {
        if (!labels.empty() && static_cast<int>(labels.size()) != count())
            throw ContractError("dataset '" + name + "': " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(count()) + " images");
        for (std::int64_t i = 0; i < images.numel(); ++i)
            if (!(images[i] >= 0.0f && images[i] <= 1.0f))
                throw ContractError("dataset '" + name + "' has pixel outside [0,1]");
    }
};

// ---------------------------------------------------------------------------
// IDX ingestion (big-endian headers, u8 pixels scaled by 1/255)

namespace detail {

inline std::uint32_t read_be32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw ParseError(std::string("truncated idx file while reading ") + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

/// Loads an IDX image file (magic 0x00000803) and, when given, the matching
/// IDX label file (magic 0x00000801).
inline Dataset load_idx(const std::string& imagesPath, const std::string& labelsPath = "") {
    std::ifstream is(imagesPath, std::ios::binary);
    if (!is) throw ParseError("cannot open idx image file: " + imagesPath);
    const std::uint32_t magic = detail::read_be32(is, "image magic");
    if (magic != 0x00000803u)
        throw ParseError("bad idx image magic 0x" + [magic] {
            std::ostringstream os;
            os << std::hex << magic;
            return os.str();
        }() + " in " + imagesPath);
    const int n = static_cast<int>(detail::read_be32(is, "image count"));
    const int h = static_cast<int>(detail::read_be32(is, "image rows"));
    const int w = static_cast<int>(detail::read_be32(is, "image cols"));
    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * h * w);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw ParseError("truncated idx image file: expected " + std::to_string(raw.size()) +
                         " pixel bytes, got " + std::to_string(is.gcount()));
    Dataset ds;
    ds.name = imagesPath;
    ds.images = Tensor({n, 1, h, w});
    for (std::size_t i = 0; i < raw.size(); ++i)
        ds.images[static_cast<std::int64_t>(i)] = static_cast<float>(raw[i]) / 255.0f;
    if (!labelsPath.empty()) {
        std::ifstream ls(labelsPath, std::ios::binary);
        if (!ls) throw ParseError("cannot open idx label file: " + labelsPath);
        const std::uint32_t lmagic = detail::read_be32(ls, "label magic");
        if (lmagic != 0x00000801u)
            throw ParseError("bad idx label magic in " + labelsPath);
        const int ln = static_cast<int>(detail::read_be32(ls, "label count"));
        if (ln != n)
            throw ParseError("idx count mismatch: " + std::to_string(n) + " images but " +
                             std::to_string(ln) + " labels");
        std::vector<unsigned char> lraw(static_cast<std::size_t>(ln));
        if (!ls.read(reinterpret_cast<char*>(lraw.data()), ln))
            throw ParseError("truncated idx label file " + labelsPath);
        ds.labels.assign(lraw.begin(), lraw.end());
    }
    return ds;
}

// ---------------------------------------------------------------------------
// raw RGB blob: little-endian u32 count, C, H, W, then u8 pixels

inline Dataset load_raw_blob(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open blob file: " + path);
    std::uint32_t hdr[4];
    if (!is.read(reinterpret_cast<char*>(hdr), 16))
        throw ParseError("truncated blob header in " + path);
    const int n = static_cast<int>(hdr[0]), c = static_cast<int>(hdr[1]),
              h = static_cast<int>(hdr[2]), w = static_cast<int>(hdr[3]);
    if (n <= 0 || c <= 0 || h <= 0 || w <= 0 || c > 4)
        throw ParseError("implausible blob header in " + path);
    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * c * h * w);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw ParseError("truncated blob file: expected " + std::to_string(raw.size()) +
                         " pixel bytes, got " + std::to_string(is.gcount()));
    Dataset ds;
    ds.name = path;
    ds.images = Tensor({n, c, h, w});
    for (std::size_t i = 0; i < raw.size(); ++i)
        ds.images[static_cast<std::int64_t>(i)] = static_cast<float>(raw[i]) / 255.0f;
    return ds;
}

inline void save_raw_blob(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot open blob file for writing: " + path);
    const std::uint32_t hdr[4] = {static_cast<std::uint32_t>(ds.images.dim(0)),
                                  static_cast<std::uint32_t>(ds.images.dim(1)),
                                  static_cast<std::uint32_t>(ds.images.dim(2)),
                                  static_cast<std::uint32_t>(ds.images.dim(3))};
    os.write(reinterpret_cast<const char*>(hdr), 16);
    std::vector<unsigned char> raw(static_cast<std::size_t>(ds.images.numel()));
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const float v = ds.images[static_cast<std::int64_t>(i)];
        raw[i] = static_cast<unsigned char>(std::lround(std::min(1.0f, std::max(0.0f, v)) * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw ParseError("write failure on blob file: " + path);
}

// ---------------------------------------------------------------------------
// synthetic out-distributions

/// I.i.d. uniform [0,1) pixels, bit-reproducible per seed.
inline Dataset uniform_noise(int count, Shape shape, std::uint64_t seed) {
    if (shape.size() != 3) throw ContractError("uniform_noise: shape must be C,H,W");
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
    Dataset ds;
    ds.name = "uniform_noise";
    ds.images = Tensor({count, shape[0], shape[1], shape[2]});
    for (std::int64_t i = 0; i < ds.images.numel(); ++i) ds.images[i] = uniform01(rng);
    return ds;
}

namespace detail {

inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

/// Separable Gaussian blur, kernel truncated at radius ceil(3 sigma),
/// reflect padding at the borders.
inline void gaussian_blur(std::vector<float>& img, int h, int w, float sigma) {
    const int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
        norm += v;
    }
    for (float& v : kernel) v = static_cast<float>(v / norm);
    std::vector<float> tmp(img.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       img[static_cast<std::size_t>(y) * w + reflect_index(x + i, w)];
            tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       tmp[static_cast<std::size_t>(reflect_index(y + i, h)) * w + x];
            img[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
        }
}

}  // namespace detail

/// Uniform noise smoothed by a Gaussian filter with sigma drawn uniformly
/// from [1.0, 2.5], then rescaled per image so the minimum pixel is exactly
/// 0 and the maximum exactly 1. Degenerate (constant) draws are retried.
inline Dataset smooth_noise(int count, Shape shape, std::uint64_t seed) {
    if (shape.size() != 3) throw ContractError("smooth_noise: shape must be C,H,W");
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
    const int c = shape[0], h = shape[1], w = shape[2];
    Dataset ds;
    ds.name = "smooth_noise";
    ds.images = Tensor({count, c, h, w});
    std::vector<float> img(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < count; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            for (int attempt = 0;; ++attempt) {
                const float sigma = uniform_in(rng, 1.0f, 2.5f);
                for (float& v : img) v = uniform01(rng);
                detail::gaussian_blur(img, h, w, sigma);
                float lo = img[0], hi = img[0];
                for (float v : img) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                if (hi > lo) {
                    // direct division lands the extremes on exactly 0 and 1
                    const float range = hi - lo;
                    float* dst = ds.images.data() +
                                 (static_cast<std::size_t>(i) * c + ch) * img.size();
                    for (std::size_t p = 0; p < img.size(); ++p)
                        dst[p] = std::min(1.0f, std::max(0.0f, (img[p] - lo) / range));
                    break;
                }
                if (attempt > 64)
                    throw NumericError("smooth_noise: filter output stayed constant");
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// augmentation

struct AugmentConfig {
    int cropPad = 4;
    bool hFlip = false;
};

/// Zero-pad by cropPad on every side, crop back to the original size at the
/// given offsets (cropPad, cropPad reproduces the input), optional mirror.
inline Tensor crop_shift(const Tensor& image, int cropPad, int offY, int offX, bool flip) {
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = y + offY - cropPad;
                const int sxRaw = flip ? (w - 1 - x) : x;
                const int sx = sxRaw + offX - cropPad;
                out.at({ch, y, x}) = (sy < 0 || sy >= h || sx < 0 || sx >= w)
                                         ? 0.0f
                                         : image.at({ch, sy, sx});
            }
    return out;
}

/// Random crop-shift plus optional horizontal flip; shape preserved.
inline Tensor augment(const Tensor& image, const AugmentConfig& cfg, std::mt19937& rng) {
    const int span = 2 * cfg.cropPad + 1;
    const int offY = static_cast<int>(rng() % static_cast<unsigned>(span));
    const int offX = static_cast<int>(rng() % static_cast<unsigned>(span));
    const bool flip = cfg.hFlip && (rng() & 1u);
    return crop_shift(image, cfg.cropPad, offY, offX, flip);
}

// ---------------------------------------------------------------------------
// cross-domain helpers

/// Luminance grayscale conversion (0.299, 0.587, 0.114) plus bilinear
/// resize, with a centered crop to the target aspect ratio first.
inline Dataset to_grayscale_resized(const Dataset& src, int targetH, int targetW) {
    const int n = src.count(), c = src.images.dim(1), h = src.images.dim(2), w = src.images.dim(3);
    Dataset out;
    out.name = src.name + "_gray";
    out.labels = src.labels;
    out.images = Tensor({n, 1, targetH, targetW});
    // centered crop box matching the target aspect
    int cropH = h, cropW = w;
    if (static_cast<double>(w) * targetH > static_cast<double>(h) * targetW)
        cropW = static_cast<int>(std::round(static_cast<double>(h) * targetW / targetH));
    else
        cropH = static_cast<int>(std::round(static_cast<double>(w) * targetH / targetW));
    const int y0 = (h - cropH) / 2, x0 = (w - cropW) / 2;
    for (int i = 0; i < n; ++i) {
        for (int ty = 0; ty < targetH; ++ty)
            for (int tx = 0; tx < targetW; ++tx) {
                const double sy = y0 + (ty + 0.5) * cropH / targetH - 0.5;
                const double sx = x0 + (tx + 0.5) * cropW / targetW - 0.5;
                const int iy = static_cast<int>(std::floor(sy)), ix = static_cast<int>(std::floor(sx));
                const double fy = sy - iy, fx = sx - ix;
                double acc = 0.0;
                const double lum[3] = {0.299, 0.587, 0.114};
                for (int ch = 0; ch < c; ++ch) {
                    auto px = [&](int yy, int xx) {
                        yy = std::min(h - 1, std::max(0, yy));
                        xx = std::min(w - 1, std::max(0, xx));
                        return static_cast<double>(src.images.at({i, ch, yy, xx}));
                    };
                    const double v = (1 - fy) * ((1 - fx) * px(iy, ix) + fx * px(iy, ix + 1)) +
                                     fy * ((1 - fx) * px(iy + 1, ix) + fx * px(iy + 1, ix + 1));
                    acc += (c == 3 ? lum[ch] : 1.0 / c) * v;
                }
                out.images.at({i, 0, ty, tx}) =
                    static_cast<float>(std::min(1.0, std::max(0.0, acc)));
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// batching

struct MixedBatch {
    Tensor inImages;
    std::vector<int> inLabels;
    Tensor outImages;
};

/// Deterministic in/out batch stream. The in-distribution is reshuffled per
/// pass with every sample used exactly once; the out-distribution is drawn
/// without replacement until exhausted, then reshuffled.
class MixedBatcher {
public:
    MixedBatcher(Dataset inData, Dataset outData, int batchSize, std::uint64_t seed,
                 AugmentConfig augmentCfg = {}, bool applyAugment = false)
        : in_(std::move(inData)),
          out_(std::move(outData)),
          batch_(batchSize),
          rng_(static_cast<std::uint32_t>(seed ^ (seed >> 32))),
          augment_(augmentCfg),
          doAugment_(applyAugment) {
        if (in_.count() < 1 || out_.count() < 1)
            throw ContractError("batcher needs non-empty datasets");
        if (in_.labels.empty()) throw ContractError("batcher needs labeled in-distribution data");
        refill(inOrder_, in_.count());
        refill(outOrder_, out_.count());
    }

    int batchesPerEpoch() const { return std::max(1, in_.count() / batch_); }

    MixedBatch next() {
        MixedBatch mb;
        const Shape inShape = sample_shape(in_);
        const Shape outShape = sample_shape(out_);
        mb.inImages = Tensor({batch_, inShape[0], inShape[1], inShape[2]});
        mb.outImages = Tensor({batch_, outShape[0], outShape[1], outShape[2]});
        mb.inLabels.resize(static_cast<std::size_t>(batch_));
        for (int i = 0; i < batch_; ++i) {
            const int src = draw(inOrder_, inCursor_, in_.count());
            copy_sample(in_, src, mb.inImages, i);
            mb.inLabels[static_cast<std::size_t>(i)] = in_.labels[static_cast<std::size_t>(src)];
        }
        for (int i = 0; i < batch_; ++i) {
            const int src = draw(outOrder_, outCursor_, out_.count());
            copy_sample(out_, src, mb.outImages, i);
        }
        return mb;
    }

private:
    static Shape sample_shape(const Dataset& d) {
        return {d.images.dim(1), d.images.dim(2), d.images.dim(3)};
    }

    void refill(std::vector<int>& order, int n) {
        order.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(rng_() % static_cast<unsigned>(i + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
    }

    int draw(std::vector<int>& order, std::size_t& cursor, int n) {
        if (cursor >= order.size()) {
            refill(order, n);
            cursor = 0;
        }
        return order[cursor++];
    }

    void copy_sample(const Dataset& src, int idx, Tensor& dst, int slot) {
        const std::int64_t len = src.images.numel() / src.count();
        Tensor img({src.images.dim(1), src.images.dim(2), src.images.dim(3)});
        const float* s = src.images.data() + static_cast<std::size_t>(idx) * len;
        std::copy(s, s + len, img.data());
        if (doAugment_) img = augment(img, augment_, rng_);
        std::copy(img.data(), img.data() + len, dst.data() + static_cast<std::size_t>(slot) * len);
    }

    Dataset in_, out_;
    int batch_;
    std::mt19937 rng_;
    AugmentConfig augment_;
    bool doAugment_;
    std::vector<int> inOrder_, outOrder_;
    std::size_t inCursor_ = 0, outCursor_ = 0;
};

}  // namespace certood
