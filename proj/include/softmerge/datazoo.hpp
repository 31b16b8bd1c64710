#pragma once

// Datasets (synthetic generators and IDX ingestion) and construction of
// base-model zoos, including corrupted members.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "netgraph.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace softmerge {

enum class Split { Train, Val };

struct Dataset {
    Tensor features;                  // [n x feature dims...]
    std::vector<std::size_t> labels;  // n entries, each < classes
    std::size_t classes = 0;
    Split split = Split::Train;

    std::size_t size() const { return labels.size(); }

    std::size_t row_size() const { return labels.empty() ? 0 : features.size() / labels.size(); }

    // Rows at `indices` gathered into a batch.
    Tensor rows(std::span<const std::size_t> indices) const {
        const std::size_t w = row_size();
        Shape shape = features.shape();
        shape[0] = indices.size();
        Tensor out(shape);
        auto src = features.data();
        auto dst = out.data();
        for (std::size_t i = 0; i < indices.size(); ++i)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * w), w,
                        dst.begin() + static_cast<std::ptrdiff_t>(i * w));
        return out;
    }

    std::vector<std::size_t> labels_at(std::span<const std::size_t> indices) const {
        std::vector<std::size_t> out;
        out.reserve(indices.size());
        for (auto i : indices) out.push_back(labels[i]);
        return out;
    }

    Dataset with_split(Split s) const {
        Dataset d = *this;
        d.split = s;
        return d;
    }
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
inline Dataset assemble(std::size_t n, std::size_t d, std::size_t classes, std::vector<double> feats,
                        std::vector<std::size_t> labels, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    Dataset out;
    out.features = Tensor({n, d});
    out.classes = classes;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(feats.begin() + static_cast<std::ptrdiff_t>(order[i] * d), d,
                    out.features.data().begin() + static_cast<std::ptrdiff_t>(i * d));
        out.labels.push_back(labels[order[i]]);
    }
    return out;
}
}  // namespace detail

// Isotropic unit-variance Gaussian blobs. With k <= d the class centers are
// (separation / sqrt 2) * e_c, so every pair of centers is `separation` apart;
// otherwise centers are random directions of the same radius.
inline Dataset gen_blobs(std::size_t classes, std::size_t dim, std::size_t n, double separation, std::uint64_t seed) {
    if (classes < 2) throw DatasetError("gen_blobs: need at least 2 classes");
    if (n < classes) throw DatasetError("gen_blobs: need n >= classes");
    if (dim == 0) throw DatasetError("gen_blobs: dim must be positive");
    Rng rng(seed);
    const double radius = separation / std::sqrt(2.0);
    std::vector<double> centers(classes * dim, 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
        if (classes <= dim) {
            centers[c * dim + c] = radius;
            continue;
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            centers[c * dim + k] = rng.normal();
            norm += centers[c * dim + k] * centers[c * dim + k];
        }
        for (std::size_t k = 0; k < dim; ++k) centers[c * dim + k] *= radius / std::sqrt(norm);
    }
    std::vector<double> feats(n * dim);
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;
        labels[i] = c;
        for (std::size_t k = 0; k < dim; ++k) feats[i * dim + k] = centers[c * dim + k] + rng.normal();
    }
    return detail::assemble(n, dim, classes, std::move(feats), std::move(labels), rng);
}

// Two interleaving half circles in 2-D with Gaussian noise.
inline Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed) {
    if (n < 2) throw DatasetError("gen_two_moons: need n >= 2");
    Rng rng(seed);
    const std::size_t upper = (n + 1) / 2;
    std::vector<double> feats(n * 2);
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool top = i < upper;
        const std::size_t count = top ? upper : n - upper;
        const std::size_t k = top ? i : i - upper;
        const double t = count > 1 ? M_PI * static_cast<double>(k) / static_cast<double>(count - 1) : 0.0;
        const double x = top ? std::cos(t) : 1.0 - std::cos(t);
        const double y = top ? std::sin(t) : 0.5 - std::sin(t);
        feats[i * 2] = x + noise * rng.normal();
        feats[i * 2 + 1] = y + noise * rng.normal();
        labels[i] = top ? 0 : 1;
    }
    return detail::assemble(n, 2, 2, std::move(feats), std::move(labels), rng);
}

// ---------------------------------------------------------------------------
// IDX (big-endian) files: 0x00000803 images [n][rows][cols] u8,
// 0x00000801 labels [n] u8.

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxHeader {
    std::uint32_t magic = 0;
    std::vector<std::uint32_t> dims;
    std::size_t data_offset = 0;
};

inline IdxHeader read_idx_header(std::span<const std::uint8_t> bytes) {
    auto be32 = [&](std::size_t off) {
        if (off + 4 > bytes.size()) throw FormatError(FormatErrorKind::Truncated, "IDX header truncated");
        return (std::uint32_t{bytes[off]} << 24) | (std::uint32_t{bytes[off + 1]} << 16) |
               (std::uint32_t{bytes[off + 2]} << 8) | std::uint32_t{bytes[off + 3]};
    };
    IdxHeader h;
    h.magic = be32(0);
    if ((h.magic >> 16) != 0 || ((h.magic >> 8) & 0xff) != 0x08)
        throw FormatError(FormatErrorKind::BadMagic, "not an unsigned-byte IDX file");
    const std::uint32_t ndims = h.magic & 0xff;
    for (std::uint32_t i = 0; i < ndims; ++i) h.dims.push_back(be32(4 + 4 * i));
    h.data_offset = 4 + 4 * std::size_t{ndims};
    return h;
}

// Images scaled to [0,1] and flattened per sample to rows*cols features.
// limit == 0 reads everything.
inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit = 0) {
    const auto ib = detail::read_file(images);
    const auto lb = detail::read_file(labels);
    const auto ih = read_idx_header(ib);
    const auto lh = read_idx_header(lb);
    if (ih.magic != kIdxImagesMagic)
        throw FormatError(FormatErrorKind::BadMagic, images.string() + ": expected image magic 0x00000803");
    if (lh.magic != kIdxLabelsMagic)
        throw FormatError(FormatErrorKind::BadMagic, labels.string() + ": expected label magic 0x00000801");
    if (ih.dims[0] != lh.dims[0])
        throw DatasetError("load_idx: " + std::to_string(ih.dims[0]) + " images but " + std::to_string(lh.dims[0]) +
                           " labels");
    std::size_t n = ih.dims[0];
    if (limit != 0) n = std::min(n, limit);
    const std::size_t w = std::size_t{ih.dims[1]} * ih.dims[2];
    if (ib.size() < ih.data_offset + n * w || lb.size() < lh.data_offset + n)
        throw FormatError(FormatErrorKind::Truncated, "IDX payload shorter than header claims");
    Dataset out;
    out.features = Tensor({n, w});
    auto f = out.features.data();
    for (std::size_t i = 0; i < n * w; ++i) f[i] = static_cast<double>(ib[ih.data_offset + i]) / 255.0;
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.labels.push_back(lb[lh.data_offset + i]);
        max_label = std::max(max_label, out.labels.back());
    }
    out.classes = max_label + 1;
    return out;
}

// ---------------------------------------------------------------------------
// Base-model training and corruption

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BaseTrainConfig {
    std::size_t epochs = 50;
    double lr = 0.05;
    std::size_t batch_size = 32;
};

// Plain mini-batch SGD on every weight of a freshly initialized copy of
// `arch` (its stored weights are ignored). epochs == 0 returns the
// initialization.
inline ModelDef train_base_model(const ModelDef& arch, const Dataset& data, std::uint64_t seed,
                                 const BaseTrainConfig& cfg = {}) {
    if (data.size() == 0) throw DatasetError("train_base_model: empty dataset");
    Rng rng(seed);
    ModelDef model = arch;
    initialize_weights(model, rng);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
            Tape tape;
            Var h = tape.constant(data.rows(idx));
            std::vector<std::pair<std::size_t, std::array<Var, 2>>> params;
            for (std::size_t l = 0; l < model.layer_count(); ++l) {
                const auto& layer = model.layer(l);
                if (layer.kind != LayerKind::Dense) {
                    h = apply_layer(layer, h);
                    continue;
                }
                const Var w = tape.leaf(layer.weight, true);
                const Var b = tape.leaf(layer.bias, true);
                params.push_back({l, {w, b}});
                h = add_bias(matmul(h, w), b);
            }
            const auto labels = data.labels_at(idx);
            const Var loss = softmax_cross_entropy(h, labels);
            if (!std::isfinite(loss.value()[0]))
                throw DivergenceError("train_base_model: non-finite loss at epoch " + std::to_string(epoch));
            tape.backward(loss);
            for (const auto& [l, wb] : params) {
                auto& layer = model.mutable_layer(l);
                const auto gw = tape.grad(wb[0]);
                const auto gb = tape.grad(wb[1]);
                for (std::size_t i = 0; i < gw.size(); ++i) layer.weight[i] -= cfg.lr * gw[i];
                for (std::size_t i = 0; i < gb.size(); ++i) layer.bias[i] -= cfg.lr * gb[i];
            }
        }
    }
    return model;
}

enum class CorruptionMode { Randomize, Extreme };

struct Corruption {
    CorruptionMode mode = CorruptionMode::Randomize;
    double scale = 1e6;  // Extreme only
};

// Randomize: every weight and bias resampled N(0,1). Extreme: every weight and
// bias multiplied by `scale`. The architecture is untouched.
inline ModelDef corrupt_model(const ModelDef& model, const Corruption& c, std::uint64_t seed) {
    if (c.mode == CorruptionMode::Extreme && !(c.scale > 0.0))
        throw std::invalid_argument("corrupt_model: scale must be > 0");
    Rng rng(seed);
    ModelDef out = model;
    for (std::size_t l = 0; l < out.layer_count(); ++l) {
        auto& layer = out.mutable_layer(l);
        if (!layer.has_weights()) continue;
        for (auto* t : {&layer.weight, &layer.bias})
            for (auto& x : t->data()) x = c.mode == CorruptionMode::Randomize ? rng.normal() : x * c.scale;
    }
    return out;
}

}  // namespace softmerge
