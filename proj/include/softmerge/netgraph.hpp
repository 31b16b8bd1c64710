#pragma once

// Architecture description, frozen weights and the SMRG binary format.
//
// SMRG layout (all integers little-endian u32 unless noted):
//   "SMRG" | version | layer_count
//   per layer: kind:u8 | ndims | dims[ndims] | dense only: weight f64[in*out], bias f64[out]
//   module_count | per module: first_layer, last_layer (inclusive)

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace softmerge {

enum class LayerKind : std::uint8_t { Dense = 0, Relu = 1, Flatten = 2 };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Relu: return "relu";
        case LayerKind::Flatten: return "flatten";
    }
    return "?";
}

// dims: dense {in, out}; relu {width}; flatten {input feature dims...}.
// Dense weights are stored [in x out] so the layer computes x W + b.
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::vector<std::uint32_t> dims;
    Tensor weight;
    Tensor bias;

    static LayerSpec dense(std::uint32_t in, std::uint32_t out) {
        return LayerSpec{LayerKind::Dense, {in, out}, Tensor({in, out}), Tensor({out})};
    }
    static LayerSpec relu(std::uint32_t width) { return LayerSpec{LayerKind::Relu, {width}, {}, {}}; }
    static LayerSpec flatten(std::vector<std::uint32_t> input_dims) {
        return LayerSpec{LayerKind::Flatten, std::move(input_dims), {}, {}};
    }

    bool has_weights() const { return kind == LayerKind::Dense; }

    Shape input_shape() const {
        if (kind == LayerKind::Dense) return {dims.at(0)};
        return Shape(dims.begin(), dims.end());
    }
    Shape output_shape() const {
        switch (kind) {
            case LayerKind::Dense: return {dims.at(1)};
            case LayerKind::Relu: return {dims.at(0)};
            case LayerKind::Flatten: {
                std::size_t n = 1;
                for (auto d : dims) n *= d;
                return {n};
            }
        }
        return {};
    }

    bool operator==(const LayerSpec&) const = default;
};

struct ModuleGroup {
    std::size_t first = 0;
    std::size_t last = 0;  // inclusive
    bool operator==(const ModuleGroup&) const = default;
};

class ArchitectureError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ModelDef {
public:
    ModelDef() = default;

    explicit ModelDef(std::vector<LayerSpec> layers, std::vector<ModuleGroup> modules = {})
        : layers_(std::move(layers)), modules_(std::move(modules)) {
        if (layers_.empty()) throw ArchitectureError("ModelDef: no layers");
        if (modules_.empty()) modules_.push_back({0, layers_.size() - 1});
        validate();
    }

    const std::vector<LayerSpec>& layers() const { return layers_; }
    const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }
    LayerSpec& mutable_layer(std::size_t i) { return layers_.at(i); }
    std::size_t layer_count() const { return layers_.size(); }

    const std::vector<ModuleGroup>& modules() const { return modules_; }
    std::size_t module_count() const { return modules_.size(); }

    Shape input_shape() const { return layers_.front().input_shape(); }
    Shape output_shape() const { return layers_.back().output_shape(); }

    // Hash of layer kinds and dims only; unaffected by weight values.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 14695981039346656037ull;
        auto mix = [&h](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xffu;
                h *= 1099511628211ull;
            }
        };
        mix(layers_.size());
        for (const auto& l : layers_) {
            mix(static_cast<std::uint64_t>(l.kind));
            mix(l.dims.size());
            for (auto d : l.dims) mix(d);
        }
        return h;
    }

    ModelDef with_modules(std::vector<ModuleGroup> modules) const {
        return ModelDef(layers_, std::move(modules));
    }

    bool operator==(const ModelDef&) const = default;

private:
    void validate() const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            const std::size_t want = l.kind == LayerKind::Dense ? 2 : (l.kind == LayerKind::Relu ? 1 : 0);
            if ((want && l.dims.size() != want) || (!want && l.dims.empty()))
                throw ArchitectureError("ModelDef: layer " + std::to_string(i) + " (" + to_string(l.kind) +
                                        ") has wrong number of dims");
            if (l.kind == LayerKind::Dense &&
                (l.weight.shape() != Shape{l.dims[0], l.dims[1]} || l.bias.shape() != Shape{l.dims[1]}))
                throw ArchitectureError("ModelDef: layer " + std::to_string(i) + " weight buffers do not match dims");
            if (i > 0) {
                const auto prev = layers_[i - 1].output_shape();
                const auto in = l.input_shape();
                if (element_count(prev) != element_count(in) || (l.kind != LayerKind::Flatten && prev != in))
                    throw ArchitectureError("ModelDef: layer " + std::to_string(i) + " expects input " +
                                            softmerge::to_string(in) + " but layer " + std::to_string(i - 1) +
                                            " produces " + softmerge::to_string(prev));
            }
        }
        std::size_t next = 0;
        for (std::size_t m = 0; m < modules_.size(); ++m) {
            const auto& g = modules_[m];
            if (g.first != next || g.last < g.first || g.last >= layers_.size())
                throw ArchitectureError("ModelDef: module " + std::to_string(m) +
                                        " does not continue a contiguous partition of the layers");
            next = g.last + 1;
        }
        if (next != layers_.size()) throw ArchitectureError("ModelDef: module groups do not cover every layer");
    }

    std::vector<LayerSpec> layers_;
    std::vector<ModuleGroup> modules_;
};

// Dense/ReLU stack: dense(in,h0) relu dense(h0,h1) relu ... dense(h_last, classes).
inline ModelDef mlp_architecture(std::uint32_t inputs, const std::vector<std::uint32_t>& hidden, std::uint32_t outputs) {
    std::vector<LayerSpec> layers;
    std::uint32_t width = inputs;
    for (auto h : hidden) {
        layers.push_back(LayerSpec::dense(width, h));
        layers.push_back(LayerSpec::relu(h));
        width = h;
    }
    layers.push_back(LayerSpec::dense(width, outputs));
    return ModelDef(std::move(layers));
}

// Splits the layer list into `count` contiguous groups of near-equal length.
inline ModelDef split_modules(const ModelDef& def, std::size_t count) {
    const std::size_t n = def.layer_count();
    if (count == 0 || count > n)
        throw ArchitectureError("split_modules: cannot split " + std::to_string(n) + " layers into " +
                                std::to_string(count) + " modules");
    std::vector<ModuleGroup> groups;
    std::size_t first = 0;
    for (std::size_t m = 0; m < count; ++m) {
        const std::size_t len = n / count + (m < n % count ? 1 : 0);
        groups.push_back({first, first + len - 1});
        first += len;
    }
    return def.with_modules(std::move(groups));
}

// He-normal weights, zero biases.
inline void initialize_weights(ModelDef& def, Rng& rng) {
    for (std::size_t i = 0; i < def.layer_count(); ++i) {
        auto& l = def.mutable_layer(i);
        if (!l.has_weights()) continue;
        const double stddev = std::sqrt(2.0 / static_cast<double>(l.dims[0]));
        for (auto& w : l.weight.data()) w = rng.normal(0.0, stddev);
        for (auto& b : l.bias.data()) b = 0.0;
    }
}

// FNV-1a over the raw bytes of every weight and bias buffer.
inline std::uint64_t weight_checksum(const ModelDef& def) {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](std::span<const double> xs) {
        for (double x : xs) {
            const auto bits = std::bit_cast<std::uint64_t>(x);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xffu;
                h *= 1099511628211ull;
            }
        }
    };
    for (const auto& l : def.layers()) {
        mix(l.weight.data());
        mix(l.bias.data());
    }
    return h;
}

// Records one layer on the tape. Weights enter as constants: nothing upstream
// of a model can ever receive a weight gradient.
inline Var apply_layer(const LayerSpec& layer, const Var& x) {
    switch (layer.kind) {
        case LayerKind::Dense: {
            auto& tape = x.tape();
            return add_bias(matmul(x, tape.constant(layer.weight)), tape.constant(layer.bias));
        }
        case LayerKind::Relu: return relu(x);
        case LayerKind::Flatten: return flatten(x);
    }
    throw ArchitectureError("apply_layer: unknown layer kind");
}

// Applies layers [first, last] in order.
inline Var apply_layers(const ModelDef& def, std::size_t first, std::size_t last, Var x) {
    for (std::size_t i = first; i <= last; ++i) x = apply_layer(def.layer(i), x);
    return x;
}

inline void check_input(const ModelDef& def, const Tensor& x) {
    const auto in = def.input_shape();
    Shape got(x.shape().begin() + (x.rank() ? 1 : 0), x.shape().end());
    if (x.rank() < 1 || element_count(got) != element_count(in) ||
        (def.layer(0).kind != LayerKind::Flatten && got != in))
        throw ShapeError("forward: input " + to_string(x.shape()) + " does not match model input " + to_string(in));
}

inline Var forward(const ModelDef& def, const Var& x) {
    check_input(def, x.value());
    return apply_layers(def, 0, def.layer_count() - 1, x);
}

inline Tensor forward(const ModelDef& def, const Tensor& x) {
    Tape tape;
    return forward(def, tape.constant(x)).value();
}

// Outcome of comparing architectures across a zoo.
struct ArchReport {
    bool ok = true;
    std::size_t model = 0;  // first offending model
    std::size_t layer = 0;  // first offending layer within it
    std::string message;
};

inline ArchReport assert_same_arch(std::span<const ModelDef> models) {
    if (models.size() <= 1) return {};
    const auto& ref = models.front();
    for (std::size_t j = 1; j < models.size(); ++j) {
        const auto& m = models[j];
        if (m.fingerprint() == ref.fingerprint() && m.modules() == ref.modules()) continue;
        const std::size_t common = std::min(ref.layer_count(), m.layer_count());
        for (std::size_t l = 0; l < common; ++l) {
            const auto& a = ref.layer(l);
            const auto& b = m.layer(l);
            if (a.kind != b.kind || a.dims != b.dims) {
                std::ostringstream os;
                os << "model " << j << " layer " << l << ": " << to_string(b.kind) << to_string(Shape(b.dims.begin(), b.dims.end()))
                   << " differs from model 0 " << to_string(a.kind) << to_string(Shape(a.dims.begin(), a.dims.end()));
                return {false, j, l, os.str()};
            }
        }
        if (ref.layer_count() != m.layer_count())
            return {false, j, common,
                    "model " + std::to_string(j) + " has " + std::to_string(m.layer_count()) + " layers, model 0 has " +
                        std::to_string(ref.layer_count())};
        return {false, j, 0, "model " + std::to_string(j) + " module grouping differs from model 0"};
    }
    return {};
}

// J frozen models sharing one architecture.
class ModelZoo {
public:
    explicit ModelZoo(std::vector<ModelDef> models) : models_(std::move(models)) {
        if (models_.empty()) throw ArchitectureError("ModelZoo: empty zoo");
        const auto report = assert_same_arch(models_);
        if (!report.ok) throw ArchitectureError("ModelZoo: " + report.message);
    }

    std::size_t size() const { return models_.size(); }
    const ModelDef& operator[](std::size_t j) const { return models_.at(j); }
    const ModelDef& front() const { return models_.front(); }
    const std::vector<ModelDef>& models() const { return models_; }
    std::uint64_t fingerprint() const { return models_.front().fingerprint(); }

    std::vector<std::uint64_t> checksums() const {
        std::vector<std::uint64_t> out;
        for (const auto& m : models_) out.push_back(weight_checksum(m));
        return out;
    }

private:
    std::vector<ModelDef> models_;
};

// ---------------------------------------------------------------------------
// SMRG serialization

enum class FormatErrorKind { BadMagic, VersionMismatch, Truncated, Invalid };

inline const char* to_string(FormatErrorKind k) {
    switch (k) {
        case FormatErrorKind::BadMagic: return "bad magic";
        case FormatErrorKind::VersionMismatch: return "version mismatch";
        case FormatErrorKind::Truncated: return "truncated";
        case FormatErrorKind::Invalid: return "invalid";
    }
    return "?";
}

class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
    FormatErrorKind kind() const { return kind_; }

private:
    FormatErrorKind kind_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kSmrgVersion = 1;

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
        return std::bit_cast<double>(bits);
    }
    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n)
            throw FormatError(FormatErrorKind::Truncated,
                              "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_));
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_model(const ModelDef& def) {
    detail::ByteWriter w;
    w.raw("SMRG");
    w.u32(kSmrgVersion);
    w.u32(static_cast<std::uint32_t>(def.layer_count()));
    for (const auto& l : def.layers()) {
        w.u8(static_cast<std::uint8_t>(l.kind));
        w.u32(static_cast<std::uint32_t>(l.dims.size()));
        for (auto d : l.dims) w.u32(d);
        if (l.has_weights()) {
            for (double x : l.weight.data()) w.f64(x);
            for (double x : l.bias.data()) w.f64(x);
        }
    }
    w.u32(static_cast<std::uint32_t>(def.module_count()));
    for (const auto& g : def.modules()) {
        w.u32(static_cast<std::uint32_t>(g.first));
        w.u32(static_cast<std::uint32_t>(g.last));
    }
    return std::move(w.bytes());
}

inline ModelDef decode_model(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw FormatError(FormatErrorKind::Truncated, "file shorter than magic");
    if (std::memcmp(bytes.data(), "SMRG", 4) != 0) throw FormatError(FormatErrorKind::BadMagic, "expected \"SMRG\"");
    detail::ByteReader r(bytes.subspan(4));
    const auto version = r.u32();
    if (version != kSmrgVersion)
        throw FormatError(FormatErrorKind::VersionMismatch,
                          "file version " + std::to_string(version) + ", reader supports " + std::to_string(kSmrgVersion));
    const auto count = r.u32();
    std::vector<LayerSpec> layers;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto tag = r.u8();
        if (tag > static_cast<std::uint8_t>(LayerKind::Flatten))
            throw FormatError(FormatErrorKind::Invalid, "unknown layer kind " + std::to_string(tag));
        LayerSpec l;
        l.kind = static_cast<LayerKind>(tag);
        const auto ndims = r.u32();
        if (ndims > r.remaining() / 4) throw FormatError(FormatErrorKind::Truncated, "dims run past end of file");
        for (std::uint32_t d = 0; d < ndims; ++d) l.dims.push_back(r.u32());
        if (l.has_weights()) {
            if (ndims != 2) throw FormatError(FormatErrorKind::Invalid, "dense layer needs 2 dims");
            const std::uint64_t n = std::uint64_t{l.dims[0]} * l.dims[1] + l.dims[1];
            if (n > r.remaining() / 8) throw FormatError(FormatErrorKind::Truncated, "weights run past end of file");
            l.weight = Tensor({l.dims[0], l.dims[1]});
            l.bias = Tensor({l.dims[1]});
            for (auto& x : l.weight.data()) x = r.f64();
            for (auto& x : l.bias.data()) x = r.f64();
        }
        layers.push_back(std::move(l));
    }
    const auto groups = r.u32();
    std::vector<ModuleGroup> modules;
    for (std::uint32_t m = 0; m < groups; ++m) {
        const auto first = r.u32();
        const auto last = r.u32();
        modules.push_back({first, last});
    }
    if (!r.at_end()) throw FormatError(FormatErrorKind::Invalid, std::to_string(r.remaining()) + " trailing bytes");
    try {
        return ModelDef(std::move(layers), std::move(modules));
    } catch (const ArchitectureError& e) {
        throw FormatError(FormatErrorKind::Invalid, e.what());
    }
}

inline void save_model(const ModelDef& def, const std::filesystem::path& path) {
    detail::write_file(path, encode_model(def));
}

inline ModelDef load_model(const std::filesystem::path& path) { return decode_model(detail::read_file(path)); }

}  // namespace softmerge
