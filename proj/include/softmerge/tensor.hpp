#pragma once

// Dense double-precision tensors and a single-use reverse-mode tape.
//
// A Tensor is a plain value (shape + row-major buffer). Differentiable
// computation goes through a Tape: every op appends a node holding its
// forward value and a closure that pushes the node's adjoint to its parents.
// backward() walks the nodes in exact reverse recording order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace softmerge {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_))
            throw ShapeError("Tensor: buffer of " + std::to_string(data_.size()) + " elements does not match shape " +
                             softmerge::to_string(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
        return Tensor({rows, cols}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& buffer() { return data_; }
    const std::vector<double>& buffer() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("Tensor::item on shape " + softmerge::to_string(shape_));
        return data_[0];
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    std::size_t id() const { return id_; }
    Tape& tape() const { return *tape_; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    // Receives the adjoint of the node being processed; accumulates into parents
    // through Tape::accumulate.
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var record(Tensor value, std::initializer_list<Var> parents, Backward backward) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || node(p).requires_grad;
        nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : nullptr});
        return Var(this, nodes_.size() - 1);
    }

    Var record(Tensor value, std::span<const Var> parents, Backward backward) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || node(p).requires_grad;
        nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : nullptr});
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(const Var& v) const { return node(v).value; }
    bool requires_grad(const Var& v) const { return node(v).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(const Var& loss) {
        if (backward_done_) throw std::logic_error("Tape::backward: tape already consumed; record a new graph");
        const auto& lv = node(loss).value;
        if (lv.size() != 1) throw ShapeError("Tape::backward: loss must be scalar, got shape " + to_string(lv.shape()));
        backward_done_ = true;
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad = Tensor(n.value.shape());
        if (!node(loss).requires_grad) return;
        node(loss).grad[0] = 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.backward) n.backward(*this, n.grad);
        }
    }

    // Adjoint of v after backward(); zeros if v does not depend on any leaf
    // that requires a gradient.
    Tensor grad(const Var& v) const {
        const auto& n = node(v);
        if (backward_done_ && n.requires_grad) return n.grad;
        return Tensor(n.value.shape());
    }

    void accumulate(const Var& v, std::span<const double> g) {
        auto& n = node(v);
        if (!n.requires_grad) return;
        auto dst = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

    // Direct access for ops that scatter into a parent's adjoint.
    std::span<double> grad_buffer(const Var& v) { return node(v).grad.data(); }

    bool consumed() const { return backward_done_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Backward backward;
    };

    Node& node(const Var& v) { return nodes_.at(v.id()); }
    const Node& node(const Var& v) const { return nodes_.at(v.id()); }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

namespace detail {
inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                    "matmul: shape mismatch " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av.at(i, p);
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * bv.at(p, j);
        }
    return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
        if (a.requires_grad()) {
            const auto& bv = b.value();
            auto ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g.at(i, j) * bv.at(p, j);
                    ga[i * k + p] += acc;
                }
        }
        if (b.requires_grad()) {
            const auto& av = a.value();
            auto gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av.at(i, p);
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g.at(i, j);
                }
        }
    });
}

// a[m x n] + bias[n], broadcast over rows.
inline Var add_bias(const Var& a, const Var& bias) {
    const auto& av = a.value();
    const auto& bv = bias.value();
    detail::require(av.rank() == 2 && bv.size() == av.dim(1),
                    "add_bias: shape mismatch " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
    const std::size_t m = av.dim(0), n = av.dim(1);
    Tensor out = av;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bv[j];
    return a.tape().record(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, const Tensor& g) {
        t.accumulate(a, g.data());
        if (bias.requires_grad()) {
            auto gb = t.grad_buffer(bias);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
        }
    });
}

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& x : out.data()) x = x > 0.0 ? x : 0.0;
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        const auto& av = a.value();
        auto ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < ga.size(); ++i)
            if (av[i] > 0.0) ga[i] += g[i];
    });
}

// [b, d1, d2, ...] -> [b, d1*d2*...]
inline Var flatten(const Var& a) {
    const auto& av = a.value();
    detail::require(av.rank() >= 1, "flatten: rank-0 input");
    const std::size_t rows = av.dim(0);
    const std::size_t cols = rows == 0 ? 0 : av.size() / rows;
    Tensor out({rows, cols}, av.buffer());
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g.data()); });
}

// a * g for a scalar g; the gradient reaches both operands.
inline Var scale(const Var& a, const Var& gate) {
    detail::require(gate.value().size() == 1, "scale: gate must be scalar, got " + to_string(gate.shape()));
    const double gv = gate.value()[0];
    Tensor out = a.value();
    for (auto& x : out.data()) x *= gv;
    return a.tape().record(std::move(out), {a, gate}, [a, gate](Tape& t, const Tensor& g) {
        const double gv = gate.value()[0];
        if (a.requires_grad()) {
            auto ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * gv;
        }
        if (gate.requires_grad()) {
            const auto& av = a.value();
            double dot = 0.0;
            for (std::size_t i = 0; i < av.size(); ++i) dot += g[i] * av[i];
            t.grad_buffer(gate)[0] += dot;
        }
    });
}

inline Var add(const Var& a, const Var& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g.data());
        t.accumulate(b, g.data());
    });
}

// mult * a + offset, elementwise.
inline Var affine(const Var& a, double mult, double offset) {
    Tensor out = a.value();
    for (auto& x : out.data()) x = mult * x + offset;
    return a.tape().record(std::move(out), {a}, [a, mult](Tape& t, const Tensor& g) {
        if (!a.requires_grad()) return;
        auto ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += mult * g[i];
    });
}

inline Var sum(const Var& a) {
    double acc = 0.0;
    for (double x : a.value().data()) acc += x;
    return a.tape().record(Tensor::scalar(acc), {a}, [a](Tape& t, const Tensor& g) {
        if (!a.requires_grad()) return;
        for (auto& x : t.grad_buffer(a)) x += g[0];
    });
}

// Sum of scalar Vars in the given order.
inline Var sum_scalars(std::span<const Var> xs) {
    detail::require(!xs.empty(), "sum_scalars: empty input");
    double acc = 0.0;
    for (const auto& x : xs) {
        detail::require(x.value().size() == 1, "sum_scalars: non-scalar operand " + to_string(x.shape()));
        acc += x.value()[0];
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return xs.front().tape().record(Tensor::scalar(acc), xs, [parents](Tape& t, const Tensor& g) {
        for (const auto& p : parents)
            if (p.requires_grad()) t.grad_buffer(p)[0] += g[0];
    });
}

class LabelError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Mean over rows of -log softmax(logits)[label].
inline Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
    const auto& lv = logits.value();
    detail::require(lv.rank() == 2 && lv.dim(0) == labels.size(),
                    "softmax_cross_entropy: logits " + to_string(lv.shape()) + " vs " +
                        std::to_string(labels.size()) + " labels");
    const std::size_t b = lv.dim(0), c = lv.dim(1);
    Tensor probs({b, c});
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= c)
            throw LabelError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                             std::to_string(c) + " classes");
        std::size_t top = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (lv.at(i, j) > lv.at(i, top)) top = j;
        const double mx = lv.at(i, top);
        // log-sum-exp - mx as log1p of the non-maximal terms keeps tiny losses exact
        double rest = 0.0;
        for (std::size_t j = 0; j < c; ++j)
            if (j != top) rest += std::exp(lv.at(i, j) - mx);
        const double shifted_lse = std::log1p(rest);
        for (std::size_t j = 0; j < c; ++j) probs.at(i, j) = std::exp(lv.at(i, j) - mx - shifted_lse);
        total += shifted_lse + (mx - lv.at(i, labels[i]));
    }
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return logits.tape().record(
        Tensor::scalar(total / static_cast<double>(b)), {logits},
        [logits, probs = std::move(probs), lab = std::move(lab), b, c](Tape& t, const Tensor& g) {
            auto gl = t.grad_buffer(logits);
            const double w = g[0] / static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    gl[i * c + j] += w * (probs.at(i, j) - (j == lab[i] ? 1.0 : 0.0));
        });
}

// Mean squared error against a constant target of identical shape.
inline Var mse(const Var& pred, const Tensor& target) {
    detail::require(pred.shape() == target.shape(),
                    "mse: shape mismatch " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
    const auto& pv = pred.value();
    const double n = static_cast<double>(pv.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) acc += (pv[i] - target[i]) * (pv[i] - target[i]);
    return pred.tape().record(Tensor::scalar(acc / n), {pred}, [pred, target, n](Tape& t, const Tensor& g) {
        const auto& pv = pred.value();
        auto gp = t.grad_buffer(pred);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[0] * 2.0 * (pv[i] - target[i]) / n;
    });
}

}  // namespace softmerge
