#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
// The recorded graph is rebuilt on every forward pass; backward() topologically
// orders the reachable nodes and pushes gradients to every requires_grad leaf.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "detlab/common.hpp"
#include "detlab/mathkernels.hpp"

namespace detlab {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw ShapeError(str_cat("nonpositive extent ", e, " in shape"));
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

namespace detail {

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // allocated on demand, same length as values
    bool requires_grad = false;
    bool consumed = false;  // set once backward() has run through this node
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // reads this->grad, accumulates into parents

    T* grad_data() {
        if (grad.empty()) grad.assign(values.size(), T(0));
        return grad.data();
    }
};

template <typename T>
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Disables graph recording for the current thread while alive.
template <typename T>
class NoGrad {
public:
    NoGrad() : prev_(detail::grad_mode<T>()) { detail::grad_mode<T>() = false; }
    ~NoGrad() { detail::grad_mode<T>() = prev_; }
    NoGrad(const NoGrad&) = delete;

private:
    bool prev_;
};

template <typename T>
class Tensor {
public:
    using Node = detail::TensorNode<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }
    static Tensor filled(Shape shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->values.assign(static_cast<size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad && detail::grad_mode<T>();
        return Tensor(std::move(n));
    }
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (static_cast<int64_t>(values.size()) != shape_numel(shape))
            throw ShapeError(str_cat("value count ", values.size(), " does not match shape ", shape_str(shape)));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->requires_grad = requires_grad && detail::grad_mode<T>();
        return Tensor(std::move(n));
    }
    static Tensor scalar(T v, bool requires_grad = false) { return filled({1}, v, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->values.size()); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    const std::vector<T>& values() const { return node_->values; }
    std::vector<T>& values() { return node_->values; }
    const T* data() const { return node_->values.data(); }
    T* data() { return node_->values.data(); }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    T* grad_data() { return node_->grad_data(); }
    void zero_grad() { node_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw ShapeError(str_cat("item() on tensor of shape ", shape_str(shape())));
        return node_->values[0];
    }
    T at(std::initializer_list<int> idx) const {
        int64_t off = 0;
        size_t d = 0;
        for (int i : idx) off = off * node_->shape[d] + i, ++d;
        return node_->values[static_cast<size_t>(off)];
    }

    // A view of the same values outside the recorded graph.
    Tensor detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->values = node_->values;
        n->requires_grad = false;
        return Tensor(std::move(n));
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backprop) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool need = false;
    if (grad_mode<T>())
        for (auto& p : parents) need = need || p.requires_grad();
    if (need) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<T>(std::move(n));
}

}  // namespace detail

// Ordered record of the operations reachable from a root; parents precede
// children. Executing it in reverse propagates gradients to every leaf.
template <typename T>
class Tape {
public:
    static Tape build(const Tensor<T>& root) {
        Tape t;
        if (!root.requires_grad()) return t;
        std::unordered_set<detail::TensorNode<T>*> seen;
        // iterative DFS postorder: children appended after all parents
        std::vector<std::pair<detail::TensorNode<T>*, size_t>> stack;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::TensorNode<T>* p = node->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                t.order_.push_back(node);
                stack.pop_back();
            }
        }
        return t;
    }

    const std::vector<detail::TensorNode<T>*>& nodes() const { return order_; }

    // Runs all recorded backprop closures in reverse topological order.
    void run_backward() {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::TensorNode<T>* n = *it;
            n->consumed = true;
            if (n->backprop && !n->grad.empty()) n->backprop(*n);
        }
    }

private:
    std::vector<detail::TensorNode<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw NumericError(str_cat("backward: loss must be scalar, got shape ", shape_str(loss.shape())));
    if (!loss.requires_grad())
        throw NumericError("backward: loss does not require grad (empty tape)");
    if (loss.node()->consumed)
        throw NumericError("backward: tape already consumed; rebuild the forward pass first");
    auto tape = Tape<T>::build(loss);
    loss.node()->grad_data()[0] += T(1);
    tape.run_backward();
}

// ---------------------------------------------------------------------------
// elementwise and scalar ops

namespace detail {
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(str_cat(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
    auto an = a.node(); auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        if (an->requires_grad) { T* ga = an->grad_data(); for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i]; }
        if (bn->requires_grad) { T* gb = bn->grad_data(); for (size_t i = 0; i < o.grad.size(); ++i) gb[i] += g[i]; }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
    auto an = a.node(); auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        if (an->requires_grad) { T* ga = an->grad_data(); for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i]; }
        if (bn->requires_grad) { T* gb = bn->grad_data(); for (size_t i = 0; i < o.grad.size(); ++i) gb[i] -= g[i]; }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
    auto an = a.node(); auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        const T* av = an->values.data();
        const T* bv = bn->values.data();
        if (an->requires_grad) { T* ga = an->grad_data(); for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i] * bv[i]; }
        if (bn->requires_grad) { T* gb = bn->grad_data(); for (size_t i = 0; i < o.grad.size(); ++i) gb[i] += g[i] * av[i]; }
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] /= bp[i];
    auto an = a.node(); auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        const T* av = an->values.data();
        const T* bv = bn->values.data();
        if (an->requires_grad) { T* ga = an->grad_data(); for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i] / bv[i]; }
        if (bn->requires_grad) {
            T* gb = bn->grad_data();
            for (size_t i = 0; i < o.grad.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.values());
    for (T& v : out) v += c;
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [an](detail::TensorNode<T>& o) {
        T* ga = an->grad_data();
        const T* g = o.grad.data();
        for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.values());
    for (T& v : out) v *= c;
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [an, c](detail::TensorNode<T>& o) {
        T* ga = an->grad_data();
        const T* g = o.grad.data();
        for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i] * c;
    });
}

template <typename T> Tensor<T> neg(const Tensor<T>& a) { return mul_scalar(a, T(-1)); }

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T c) { return add_scalar(a, c); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T c) { return add_scalar(a, -c); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T c) { return mul_scalar(a, c); }
template <typename T> Tensor<T> operator*(T c, const Tensor<T>& a) { return mul_scalar(a, c); }

namespace detail {

// shared scaffolding for unary ops: fn(x) -> value, dfn(x, y) -> dy/dx
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& a, F fn, DF dfn) {
    std::vector<T> out(a.values().size());
    const T* av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fn(av[i]);
    auto an = a.node();
    return make_op<T>(a.shape(), std::move(out), {a}, [an, dfn](TensorNode<T>& o) {
        T* ga = an->grad_data();
        const T* g = o.grad.data();
        const T* x = an->values.data();
        const T* y = o.values.data();
        for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i] * dfn(x[i], y[i]);
    });
}

}  // namespace detail

template <typename T>
Tensor<T> abs_t(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::abs(x); },
                            [](T x, T) { return x >= T(0) ? T(1) : T(-1); });
}
template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}
template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// log(sigmoid(x)) computed without overflow at either tail
template <typename T>
Tensor<T> log_sigmoid(const Tensor<T>& a) {
    return detail::unary_op(a,
        [](T x) { return x > T(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
        [](T x, T) { return T(1) / (T(1) + std::exp(x)); });  // = sigmoid(-x)
}

enum class Act { Relu, Silu, Gelu, Sigmoid };

template <typename T>
Tensor<T> activation(const Tensor<T>& a, Act kind) {
    switch (kind) {
        case Act::Relu:
            return detail::unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                                    [](T x, T) { return x > T(0) ? T(1) : T(0); });
        case Act::Sigmoid: {
            std::vector<T> out(a.values().size());
            detail::vec_sigmoid(a.data(), out.data(), out.size());
            auto an = a.node();
            return detail::make_op<T>(a.shape(), std::move(out), {a}, [an](detail::TensorNode<T>& o) {
                detail::vec_sigmoid_grad(o.values.data(), o.grad.data(), an->grad_data(), o.grad.size());
            });
        }
        case Act::Silu: {
            std::vector<T> out(a.values().size());
            detail::vec_silu(a.data(), out.data(), out.size());
            auto an = a.node();
            return detail::make_op<T>(a.shape(), std::move(out), {a}, [an](detail::TensorNode<T>& o) {
                detail::vec_silu_grad(an->values.data(), o.grad.data(), an->grad_data(), o.grad.size());
            });
        }
        case Act::Gelu:
            return detail::unary_op(a,
                [](T x) { return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476))); },
                [](T x, T) {
                    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
                    T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
                    return cdf + x * pdf;
                });
    }
    throw ConfigError("activation: unknown kind");
}

template <typename T> Tensor<T> relu(const Tensor<T>& a) { return activation(a, Act::Relu); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a) { return activation(a, Act::Sigmoid); }
template <typename T> Tensor<T> silu(const Tensor<T>& a) { return activation(a, Act::Silu); }
template <typename T> Tensor<T> gelu(const Tensor<T>& a) { return activation(a, Act::Gelu); }

// grad routed to the selected operand; ties go to `a`
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "minimum");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], bp[i]);
    auto an = a.node(); auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        const T* av = an->values.data();
        const T* bv = bn->values.data();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            if (av[i] <= bv[i]) { if (an->requires_grad) an->grad_data()[i] += g[i]; }
            else if (bn->requires_grad) bn->grad_data()[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "maximum");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], bp[i]);
    auto an = a.node(); auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        const T* av = an->values.data();
        const T* bv = bn->values.data();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            if (av[i] >= bv[i]) { if (an->requires_grad) an->grad_data()[i] += g[i]; }
            else if (bn->requires_grad) bn->grad_data()[i] += g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError(str_cat("reshape: cannot view ", shape_str(a.shape()), " as ", shape_str(shape)));
    auto an = a.node();
    return detail::make_op<T>(std::move(shape), a.values(), {a}, [an](detail::TensorNode<T>& o) {
        T* ga = an->grad_data();
        const T* g = o.grad.data();
        for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError(str_cat("transpose: expected rank-2, got ", shape_str(a.shape())));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<T> out(static_cast<size_t>(m) * n);
    const T* av = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    auto an = a.node();
    return detail::make_op<T>({n, m}, std::move(out), {a}, [an, m, n](detail::TensorNode<T>& o) {
        T* ga = an->grad_data();
        const T* g = o.grad.data();
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i) ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw ShapeError(str_cat("concat: axis ", axis, " out of range"));
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= parts[0].dim(d);
    for (int d = axis + 1; d < rank; ++d) inner *= parts[0].dim(d);
    for (const auto& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis && p.dim(d) != parts[0].dim(d))
                throw ShapeError(str_cat("concat: shape mismatch ", shape_str(p.shape()), " vs ",
                                         shape_str(parts[0].shape())));
        out_shape[axis] += p.dim(axis);
    }
    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    const int64_t out_row = static_cast<int64_t>(out_shape[axis]) * inner;
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t blk = static_cast<int64_t>(p.dim(axis)) * inner;
        const T* pv = p.data();
        for (int64_t r = 0; r < outer; ++r)
            std::copy(pv + r * blk, pv + (r + 1) * blk, out.data() + r * out_row + off);
        off += blk;
    }
    std::vector<std::shared_ptr<detail::TensorNode<T>>> pnodes;
    std::vector<int64_t> blks;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        blks.push_back(static_cast<int64_t>(p.dim(axis)) * inner);
    }
    return detail::make_op<T>(out_shape, std::move(out), parts,
        [pnodes, blks, outer, out_row](detail::TensorNode<T>& o) {
            const T* g = o.grad.data();
            int64_t off = 0;
            for (size_t k = 0; k < pnodes.size(); ++k) {
                if (pnodes[k]->requires_grad) {
                    T* gp = pnodes[k]->grad_data();
                    for (int64_t r = 0; r < outer; ++r) {
                        const T* src = g + r * out_row + off;
                        T* dst = gp + r * blks[k];
                        for (int64_t i = 0; i < blks[k]; ++i) dst[i] += src[i];
                    }
                }
                off += blks[k];
            }
        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
    const int rank = a.rank();
    if (axis < 0 || axis >= rank) throw ShapeError(str_cat("slice: axis ", axis, " out of range"));
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
        throw ShapeError(str_cat("slice: [", start, ",", start + len, ") outside extent ", a.dim(axis)));
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a.dim(d);
    for (int d = axis + 1; d < rank; ++d) inner *= a.dim(d);
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    std::vector<T> out(static_cast<size_t>(outer * len * inner));
    const T* av = a.data();
    const int64_t in_row = static_cast<int64_t>(a.dim(axis)) * inner;
    const int64_t out_row = static_cast<int64_t>(len) * inner;
    for (int64_t r = 0; r < outer; ++r)
        std::copy(av + r * in_row + start * inner, av + r * in_row + (start + len) * inner, out.data() + r * out_row);
    auto an = a.node();
    return detail::make_op<T>(out_shape, std::move(out), {a},
        [an, outer, inner, in_row, out_row, start](detail::TensorNode<T>& o) {
            T* ga = an->grad_data();
            const T* g = o.grad.data();
            for (int64_t r = 0; r < outer; ++r) {
                T* dst = ga + r * in_row + start * inner;
                const T* src = g + r * out_row;
                for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
            }
        });
}

// rows of a [N,C] matrix gathered by constant indices (duplicates allowed)
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int>& idx) {
    if (a.rank() != 2) throw ShapeError("gather_rows: expected rank-2");
    const int n = a.dim(0), c = a.dim(1);
    std::vector<T> out(idx.size() * static_cast<size_t>(c));
    const T* av = a.data();
    for (size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= n) throw ShapeError(str_cat("gather_rows: index ", idx[k], " out of [0,", n, ")"));
        std::copy(av + static_cast<size_t>(idx[k]) * c, av + static_cast<size_t>(idx[k] + 1) * c,
                  out.data() + k * static_cast<size_t>(c));
    }
    auto an = a.node();
    return detail::make_op<T>({static_cast<int>(idx.size()), c}, std::move(out), {a},
        [an, idx, c](detail::TensorNode<T>& o) {
            T* ga = an->grad_data();
            const T* g = o.grad.data();
            for (size_t k = 0; k < idx.size(); ++k) {
                T* dst = ga + static_cast<size_t>(idx[k]) * c;
                const T* src = g + k * static_cast<size_t>(c);
                for (int i = 0; i < c; ++i) dst[i] += src[i];
            }
        });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.values()) s += v;
    auto an = a.node();
    return detail::make_op<T>({1}, {s}, {a}, [an](detail::TensorNode<T>& o) {
        T g = o.grad[0];
        T* ga = an->grad_data();
        for (size_t i = 0; i < an->values.size(); ++i) ga[i] += g;
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError(str_cat("matmul: incompatible shapes ", shape_str(a.shape()), " x ", shape_str(b.shape())));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<size_t>(m) * n, T(0));
    detail::mm_acc(out.data(), a.data(), b.data(), m, k, n);
    auto an = a.node(); auto bn = b.node();
    return detail::make_op<T>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        if (an->requires_grad) detail::mm_abt_acc(an->grad_data(), g, bn->values.data(), m, n, k);
        if (bn->requires_grad) detail::mm_atb_acc(bn->grad_data(), an->values.data(), g, m, k, n);
    });
}

// [N,C] + [C] broadcast over rows
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
    if (a.rank() != 2 || v.rank() != 1 || v.dim(0) != a.dim(1))
        throw ShapeError(str_cat("add_rowvec: ", shape_str(a.shape()), " + ", shape_str(v.shape())));
    const int n = a.dim(0), c = a.dim(1);
    std::vector<T> out(a.values());
    const T* vv = v.data();
    for (int i = 0; i < n; ++i) {
        T* row = out.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) row[j] += vv[j];
    }
    auto an = a.node(); auto vn = v.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, v}, [an, vn, n, c](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        if (an->requires_grad) {
            T* ga = an->grad_data();
            for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
        }
        if (vn->requires_grad) {
            T* gv = vn->grad_data();
            for (int i = 0; i < n; ++i) {
                const T* row = g + static_cast<size_t>(i) * c;
                for (int j = 0; j < c; ++j) gv[j] += row[j];
            }
        }
    });
}

// [N,C] scaled per row by v[N]
template <typename T>
Tensor<T> mul_colvec(const Tensor<T>& a, const Tensor<T>& v) {
    if (a.rank() != 2 || v.numel() != a.dim(0))
        throw ShapeError(str_cat("mul_colvec: ", shape_str(a.shape()), " * ", shape_str(v.shape())));
    const int n = a.dim(0), c = a.dim(1);
    std::vector<T> out(a.values());
    const T* vv = v.data();
    for (int i = 0; i < n; ++i) {
        T* row = out.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) row[j] *= vv[i];
    }
    auto an = a.node(); auto vn = v.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a, v}, [an, vn, n, c](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        const T* av = an->values.data();
        const T* vv = vn->values.data();
        if (an->requires_grad) {
            T* ga = an->grad_data();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(i) * c + j] * vv[i];
        }
        if (vn->requires_grad) {
            T* gv = vn->grad_data();
            for (int i = 0; i < n; ++i) {
                T s = 0;
                for (int j = 0; j < c; ++j) s += g[static_cast<size_t>(i) * c + j] * av[static_cast<size_t>(i) * c + j];
                gv[i] += s;
            }
        }
    });
}

// [G*M, C] -> [G, C], summing each group of M consecutive rows
template <typename T>
Tensor<T> sum_group_rows(const Tensor<T>& a, int group) {
    if (a.rank() != 2 || group <= 0 || a.dim(0) % group != 0)
        throw ShapeError(str_cat("sum_group_rows: rows ", a.dim(0), " not divisible by ", group));
    const int g_count = a.dim(0) / group, c = a.dim(1);
    std::vector<T> out(static_cast<size_t>(g_count) * c, T(0));
    const T* av = a.data();
    for (int g = 0; g < g_count; ++g)
        for (int m = 0; m < group; ++m) {
            const T* row = av + (static_cast<size_t>(g) * group + m) * c;
            T* orow = out.data() + static_cast<size_t>(g) * c;
            for (int j = 0; j < c; ++j) orow[j] += row[j];
        }
    auto an = a.node();
    return detail::make_op<T>({g_count, c}, std::move(out), {a}, [an, g_count, group, c](detail::TensorNode<T>& o) {
        T* ga = an->grad_data();
        const T* g = o.grad.data();
        for (int gi = 0; gi < g_count; ++gi)
            for (int m = 0; m < group; ++m) {
                T* row = ga + (static_cast<size_t>(gi) * group + m) * c;
                const T* grow = g + static_cast<size_t>(gi) * c;
                for (int j = 0; j < c; ++j) row[j] += grow[j];
            }
    });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / batch norm

// softmax along the last axis; rows sum to 1
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
    if (a.rank() < 1) throw ShapeError("softmax: rank >= 1 required");
    const int c = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / c;
    std::vector<T> out(a.values().size());
    const T* av = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = av + r * c;
        T* y = out.data() + r * c;
        T mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        for (int j = 0; j < c; ++j) y[j] = x[j] - mx;
        detail::vec_exp(y, y, static_cast<size_t>(c));
        T s = 0;
        for (int j = 0; j < c; ++j) s += y[j];
        const T inv = T(1) / s;
        for (int j = 0; j < c; ++j) y[j] *= inv;
    }
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [an, rows, c](detail::TensorNode<T>& o) {
        T* ga = an->grad_data();
        const T* g = o.grad.data();
        const T* y = o.values.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* gr = g + r * c;
            const T* yr = y + r * c;
            T dot = 0;
            for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
            T* gar = ga + r * c;
            for (int j = 0; j < c; ++j) gar[j] += yr[j] * (gr[j] - dot);
        }
    });
}

// normalizes the last axis; eps inside the square root guards zero variance
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const int c = x.dim(x.rank() - 1);
    if (gain.numel() != c || bias.numel() != c)
        throw ShapeError(str_cat("layer_norm: affine params must have ", c, " elements"));
    const int64_t rows = x.numel() / c;
    std::vector<T> out(x.values().size());
    auto xhat = std::make_shared<std::vector<T>>(x.values().size());
    auto invstd = std::make_shared<std::vector<T>>(rows);
    const T* xv = x.data();
    const T* gv = gain.data();
    const T* bv = bias.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv + r * c;
        T mean = 0;
        for (int j = 0; j < c; ++j) mean += xr[j];
        mean /= c;
        T var = 0;
        for (int j = 0; j < c; ++j) { T d = xr[j] - mean; var += d * d; }
        var /= c;
        const T is = T(1) / std::sqrt(var + eps);
        (*invstd)[r] = is;
        T* hr = xhat->data() + r * c;
        T* yr = out.data() + r * c;
        for (int j = 0; j < c; ++j) {
            hr[j] = (xr[j] - mean) * is;
            yr[j] = hr[j] * gv[j] + bv[j];
        }
    }
    auto xn = x.node(); auto gn = gain.node(); auto bn = bias.node();
    return detail::make_op<T>(x.shape(), std::move(out), {x, gain, bias},
        [xn, gn, bn, xhat, invstd, rows, c](detail::TensorNode<T>& o) {
            const T* g = o.grad.data();
            const T* h = xhat->data();
            const T* gv = gn->values.data();
            if (gn->requires_grad) {
                T* gg = gn->grad_data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < c; ++j) gg[j] += g[r * c + j] * h[r * c + j];
            }
            if (bn->requires_grad) {
                T* gb = bn->grad_data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < c; ++j) gb[j] += g[r * c + j];
            }
            if (xn->requires_grad) {
                T* gx = xn->grad_data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * c;
                    const T* hr = h + r * c;
                    T sum_dh = 0, sum_dh_h = 0;
                    for (int j = 0; j < c; ++j) {
                        const T dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    const T is = (*invstd)[r];
                    T* gxr = gx + r * c;
                    for (int j = 0; j < c; ++j) {
                        const T dh = gr[j] * gv[j];
                        gxr[j] += is * (dh - (sum_dh + hr[j] * sum_dh_h) / static_cast<T>(c));
                    }
                }
            }
        });
}

// per-channel affine normalization of [C,H,W] with fixed statistics
template <typename T>
Tensor<T> batch_norm_inference(const Tensor<T>& x, const std::vector<T>& mean, const std::vector<T>& var,
                               const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    if (x.rank() != 3) throw ShapeError("batch_norm_inference: expected [C,H,W]");
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    if (static_cast<int>(mean.size()) != c || static_cast<int>(var.size()) != c || gain.numel() != c ||
        bias.numel() != c)
        throw ShapeError("batch_norm_inference: per-channel params must match channel count");
    for (T v : var)
        if (v < T(0)) throw NumericError("batch_norm_inference: negative variance");
    std::vector<T> out(x.values().size());
    auto scale = std::make_shared<std::vector<T>>(c);
    const T* xv = x.data();
    const T* gv = gain.data();
    const T* bv = bias.data();
    for (int ch = 0; ch < c; ++ch) {
        const T is = T(1) / std::sqrt(var[ch] + eps);
        (*scale)[ch] = is;
        const T a = gv[ch] * is;
        const T b = bv[ch] - mean[ch] * a;
        const T* xr = xv + ch * hw;
        T* yr = out.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) yr[i] = a * xr[i] + b;
    }
    auto xn = x.node(); auto gn = gain.node(); auto bn = bias.node();
    std::vector<T> mean_c = mean;
    return detail::make_op<T>(x.shape(), std::move(out), {x, gain, bias},
        [xn, gn, bn, scale, mean_c, c, hw](detail::TensorNode<T>& o) {
            const T* g = o.grad.data();
            const T* xv = xn->values.data();
            const T* gv = gn->values.data();
            for (int ch = 0; ch < c; ++ch) {
                const T is = (*scale)[ch];
                const T* gr = g + ch * hw;
                if (xn->requires_grad) {
                    T* gx = xn->grad_data() + ch * hw;
                    const T a = gv[ch] * is;
                    for (int64_t i = 0; i < hw; ++i) gx[i] += gr[i] * a;
                }
                if (gn->requires_grad) {
                    T s = 0;
                    const T* xr = xv + ch * hw;
                    for (int64_t i = 0; i < hw; ++i) s += gr[i] * (xr[i] - mean_c[ch]) * is;
                    gn->grad_data()[ch] += s;
                }
                if (bn->requires_grad) {
                    T s = 0;
                    for (int64_t i = 0; i < hw; ++i) s += gr[i];
                    bn->grad_data()[ch] += s;
                }
            }
        });
}

// training-mode batch norm over the spatial extent of [C,H,W]; gradients flow
// through the batch statistics. Computed mean/var are reported for running-stat
// updates by the caller.
template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                           std::vector<T>* out_mean = nullptr, std::vector<T>* out_var = nullptr,
                           T eps = T(1e-5)) {
    if (x.rank() != 3) throw ShapeError("batch_norm_train: expected [C,H,W]");
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    std::vector<T> out(x.values().size());
    auto xhat = std::make_shared<std::vector<T>>(x.values().size());
    auto invstd = std::make_shared<std::vector<T>>(c);
    const T* xv = x.data();
    const T* gv = gain.data();
    const T* bv = bias.data();
    if (out_mean) out_mean->resize(c);
    if (out_var) out_var->resize(c);
    for (int ch = 0; ch < c; ++ch) {
        const T* xr = xv + ch * hw;
        T mean = 0;
        for (int64_t i = 0; i < hw; ++i) mean += xr[i];
        mean /= static_cast<T>(hw);
        T var = 0;
        for (int64_t i = 0; i < hw; ++i) { T d = xr[i] - mean; var += d * d; }
        var /= static_cast<T>(hw);
        if (out_mean) (*out_mean)[ch] = mean;
        if (out_var) (*out_var)[ch] = var;
        const T is = T(1) / std::sqrt(var + eps);
        (*invstd)[ch] = is;
        T* hr = xhat->data() + ch * hw;
        T* yr = out.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) {
            hr[i] = (xr[i] - mean) * is;
            yr[i] = hr[i] * gv[ch] + bv[ch];
        }
    }
    auto xn = x.node(); auto gn = gain.node(); auto bn = bias.node();
    return detail::make_op<T>(x.shape(), std::move(out), {x, gain, bias},
        [xn, gn, bn, xhat, invstd, c, hw](detail::TensorNode<T>& o) {
            const T* g = o.grad.data();
            const T* h = xhat->data();
            const T* gv = gn->values.data();
            for (int ch = 0; ch < c; ++ch) {
                const T* gr = g + ch * hw;
                const T* hr = h + ch * hw;
                T sum_g = 0, sum_gh = 0;
                for (int64_t i = 0; i < hw; ++i) { sum_g += gr[i]; sum_gh += gr[i] * hr[i]; }
                if (gn->requires_grad) gn->grad_data()[ch] += sum_gh;
                if (bn->requires_grad) bn->grad_data()[ch] += sum_g;
                if (xn->requires_grad) {
                    T* gx = xn->grad_data() + ch * hw;
                    const T a = gv[ch] * (*invstd)[ch];
                    const T inv_hw = T(1) / static_cast<T>(hw);
                    for (int64_t i = 0; i < hw; ++i)
                        gx[i] += a * (gr[i] - (sum_g + hr[i] * sum_gh) * inv_hw);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation) with per-edge padding, lowered onto matmul via
// an im2col buffer saved for the backward pass

namespace detail {

// cols layout: [C*kh*kw, OH*OW]; out-of-bounds taps stay zero
template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad_top, int pad_left, int oh, int ow,
            T* cols) {
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* row = cols + ((static_cast<size_t>(ci) * kh + ky) * kw + kx) * oh * ow;
                const T* xplane = x + static_cast<size_t>(ci) * h * w;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad_top;
                    if (iy < 0 || iy >= h) continue;
                    int ox0 = 0, ox1 = ow - 1;
                    while (ox0 <= ox1 && ox0 * stride + kx - pad_left < 0) ++ox0;
                    while (ox1 >= ox0 && ox1 * stride + kx - pad_left >= w) --ox1;
                    const T* src = xplane + static_cast<size_t>(iy) * w + (ox0 * stride + kx - pad_left);
                    T* dst = row + static_cast<size_t>(oy) * ow;
                    if (stride == 1) {
                        std::copy(src, src + (ox1 - ox0 + 1), dst + ox0);
                    } else {
                        for (int ox = ox0; ox <= ox1; ++ox) dst[ox] = src[static_cast<size_t>(ox - ox0) * stride];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad_top, int pad_left, int oh,
                int ow, T* gx) {
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = cols + ((static_cast<size_t>(ci) * kh + ky) * kw + kx) * oh * ow;
                T* xplane = gx + static_cast<size_t>(ci) * h * w;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad_top;
                    if (iy < 0 || iy >= h) continue;
                    int ox0 = 0, ox1 = ow - 1;
                    while (ox0 <= ox1 && ox0 * stride + kx - pad_left < 0) ++ox0;
                    while (ox1 >= ox0 && ox1 * stride + kx - pad_left >= w) --ox1;
                    T* dst = xplane + static_cast<size_t>(iy) * w + (ox0 * stride + kx - pad_left);
                    const T* src = row + static_cast<size_t>(oy) * ow;
                    if (stride == 1) {
                        for (int ox = ox0; ox <= ox1; ++ox) dst[ox - ox0] += src[ox];
                    } else {
                        for (int ox = ox0; ox <= ox1; ++ox) dst[static_cast<size_t>(ox - ox0) * stride] += src[ox];
                    }
                }
            }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad_top, int pad_bottom,
                 int pad_left, int pad_right) {
    if (x.rank() != 3) throw ShapeError(str_cat("conv2d: input must be [C,H,W], got ", shape_str(x.shape())));
    if (w.rank() != 4) throw ShapeError(str_cat("conv2d: kernel must be [O,C,kh,kw], got ", shape_str(w.shape())));
    const int c = x.dim(0), h = x.dim(1), wid = x.dim(2);
    const int oc = w.dim(0), kc = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (kc != c) throw ShapeError(str_cat("conv2d: channel mismatch: input ", c, " vs kernel ", kc));
    if (b.defined() && b.numel() != oc) throw ShapeError("conv2d: bias length must equal output channels");
    const int ph = h + pad_top + pad_bottom, pw = wid + pad_left + pad_right;
    if (kh > ph || kw > pw)
        throw ConfigError(str_cat("conv2d: kernel ", kh, "x", kw, " larger than padded input ", ph, "x", pw));
    if ((ph - kh) % stride != 0 || (pw - kw) % stride != 0)
        throw ConfigError(str_cat("conv2d: non-integral output extent for input ", h, "x", wid, " pad ", pad_top, "/",
                                  pad_bottom, "/", pad_left, "/", pad_right, " kernel ", kh, "x", kw, " stride ",
                                  stride));
    const int oh = (ph - kh) / stride + 1;
    const int ow = (pw - kw) / stride + 1;
    const int ohw = oh * ow;
    const int ksz = c * kh * kw;
    // 1x1 stride-1 convolutions read the input matrix directly
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad_top == 0 && pad_bottom == 0 && pad_left == 0 &&
                           pad_right == 0;

    auto cols = std::make_shared<std::vector<T>>();
    const T* colp = x.data();
    if (!pointwise) {
        cols->assign(static_cast<size_t>(ksz) * ohw, T(0));
        detail::im2col(x.data(), c, h, wid, kh, kw, stride, pad_top, pad_left, oh, ow, cols->data());
        colp = cols->data();
    }

    std::vector<T> out(static_cast<size_t>(oc) * ohw, T(0));
    if (b.defined())
        for (int o = 0; o < oc; ++o)
            std::fill_n(out.data() + static_cast<size_t>(o) * ohw, ohw, b.data()[o]);
    detail::mm_acc(out.data(), w.data(), colp, oc, ksz, ohw);

    auto xn = x.node(); auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    std::vector<Tensor<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return detail::make_op<T>({oc, oh, ow}, std::move(out), parents,
        [xn, wn, bn, cols, pointwise, c, h, wid, oc, kh, kw, ksz, stride, pad_top, pad_left, oh, ow,
         ohw](detail::TensorNode<T>& o) {
            const T* g = o.grad.data();
            if (bn && bn->requires_grad) {
                T* gb = bn->grad_data();
                for (int oi = 0; oi < oc; ++oi) {
                    T s = 0;
                    const T* gp = g + static_cast<size_t>(oi) * ohw;
                    for (int i = 0; i < ohw; ++i) s += gp[i];
                    gb[oi] += s;
                }
            }
            const T* colp = pointwise ? xn->values.data() : cols->data();
            if (wn->requires_grad)
                detail::mm_abt_acc(wn->grad_data(), g, colp, oc, ohw, ksz);
            if (xn->requires_grad) {
                if (pointwise) {
                    detail::mm_atb_acc(xn->grad_data(), wn->values.data(), g, oc, ksz, ohw);
                } else {
                    std::vector<T> gcols(static_cast<size_t>(ksz) * ohw, T(0));
                    detail::mm_atb_acc(gcols.data(), wn->values.data(), g, oc, ksz, ohw);
                    detail::col2im_add(gcols.data(), c, h, wid, kh, kw, stride, pad_top, pad_left, oh, ow,
                                       xn->grad_data());
                }
            }
        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int padding) {
    return conv2d(x, w, b, stride, padding, padding, padding, padding);
}

// ---------------------------------------------------------------------------
// resampling

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("upsample2x_nearest: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<T> out(static_cast<size_t>(c) * 4 * h * w);
    const T* xv = x.data();
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y) {
            const T* row = xv + (static_cast<size_t>(ci) * h + y) * w;
            for (int rep = 0; rep < 2; ++rep) {
                T* orow = out.data() + ((static_cast<size_t>(ci) * 2 * h) + 2 * y + rep) * 2 * w;
                for (int xx = 0; xx < w; ++xx) { orow[2 * xx] = row[xx]; orow[2 * xx + 1] = row[xx]; }
            }
        }
    auto xn = x.node();
    return detail::make_op<T>({c, 2 * h, 2 * w}, std::move(out), {x}, [xn, c, h, w](detail::TensorNode<T>& o) {
        T* gx = xn->grad_data();
        const T* g = o.grad.data();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y) {
                T* grow = gx + (static_cast<size_t>(ci) * h + y) * w;
                for (int rep = 0; rep < 2; ++rep) {
                    const T* orow = g + ((static_cast<size_t>(ci) * 2 * h) + 2 * y + rep) * 2 * w;
                    for (int xx = 0; xx < w; ++xx) grow[xx] += orow[2 * xx] + orow[2 * xx + 1];
                }
            }
    });
}

template <typename T>
Tensor<T> avgpool2x(const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("avgpool2x: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 || w % 2) throw ShapeError(str_cat("avgpool2x: odd extents ", h, "x", w));
    const int oh = h / 2, ow = w / 2;
    std::vector<T> out(static_cast<size_t>(c) * oh * ow);
    const T* xv = x.data();
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < oh; ++y) {
            const T* r0 = xv + (static_cast<size_t>(ci) * h + 2 * y) * w;
            const T* r1 = r0 + w;
            T* orow = out.data() + (static_cast<size_t>(ci) * oh + y) * ow;
            for (int xx = 0; xx < ow; ++xx)
                orow[xx] = (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * T(0.25);
        }
    auto xn = x.node();
    return detail::make_op<T>({c, oh, ow}, std::move(out), {x}, [xn, c, h, w, oh, ow](detail::TensorNode<T>& o) {
        T* gx = xn->grad_data();
        const T* g = o.grad.data();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < oh; ++y) {
                T* r0 = gx + (static_cast<size_t>(ci) * h + 2 * y) * w;
                T* r1 = r0 + w;
                const T* orow = g + (static_cast<size_t>(ci) * oh + y) * ow;
                for (int xx = 0; xx < ow; ++xx) {
                    const T v = orow[xx] * T(0.25);
                    r0[2 * xx] += v; r0[2 * xx + 1] += v; r1[2 * xx] += v; r1[2 * xx + 1] += v;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// bilinear sampling on the pixel-center grid with zero padding outside [0,1]^2

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& feat, const Tensor<T>& points) {
    if (feat.rank() != 3) throw ShapeError("bilinear_sample: feature must be [C,H,W]");
    if (points.rank() != 2 || points.dim(1) != 2)
        throw ShapeError(str_cat("bilinear_sample: points must be [P,2], got ", shape_str(points.shape())));
    const int c = feat.dim(0), h = feat.dim(1), w = feat.dim(2);
    const int p = points.dim(0);
    std::vector<T> out(static_cast<size_t>(c) * p, T(0));
    const T* fv = feat.data();
    const T* pv = points.data();
    for (int k = 0; k < p; ++k) {
        const T px = pv[2 * k] * static_cast<T>(w) - T(0.5);
        const T py = pv[2 * k + 1] * static_cast<T>(h) - T(0.5);
        const int x0 = static_cast<int>(std::floor(px));
        const int y0 = static_cast<int>(std::floor(py));
        const T fx = px - static_cast<T>(x0);
        const T fy = py - static_cast<T>(y0);
        const bool in_x0 = x0 >= 0 && x0 < w, in_x1 = x0 + 1 >= 0 && x0 + 1 < w;
        const bool in_y0 = y0 >= 0 && y0 < h, in_y1 = y0 + 1 >= 0 && y0 + 1 < h;
        for (int ci = 0; ci < c; ++ci) {
            const T* plane = fv + static_cast<size_t>(ci) * h * w;
            T acc = 0;
            if (in_y0) {
                if (in_x0) acc += (T(1) - fx) * (T(1) - fy) * plane[static_cast<size_t>(y0) * w + x0];
                if (in_x1) acc += fx * (T(1) - fy) * plane[static_cast<size_t>(y0) * w + x0 + 1];
            }
            if (in_y1) {
                if (in_x0) acc += (T(1) - fx) * fy * plane[static_cast<size_t>(y0 + 1) * w + x0];
                if (in_x1) acc += fx * fy * plane[static_cast<size_t>(y0 + 1) * w + x0 + 1];
            }
            out[static_cast<size_t>(ci) * p + k] = acc;
        }
    }
    auto fn = feat.node(); auto pn = points.node();
    return detail::make_op<T>({c, p}, std::move(out), {feat, points}, [fn, pn, c, h, w, p](detail::TensorNode<T>& o) {
        const T* g = o.grad.data();
        const T* fv = fn->values.data();
        const T* pv = pn->values.data();
        T* gf = fn->requires_grad ? fn->grad_data() : nullptr;
        T* gp = pn->requires_grad ? pn->grad_data() : nullptr;
        for (int k = 0; k < p; ++k) {
            const T px = pv[2 * k] * static_cast<T>(w) - T(0.5);
            const T py = pv[2 * k + 1] * static_cast<T>(h) - T(0.5);
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            const T fx = px - static_cast<T>(x0);
            const T fy = py - static_cast<T>(y0);
            const bool in_x0 = x0 >= 0 && x0 < w, in_x1 = x0 + 1 >= 0 && x0 + 1 < w;
            const bool in_y0 = y0 >= 0 && y0 < h, in_y1 = y0 + 1 >= 0 && y0 + 1 < h;
            T dx_acc = 0, dy_acc = 0;
            for (int ci = 0; ci < c; ++ci) {
                const T go = g[static_cast<size_t>(ci) * p + k];
                if (go == T(0) && !gp) continue;
                const size_t base = static_cast<size_t>(ci) * h * w;
                const T v00 = (in_y0 && in_x0) ? fv[base + static_cast<size_t>(y0) * w + x0] : T(0);
                const T v01 = (in_y0 && in_x1) ? fv[base + static_cast<size_t>(y0) * w + x0 + 1] : T(0);
                const T v10 = (in_y1 && in_x0) ? fv[base + static_cast<size_t>(y0 + 1) * w + x0] : T(0);
                const T v11 = (in_y1 && in_x1) ? fv[base + static_cast<size_t>(y0 + 1) * w + x0 + 1] : T(0);
                if (gf) {
                    if (in_y0 && in_x0) gf[base + static_cast<size_t>(y0) * w + x0] += go * (T(1) - fx) * (T(1) - fy);
                    if (in_y0 && in_x1) gf[base + static_cast<size_t>(y0) * w + x0 + 1] += go * fx * (T(1) - fy);
                    if (in_y1 && in_x0) gf[base + static_cast<size_t>(y0 + 1) * w + x0] += go * (T(1) - fx) * fy;
                    if (in_y1 && in_x1) gf[base + static_cast<size_t>(y0 + 1) * w + x0 + 1] += go * fx * fy;
                }
                if (gp) {
                    dx_acc += go * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy_acc += go * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if (gp) {
                gp[2 * k] += dx_acc * static_cast<T>(w);
                gp[2 * k + 1] += dy_acc * static_cast<T>(h);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// small value-level helpers

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
T inverse_sigmoid_value(T p, T eps = T(1e-6)) {
    p = std::min(std::max(p, eps), T(1) - eps);
    return std::log(p / (T(1) - p));
}

}  // namespace detlab
