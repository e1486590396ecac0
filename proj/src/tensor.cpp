#include "supattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#if defined(__SSE__) || defined(__x86_64__)
#include <xmmintrin.h>
#endif

namespace supattn {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << ')';
    return out.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto extent : shape) {
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
}

NodePtr make_node(Shape shape, std::vector<double> value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return node;
}

thread_local bool t_grad_enabled = true;

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!t_grad_enabled) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Creates the output node and, when needed, registers the backward rule.
// `rule` receives the output node; it must only touch inputs that require grad.
template <typename Rule>
Tensor finish(Shape shape, std::vector<double> value, bool needs_grad, Rule rule) {
    auto out = make_node(std::move(shape), std::move(value), needs_grad);
    if (needs_grad) {
        std::weak_ptr<Node> weak = out;
        Tape::current().record(out, [weak, rule = std::move(rule)]() {
            if (auto o = weak.lock()) rule(*o);
        });
    }
    return Tensor(out);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
    if (x.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
    }
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
    auto in = x.data();
    std::vector<double> value(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) value[i] = fwd(in[i]);
    bool needs = any_requires_grad({&x});
    NodePtr xn = x.node();
    return finish(x.shape(), std::move(value), needs, [xn, deriv](Node& o) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(xn->value[i], o.value[i]);
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    auto n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
    }
    return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw std::logic_error("undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::data() const {
    if (!node_) throw std::logic_error("undefined tensor");
    return node_->value;
}

std::span<double> Tensor::mutable_data() {
    if (!node_) throw std::logic_error("undefined tensor");
    return node_->value;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    const auto& s = shape();
    if (s.size() != 2 || row >= s[0] || col >= s[1]) {
        throw ShapeError("at(" + std::to_string(row) + ", " + std::to_string(col) + ") on " + shape_str(s));
    }
    return node_->value[row * s[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!node_) throw std::logic_error("undefined tensor");
    node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!node_) throw std::logic_error("undefined tensor");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!node_) throw std::logic_error("undefined tensor");
    return node_->grad_buffer();
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(make_node(shape(), node_->value, requires_grad));
}

// ---------------------------------------------------------------------------
// Tape

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::clear() {
    for (auto& r : records_) r.output->tape_index = -1;
    records_.clear();
}

void Tape::record(const std::shared_ptr<Node>& out, std::function<void()> rule) {
    out->tape_index = static_cast<long>(records_.size());
    records_.push_back({out, std::move(rule)});
}

void Tape::run_backward(const Tensor& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (root.numel() != 1) {
        throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
    }
    const auto& node = root.node();
    if (!node->requires_grad) {
        clear();
        return;
    }
    if (node->tape_index < 0) {
        // The root is a leaf: d(root)/d(root) = 1.
        node->grad_buffer()[0] += 1.0;
        clear();
        return;
    }
    auto idx = static_cast<std::size_t>(node->tape_index);
    if (idx >= records_.size() || records_[idx].output != node) {
        throw std::logic_error("backward: root is not on the current tape");
    }
    node->grad_buffer()[0] += 1.0;
    for (std::size_t i = idx + 1; i-- > 0;) {
        auto& rec = records_[i];
        if (rec.output->grad.empty()) continue;
        rec.backward();
    }
    // Intermediate gradients are not part of the contract; release them.
    for (auto& rec : records_) {
        if (rec.output != node) rec.output->grad.clear();
    }
    clear();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

#if defined(__SSE__) || defined(__x86_64__)
FlushDenormalsGuard::FlushDenormalsGuard() : previous_(_mm_getcsr()) { _mm_setcsr(previous_ | 0x8040u); }
FlushDenormalsGuard::~FlushDenormalsGuard() { _mm_setcsr(previous_); }
#else
FlushDenormalsGuard::FlushDenormalsGuard() = default;
FlushDenormalsGuard::~FlushDenormalsGuard() = default;
#endif

void backward(const Tensor& root) { Tape::current().run_backward(root); }

// ---------------------------------------------------------------------------
// Linear algebra

namespace {
// Row-major (rows, cols) -> (cols, rows).
std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
    return out;
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    auto A = a.data();
    auto B = b.data();
    std::vector<double> C(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = C.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = B.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
        }
    }
    bool needs = any_requires_grad({&a, &b});
    NodePtr an = a.node(), bn = b.node();
    return finish({n, m}, std::move(C), needs, [an, bn, n, k, m](Node& o) {
        const double* G = o.grad.data();
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            // G * B^T as row updates against a transposed copy; vectorizes
            // where a dot-product reduction would not.
            std::vector<double> bt = transposed(bn->value.data(), k, m);
            for (std::size_t i = 0; i < n; ++i) {
                const double* grow = G + i * m;
                double* garow = ga.data() + i * k;
                for (std::size_t j = 0; j < m; ++j) {
                    const double g = grow[j];
                    if (g == 0.0) continue;
                    const double* btrow = bt.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) garow[p] += g * btrow[p];
                }
            }
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            const double* Av = an->value.data();
            for (std::size_t i = 0; i < n; ++i) {
                const double* grow = G + i * m;
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = Av[i * k + p];
                    if (aip == 0.0) continue;
                    double* gbrow = gb.data() + p * m;
                    for (std::size_t j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
                }
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    auto A = a.data();
    auto B = b.data();
    std::vector<double> v(A.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = A[i] + B[i];
    NodePtr an = a.node(), bn = b.node();
    return finish(a.shape(), std::move(v), any_requires_grad({&a, &b}), [an, bn](Node& o) {
        for (const auto& in : {an, bn}) {
            if (!in->requires_grad) continue;
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    auto A = a.data();
    auto B = b.data();
    std::vector<double> v(A.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = A[i] - B[i];
    NodePtr an = a.node(), bn = b.node();
    return finish(a.shape(), std::move(v), any_requires_grad({&a, &b}), [an, bn](Node& o) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    auto A = a.data();
    auto B = b.data();
    std::vector<double> v(A.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = A[i] * B[i];
    NodePtr an = a.node(), bn = b.node();
    return finish(a.shape(), std::move(v), any_requires_grad({&a, &b}), [an, bn](Node& o) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    auto A = a.data();
    auto B = b.data();
    std::vector<double> v(A.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (B[i] == 0.0) throw DomainError("div: zero divisor at index " + std::to_string(i));
        v[i] = A[i] / B[i];
    }
    NodePtr an = a.node(), bn = b.node();
    return finish(a.shape(), std::move(v), any_requires_grad({&a, &b}), [an, bn](Node& o) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i] * o.value[i] / bn->value[i];
        }
    });
}

Tensor scale(const Tensor& x, double factor) {
    return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
    return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > 0.0)) {
            throw DomainError("log: nonpositive input " + std::to_string(in[i]) + " at index " + std::to_string(i));
        }
    }
    return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
    return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& x, double floor) {
    return unary(
        x, [floor](double v) { return v < floor ? floor : v; },
        [floor](double v, double) { return v < floor ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x, std::size_t axis) {
    auto s = split_at(x.shape(), axis);
    auto in = x.data();
    std::vector<double> v(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) v[o * s.inner + i] += in[(o * s.extent + e) * s.inner + i];
    NodePtr xn = x.node();
    return finish(reduced_shape(x.shape(), axis), std::move(v), any_requires_grad({&x}), [xn, s](Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e)
                for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.extent + e) * s.inner + i] += out.grad[o * s.inner + i];
    });
}

Tensor mean(const Tensor& x, std::size_t axis) {
    auto extent = split_at(x.shape(), axis).extent;
    return scale(sum(x, axis), 1.0 / static_cast<double>(extent));
}

Tensor max(const Tensor& x, std::size_t axis) {
    auto s = split_at(x.shape(), axis);
    auto in = x.data();
    std::vector<double> v(s.outer * s.inner, -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> arg(s.outer * s.inner, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) {
                double cand = in[(o * s.extent + e) * s.inner + i];
                auto slot = o * s.inner + i;
                if (cand > v[slot]) {
                    v[slot] = cand;
                    arg[slot] = e;
                }
            }
    NodePtr xn = x.node();
    return finish(reduced_shape(x.shape(), axis), std::move(v), any_requires_grad({&x}),
                  [xn, s, arg = std::move(arg)](Node& out) {
                      auto& g = xn->grad_buffer();
                      for (std::size_t o = 0; o < s.outer; ++o)
                          for (std::size_t i = 0; i < s.inner; ++i) {
                              auto slot = o * s.inner + i;
                              g[(o * s.extent + arg[slot]) * s.inner + i] += out.grad[slot];
                          }
                  });
}

Tensor sum_all(const Tensor& x) {
    auto in = x.data();
    double total = 0.0;
    for (double v : in) total += v;
    NodePtr xn = x.node();
    return finish({1}, {total}, any_requires_grad({&x}), [xn](Node& out) {
        auto& g = xn->grad_buffer();
        for (auto& gi : g) gi += out.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    auto s_out = split_at(out_shape, axis);
    std::vector<double> v(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    bool needs = false;
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) {
        auto sp = split_at(p.shape(), axis);
        auto in = p.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(in.data() + o * sp.extent * sp.inner, sp.extent * sp.inner,
                        v.data() + (o * s_out.extent + offset) * s_out.inner);
        offsets.push_back(offset);
        offset += sp.extent;
        needs = needs || any_requires_grad({&p});
        nodes.push_back(p.node());
    }
    return finish(out_shape, std::move(v), needs, [nodes, offsets, s_out, axis](Node& out) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            const auto& n = nodes[k];
            if (!n->requires_grad) continue;
            auto sp = split_at(n->shape, axis);
            auto& g = n->grad_buffer();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                const double* src = out.grad.data() + (o * s_out.extent + offsets[k]) * s_out.inner;
                double* dst = g.data() + o * sp.extent * sp.inner;
                for (std::size_t i = 0; i < sp.extent * sp.inner; ++i) dst[i] += src[i];
            }
        }
    });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    auto s = split_at(x.shape(), axis);
    if (begin >= end || end > s.extent) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = end - begin;
    const std::size_t len = end - begin;
    auto in = x.data();
    std::vector<double> v(s.outer * len * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(in.data() + (o * s.extent + begin) * s.inner, len * s.inner, v.data() + o * len * s.inner);
    NodePtr xn = x.node();
    return finish(out_shape, std::move(v), any_requires_grad({&x}), [xn, s, begin, len](Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            const double* src = out.grad.data() + o * len * s.inner;
            double* dst = g.data() + (o * s.extent + begin) * s.inner;
            for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor transpose(const Tensor& x) {
    require_rank("transpose", x, 2);
    const std::size_t r = x.dim(0), c = x.dim(1);
    auto in = x.data();
    std::vector<double> v(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[j * r + i] = in[i * c + j];
    NodePtr xn = x.node();
    return finish({c, r}, std::move(v), any_requires_grad({&x}), [xn, r, c](Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[j * r + i];
    });
}

Tensor broadcast(const Tensor& x, const Shape& target) {
    check_shape(target);
    const Shape& src = x.shape();
    if (src.size() > target.size()) {
        throw ShapeError("broadcast: cannot expand " + shape_str(src) + " to " + shape_str(target));
    }
    // Source strides aligned to the target's trailing axes; expanded axes get 0.
    const std::size_t lead = target.size() - src.size();
    std::vector<std::size_t> stride(target.size(), 0);
    std::size_t running = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
        std::size_t t = target[lead + i];
        if (src[i] == t) {
            stride[lead + i] = running;
        } else if (src[i] != 1) {
            throw ShapeError("broadcast: cannot expand " + shape_str(src) + " to " + shape_str(target));
        }
        running *= src[i];
    }
    const std::size_t total = shape_numel(target);
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(target.size(), 0);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t off = 0;
        for (std::size_t a = 0; a < target.size(); ++a) off += idx[a] * stride[a];
        map[flat] = off;
        for (std::size_t a = target.size(); a-- > 0;) {
            if (++idx[a] < target[a]) break;
            idx[a] = 0;
        }
    }
    auto in = x.data();
    std::vector<double> v(total);
    for (std::size_t i = 0; i < total; ++i) v[i] = in[map[i]];
    NodePtr xn = x.node();
    return finish(target, std::move(v), any_requires_grad({&x}), [xn, map = std::move(map)](Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += out.grad[i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    check_shape(shape);
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> v(x.data().begin(), x.data().end());
    NodePtr xn = x.node();
    return finish(std::move(shape), std::move(v), any_requires_grad({&x}), [xn](Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    if (rows.empty()) throw ShapeError("gather_rows: empty index list");
    auto s = split_at(x.shape(), 0);
    for (auto r : rows) {
        if (r >= s.extent) {
            throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
        }
    }
    Shape out_shape = x.shape();
    out_shape[0] = rows.size();
    auto in = x.data();
    std::vector<double> v(rows.size() * s.inner);
    for (std::size_t k = 0; k < rows.size(); ++k)
        std::copy_n(in.data() + rows[k] * s.inner, s.inner, v.data() + k * s.inner);
    NodePtr xn = x.node();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return finish(out_shape, std::move(v), any_requires_grad({&x}), [xn, idx = std::move(idx), s](Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const double* src = out.grad.data() + k * s.inner;
            double* dst = g.data() + idx[k] * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Fused kernels

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
    require_same_shape("masked_softmax", logits, mask);
    const std::size_t n = logits.shape().back();
    const std::size_t rows = logits.numel() / n;
    auto x = logits.data();
    auto m = mask.data();
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * n;
        double hi = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (m[base + j] != 0.0) {
                any = true;
                hi = std::max(hi, x[base + j]);
            }
        }
        if (!any) throw std::invalid_argument("masked_softmax: row " + std::to_string(r) + " has no open position");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (m[base + j] != 0.0) {
                y[base + j] = std::exp(x[base + j] - hi);
                z += y[base + j];
            }
        }
        for (std::size_t j = 0; j < n; ++j) y[base + j] /= z;
    }
    NodePtr xn = logits.node();
    return finish(logits.shape(), std::move(y), any_requires_grad({&logits}), [xn, rows, n](Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += out.value[base + j] * out.grad[base + j];
            for (std::size_t j = 0; j < n; ++j) g[base + j] += out.value[base + j] * (out.grad[base + j] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = x.shape().back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw ShapeError("layer_norm: parameters " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    auto in = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    std::vector<double> y(in.size()), xhat(in.size()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * inv_std[r];
            y[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
        }
    }
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
    bool needs = any_requires_grad({&x, &gain, &bias});
    return finish(x.shape(), std::move(y), needs,
                  [xn, gn, bn, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& out) {
                      const double* G = out.grad.data();
                      if (gn->requires_grad) {
                          auto& gg = gn->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j) gg[j] += G[r * d + j] * xhat[r * d + j];
                      }
                      if (bn->requires_grad) {
                          auto& gb = bn->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j) gb[j] += G[r * d + j];
                      }
                      if (xn->requires_grad) {
                          auto& gx = xn->grad_buffer();
                          const double dd = static_cast<double>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                              double s1 = 0.0, s2 = 0.0;
                              for (std::size_t j = 0; j < d; ++j) {
                                  double dxh = G[r * d + j] * gn->value[j];
                                  s1 += dxh;
                                  s2 += dxh * xhat[r * d + j];
                              }
                              for (std::size_t j = 0; j < d; ++j) {
                                  double dxh = G[r * d + j] * gn->value[j];
                                  gx[r * d + j] += inv_std[r] / dd * (dd * dxh - s1 - xhat[r * d + j] * s2);
                              }
                          }
                      }
                  });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t width) {
    require_rank("conv1d", x, 3);
    require_rank("conv1d", weight, 2);
    const std::size_t n = x.dim(0), c = x.dim(1), din = x.dim(2), f = weight.dim(1);
    if (width == 0 || c < width) {
        throw ShapeError("conv1d: width " + std::to_string(width) + " exceeds positions in " + shape_str(x.shape()));
    }
    if (weight.dim(0) != width * din || bias.shape() != Shape{f}) {
        throw ShapeError("conv1d: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                         " incompatible with input " + shape_str(x.shape()));
    }
    const std::size_t positions = c - width + 1, window = width * din;
    auto X = x.data();
    auto W = weight.data();
    auto B = bias.data();
    std::vector<double> y(n * positions * f);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t p = 0; p < positions; ++p) {
            double* yrow = y.data() + (t * positions + p) * f;
            std::copy_n(B.data(), f, yrow);
            const double* win = X.data() + (t * c + p) * din;
            for (std::size_t q = 0; q < window; ++q) {
                const double xv = win[q];
                if (xv == 0.0) continue;
                const double* wrow = W.data() + q * f;
                for (std::size_t k = 0; k < f; ++k) yrow[k] += xv * wrow[k];
            }
        }
    NodePtr xn = x.node(), wn = weight.node(), bn = bias.node();
    bool needs = any_requires_grad({&x, &weight, &bias});
    return finish({n, positions, f}, std::move(y), needs, [=](Node& out) {
        const double* G = out.grad.data();
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t p = 0; p < positions; ++p) {
                const double* grow = G + (t * positions + p) * f;
                if (bn->requires_grad) {
                    auto& gb = bn->grad_buffer();
                    for (std::size_t k = 0; k < f; ++k) gb[k] += grow[k];
                }
                const std::size_t wbase = (t * c + p) * din;
                for (std::size_t q = 0; q < window; ++q) {
                    const double* wrow = wn->value.data() + q * f;
                    if (xn->requires_grad) {
                        double acc = 0.0;
                        for (std::size_t k = 0; k < f; ++k) acc += grow[k] * wrow[k];
                        xn->grad_buffer()[wbase + q] += acc;
                    }
                    if (wn->requires_grad) {
                        const double xv = xn->value[wbase + q];
                        double* gw = wn->grad_buffer().data() + q * f;
                        for (std::size_t k = 0; k < f; ++k) gw[k] += xv * grow[k];
                    }
                }
            }
    });
}

Tensor gru_sequence(const Tensor& x, const Tensor& w_input, const Tensor& w_hidden, const Tensor& b_input,
                    const Tensor& b_hidden, bool reverse) {
    require_rank("gru_sequence", x, 2);
    const std::size_t n = x.dim(0), din = x.dim(1);
    const std::size_t h = w_hidden.dim(0);
    const std::size_t h3 = 3 * h;
    if (w_input.shape() != Shape{din, h3} || w_hidden.shape() != Shape{h, h3} || b_input.shape() != Shape{h3} ||
        b_hidden.shape() != Shape{h3}) {
        throw ShapeError("gru_sequence: parameters " + shape_str(w_input.shape()) + ", " +
                         shape_str(w_hidden.shape()) + " incompatible with input " + shape_str(x.shape()));
    }
    auto X = x.data();
    auto Wx = w_input.data();
    auto Wh = w_hidden.data();
    auto bx = b_input.data();
    auto bh = b_hidden.data();

    // Input projections for all steps at once.
    std::vector<double> xp(n * h3);
    for (std::size_t t = 0; t < n; ++t) {
        double* row = xp.data() + t * h3;
        std::copy_n(bx.data(), h3, row);
        for (std::size_t p = 0; p < din; ++p) {
            const double xv = X[t * din + p];
            if (xv == 0.0) continue;
            const double* wrow = Wx.data() + p * h3;
            for (std::size_t k = 0; k < h3; ++k) row[k] += xv * wrow[k];
        }
    }

    // Per processed step (in processing order): previous state, gates, hidden candidate term.
    std::vector<double> prev(n * h), r(n * h), z(n * h), cand(n * h), hn(n * h);
    std::vector<double> out(n * h);
    std::vector<double> state(h, 0.0), hp(h3);
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t t = reverse ? n - 1 - s : s;
        std::copy_n(bh.data(), h3, hp.data());
        for (std::size_t p = 0; p < h; ++p) {
            const double hv = state[p];
            if (hv == 0.0) continue;
            const double* wrow = Wh.data() + p * h3;
            for (std::size_t k = 0; k < h3; ++k) hp[k] += hv * wrow[k];
        }
        const double* xr = xp.data() + t * h3;
        for (std::size_t j = 0; j < h; ++j) {
            const double rj = 1.0 / (1.0 + std::exp(-(xr[j] + hp[j])));
            const double zj = 1.0 / (1.0 + std::exp(-(xr[h + j] + hp[h + j])));
            const double cj = std::tanh(xr[2 * h + j] + rj * hp[2 * h + j]);
            prev[s * h + j] = state[j];
            r[s * h + j] = rj;
            z[s * h + j] = zj;
            cand[s * h + j] = cj;
            hn[s * h + j] = hp[2 * h + j];
        }
        for (std::size_t j = 0; j < h; ++j) {
            state[j] = (1.0 - z[s * h + j]) * cand[s * h + j] + z[s * h + j] * state[j];
            out[t * h + j] = state[j];
        }
    }

    NodePtr xn = x.node(), wxn = w_input.node(), whn = w_hidden.node(), bxn = b_input.node(), bhn = b_hidden.node();
    bool needs = any_requires_grad({&x, &w_input, &w_hidden, &b_input, &b_hidden});
    return finish({n, h}, std::move(out), needs,
                  [=, prev = std::move(prev), r = std::move(r), z = std::move(z), cand = std::move(cand),
                   hn = std::move(hn)](Node& o) {
                      std::vector<double> dxp(n * h3, 0.0), carry(h, 0.0), dhp(h3), dh(h);
                      std::vector<double> dWh(h * h3, 0.0), dbh(h3, 0.0);
                      const double* WhV = whn->value.data();
                      const std::vector<double> wht = transposed(WhV, h, h3);
                      for (std::size_t s = n; s-- > 0;) {
                          const std::size_t t = reverse ? n - 1 - s : s;
                          double* dxrow = dxp.data() + t * h3;
                          for (std::size_t j = 0; j < h; ++j) {
                              const std::size_t q = s * h + j;
                              dh[j] = o.grad[t * h + j] + carry[j];
                              const double dc = dh[j] * (1.0 - z[q]);
                              const double dz = dh[j] * (prev[q] - cand[q]);
                              const double dc_pre = dc * (1.0 - cand[q] * cand[q]);
                              const double dr = dc_pre * hn[q];
                              const double dr_pre = dr * r[q] * (1.0 - r[q]);
                              const double dz_pre = dz * z[q] * (1.0 - z[q]);
                              dxrow[j] = dr_pre;
                              dxrow[h + j] = dz_pre;
                              dxrow[2 * h + j] = dc_pre;
                              dhp[j] = dr_pre;
                              dhp[h + j] = dz_pre;
                              dhp[2 * h + j] = dc_pre * r[q];
                          }
                          for (std::size_t k = 0; k < h3; ++k) dbh[k] += dhp[k];
                          for (std::size_t p = 0; p < h; ++p) carry[p] = dh[p] * z[s * h + p];
                          for (std::size_t k = 0; k < h3; ++k) {
                              const double d = dhp[k];
                              if (d == 0.0) continue;
                              const double* wtrow = wht.data() + k * h;
                              for (std::size_t p = 0; p < h; ++p) carry[p] += d * wtrow[p];
                          }
                          for (std::size_t p = 0; p < h; ++p) {
                              const double pv = prev[s * h + p];
                              if (pv != 0.0) {
                                  double* gw = dWh.data() + p * h3;
                                  for (std::size_t k = 0; k < h3; ++k) gw[k] += pv * dhp[k];
                              }
                          }
                      }
                      if (whn->requires_grad) {
                          auto& g = whn->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += dWh[i];
                      }
                      if (bhn->requires_grad) {
                          auto& g = bhn->grad_buffer();
                          for (std::size_t i = 0; i < h3; ++i) g[i] += dbh[i];
                      }
                      if (bxn->requires_grad) {
                          auto& g = bxn->grad_buffer();
                          for (std::size_t t = 0; t < n; ++t)
                              for (std::size_t k = 0; k < h3; ++k) g[k] += dxp[t * h3 + k];
                      }
                      if (wxn->requires_grad) {
                          auto& g = wxn->grad_buffer();
                          for (std::size_t t = 0; t < n; ++t)
                              for (std::size_t p = 0; p < din; ++p) {
                                  const double xv = xn->value[t * din + p];
                                  if (xv == 0.0) continue;
                                  double* gw = g.data() + p * h3;
                                  const double* drow = dxp.data() + t * h3;
                                  for (std::size_t k = 0; k < h3; ++k) gw[k] += xv * drow[k];
                              }
                      }
                      if (xn->requires_grad) {
                          auto& g = xn->grad_buffer();
                          const std::vector<double> wxt = transposed(wxn->value.data(), din, h3);
                          for (std::size_t t = 0; t < n; ++t) {
                              double* grow = g.data() + t * din;
                              const double* drow = dxp.data() + t * h3;
                              for (std::size_t k = 0; k < h3; ++k) {
                                  const double d = drow[k];
                                  if (d == 0.0) continue;
                                  const double* wtrow = wxt.data() + k * din;
                                  for (std::size_t p = 0; p < din; ++p) grow[p] += d * wtrow[p];
                              }
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Dispatch

Tensor apply_primitive(Primitive kind, const std::vector<Tensor>& operands, const PrimitiveArgs& args) {
    auto arity = [&](std::size_t want) {
        if (operands.size() != want) {
            throw std::invalid_argument("apply_primitive: expected " + std::to_string(want) + " operands, got " +
                                        std::to_string(operands.size()));
        }
    };
    switch (kind) {
        case Primitive::matmul: arity(2); return matmul(operands[0], operands[1]);
        case Primitive::add: arity(2); return add(operands[0], operands[1]);
        case Primitive::sub: arity(2); return sub(operands[0], operands[1]);
        case Primitive::mul: arity(2); return mul(operands[0], operands[1]);
        case Primitive::div: arity(2); return div(operands[0], operands[1]);
        case Primitive::exp: arity(1); return exp(operands[0]);
        case Primitive::log: arity(1); return log(operands[0]);
        case Primitive::tanh: arity(1); return tanh(operands[0]);
        case Primitive::sigmoid: arity(1); return sigmoid(operands[0]);
        case Primitive::max_over_axis: arity(1); return max(operands[0], args.axis);
        case Primitive::sum_over_axis: arity(1); return sum(operands[0], args.axis);
        case Primitive::mean_over_axis: arity(1); return mean(operands[0], args.axis);
        case Primitive::concat_along_axis: return concat(operands, args.axis);
        case Primitive::slice: arity(1); return slice(operands[0], args.axis, args.begin, args.end);
        case Primitive::transpose: arity(1); return transpose(operands[0]);
        case Primitive::broadcast: arity(1); return broadcast(operands[0], args.target);
    }
    throw std::invalid_argument("apply_primitive: unknown primitive");
}

// ---------------------------------------------------------------------------
// Finite differences

GradCheckResult gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("gradient_check: epsilon must be positive");
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    Tape::current().clear();
    Tensor root = f();
    if (root.numel() != 1) throw ShapeError("gradient_check: f must return a scalar, got " + shape_str(root.shape()));
    if (!std::isfinite(root.item())) throw DomainError("gradient_check: f is non-finite at the base point");
    backward(root);

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        std::vector<double> analytic(leaf.numel(), 0.0);
        if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
        auto values = leaf.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            auto probe = [&](double v) {
                values[i] = v;
                double out = std::numeric_limits<double>::quiet_NaN();
                try {
                    out = f().item();
                } catch (const DomainError&) {
                    // reported below with the coordinate
                }
                values[i] = saved;
                if (!std::isfinite(out)) {
                    throw DomainError("gradient_check: non-finite value probing leaf " + std::to_string(li) +
                                      " coordinate " + std::to_string(i));
                }
                return out;
            };
            const double up = probe(saved + epsilon);
            const double down = probe(saved - epsilon);
            const double numeric = (up - down) / (2.0 * epsilon);
            const double err =
                std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
            ++result.coordinates;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_leaf = li;
                result.worst_index = i;
            }
        }
    }
    return result;
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double epsilon) {
    Tensor leaf = x.clone(true);
    return gradient_check([&] { return f(leaf); }, {leaf}, epsilon).max_relative_error;
}

}  // namespace supattn
