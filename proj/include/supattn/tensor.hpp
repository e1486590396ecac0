#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Every differentiable operation applied while gradient recording is enabled
// appends a record to the calling thread's tape. backward() replays the
// records in reverse application order and accumulates gradients into every
// leaf that requires them. A tape and the tensors recorded on it belong to a
// single thread; tensors that are not on any tape may be shared read-only.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace supattn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something is accumulated
    bool requires_grad = false;
    long tape_index = -1;  // -1 for leaves and unrecorded results

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Mutating a tensor that is already recorded on a tape invalidates its
    // gradient; intended for parameter updates and finite-difference probes.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat) const { return data()[flat]; }
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // A leaf copy that shares nothing with this tensor's history.
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Tape and gradient mode

class Tape {
public:
    struct Record {
        std::shared_ptr<detail::Node> output;
        std::function<void()> backward;
    };

    static Tape& current();

    std::size_t size() const { return records_.size(); }
    void clear();

    // Internal: registers `out` as produced by an op with the given rule.
    void record(const std::shared_ptr<detail::Node>& out, std::function<void()> rule);

    void run_backward(const Tensor& root);

private:
    std::vector<Record> records_;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Flushes subnormal floats to zero on this thread while alive. Sharp
// softmax tails otherwise produce subnormals that slow arithmetic by orders
// of magnitude; values that small carry no signal at double precision.
class FlushDenormalsGuard {
public:
    FlushDenormalsGuard();
    ~FlushDenormalsGuard();
    FlushDenormalsGuard(const FlushDenormalsGuard&) = delete;
    FlushDenormalsGuard& operator=(const FlushDenormalsGuard&) = delete;

private:
    unsigned previous_ = 0;
};

// Root must have exactly one element. Leaves receive d(root)/d(leaf),
// accumulated onto any gradient they already hold. The tape is cleared.
void backward(const Tensor& root);

// ---------------------------------------------------------------------------
// Primitives. Elementwise binaries require identical shapes; use broadcast()
// to expand explicitly.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
// Elementwise max(x, floor); gradient is zero where the floor is active.
Tensor clamp_min(const Tensor& x, double floor);

// Reductions remove `axis`; reducing a rank-1 tensor yields shape {1}.
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor max(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor transpose(const Tensor& x);
// Right-aligned expansion: each source axis equals the target extent or is 1.
Tensor broadcast(const Tensor& x, const Shape& target);
Tensor reshape(const Tensor& x, Shape shape);
// Selects entries along axis 0.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Softmax over the last axis restricted to positions where mask is nonzero.
// Masked positions are exactly 0. Every row needs at least one open position.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);

// Normalizes over the last axis with a population variance, then applies
// gain and bias of shape {d}.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

// x: (n, c, d_in), weight: (width * d_in, filters), bias: (filters)
// -> (n, c - width + 1, filters). Windows are contiguous in x.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t width);

// One GRU direction over x: (n, d_in). Gate blocks are ordered [reset |
// update | candidate] in the 3h columns of w_input / w_hidden.
Tensor gru_sequence(const Tensor& x, const Tensor& w_input, const Tensor& w_hidden,
                    const Tensor& b_input, const Tensor& b_hidden, bool reverse);

// ---------------------------------------------------------------------------
// Uniform dispatch over the named primitive set.

enum class Primitive {
    matmul, add, sub, mul, div, exp, log, tanh, sigmoid,
    max_over_axis, sum_over_axis, mean_over_axis,
    concat_along_axis, slice, transpose, broadcast
};

struct PrimitiveArgs {
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    Shape target{};
};

Tensor apply_primitive(Primitive kind, const std::vector<Tensor>& operands,
                       const PrimitiveArgs& args = {});

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_leaf = 0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
};

// Compares backward() gradients of the scalar f() against central
// differences, perturbing every coordinate of every tensor in `leaves`.
// Per coordinate error: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
GradCheckResult gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                               double epsilon = 1e-5);

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double epsilon = 1e-5);

}  // namespace supattn
