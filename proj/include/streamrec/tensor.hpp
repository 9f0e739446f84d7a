#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "streamrec/common.hpp"
#include "streamrec/rng.hpp"

namespace streamrec {

class Tape;

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<real> data;
    std::vector<real> grad; // allocated iff requires_grad
    bool requires_grad = false;
    const Tape* producer = nullptr; // tape that recorded the producing op
};

/// Dense row-major tensor handle with reverse-mode autodiff. Handles share
/// the underlying buffer; copying a Tensor aliases it.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, real value, bool requires_grad = false);
    static Tensor from(std::vector<real> data, std::vector<std::size_t> shape,
                       bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, real stddev,
                        bool requires_grad = false);

    bool valid() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    bool is_scalar() const { return size() == 1; }

    std::vector<real>& data() { return impl_->data; }
    const std::vector<real>& data() const { return impl_->data; }
    std::vector<real>& grad();
    const std::vector<real>& grad() const;
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    real value() const; // scalar tensors only
    real at(std::size_t r, std::size_t c) const;

    void zero_grad();
    /// Turn a freshly created tensor into a tracked leaf parameter.
    void set_requires_grad(bool flag);

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend class Tape;
    friend Tensor make_op_output(std::vector<std::size_t>, bool);
};

/// Define-by-run tape: ops append themselves in execution order and
/// backward replays the closures in exact reverse order. Leaves (tensors not
/// produced by a recorded op) accumulate gradients with +=; non-leaf
/// gradients are reset at the start of every backward pass.
class Tape {
public:
    void record(std::function<void()> backward_fn, const Tensor& out);
    void backward(const Tensor& root);
    void clear();
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::function<void()> backward_fn;
        std::shared_ptr<TensorImpl> out;
    };
    std::vector<Node> nodes_;
};

Tape* current_tape();
bool grad_enabled();

/// RAII scope that installs a fresh tape (and enables recording).
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    Tape& tape() { return tape_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape tape_;
    Tape* prev_;
};

/// RAII scope that disables recording (eval / inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// When enabled, every op verifies its output is finite and raises
/// ErrorCode::Numeric otherwise. Off by default (the trainer checks losses).
void set_finite_checks(bool enabled);
bool finite_checks();

void backward(const Tensor& root);

// ---- operations ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, real c);
Tensor scale(const Tensor& a, real c);

/// Broadcast ops where one operand is a 1-element tensor (gradients flow
/// into both operands).
Tensor scalar_mul(const Tensor& a, const Tensor& s);
Tensor scalar_div(const Tensor& a, const Tensor& s);

Tensor vexp(const Tensor& a);
Tensor vlog(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor elu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp(const Tensor& a, real lo, real hi);

Tensor l2norm(const Tensor& a); // Frobenius norm, 1x1 output
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps = real(1e-8));

Tensor sum_all(const Tensor& a);  // 1x1
Tensor row_sums(const Tensor& a); // m x 1
Tensor col_sums(const Tensor& a); // 1 x n

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);

Tensor embedding_rows(const Tensor& table, const std::vector<std::int64_t>& ids);
Tensor add_row_broadcast(const Tensor& m, const Tensor& row);
Tensor dropout(const Tensor& a, real rate, Rng& rng);

// test/bench helper: op output factory for custom fused ops (csa scan).
Tensor make_op_output(std::vector<std::size_t> shape, bool requires_grad);

std::string shape_str(const Tensor& t);

} // namespace streamrec
