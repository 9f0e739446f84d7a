#include "streamrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "streamrec/kernels.hpp"

namespace streamrec {

namespace {

thread_local Tape tls_default_tape;
thread_local Tape* tls_tape = &tls_default_tape;
thread_local bool tls_grad_enabled = true;
bool g_finite_checks = false;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void ensure_grad_buffer(TensorImpl& impl) {
    if (impl.requires_grad && impl.grad.size() != impl.data.size())
        impl.grad.assign(impl.data.size(), real(0));
}

void check_finite(const Tensor& t, const char* op) {
    if (!g_finite_checks) return;
    for (real v : t.data())
        if (!std::isfinite(v))
            raise(ErrorCode::Numeric, std::string(op) + ": non-finite value in output");
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!tls_grad_enabled) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.ndim() != 2)
        raise(ErrorCode::Dimension,
              std::string(op) + ": expected a 2-d tensor, got " + shape_str(t));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        raise(ErrorCode::Dimension, std::string(op) + ": shape mismatch " +
                                        shape_str(a) + " vs " + shape_str(b));
}

} // namespace

std::string shape_str(const Tensor& t) {
    if (!t.valid()) return "<null>";
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
        if (i) os << 'x';
        os << t.shape()[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    return full(std::move(shape), real(0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, real value, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_product(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    ensure_grad_buffer(*impl);
    return Tensor(std::move(impl));
}

Tensor Tensor::from(std::vector<real> data, std::vector<std::size_t> shape,
                    bool requires_grad) {
    if (data.size() != shape_product(shape))
        raise(ErrorCode::Dimension, "Tensor::from: data length does not match shape");
    auto impl = std::make_shared<TensorImpl>();
    impl->data = std::move(data);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    ensure_grad_buffer(*impl);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
    return from({value}, {1, 1}, requires_grad);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, real stddev,
                     bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    for (real& v : t.data()) v = static_cast<real>(rng.normal(0.0, stddev));
    return t;
}

std::size_t Tensor::rows() const {
    return impl_->shape.empty() ? 0 : impl_->shape[0];
}

std::size_t Tensor::cols() const {
    return impl_->shape.size() < 2 ? 1 : impl_->shape[1];
}

std::vector<real>& Tensor::grad() {
    ensure_grad_buffer(*impl_);
    return impl_->grad;
}

const std::vector<real>& Tensor::grad() const {
    ensure_grad_buffer(*impl_);
    return impl_->grad;
}

real Tensor::value() const {
    if (!is_scalar())
        raise(ErrorCode::Usage, "Tensor::value: tensor is not scalar, shape " + shape_str(*this));
    return impl_->data[0];
}

real Tensor::at(std::size_t r, std::size_t c) const {
    return impl_->data[r * cols() + c];
}

void Tensor::zero_grad() {
    if (impl_ && impl_->requires_grad) impl_->grad.assign(impl_->data.size(), real(0));
}

void Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    ensure_grad_buffer(*impl_);
    if (!flag) impl_->grad.clear();
}

Tensor make_op_output(std::vector<std::size_t> shape, bool requires_grad) {
    auto t = Tensor::zeros(std::move(shape), false);
    if (requires_grad) {
        t.impl()->requires_grad = true;
        ensure_grad_buffer(*t.impl());
    }
    return t;
}

// ---- Tape --------------------------------------------------------------

Tape* current_tape() { return tls_tape; }
bool grad_enabled() { return tls_grad_enabled; }

void Tape::record(std::function<void()> backward_fn, const Tensor& out) {
    out.impl()->producer = this;
    nodes_.push_back(Node{std::move(backward_fn), out.impl()});
}

void Tape::backward(const Tensor& root) {
    if (!root.valid() || !root.is_scalar())
        raise(ErrorCode::Usage, "backward: root must be a scalar tensor");
    if (root.impl()->producer != this)
        raise(ErrorCode::Usage, "backward: root was not produced on this tape");
    // Non-leaf gradients are transient: reset them so repeated backward
    // calls accumulate only into leaves.
    for (Node& node : nodes_)
        if (node.out->requires_grad)
            node.out->grad.assign(node.out->data.size(), real(0));
    root.impl()->grad.assign(1, real(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
        if (it->backward_fn) it->backward_fn();
}

void Tape::clear() { nodes_.clear(); }

TapeScope::TapeScope() : prev_(tls_tape) { tls_tape = &tape_; }
TapeScope::~TapeScope() { tls_tape = prev_; }

NoGradGuard::NoGradGuard() : prev_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = prev_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

void backward(const Tensor& root) { tls_tape->backward(root); }

// ---- op helpers ----------------------------------------------------------

namespace {

Tensor unary_op(const Tensor& a, const char* name,
                const std::function<real(real)>& f,
                // dval(input, output) -> local derivative
                const std::function<real(real, real)>& df) {
    const bool rec = should_record({&a});
    Tensor out = make_op_output(a.shape(), rec);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = f(a.data()[i]);
    check_finite(out, name);
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, df]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                for (std::size_t i = 0; i < ai->data.size(); ++i)
                    ai->grad[i] += oi->grad[i] * df(ai->data[i], oi->data[i]);
            },
            out);
    }
    return out;
}

} // namespace

// ---- matmul / transpose --------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        raise(ErrorCode::Dimension, "matmul: inner dimensions disagree, " +
                                        shape_str(a) + " x " + shape_str(b));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const bool rec = should_record({&a, &b});
    Tensor out = make_op_output({m, n}, rec);
    kernels::matmul(a.data().data(), b.data().data(), out.data().data(),
                    m, k, n, false, false, false);
    check_finite(out, "matmul");
    if (rec) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, bi, oi, m, k, n]() {
                if (ai->requires_grad) {
                    ensure_grad_buffer(*ai);
                    // dA += dC * B^T
                    kernels::matmul(oi->grad.data(), bi->data.data(), ai->grad.data(),
                                    m, n, k, false, true, true);
                }
                if (bi->requires_grad) {
                    ensure_grad_buffer(*bi);
                    // dB += A^T * dC
                    kernels::matmul(ai->data.data(), oi->grad.data(), bi->grad.data(),
                                    k, m, n, true, false, true);
                }
            },
            out);
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    const bool rec = should_record({&a});
    Tensor out = make_op_output({n, m}, rec);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.data()[j * m + i] = a.data()[i * n + j];
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, m, n]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        ai->grad[i * n + j] += oi->grad[j * m + i];
            },
            out);
    }
    return out;
}

// ---- elementwise binary ----------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    require_same_shape(a, b, name);
    if (kind == BinKind::Div)
        for (real v : b.data())
            if (v == real(0)) raise(ErrorCode::Domain, "divide: division by zero");
    const bool rec = should_record({&a, &b});
    Tensor out = make_op_output(a.shape(), rec);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
            case BinKind::Add: out.data()[i] = a.data()[i] + b.data()[i]; break;
            case BinKind::Sub: out.data()[i] = a.data()[i] - b.data()[i]; break;
            case BinKind::Mul: out.data()[i] = a.data()[i] * b.data()[i]; break;
            case BinKind::Div: out.data()[i] = a.data()[i] / b.data()[i]; break;
        }
    }
    check_finite(out, name);
    if (rec) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, bi, oi, kind]() {
                const std::size_t n = oi->data.size();
                if (ai->requires_grad) {
                    ensure_grad_buffer(*ai);
                    for (std::size_t i = 0; i < n; ++i) {
                        real g = oi->grad[i];
                        if (kind == BinKind::Mul) g *= bi->data[i];
                        else if (kind == BinKind::Div) g /= bi->data[i];
                        ai->grad[i] += g;
                    }
                }
                if (bi->requires_grad) {
                    ensure_grad_buffer(*bi);
                    for (std::size_t i = 0; i < n; ++i) {
                        real g = oi->grad[i];
                        switch (kind) {
                            case BinKind::Add: break;
                            case BinKind::Sub: g = -g; break;
                            case BinKind::Mul: g *= ai->data[i]; break;
                            case BinKind::Div:
                                g *= -ai->data[i] / (bi->data[i] * bi->data[i]);
                                break;
                        }
                        bi->grad[i] += g;
                    }
                }
            },
            out);
    }
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }
Tensor divide(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Div, "divide"); }

Tensor add_scalar(const Tensor& a, real c) {
    return unary_op(a, "add_scalar", [c](real x) { return x + c; },
                    [](real, real) { return real(1); });
}

Tensor scale(const Tensor& a, real c) {
    return unary_op(a, "scale", [c](real x) { return x * c; },
                    [c](real, real) { return c; });
}

// ---- scalar-tensor broadcast -----------------------------------------------

Tensor scalar_mul(const Tensor& a, const Tensor& s) {
    if (!s.is_scalar())
        raise(ErrorCode::Dimension, "scalar_mul: second operand must be scalar");
    const real sv = s.value();
    const bool rec = should_record({&a, &s});
    Tensor out = make_op_output(a.shape(), rec);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * sv;
    check_finite(out, "scalar_mul");
    if (rec) {
        auto ai = a.impl();
        auto si = s.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, si, oi]() {
                const real sv = si->data[0];
                if (ai->requires_grad) {
                    ensure_grad_buffer(*ai);
                    for (std::size_t i = 0; i < ai->data.size(); ++i)
                        ai->grad[i] += oi->grad[i] * sv;
                }
                if (si->requires_grad) {
                    ensure_grad_buffer(*si);
                    real acc = 0;
                    for (std::size_t i = 0; i < ai->data.size(); ++i)
                        acc += oi->grad[i] * ai->data[i];
                    si->grad[0] += acc;
                }
            },
            out);
    }
    return out;
}

Tensor scalar_div(const Tensor& a, const Tensor& s) {
    if (!s.is_scalar())
        raise(ErrorCode::Dimension, "scalar_div: second operand must be scalar");
    const real sv = s.value();
    if (sv == real(0)) raise(ErrorCode::Domain, "scalar_div: division by zero");
    const bool rec = should_record({&a, &s});
    Tensor out = make_op_output(a.shape(), rec);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] / sv;
    check_finite(out, "scalar_div");
    if (rec) {
        auto ai = a.impl();
        auto si = s.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, si, oi]() {
                const real sv = si->data[0];
                if (ai->requires_grad) {
                    ensure_grad_buffer(*ai);
                    for (std::size_t i = 0; i < ai->data.size(); ++i)
                        ai->grad[i] += oi->grad[i] / sv;
                }
                if (si->requires_grad) {
                    ensure_grad_buffer(*si);
                    real acc = 0;
                    for (std::size_t i = 0; i < ai->data.size(); ++i)
                        acc += oi->grad[i] * (-ai->data[i] / (sv * sv));
                    si->grad[0] += acc;
                }
            },
            out);
    }
    return out;
}

// ---- elementwise unary -------------------------------------------------------

Tensor vexp(const Tensor& a) {
    return unary_op(a, "exp", [](real x) { return std::exp(x); },
                    [](real, real y) { return y; });
}

Tensor vlog(const Tensor& a) {
    for (real v : a.data())
        if (v <= real(0)) raise(ErrorCode::Domain, "log: non-positive input");
    return unary_op(a, "log", [](real x) { return std::log(x); },
                    [](real x, real) { return real(1) / x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, "sigmoid",
                    [](real x) {
                        if (x >= real(0)) return real(1) / (real(1) + std::exp(-x));
                        const real e = std::exp(x);
                        return e / (real(1) + e);
                    },
                    [](real, real y) { return y * (real(1) - y); });
}

Tensor elu(const Tensor& a) {
    return unary_op(a, "elu",
                    [](real x) { return x > real(0) ? x : std::expm1(x); },
                    [](real x, real y) { return x > real(0) ? real(1) : y + real(1); });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, "relu", [](real x) { return x > real(0) ? x : real(0); },
                    [](real x, real) { return x > real(0) ? real(1) : real(0); });
}

Tensor clamp(const Tensor& a, real lo, real hi) {
    return unary_op(a, "clamp",
                    [lo, hi](real x) { return std::min(std::max(x, lo), hi); },
                    [lo, hi](real x, real) {
                        return (x >= lo && x <= hi) ? real(1) : real(0);
                    });
}

// ---- reductions / norms -----------------------------------------------------

Tensor l2norm(const Tensor& a) {
    real acc = 0;
    for (real v : a.data()) acc += v * v;
    const real norm = std::sqrt(acc);
    const bool rec = should_record({&a});
    Tensor out = make_op_output({1, 1}, rec);
    out.data()[0] = norm;
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, norm]() {
                if (!ai->requires_grad || norm == real(0)) return;
                ensure_grad_buffer(*ai);
                const real g = oi->grad[0] / norm;
                for (std::size_t i = 0; i < ai->data.size(); ++i)
                    ai->grad[i] += g * ai->data[i];
            },
            out);
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    real acc = 0;
    for (real v : a.data()) acc += v;
    const bool rec = should_record({&a});
    Tensor out = make_op_output({1, 1}, rec);
    out.data()[0] = acc;
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                const real g = oi->grad[0];
                for (real& gi : ai->grad) gi += g;
            },
            out);
    }
    return out;
}

Tensor row_sums(const Tensor& a) {
    require_matrix(a, "row_sums");
    const std::size_t m = a.rows(), n = a.cols();
    const bool rec = should_record({&a});
    Tensor out = make_op_output({m, 1}, rec);
    for (std::size_t i = 0; i < m; ++i) {
        real acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += a.data()[i * n + j];
        out.data()[i] = acc;
    }
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, m, n]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        ai->grad[i * n + j] += oi->grad[i];
            },
            out);
    }
    return out;
}

Tensor col_sums(const Tensor& a) {
    require_matrix(a, "col_sums");
    const std::size_t m = a.rows(), n = a.cols();
    const bool rec = should_record({&a});
    Tensor out = make_op_output({1, n}, rec);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j] += a.data()[i * n + j];
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, m, n]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        ai->grad[i * n + j] += oi->grad[j];
            },
            out);
    }
    return out;
}

// ---- softmax / layer norm -----------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
    require_matrix(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    const bool rec = should_record({&a});
    Tensor out = make_op_output({m, n}, rec);
    for (std::size_t i = 0; i < m; ++i) {
        const real* row = a.data().data() + i * n;
        real* orow = out.data().data() + i * n;
        real mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        real sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    check_finite(out, "softmax_rows");
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, m, n]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                for (std::size_t i = 0; i < m; ++i) {
                    const real* y = oi->data.data() + i * n;
                    const real* dy = oi->grad.data() + i * n;
                    real dot = 0;
                    for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                    real* dx = ai->grad.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j)
                        dx[j] += y[j] * (dy[j] - dot);
                }
            },
            out);
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
    require_matrix(x, "layer_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n)
        raise(ErrorCode::Dimension, "layer_norm: gain/bias must have one entry per column");
    const bool rec = should_record({&x, &gain, &bias});
    Tensor out = make_op_output({m, n}, rec);
    auto xhat = std::make_shared<std::vector<real>>(m * n);
    auto inv_sigma = std::make_shared<std::vector<real>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const real* row = x.data().data() + i * n;
        real mean = 0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<real>(n);
        real var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const real d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<real>(n);
        const real is = real(1) / std::sqrt(var + eps);
        (*inv_sigma)[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const real xh = (row[j] - mean) * is;
            (*xhat)[i * n + j] = xh;
            out.data()[i * n + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    check_finite(out, "layer_norm");
    if (rec) {
        auto xi = x.impl();
        auto gi = gain.impl();
        auto bi = bias.impl();
        auto oi = out.impl();
        current_tape()->record(
            [xi, gi, bi, oi, xhat, inv_sigma, m, n]() {
                for (std::size_t i = 0; i < m; ++i) {
                    const real* dy = oi->grad.data() + i * n;
                    const real* xh = xhat->data() + i * n;
                    if (gi->requires_grad) {
                        ensure_grad_buffer(*gi);
                        for (std::size_t j = 0; j < n; ++j)
                            gi->grad[j] += dy[j] * xh[j];
                    }
                    if (bi->requires_grad) {
                        ensure_grad_buffer(*bi);
                        for (std::size_t j = 0; j < n; ++j) bi->grad[j] += dy[j];
                    }
                    if (xi->requires_grad) {
                        ensure_grad_buffer(*xi);
                        real mean_dxhat = 0, mean_dxhat_xhat = 0;
                        for (std::size_t j = 0; j < n; ++j) {
                            const real dxh = dy[j] * gi->data[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= static_cast<real>(n);
                        mean_dxhat_xhat /= static_cast<real>(n);
                        real* dx = xi->grad.data() + i * n;
                        const real is = (*inv_sigma)[i];
                        for (std::size_t j = 0; j < n; ++j) {
                            const real dxh = dy[j] * gi->data[j];
                            dx[j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
            },
            out);
    }
    return out;
}

// ---- structural ops --------------------------------------------------------

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) raise(ErrorCode::Usage, "concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    bool rec = false;
    for (const Tensor& p : parts) {
        require_matrix(p, "concat_cols");
        if (p.rows() != m)
            raise(ErrorCode::Dimension, "concat_cols: row count mismatch");
        total += p.cols();
        rec = rec || (grad_enabled() && p.requires_grad());
    }
    Tensor out = make_op_output({m, total}, rec);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(p.data().data() + i * pc, pc,
                        out.data().data() + i * total + off);
        off += pc;
    }
    if (rec) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        current_tape()->record(
            [impls, oi, m, total]() {
                std::size_t off = 0;
                for (auto& pi : impls) {
                    const std::size_t pc = pi->shape[1];
                    if (pi->requires_grad) {
                        ensure_grad_buffer(*pi);
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < pc; ++j)
                                pi->grad[i * pc + j] += oi->grad[i * total + off + j];
                    }
                    off += pc;
                }
            },
            out);
    }
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require_matrix(a, "slice_rows");
    if (begin + count > a.rows())
        raise(ErrorCode::Dimension, "slice_rows: range out of bounds");
    const std::size_t n = a.cols();
    const bool rec = should_record({&a});
    Tensor out = make_op_output({count, n}, rec);
    std::copy_n(a.data().data() + begin * n, count * n, out.data().data());
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, begin, count, n]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                for (std::size_t i = 0; i < count * n; ++i)
                    ai->grad[begin * n + i] += oi->grad[i];
            },
            out);
    }
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<std::int64_t>& ids) {
    require_matrix(table, "embedding_rows");
    const std::size_t n = table.cols();
    for (std::int64_t id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows())
            raise(ErrorCode::Index,
                  "embedding_rows: id " + std::to_string(id) + " out of range");
    const bool rec = should_record({&table});
    Tensor out = make_op_output({ids.size(), n}, rec);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * n, n,
                    out.data().data() + i * n);
    if (rec) {
        auto ti = table.impl();
        auto oi = out.impl();
        auto idcopy = std::make_shared<std::vector<std::int64_t>>(ids);
        current_tape()->record(
            [ti, oi, idcopy, n]() {
                if (!ti->requires_grad) return;
                ensure_grad_buffer(*ti);
                for (std::size_t i = 0; i < idcopy->size(); ++i) {
                    real* dst = ti->grad.data() + static_cast<std::size_t>((*idcopy)[i]) * n;
                    const real* src = oi->grad.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
                }
            },
            out);
    }
    return out;
}

Tensor add_row_broadcast(const Tensor& m, const Tensor& row) {
    require_matrix(m, "add_row_broadcast");
    if (row.size() != m.cols())
        raise(ErrorCode::Dimension, "add_row_broadcast: row length mismatch");
    const std::size_t r = m.rows(), n = m.cols();
    const bool rec = should_record({&m, &row});
    Tensor out = make_op_output({r, n}, rec);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.data()[i * n + j] = m.data()[i * n + j] + row.data()[j];
    if (rec) {
        auto mi = m.impl();
        auto ri = row.impl();
        auto oi = out.impl();
        current_tape()->record(
            [mi, ri, oi, r, n]() {
                if (mi->requires_grad) {
                    ensure_grad_buffer(*mi);
                    for (std::size_t i = 0; i < r * n; ++i) mi->grad[i] += oi->grad[i];
                }
                if (ri->requires_grad) {
                    ensure_grad_buffer(*ri);
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                            ri->grad[j] += oi->grad[i * n + j];
                }
            },
            out);
    }
    return out;
}

Tensor dropout(const Tensor& a, real rate, Rng& rng) {
    if (rate < real(0) || rate >= real(1))
        raise(ErrorCode::Usage, "dropout: rate must be in [0, 1)");
    if (rate == real(0)) return a;
    const bool rec = should_record({&a});
    Tensor out = make_op_output(a.shape(), rec);
    auto mask = std::make_shared<std::vector<real>>(a.size());
    const real keep_scale = real(1) / (real(1) - rate);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool keep = static_cast<real>(rng.uniform01()) >= rate;
        (*mask)[i] = keep ? keep_scale : real(0);
        out.data()[i] = a.data()[i] * (*mask)[i];
    }
    if (rec) {
        auto ai = a.impl();
        auto oi = out.impl();
        current_tape()->record(
            [ai, oi, mask]() {
                if (!ai->requires_grad) return;
                ensure_grad_buffer(*ai);
                for (std::size_t i = 0; i < ai->data.size(); ++i)
                    ai->grad[i] += oi->grad[i] * (*mask)[i];
            },
            out);
    }
    return out;
}

} // namespace streamrec
