#include "streamrec/optim.hpp"

#include <cmath>

namespace streamrec {

void Adam::register_param(const Tensor& p) {
    if (!p.requires_grad())
        raise(ErrorCode::Usage, "Adam: parameter does not require grad");
    Slot slot;
    slot.param = p.impl();
    slot.m.assign(p.size(), real(0));
    slot.v.assign(p.size(), real(0));
    slots_.push_back(std::move(slot));
}

void Adam::step() {
    ++step_;
    const real bc1 = real(1) - std::pow(cfg_.beta1, static_cast<real>(step_));
    const real bc2 = real(1) - std::pow(cfg_.beta2, static_cast<real>(step_));
    for (Slot& slot : slots_) {
        TensorImpl& p = *slot.param;
        if (p.grad.size() != p.data.size())
            raise(ErrorCode::Usage, "Adam::step: parameter has no gradient");
        if (slot.m.size() < p.data.size()) {
            slot.m.resize(p.data.size(), real(0));
            slot.v.resize(p.data.size(), real(0));
        }
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const real g = p.grad[i];
            slot.m[i] = cfg_.beta1 * slot.m[i] + (real(1) - cfg_.beta1) * g;
            slot.v[i] = cfg_.beta2 * slot.v[i] + (real(1) - cfg_.beta2) * g * g;
            const real mhat = slot.m[i] / bc1;
            const real vhat = slot.v[i] / bc2;
            p.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p.grad.assign(p.data.size(), real(0));
    }
}

real grad_check(const std::function<Tensor()>& f, Tensor x, real h) {
    std::vector<real> analytic;
    {
        TapeScope scope;
        x.zero_grad();
        Tensor loss = f();
        if (!loss.is_scalar())
            raise(ErrorCode::Usage, "grad_check: f must be scalar-valued");
        scope.tape().backward(loss);
        analytic = x.grad();
    }
    real max_err = 0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const real saved = x.data()[i];
        x.data()[i] = saved + h;
        const real fp = f().value();
        x.data()[i] = saved - h;
        const real fm = f().value();
        x.data()[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            raise(ErrorCode::Numeric, "grad_check: non-finite evaluation");
        const real numeric = (fp - fm) / (real(2) * h);
        const real err = std::abs(analytic[i] - numeric) /
                         std::max(real(1), std::abs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace streamrec
