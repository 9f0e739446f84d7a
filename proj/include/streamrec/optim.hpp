#pragma once

#include <functional>
#include <vector>

#include "streamrec/tensor.hpp"

namespace streamrec {

struct AdamConfig {
    real lr = real(1e-3);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
};

/// Standard Adam with bias correction. Gradients are zeroed after each step.
/// Moment buffers transparently grow when a registered parameter grows
/// (embedding tables append rows along the stream); new entries start at 0.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void register_param(const Tensor& p);
    void step();
    long step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

    struct Slot {
        std::shared_ptr<TensorImpl> param;
        std::vector<real> m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    void set_step_count(long s) { step_ = s; }

private:
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    long step_ = 0;
};

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// `f` must rebuild the scalar loss from scratch on each call; analytic
/// gradients are taken from one taped evaluation, numeric ones from
/// 2*size(x) untaped evaluations at x +/- h.
real grad_check(const std::function<Tensor()>& f, Tensor x, real h = real(1e-5));

} // namespace streamrec
