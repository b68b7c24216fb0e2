#pragma once

#include <map>
#include <string>

#include "unlearn/tensor.hpp"

namespace unlearn {

// Adam over named tensors. State is keyed by parameter path so step order is
// deterministic; all accumulators are double precision.
class Adam {
public:
    Adam(real lr, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(real lr) { lr_ = lr; }

    // Applies one update to every (param, grad) pair. Missing state is
    // zero-initialized on first use.
    void step(const std::map<std::string, Tensor*>& params,
              const std::map<std::string, const Tensor*>& grads);

private:
    struct State {
        Tensor m, v;
    };
    real lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, State> state_;
};

}  // namespace unlearn
