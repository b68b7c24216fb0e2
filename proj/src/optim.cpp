#include "unlearn/optim.hpp"

#include <cmath>

#include "unlearn/errors.hpp"

namespace unlearn {

void Adam::step(const std::map<std::string, Tensor*>& params,
                const std::map<std::string, const Tensor*>& grads) {
    ++t_;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
    for (const auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw ConfigError("missing gradient for '" + name + "'");
        const Tensor& g = *git->second;
        if (!p->same_shape(g)) throw ShapeError("gradient shape mismatch for '" + name + "'");
        State& s = state_[name];
        if (s.m.empty()) {
            s.m = Tensor(p->shape());
            s.v = Tensor(p->shape());
        }
        for (size_t i = 0; i < p->size(); ++i) {
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const real mhat = s.m[i] / bc1;
            const real vhat = s.v[i] / bc2;
            (*p)[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace unlearn
