#include "prime/optim.hpp"

#include "prime/error.hpp"

#include <cmath>

namespace prime {

void zero_grad(const nn::ParamList& params) {
    for (auto& [name, p] : params) p->zero_grad();
}

void AdamW::step(const nn::ParamList& params) {
    if (m_.empty()) {
        for (auto& [name, p] : params) {
            m_.emplace_back(p->value.shape(), 0.0);
            v_.emplace_back(p->value.shape(), 0.0);
        }
    }
    if (m_.size() != params.size()) throw InvalidConfig("optimizer parameter list changed between steps");
    ++t_;

    double scale = 1.0;
    if (config_.grad_clip > 0.0) {
        double sq = 0.0;
        for (auto& [name, p] : params)
            if (p->trainable)
                for (double g : p->grad.data()) sq += g * g;
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NonFiniteLoss("non-finite gradient norm");
        if (norm > config_.grad_clip) scale = config_.grad_clip / norm;
    }

    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        ad::Parameter& p = *params[i].second;
        if (!p.trainable) continue;
        auto w = p.value.data();
        auto g = p.grad.data();
        auto m = m_[i].data();
        auto v = v_[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k] * scale;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            w[k] -= config_.lr * (config_.weight_decay * w[k] + (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps));
        }
        p.zero_grad();
    }
}

} // namespace prime
