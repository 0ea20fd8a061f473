#pragma once

#include "prime/nn.hpp"

#include <vector>

namespace prime {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 0.0; // global L2 norm; 0 disables
};

/// Adam with decoupled weight decay. State is keyed by position in the
/// parameter list, so the same list must be passed on every step.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    /// Applies one update from the accumulated grads and zeroes them.
    /// Frozen parameters (trainable == false) are skipped.
    void step(const nn::ParamList& params);

    const AdamWConfig& config() const noexcept { return config_; }
    std::size_t steps() const noexcept { return t_; }

private:
    AdamWConfig config_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

/// Zeroes every gradient in the list.
void zero_grad(const nn::ParamList& params);

} // namespace prime
