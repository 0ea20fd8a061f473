#include "prime/rng.hpp"

#include "prime/error.hpp"

#include <algorithm>
#include <numeric>

namespace prime {

Tensor normal_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

std::vector<double> sample_dirichlet(Rng& rng, std::span<const double> concentration) {
    std::vector<double> out(concentration.size(), 0.0);
    bool any_positive = false;
    for (double c : concentration) {
        if (!(c >= 0.0)) throw InvalidConfig("Dirichlet concentration must be nonnegative");
        any_positive = any_positive || c > 0.0;
    }
    if (!any_positive) throw InvalidConfig("Dirichlet needs at least one positive concentration");
    // Gamma draws with tiny shape can all underflow; redraw in that case.
    for (int attempt = 0; attempt < 64; ++attempt) {
        double total = 0.0;
        for (std::size_t k = 0; k < concentration.size(); ++k) {
            if (concentration[k] == 0.0) {
                out[k] = 0.0;
                continue;
            }
            std::gamma_distribution<double> g(concentration[k], 1.0);
            out[k] = g(rng);
            total += out[k];
        }
        if (total > 0.0) {
            for (double& v : out) v /= total;
            return out;
        }
    }
    const auto k = static_cast<std::size_t>(
        std::max_element(concentration.begin(), concentration.end()) - concentration.begin());
    std::fill(out.begin(), out.end(), 0.0);
    out[k] = 1.0;
    return out;
}

std::vector<std::size_t> permutation(Rng& rng, std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(p[i - 1], p[pick(rng)]);
    }
    return p;
}

} // namespace prime
