#include "invae/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace invae {

double Rng::uniform() {
    // 53-bit mantissa; never returns 1.0.
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    if (n == 0) {
        throw std::invalid_argument("uniform_index: n must be positive");
    }
    // Rejection sampling to remove modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    // Box-Muller, cosine branch only to keep one-draw-per-call semantics.
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::gamma(double shape) {
    if (!(shape > 0.0)) {
        throw std::invalid_argument("gamma: shape must be positive");
    }
    if (shape < 1.0) {
        // Boost to shape+1, then scale by U^(1/shape).
        const double g = gamma(shape + 1.0);
        double u = uniform();
        while (u <= 0.0) {
            u = uniform();
        }
        return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) {
            continue;
        }
        v = v * v * v;
        const double u = uniform();
        const double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) {
            return d * v;
        }
        if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) {
            return d * v;
        }
    }
}

std::uint64_t Rng::poisson(double lambda) {
    if (lambda < 0.0 || !std::isfinite(lambda)) {
        throw std::invalid_argument("poisson: invalid rate");
    }
    std::uint64_t total = 0;
    // Split large rates; exp(-500) is still representable.
    while (lambda > 500.0) {
        lambda -= 500.0;
        total += poisson(500.0);
    }
    if (lambda == 0.0) {
        return total;
    }
    const double threshold = std::exp(-lambda);
    double prod = 1.0;
    std::uint64_t k = 0;
    for (;;) {
        prod *= uniform();
        if (prod <= threshold) {
            break;
        }
        ++k;
    }
    return total + k;
}

std::size_t Rng::categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) {
            throw std::invalid_argument("categorical: negative weight");
        }
        total += w;
    }
    if (!(total > 0.0)) {
        throw std::invalid_argument("categorical: weights sum to zero");
    }
    double r = uniform() * total;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
        r -= weights[i];
        if (r < 0.0) {
            return i;
        }
    }
    return weights.size() - 1;
}

Rng Rng::fork(std::uint64_t stream_id) {
    // SplitMix-style mixing of the parent draw with the stream id.
    std::uint64_t z = engine_() ^ (stream_id + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
}

} // namespace invae
