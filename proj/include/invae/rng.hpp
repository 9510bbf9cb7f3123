#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace invae {

// Deterministic random source. mt19937_64 output is pinned by the standard;
// all distribution transforms are implemented here so that streams are
// reproducible across standard-library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform();

    // Uniform in [lo, hi).
    double uniform(double lo, double hi);

    // Integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);

    // Standard normal via Box-Muller (no cached spare; one draw per call).
    double normal();

    double normal(double mean, double sd) { return mean + sd * normal(); }

    double lognormal(double mu, double sigma) { return std::exp(normal(mu, sigma)); }

    // Gamma with given shape and unit scale (Marsaglia-Tsang).
    double gamma(double shape);

    // Poisson with rate lambda (exact; chunked multiplication method).
    std::uint64_t poisson(double lambda);

    // Draw from an unnormalized weight vector.
    std::size_t categorical(const std::vector<double>& weights);

    // Fisher-Yates shuffle of an index vector.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent seeded stream (e.g. per worker or per cell).
    Rng fork(std::uint64_t stream_id);

  private:
    std::mt19937_64 engine_;
};

} // namespace invae
