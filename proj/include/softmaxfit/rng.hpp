#pragma once

// Deterministic random number generation.  All stochastic code in the library
// draws through this wrapper so that a (master seed, stream id) pair fully
// determines every output, independent of platform and thread schedule.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include "softmaxfit/stats.hpp"

namespace softmaxfit {

// One step of splitmix64; used only to whiten seed material.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Folds a stream index into a master seed: whiten the index, xor into the
// master, whiten again.  Nearby indices give unrelated seeds.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    std::uint64_t s = stream;
    std::uint64_t folded = master ^ splitmix64_next(s);
    return splitmix64_next(folded);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static Rng stream(std::uint64_t master, std::uint64_t stream_id) {
        return Rng(derive_seed(master, stream_id));
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform draw strictly inside (0,1): 53 random bits centered in the bin,
    // so the normal inverse-CDF transform below never sees 0 or 1.
    double uniform01() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Normal draws by inverse CDF rather than std::normal_distribution, whose
    // algorithm is implementation-defined and would break cross-platform
    // reproducibility.
    double normal() { return normal_quantile(uniform01()); }

    double normal(double mean, double sd) {
        if (!(sd >= 0.0)) {
            throw std::invalid_argument("Rng::normal: sd must be nonnegative, got " +
                                        std::to_string(sd));
        }
        return mean + sd * normal();
    }

    // Index draw from an explicit probability vector (must sum to 1 up to
    // rounding).  Works with any container exposing size() and operator[].
    template <class Vec>
    int categorical(const Vec& probs) {
        const int n = static_cast<int>(probs.size());
        if (n <= 0) throw std::invalid_argument("Rng::categorical: empty probability vector");
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            const double p = probs[i];
            if (!(p >= 0.0)) {
                throw std::invalid_argument("Rng::categorical: negative or NaN probability at index " +
                                            std::to_string(i));
            }
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw std::invalid_argument("Rng::categorical: probabilities sum to " +
                                        std::to_string(total) + ", expected 1");
        }
        const double u = uniform01() * total;
        double cum = 0.0;
        for (int i = 0; i < n; ++i) {
            cum += probs[i];
            if (u < cum) return i;
        }
        return n - 1;
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace softmaxfit
