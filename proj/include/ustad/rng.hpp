#pragma once

// Seed derivation + portable random draws. std:: distributions are not
// reproducible across standard libraries, so every draw here is built
// directly on mt19937_64 output bits.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace ustad {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Chains any number of integer tags into one sub-seed. Used everywhere a
/// stage/pass/event needs its own independent stream.
template <class... Tags>
std::uint64_t derive_seed(std::uint64_t base, Tags... tags) {
    std::uint64_t s = splitmix64(base ^ 0x5851f42d4c957f2dULL);
    ((s = splitmix64(s ^ static_cast<std::uint64_t>(tags))), ...);
    return s;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0,1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
        // rejection sampling keeps the draw unbiased
        const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % span;
        std::uint64_t r = eng_();
        while (r >= limit) r = eng_();
        return lo + static_cast<std::int64_t>(r % span);
    }

    /// Standard normal via Box-Muller with cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - uniform01();  // (0,1]
        const double v = uniform01();
        const double mag = std::sqrt(-2.0 * std::log(u));
        const double ang = 2.0 * M_PI * v;
        spare_ = mag * std::sin(ang);
        has_spare_ = true;
        return mag * std::cos(ang);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    /// Log-normal parameterized by the median m and the log-space sigma.
    double lognormal_median(double median, double sigma_log) {
        return median * std::exp(sigma_log * normal());
    }

    bool bernoulli(double p) { return uniform01() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            const auto j = static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

    /// Index draw proportional to nonnegative weights.
    std::size_t weighted_index(const std::vector<double>& w) {
        double total = 0.0;
        for (double x : w) total += x;
        if (!(total > 0.0)) throw std::invalid_argument("weighted_index: weights sum to zero");
        const double r = uniform01() * total;
        double c = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            c += w[i];
            if (r < c) return i;
        }
        return w.size() - 1;
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ustad
