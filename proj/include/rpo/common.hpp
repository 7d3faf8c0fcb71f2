#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rpo {

using Vec = std::vector<double>;

// ---------------------------------------------------------------- hashing

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t hash_bytes(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// splitmix64 finalizer, used to combine seeds and stream tags
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ mix64(b));
}

inline std::uint64_t stream_tag(std::string_view name) {
    return hash_bytes(name);
}

// ------------------------------------------------------------------- rng
//
// Deterministic stream-splittable RNG. Every consumer derives its own
// stream from (seed, tag, counters...) so that unrelated draws never
// share state. Copyable by value, which gives cheap replay in tests.

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    static Rng stream(std::uint64_t seed, std::string_view name) {
        return Rng(mix64(seed, stream_tag(name)));
    }
    static Rng stream(std::uint64_t seed, std::string_view name,
                      std::uint64_t a) {
        return Rng(mix64(mix64(seed, stream_tag(name)), a));
    }
    static Rng stream(std::uint64_t seed, std::string_view name,
                      std::uint64_t a, std::uint64_t b) {
        return Rng(mix64(mix64(mix64(seed, stream_tag(name)), a), b));
    }

    std::uint64_t u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    // uniform in {0, ..., n-1}; n small so modulo bias is negligible
    int uniform_int(int n) {
        return static_cast<int>(u64() % static_cast<std::uint64_t>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; two uniforms per draw, no cached spare
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    void fill_normal(Vec& v) {
        for (double& x : v) x = normal();
    }

    Vec normal_vec(std::size_t n) {
        Vec v(n);
        fill_normal(v);
        return v;
    }

private:
    std::mt19937_64 eng_;
};

// ------------------------------------------------------------- small blas

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double nrm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void axpy(double alpha, std::span<const double> x,
                 std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double na = nrm2(a), nb = nrm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

inline double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

// numerically stable log(sigmoid(x))
inline double log_sigmoid(double x) {
    if (x < 0.0) return x - std::log1p(std::exp(x));
    return -std::log1p(std::exp(-x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// ------------------------------------------------------------ formatting

// shortest round-trip representation; keeps CSV logs byte-stable
inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{}) {
        throw std::invalid_argument("parse_double: bad number '" +
                                    std::string(s) + "'");
    }
    return v;
}

}  // namespace rpo
