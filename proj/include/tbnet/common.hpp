#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tbnet {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor/layer dimension mismatch.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed input file (bad magic, truncation, wrong record size).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Graph or model-structure violation (e.g. a TEE->REE merge edge).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Pipeline artifact consumed out of order or with a stale config.
class StageError : public Error {
public:
    using Error::Error;
};

/// Split-inference channel violation (missing/out-of-order message).
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Non-finite value encountered during training.
class NumericError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void str_impl(std::ostringstream&) {}

template <typename T, typename... Rest>
void str_impl(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    str_impl(os, rest...);
}

} // namespace detail

/// Concatenate arbitrary streamable values into a std::string.
template <typename... Args>
std::string strcat_msg(const Args&... args) {
    std::ostringstream os;
    detail::str_impl(os, args...);
    return os.str();
}

inline std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

/// FNV-1a 64-bit hash, used for config fingerprints and seed derivation.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Deterministic sub-seed for a named purpose ("victim-init", "shuffle", ...).
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    uint64_t h = fnv1a64(tag);
    h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

/// Seeded random source. Normal deviates use an explicit Box-Muller
/// transform on top of mt19937_64 so streams are reproducible and do not
/// depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the draw unbiased.
        uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace tbnet
