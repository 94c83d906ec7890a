// Shared aliases, error types and small utilities used across the library.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecan {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Labels = std::vector<int>;

// A batch of samples, one row per sample, one column per feature dimension.
using FeatureBatch = Eigen::MatrixXd;

// Base class for everything thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (shape mismatch, bad config, ...).
class ContractViolation : public Error {
public:
    using Error::Error;
};

// Not enough samples for the requested estimator (e.g. U-statistics need n >= 2).
class InsufficientData : public Error {
public:
    using Error::Error;
};

// Input is structurally valid but degenerate for the operation
// (e.g. every class term of the conditional MMD had to be skipped).
class DegenerateInput : public Error {
public:
    using Error::Error;
};

// Malformed file content; the message carries the offending line number.
class ParseError : public Error {
public:
    using Error::Error;
};

// A non-finite value showed up where the math requires finite numbers.
class NumericError : public Error {
public:
    using Error::Error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw ContractViolation(message);
}

inline void require_finite(const Matrix& m, const std::string& what) {
    if (!m.allFinite()) throw NumericError(what + " contains non-finite values");
}

// Exactly rounded floating-point summation (Shewchuk partials, the fsum
// algorithm). The result is the correctly rounded value of the exact real
// sum, so it does not depend on the order terms are added in. The MMD
// estimators reduce kernel values through this, which makes them invariant
// under reordering samples within a domain, bit for bit.
class ExactSum {
public:
    void add(double x) {
        std::size_t used = 0;
        for (std::size_t i = 0; i < partials_.size(); ++i) {
            double y = partials_[i];
            if (std::abs(x) < std::abs(y)) std::swap(x, y);
            const double hi = x + y;
            const double lo = y - (hi - x);
            if (lo != 0.0) partials_[used++] = lo;
            x = hi;
        }
        partials_.resize(used);
        partials_.push_back(x);
    }

    // Correctly rounded total (round-half-even on the final carry).
    double value() const {
        std::size_t n = partials_.size();
        if (n == 0) return 0.0;
        double s = partials_[--n];
        double lo = 0.0;
        while (n > 0) {
            const double x = s;
            const double y = partials_[--n];
            s = x + y;
            const double yr = s - x;
            lo = y - yr;
            if (lo != 0.0) break;
        }
        if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) ||
                      (lo > 0.0 && partials_[n - 1] > 0.0))) {
            const double y = lo * 2.0;
            const double x = s + y;
            if (y == x - s) s = x;
        }
        return s;
    }

private:
    std::vector<double> partials_;  // non-overlapping, increasing magnitude
};

// splitmix64; used to derive independent sub-stream seeds from one run seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(seed ^ h);
}

}  // namespace ecan
