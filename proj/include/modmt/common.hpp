// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy and small shared helpers.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace modmt {

// Base class for all library errors. Subclasses map onto the CLI exit
// statuses: ConfigError -> 1, DataError -> 2, IntegrityError and
// DivergenceError -> 3. ContractError signals misuse of an API
// precondition and maps to 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

// Shape mismatches, out-of-range ids, unknown lookups, violated call
// contracts.
class ContractError : public Error {
public:
    using Error::Error;
};

// Checkpoint corruption, digest mismatch, version rejection.
class IntegrityError : public Error {
public:
    using Error::Error;
};

// NaN/Inf detected in a forward value, gradient, or loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << " x ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// Branch-free finiteness scan. x - x is 0 for finite x and NaN for
// NaN/Inf, so the loop vectorizes where std::isfinite may not.
template <class T>
inline bool all_finite(const T* p, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += p[i] - p[i];
    return acc == T(0);
}

template <class T>
inline bool all_finite(const std::vector<T>& v) {
    return all_finite(v.data(), v.size());
}

}  // namespace modmt
