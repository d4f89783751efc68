#pragma once

#include <Eigen/Dense>

#include <sstream>
#include <stdexcept>
#include <string>

namespace musteer {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller violated an operation's contract (bad argument, wrong call order).
class UsageError : public Error {
public:
    using Error::Error;
};

/// Configuration is inconsistent (shape mismatch, unknown key, bad value).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// File could not be read/written or failed integrity checks.
class IoError : public Error {
public:
    using Error::Error;
};

/// Training or evaluation produced a non-finite value.
class NumericalError : public Error {
public:
    using Error::Error;
};

namespace detail {
inline void concat_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void concat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    concat_into(os, rest...);
}
}  // namespace detail

/// Builds an error message from heterogeneous pieces.
template <typename... Args>
std::string concat(const Args&... args) {
    std::ostringstream os;
    os.precision(17);
    detail::concat_into(os, args...);
    return os.str();
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace musteer
