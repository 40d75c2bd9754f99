#pragma once

#include <stdexcept>
#include <string>

namespace glueforge {

/// Raised for every contract violation and I/O failure in the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Usage errors (bad flags, malformed configs). The CLI maps these to exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
    if (!cond) throw Error(what);
}

} // namespace detail
} // namespace glueforge
