#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace detlab {

// Error taxonomy mirrored by the CLI exit codes: config -> 2, numeric -> 3, io -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
// Tensor shape contract violations.
struct ShapeError : NumericError {
    using NumericError::NumericError;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void cat_into(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    cat_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string str_cat(const Args&... args) {
    std::ostringstream os;
    detail::cat_into(os, args...);
    return os.str();
}

}  // namespace detlab
