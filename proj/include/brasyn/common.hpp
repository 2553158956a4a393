#pragma once

#include <cstddef>
#include <cstdio>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <sstream>
#include <vector>

namespace brasyn {

// All recoverable failures surface as brasyn::error with a short message.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

template <class... Args>
[[noreturn]] inline void fail(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << args);
    throw error(oss.str());
}

} // namespace detail

#define BRASYN_CHECK(cond, ...)                                             \
    do {                                                                    \
        if (!(cond)) ::brasyn::detail::fail(__VA_ARGS__);                   \
    } while (0)

using Shape = std::vector<std::size_t>;

// fixed 6-decimal formatting used by every CSV writer (byte-stable reports)
inline std::string format_fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream oss;
    oss << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) oss << 'x';
        oss << s[i];
    }
    oss << ']';
    return oss.str();
}

} // namespace brasyn
