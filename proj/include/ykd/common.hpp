#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ykd {

// All contract violations (bad arguments, malformed files, shape
// mismatches) surface as ykd::Error with a human-readable message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string str_cat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
  throw Error(str_cat(args...));
}

}  // namespace ykd

#define YKD_CHECK(cond, ...)            \
  do {                                  \
    if (!(cond)) ::ykd::fail(__VA_ARGS__); \
  } while (0)
