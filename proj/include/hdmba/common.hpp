// Shared error types, shape helpers, and the deterministic-mode switch.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hdmba {

using Shape = std::vector<int64_t>;

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Operand shapes incompatible with an operation.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Invalid argument values (bad config, out-of-range index, non-positive delta...).
class ValueError : public Error {
public:
  using Error::Error;
};

// File I/O failures; message always names the path.
class IoError : public Error {
public:
  using Error::Error;
};

// Non-finite values where finite ones are required (training divergence).
class NumericError : public Error {
public:
  using Error::Error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

// Deterministic mode is the default; HDMBA_DETERMINISTIC=0 permits
// non-bitwise-reproducible fast paths (currently: the chunked scan during
// no-grad inference).
inline bool deterministic_mode() {
  static const bool det = [] {
    const char* v = std::getenv("HDMBA_DETERMINISTIC");
    return v == nullptr || std::string(v) != "0";
  }();
  return det;
}

}  // namespace hdmba
