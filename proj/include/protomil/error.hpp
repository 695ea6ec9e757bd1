#pragma once

#include <stdexcept>
#include <string>

namespace protomil {

// Every failure surfaced by the library is a protomil::Error carrying a
// human-readable message; the CLI prints it and exits nonzero.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace protomil
