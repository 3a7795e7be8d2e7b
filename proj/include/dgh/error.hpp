// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dgh {

enum class ErrorKind {
  Shape,       // tensor/graph shape mismatch
  Numeric,     // NaN/Inf encountered
  Usage,       // API misuse (backward before forward, bad index)
  Config,      // invalid configuration value
  Io,          // file not readable/writable
  Checksum,    // file corruption
  Version,     // file format version mismatch
  Unsupported, // model/scheme outside what the toolkit handles
  Training,    // optimization diverged
  Coverage,    // quantization params missing for a covered tensor
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) {
  throw Error(k, msg);
}

}  // namespace dgh
