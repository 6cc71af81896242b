#pragma once

#include <string>
#include <variant>

#include "moekit/tensor.hpp"

namespace moekit {

/// I/O failures carry a code so callers can tell malformed headers,
/// oversized dimensions, and non-finite payloads apart.
class TensorIoError : public std::runtime_error {
 public:
  enum class Code {
    kOpenFailed,
    kBadMagic,
    kBadRank,
    kDimOverflow,
    kTruncated,
    kTrailingBytes,
    kNonFinite,
    kWriteFailed,
  };

  TensorIoError(Code code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

using TensorValue = std::variant<Matrix2D, Tensor3D>;

// File layout: magic "HXT1", u32-le rank (2 or 3), rank x u64-le dims,
// then dims-product f64-le values.  Round trips are bit-exact.
TensorValue tensor_read(const std::string& path);
void tensor_write(const std::string& path, const Matrix2D& m);
void tensor_write(const std::string& path, const Tensor3D& t);
void tensor_write(const std::string& path, const TensorValue& t);

}  // namespace moekit
