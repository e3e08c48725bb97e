#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace anchor {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Logits = Vector<double>;

// Error taxonomy shared by all modules.

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EnvironmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Remote backend failure. `raw()` holds the offending response line, if any.
class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& what, std::string raw = {}, std::string code = {})
      : std::runtime_error(what), raw_(std::move(raw)), code_(std::move(code)) {}

  const std::string& raw() const noexcept { return raw_; }
  /// Protocol error code when the server answered with `"ok":false`.
  const std::string& code() const noexcept { return code_; }

 private:
  std::string raw_;
  std::string code_;
};

}  // namespace anchor
