#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "anchor/backend.hpp"
#include "anchor/tuning.hpp"

namespace anchor::cli {

/// Wrong or conflicting flags; maps to exit status 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BackendSelector {
  enum class Kind { toy, remote, synthetic } kind = Kind::toy;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int vocab = 16;
  int dim = 16;
  int layers = 2;
  int heads = 2;
  int positions = 256;
  std::string host;
  int port = 0;
  double peak = 1.25;   // synthetic
  double width = 0.5;   // synthetic

  /// toy:seed=7:vocab=16:dim=16[:layers=2:heads=2:positions=256] |
  /// remote:HOST:PORT | synthetic:peak=1.25[:width=0.5]
  static BackendSelector parse(std::string_view text);
};

/// Synthetic evaluator scoring omega by a tent centred on `peak`.
Evaluator tent_evaluator(double peak, double width);

/// Runs the command line. Returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace anchor::cli
