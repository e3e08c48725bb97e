#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace anchor {

/// 1.00, 1.05, ..., 2.00.
std::vector<double> default_grid();

struct TuneSpec {
  std::vector<double> grid = default_grid();
  int folds = 5;
  std::uint64_t seed = 0;
  /// Stop ascending the grid after two consecutive strict score decreases.
  bool early_exit = false;
  /// Tune on one fold and evaluate on the rest (false: the usual way round).
  bool tune_on_single_fold = true;
  /// Concurrent evaluator calls when early exit is off.
  int workers = 1;

  void validate(std::size_t task_count) const;
};

/// Pass@1 of anchored decoding at strength omega over the given tasks.
using Evaluator = std::function<double(double omega, const std::vector<std::string>& task_ids)>;

struct FoldResult {
  int fold = 0;
  double best_omega = 1.0;
  double tune_score = 0.0;
  double holdout_pass1 = 0.0;
};

struct TuneReport {
  std::vector<FoldResult> folds;
  double mean_best = 0.0;
  double variance = 0.0;
  double recommended = 1.0;
  std::vector<double> grid;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static TuneReport from_json(const std::string& text);
};

/// Deterministic shuffle, then round-robin assignment: fold sizes differ by
/// at most one.
std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& task_ids, int folds,
                                                  std::uint64_t seed);

struct GridScan {
  double best_omega = 1.0;
  double best_score = 0.0;
  std::vector<double> evaluated;  // grid prefix actually scored
  std::vector<double> scores;
};

/// Scores ascending grid values; ties on the best score go to the value
/// closest to 1.0, then to the smaller value.
GridScan scan_grid(const Evaluator& evaluator, const std::vector<std::string>& task_ids, const TuneSpec& spec);

TuneReport grid_search(const Evaluator& evaluator, const std::vector<std::string>& task_ids, const TuneSpec& spec);

}  // namespace anchor
