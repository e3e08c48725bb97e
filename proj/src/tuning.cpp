#include "anchor/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <random>
#include <set>

#include <json.hpp>

#include "anchor/types.hpp"

namespace anchor {

std::vector<double> default_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back((100.0 + 5.0 * i) / 100.0);
  return grid;
}

void TuneSpec::validate(std::size_t task_count) const {
  if (grid.empty()) throw ArgumentError("empty grid");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw ArgumentError("grid must be strictly ascending");
  }
  if (std::find(grid.begin(), grid.end(), 1.0) == grid.end()) throw ArgumentError("grid must contain 1.0");
  if (folds < 2) throw ArgumentError("at least two folds are required");
  if (static_cast<std::size_t>(folds) > task_count) {
    throw ArgumentError("cannot split " + std::to_string(task_count) + " tasks into " + std::to_string(folds) + " folds");
  }
  if (workers < 1) throw ArgumentError("workers must be positive");
}

std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& task_ids, int folds,
                                                  std::uint64_t seed) {
  if (folds < 1 || static_cast<std::size_t>(folds) > task_ids.size()) {
    throw ArgumentError("cannot split " + std::to_string(task_ids.size()) + " tasks into " + std::to_string(folds) + " folds");
  }
  std::vector<std::string> order = task_ids;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<std::vector<std::string>> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < order.size(); ++i) out[i % out.size()].push_back(std::move(order[i]));
  return out;
}

namespace {

// True when candidate a is preferred over b under the tie rule.
bool closer_to_identity(double a, double b) {
  const double da = std::abs(a - 1.0);
  const double db = std::abs(b - 1.0);
  if (da != db) return da < db;
  return a < b;
}

double nearest_grid_value(const std::vector<double>& grid, double target) {
  double best = grid.front();
  for (double g : grid) {
    const double dg = std::abs(g - target);
    const double db = std::abs(best - target);
    if (dg < db || (dg == db && closer_to_identity(g, best))) best = g;
  }
  return best;
}

}  // namespace

GridScan scan_grid(const Evaluator& evaluator, const std::vector<std::string>& task_ids, const TuneSpec& spec) {
  if (spec.grid.empty()) throw ArgumentError("empty grid");
  GridScan scan;
  if (spec.early_exit || spec.workers == 1) {
    int decreases = 0;
    for (double omega : spec.grid) {
      const double score = evaluator(omega, task_ids);
      if (!scan.scores.empty()) decreases = score < scan.scores.back() ? decreases + 1 : 0;
      scan.evaluated.push_back(omega);
      scan.scores.push_back(score);
      if (spec.early_exit && decreases >= 2) break;
    }
  } else {
    scan.evaluated = spec.grid;
    scan.scores.assign(spec.grid.size(), 0.0);
    for (std::size_t start = 0; start < spec.grid.size(); start += static_cast<std::size_t>(spec.workers)) {
      std::vector<std::future<double>> batch;
      const std::size_t end = std::min(spec.grid.size(), start + static_cast<std::size_t>(spec.workers));
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(std::async(std::launch::async, [&, i] { return evaluator(spec.grid[i], task_ids); }));
      }
      for (std::size_t i = start; i < end; ++i) scan.scores[i] = batch[i - start].get();
    }
  }
  scan.best_omega = scan.evaluated.front();
  scan.best_score = scan.scores.front();
  for (std::size_t i = 1; i < scan.scores.size(); ++i) {
    const double s = scan.scores[i];
    if (s > scan.best_score || (s == scan.best_score && closer_to_identity(scan.evaluated[i], scan.best_omega))) {
      scan.best_score = s;
      scan.best_omega = scan.evaluated[i];
    }
  }
  return scan;
}

TuneReport grid_search(const Evaluator& evaluator, const std::vector<std::string>& task_ids, const TuneSpec& spec) {
  spec.validate(task_ids.size());
  const auto folds = kfold_split(task_ids, spec.folds, spec.seed);

  TuneReport report;
  report.grid = spec.grid;
  report.seed = spec.seed;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<std::string> rest;
    for (std::size_t g = 0; g < folds.size(); ++g) {
      if (g != f) rest.insert(rest.end(), folds[g].begin(), folds[g].end());
    }
    const auto& tune_set = spec.tune_on_single_fold ? folds[f] : rest;
    const auto& holdout = spec.tune_on_single_fold ? rest : folds[f];
    const GridScan scan = scan_grid(evaluator, tune_set, spec);
    report.folds.push_back({static_cast<int>(f), scan.best_omega, scan.best_score, evaluator(scan.best_omega, holdout)});
  }

  double sum = 0.0;
  for (const auto& f : report.folds) sum += f.best_omega;
  report.mean_best = sum / static_cast<double>(report.folds.size());
  double sq = 0.0;
  for (const auto& f : report.folds) sq += (f.best_omega - report.mean_best) * (f.best_omega - report.mean_best);
  report.variance = sq / static_cast<double>(report.folds.size());
  report.recommended = nearest_grid_value(spec.grid, report.mean_best);
  return report;
}

std::string TuneReport::to_json() const {
  nlohmann::ordered_json j;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& f : folds) {
    nlohmann::ordered_json fj;
    fj["fold"] = f.fold;
    fj["best_omega"] = f.best_omega;
    fj["holdout_pass1"] = f.holdout_pass1;
    arr.push_back(std::move(fj));
  }
  j["folds"] = std::move(arr);
  j["recommended"] = recommended;
  j["variance"] = variance;
  j["grid"] = grid;
  j["seed"] = seed;
  return j.dump();
}

TuneReport TuneReport::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TuneReport r;
    for (const auto& fj : j.at("folds")) {
      r.folds.push_back({fj.at("fold").get<int>(), fj.at("best_omega").get<double>(), 0.0,
                         fj.at("holdout_pass1").get<double>()});
    }
    r.recommended = j.at("recommended").get<double>();
    r.variance = j.at("variance").get<double>();
    r.grid = j.at("grid").get<std::vector<double>>();
    r.seed = j.at("seed").get<std::uint64_t>();
    double sum = 0.0;
    for (const auto& f : r.folds) sum += f.best_omega;
    r.mean_best = r.folds.empty() ? 0.0 : sum / static_cast<double>(r.folds.size());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("malformed tune report: ") + e.what());
  }
}

}  // namespace anchor
