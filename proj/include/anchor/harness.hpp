#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anchor/decoding.hpp"

namespace anchor {

struct TestCommand {
  std::string cmd;
  std::string file = "solution.txt";
};

struct EntryCheck {
  std::string in;
  std::string out;
};

struct Task {
  std::string id;
  std::string prompt;  // anchor markup
  std::vector<TestCommand> tests;
  std::optional<std::vector<EntryCheck>> entry_check;
  std::optional<std::string> difficulty;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();

  void validate() const;
};

Task task_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json task_to_json(const Task& task);

/// Newline-delimited JSON, one task per line. Blank lines are skipped.
std::vector<Task> parse_corpus(std::istream& in);
std::vector<Task> load_corpus(const std::filesystem::path& path);
void write_corpus(std::ostream& out, const std::vector<Task>& tasks);

struct TestOutcome {
  std::string name;
  bool passed = false;
  bool timed_out = false;
  int exit_status = 0;
  std::string output;
  double seconds = 0.0;
};

struct TestResult {
  bool passed = false;
  bool timed_out = false;
  std::vector<TestOutcome> outcomes;
};

/// Directory under which sandboxes are created ($ANCHOR_SANDBOX_DIR or the
/// system temp directory).
std::filesystem::path sandbox_root();

/// Runs every test command in a fresh sandbox directory holding the program,
/// then every entry check through the toy evaluator. Sandboxes are removed
/// afterwards. Throws EnvironmentError if a sandbox cannot be set up.
TestResult run_tests(const std::string& program_text, const Task& task, int timeout_ms);

/// Fraction of tasks with a passing candidate among their first k.
double pass_at_k(const std::vector<std::vector<bool>>& outcomes, int k);
/// Tasks with fewer than k candidates (counted over what they have).
std::size_t count_short_tasks(const std::vector<std::vector<bool>>& outcomes, int k);

enum class LengthBucket { short_prompt = 0, medium_prompt = 1, long_prompt = 2 };

struct TaskLength {
  std::string id;
  std::size_t tokens = 0;
};

/// Splits at the nearest-rank 33rd and 66th percentiles of prompt length;
/// values equal to a cut point go to the lower bucket.
std::array<std::vector<std::string>, 3> bucket_by_length(const std::vector<TaskLength>& lengths);

struct EvalOptions {
  AnchoringConfig config;
  DecodeLimits limits;
  std::optional<BeamOptions> beam;
  int timeout_ms = 2000;
  int workers = 1;
  Delimiters delimiters;
};

struct Attempt {
  bool passed = false;
  std::size_t tokens = 0;  // generated tokens of the reported program
  std::string program;
  std::vector<bool> candidates;  // per-candidate outcome, best-first
};

struct TaskReport {
  std::string id;
  std::optional<std::string> difficulty;
  std::size_t prompt_tokens = 0;
  std::optional<Attempt> baseline;
  std::optional<Attempt> anchored;
  bool final_passed = false;
  std::size_t final_tokens = 0;
  std::vector<bool> candidates;
  std::optional<std::string> error;
};

struct BucketSummary {
  std::size_t count = 0;
  double pass_at_1 = 0.0;
};

struct EvalReport {
  std::vector<TaskReport> tasks;  // sorted by id
  double pass_at_1 = 0.0;
  std::optional<double> baseline_pass_at_1;
  std::map<int, double> pass_at;  // k -> Pass@k
  std::optional<std::array<BucketSummary, 3>> buckets;
  std::size_t anchored_runs = 0;
  double wall_seconds = 0.0;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  void write_csv(std::ostream& out) const;
};

/// Decodes every task, tests the output and aggregates Pass@k. With
/// on_test_failure activation the anchored decode runs only for tasks whose
/// baseline failed, and its output replaces the baseline only if it passes.
/// Per-task errors are recorded, never thrown.
EvalReport evaluate(const Backend& backend, const Tokenizer& tokenizer, const std::vector<Task>& corpus,
                    const EvalOptions& options);

}  // namespace anchor
