#include "anchor/harness.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "anchor/toy_lang.hpp"

namespace anchor {

using ojson = nlohmann::ordered_json;

// --- corpus ---

void Task::validate() const {
  if (id.empty()) throw ArgumentError("task id must be non-empty");
  if (tests.empty() && (!entry_check || entry_check->empty())) {
    throw ArgumentError("task " + id + " has neither tests nor entry checks");
  }
  for (const auto& t : tests) {
    const std::filesystem::path file(t.file);
    if (t.file.empty() || file.is_absolute() || file.filename() != file) {
      throw ArgumentError("task " + id + ": test file must be a plain file name");
    }
  }
}

Task task_from_json(const ojson& j) {
  static const std::set<std::string> known = {"id", "prompt", "tests", "entry_check", "difficulty", "meta"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ArgumentError("unknown task field '" + key + "'");
  }
  Task t;
  t.id = j.at("id").get<std::string>();
  t.prompt = j.at("prompt").get<std::string>();
  if (j.contains("tests")) {
    for (const auto& tj : j["tests"]) {
      TestCommand c;
      c.cmd = tj.at("cmd").get<std::string>();
      if (tj.contains("file")) c.file = tj["file"].get<std::string>();
      t.tests.push_back(std::move(c));
    }
  }
  if (j.contains("entry_check") && !j["entry_check"].is_null()) {
    std::vector<EntryCheck> checks;
    for (const auto& cj : j["entry_check"]) checks.push_back({cj.at("in").get<std::string>(), cj.at("out").get<std::string>()});
    t.entry_check = std::move(checks);
  }
  if (j.contains("difficulty") && !j["difficulty"].is_null()) t.difficulty = j["difficulty"].get<std::string>();
  if (j.contains("meta")) {
    if (!j["meta"].is_object()) throw ArgumentError("meta must be an object");
    t.meta = j["meta"];
  }
  t.validate();
  return t;
}

ojson task_to_json(const Task& task) {
  ojson j;
  j["id"] = task.id;
  j["prompt"] = task.prompt;
  auto tests = ojson::array();
  for (const auto& c : task.tests) tests.push_back(ojson{{"cmd", c.cmd}, {"file", c.file}});
  j["tests"] = std::move(tests);
  if (task.entry_check) {
    auto checks = ojson::array();
    for (const auto& c : *task.entry_check) checks.push_back(ojson{{"in", c.in}, {"out", c.out}});
    j["entry_check"] = std::move(checks);
  } else {
    j["entry_check"] = nullptr;
  }
  j["difficulty"] = task.difficulty ? ojson(*task.difficulty) : ojson(nullptr);
  j["meta"] = task.meta;
  return j;
}

std::vector<Task> parse_corpus(std::istream& in) {
  std::vector<Task> tasks;
  std::set<std::string> ids;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Task t;
    try {
      t = task_from_json(ojson::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ArgumentError("corpus line " + std::to_string(number) + ": " + e.what());
    } catch (const ArgumentError& e) {
      throw ArgumentError("corpus line " + std::to_string(number) + ": " + e.what());
    }
    if (!ids.insert(t.id).second) throw ArgumentError("duplicate task id '" + t.id + "' on line " + std::to_string(number));
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<Task> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open corpus " + path.string());
  return parse_corpus(in);
}

void write_corpus(std::ostream& out, const std::vector<Task>& tasks) {
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
}

// --- sandboxed execution ---

std::filesystem::path sandbox_root() {
  if (const char* dir = std::getenv("ANCHOR_SANDBOX_DIR"); dir && *dir) return dir;
  return std::filesystem::temp_directory_path();
}

namespace {

constexpr std::size_t kMaxCapturedOutput = 64 * 1024;

class Sandbox {
 public:
  Sandbox() {
    std::string pattern = (sandbox_root() / "anchor-sbx-XXXXXX").string();
    if (!::mkdtemp(pattern.data())) throw EnvironmentError("cannot create sandbox under " + sandbox_root().string());
    path_ = pattern;
  }
  ~Sandbox() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  Sandbox(const Sandbox&) = delete;
  Sandbox& operator=(const Sandbox&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

TestOutcome run_command(const TestCommand& test, const std::string& program, int timeout_ms) {
  Sandbox sandbox;
  {
    std::ofstream file(sandbox.path() / test.file, std::ios::binary);
    file << program;
    if (!file) throw EnvironmentError("cannot write program into sandbox");
  }
  const std::string dir = sandbox.path().string();
  const std::string log = (sandbox.path() / ".output").string();

  TestOutcome outcome;
  outcome.name = test.cmd;
  const auto start = std::chrono::steady_clock::now();
  const pid_t pid = ::fork();
  if (pid < 0) throw EnvironmentError("fork failed");
  if (pid == 0) {
    ::setpgid(0, 0);
    if (::chdir(dir.c_str()) != 0) ::_exit(126);
    const int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0600);
    const int devnull = ::open("/dev/null", O_RDONLY);
    if (fd < 0 || devnull < 0) ::_exit(126);
    ::dup2(devnull, 0);
    ::dup2(fd, 1);
    ::dup2(fd, 2);
    ::execl("/bin/sh", "sh", "-c", test.cmd.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::setpgid(pid, pid);

  const auto deadline = start + std::chrono::milliseconds(timeout_ms);
  int status = 0;
  for (;;) {
    const pid_t r = ::waitpid(pid, &status, WNOHANG);
    if (r == pid) break;
    if (std::chrono::steady_clock::now() >= deadline) {
      ::kill(-pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      outcome.timed_out = true;
      break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  // Reap anything the command left behind in its process group.
  ::kill(-pid, SIGKILL);
  outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  outcome.exit_status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  outcome.passed = !outcome.timed_out && WIFEXITED(status) && WEXITSTATUS(status) == 0;

  std::ifstream in(log, std::ios::binary);
  outcome.output.resize(kMaxCapturedOutput);
  in.read(outcome.output.data(), static_cast<std::streamsize>(kMaxCapturedOutput));
  outcome.output.resize(static_cast<std::size_t>(in.gcount()));
  return outcome;
}

}  // namespace

TestResult run_tests(const std::string& program_text, const Task& task, int timeout_ms) {
  if (timeout_ms < 1) throw ArgumentError("timeout must be at least 1 ms");
  TestResult result;
  for (const auto& test : task.tests) result.outcomes.push_back(run_command(test, program_text, timeout_ms));
  if (task.entry_check) {
    for (const auto& check : *task.entry_check) {
      TestOutcome o;
      o.name = "entry_check(" + check.in + ")";
      const auto start = std::chrono::steady_clock::now();
      const auto output = toy::run(program_text, check.in);
      o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      o.output = output.value_or("<error>");
      o.passed = output && *output == check.out;
      o.exit_status = output ? 0 : 1;
      result.outcomes.push_back(std::move(o));
    }
  }
  result.timed_out = std::any_of(result.outcomes.begin(), result.outcomes.end(), [](const auto& o) { return o.timed_out; });
  result.passed = !result.outcomes.empty() && !result.timed_out &&
                  std::all_of(result.outcomes.begin(), result.outcomes.end(), [](const auto& o) { return o.passed; });
  return result;
}

// --- metrics ---

double pass_at_k(const std::vector<std::vector<bool>>& outcomes, int k) {
  if (k < 1) throw ArgumentError("k must be at least 1");
  if (outcomes.empty()) return 0.0;
  std::size_t solved = 0;
  for (const auto& task : outcomes) {
    const auto limit = std::min(task.size(), static_cast<std::size_t>(k));
    if (std::any_of(task.begin(), task.begin() + static_cast<std::ptrdiff_t>(limit), [](bool b) { return b; })) ++solved;
  }
  return static_cast<double>(solved) / static_cast<double>(outcomes.size());
}

std::size_t count_short_tasks(const std::vector<std::vector<bool>>& outcomes, int k) {
  if (k < 1) throw ArgumentError("k must be at least 1");
  return static_cast<std::size_t>(std::count_if(outcomes.begin(), outcomes.end(), [k](const auto& t) {
    return t.size() < static_cast<std::size_t>(k);
  }));
}

std::array<std::vector<std::string>, 3> bucket_by_length(const std::vector<TaskLength>& lengths) {
  if (lengths.size() < 3) throw ArgumentError("bucketing needs at least 3 tasks");
  std::vector<std::size_t> sorted;
  for (const auto& l : lengths) sorted.push_back(l.tokens);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  // Nearest rank: ceil(p * n), 1-based.
  const std::size_t p33 = sorted[(33 * n + 99) / 100 - 1];
  const std::size_t p66 = sorted[(66 * n + 99) / 100 - 1];
  std::array<std::vector<std::string>, 3> out;
  for (const auto& l : lengths) {
    const int b = l.tokens <= p33 ? 0 : l.tokens <= p66 ? 1 : 2;
    out[static_cast<std::size_t>(b)].push_back(l.id);
  }
  return out;
}

// --- evaluation ---

namespace {

struct Generation {
  std::vector<Tokens> candidates;  // best-first
};

Attempt test_candidates(const Generation& gen, const Tokenizer& tokenizer, const Task& task, int timeout_ms) {
  Attempt a;
  std::optional<std::size_t> first_pass;
  for (std::size_t i = 0; i < gen.candidates.size(); ++i) {
    const std::string program = tokenizer.decode(gen.candidates[i]);
    const bool ok = run_tests(program, task, timeout_ms).passed;
    a.candidates.push_back(ok);
    if (ok && !first_pass) first_pass = i;
  }
  const std::size_t shown = first_pass.value_or(0);
  a.passed = first_pass.has_value();
  a.program = tokenizer.decode(gen.candidates[shown]);
  a.tokens = gen.candidates[shown].size();
  return a;
}

Generation generate(const Backend& backend, const ResolvedPrompt& prompt, const AnchoringConfig& config,
                    const EvalOptions& options) {
  Generation gen;
  if (options.beam) {
    for (auto& c : beam_search_anchored(backend, prompt, config, *options.beam, options.limits)) {
      gen.candidates.push_back(std::move(c.tokens));
    }
  } else if (config.mode == AnchorMode::off) {
    gen.candidates.push_back(greedy_decode(backend, prompt.tokens, options.limits).generated());
  } else {
    gen.candidates.push_back(anchored_decode(backend, prompt, config, options.limits).generated());
  }
  return gen;
}

TaskReport evaluate_task(const Backend& backend, const Tokenizer& tokenizer, const Task& task,
                         const EvalOptions& options, std::atomic<std::size_t>& anchored_runs) {
  TaskReport report;
  report.id = task.id;
  report.difficulty = task.difficulty;
  try {
    const ResolvedPrompt prompt = resolve_anchors(parse_markup(task.prompt, options.delimiters), tokenizer);
    report.prompt_tokens = prompt.tokens.size();
    const bool anchorable = options.config.mode != AnchorMode::off && !prompt.resolution.positions.empty();
    AnchoringConfig baseline_config = options.config;
    baseline_config.mode = AnchorMode::off;
    baseline_config.top_k.reset();

    const Attempt* final_attempt = nullptr;
    if (anchorable && options.config.activation == Activation::always) {
      ++anchored_runs;
      report.anchored = test_candidates(generate(backend, prompt, options.config, options), tokenizer, task, options.timeout_ms);
      final_attempt = &*report.anchored;
    } else {
      report.baseline = test_candidates(generate(backend, prompt, baseline_config, options), tokenizer, task, options.timeout_ms);
      final_attempt = &*report.baseline;
      if (!report.baseline->passed && anchorable) {
        ++anchored_runs;
        report.anchored = test_candidates(generate(backend, prompt, options.config, options), tokenizer, task, options.timeout_ms);
        if (report.anchored->passed) final_attempt = &*report.anchored;
      }
    }
    report.final_passed = final_attempt->passed;
    report.final_tokens = final_attempt->tokens;
    report.candidates = final_attempt->candidates;
  } catch (const std::exception& e) {
    report.error = e.what();
    report.final_passed = false;
    report.candidates = {false};
  }
  return report;
}

}  // namespace

EvalReport evaluate(const Backend& backend, const Tokenizer& tokenizer, const std::vector<Task>& corpus,
                    const EvalOptions& options) {
  if (corpus.empty()) throw ArgumentError("empty corpus");
  if (options.workers < 1) throw ArgumentError("workers must be positive");
  options.limits.validate();
  options.config.validate(backend.vocab().size);

  const auto start = std::chrono::steady_clock::now();
  EvalReport report;
  report.tasks.resize(corpus.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> anchored_runs{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < corpus.size(); i = next++) {
      report.tasks[i] = evaluate_task(backend, tokenizer, corpus[i], options, anchored_runs);
    }
  };
  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(options.workers), corpus.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::stable_sort(report.tasks.begin(), report.tasks.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  std::vector<std::vector<bool>> outcomes;
  std::vector<std::vector<bool>> baseline;
  bool have_baseline = true;
  for (const auto& t : report.tasks) {
    outcomes.push_back(t.candidates);
    if (t.baseline) {
      baseline.push_back({t.baseline->candidates.empty() ? false : t.baseline->candidates.front()});
    } else if (t.error) {
      baseline.push_back({false});
    } else {
      have_baseline = false;
    }
  }
  const int max_k = options.beam ? options.beam->width : 1;
  for (int k = 1; k <= max_k; ++k) report.pass_at[k] = pass_at_k(outcomes, k);
  report.pass_at_1 = report.pass_at[1];
  if (have_baseline) report.baseline_pass_at_1 = pass_at_k(baseline, 1);
  report.anchored_runs = anchored_runs.load();

  if (report.tasks.size() >= 3) {
    std::vector<TaskLength> lengths;
    for (const auto& t : report.tasks) lengths.push_back({t.id, t.prompt_tokens});
    const auto groups = bucket_by_length(lengths);
    std::array<BucketSummary, 3> buckets{};
    for (std::size_t b = 0; b < 3; ++b) {
      std::vector<std::vector<bool>> sub;
      for (const auto& id : groups[b]) {
        const auto it = std::lower_bound(report.tasks.begin(), report.tasks.end(), id,
                                         [](const TaskReport& t, const std::string& key) { return t.id < key; });
        sub.push_back(it->candidates);
      }
      buckets[b].count = sub.size();
      buckets[b].pass_at_1 = sub.empty() ? 0.0 : pass_at_k(sub, 1);
    }
    report.buckets = buckets;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// --- report persistence ---

namespace {

ojson attempt_json(const std::optional<Attempt>& a) {
  if (!a) return nullptr;
  ojson j;
  j["passed"] = a->passed;
  j["tokens"] = a->tokens;
  j["program"] = a->program;
  j["candidates"] = a->candidates;
  return j;
}

std::optional<Attempt> attempt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  Attempt a;
  a.passed = j.at("passed").get<bool>();
  a.tokens = j.at("tokens").get<std::size_t>();
  a.program = j.at("program").get<std::string>();
  a.candidates = j.at("candidates").get<std::vector<bool>>();
  return a;
}

constexpr std::array<const char*, 3> kBucketNames = {"short", "medium", "long"};

}  // namespace

std::string EvalReport::to_json() const {
  ojson j;
  auto tasks_json = ojson::array();
  for (const auto& t : tasks) {
    ojson tj;
    tj["id"] = t.id;
    tj["difficulty"] = t.difficulty ? ojson(*t.difficulty) : ojson(nullptr);
    tj["prompt_tokens"] = t.prompt_tokens;
    tj["baseline"] = attempt_json(t.baseline);
    tj["anchored"] = attempt_json(t.anchored);
    tj["final_passed"] = t.final_passed;
    tj["final_tokens"] = t.final_tokens;
    tj["candidates"] = t.candidates;
    tj["error"] = t.error ? ojson(*t.error) : ojson(nullptr);
    tasks_json.push_back(std::move(tj));
  }
  j["tasks"] = std::move(tasks_json);
  ojson agg;
  agg["pass_at_1"] = pass_at_1;
  agg["baseline_pass_at_1"] = baseline_pass_at_1 ? ojson(*baseline_pass_at_1) : ojson(nullptr);
  ojson pk = ojson::object();
  for (const auto& [k, v] : pass_at) pk[std::to_string(k)] = v;
  agg["pass_at_k"] = std::move(pk);
  if (buckets) {
    ojson bj;
    for (std::size_t b = 0; b < 3; ++b) bj[kBucketNames[b]] = ojson{{"count", (*buckets)[b].count}, {"pass_at_1", (*buckets)[b].pass_at_1}};
    agg["buckets"] = std::move(bj);
  } else {
    agg["buckets"] = nullptr;
  }
  agg["anchored_runs"] = anchored_runs;
  agg["wall_seconds"] = wall_seconds;
  j["aggregate"] = std::move(agg);
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EvalReport r;
    for (const auto& tj : j.at("tasks")) {
      TaskReport t;
      t.id = tj.at("id").get<std::string>();
      if (!tj.at("difficulty").is_null()) t.difficulty = tj["difficulty"].get<std::string>();
      t.prompt_tokens = tj.at("prompt_tokens").get<std::size_t>();
      t.baseline = attempt_from(tj.at("baseline"));
      t.anchored = attempt_from(tj.at("anchored"));
      t.final_passed = tj.at("final_passed").get<bool>();
      t.final_tokens = tj.at("final_tokens").get<std::size_t>();
      t.candidates = tj.at("candidates").get<std::vector<bool>>();
      if (!tj.at("error").is_null()) t.error = tj["error"].get<std::string>();
      r.tasks.push_back(std::move(t));
    }
    const auto& agg = j.at("aggregate");
    r.pass_at_1 = agg.at("pass_at_1").get<double>();
    if (!agg.at("baseline_pass_at_1").is_null()) r.baseline_pass_at_1 = agg["baseline_pass_at_1"].get<double>();
    for (const auto& [k, v] : agg.at("pass_at_k").items()) r.pass_at[std::stoi(k)] = v.get<double>();
    if (!agg.at("buckets").is_null()) {
      std::array<BucketSummary, 3> b{};
      for (std::size_t i = 0; i < 3; ++i) {
        b[i].count = agg["buckets"].at(kBucketNames[i]).at("count").get<std::size_t>();
        b[i].pass_at_1 = agg["buckets"].at(kBucketNames[i]).at("pass_at_1").get<double>();
      }
      r.buckets = b;
    }
    r.anchored_runs = agg.at("anchored_runs").get<std::size_t>();
    r.wall_seconds = agg.at("wall_seconds").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("malformed eval report: ") + e.what());
  }
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "id,difficulty,prompt_tokens,baseline_passed,anchored_passed,final_passed,final_tokens\n";
  auto flag = [](const std::optional<Attempt>& a) -> std::string { return a ? (a->passed ? "1" : "0") : ""; };
  for (const auto& t : tasks) {
    out << t.id << ',' << t.difficulty.value_or("") << ',' << t.prompt_tokens << ',' << flag(t.baseline) << ','
        << flag(t.anchored) << ',' << (t.final_passed ? 1 : 0) << ',' << t.final_tokens << '\n';
  }
}

}  // namespace anchor
