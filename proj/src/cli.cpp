#include "anchor/cli.hpp"

#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "anchor/analysis.hpp"
#include "anchor/anchoring.hpp"
#include "anchor/decoding.hpp"
#include "anchor/harness.hpp"
#include "anchor/toy_model.hpp"
#include "anchor/tuning.hpp"
#include "anchor/wire.hpp"

#ifndef ANCHOR_VERSION
#define ANCHOR_VERSION "0.0.0"
#endif

namespace anchor::cli {

namespace {

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw UsageError("invalid " + std::string(what) + " '" + std::string(text) + "'");
  }
  return value;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

}  // namespace

BackendSelector BackendSelector::parse(std::string_view text) {
  const auto parts = split(text, ':');
  BackendSelector s;
  if (parts[0] == "remote") {
    if (parts.size() != 3) throw UsageError("remote backend must be remote:HOST:PORT");
    s.kind = Kind::remote;
    s.host = std::string(parts[1]);
    s.port = parse_number<int>(parts[2], "port");
    return s;
  }
  if (parts[0] == "toy") {
    s.kind = Kind::toy;
  } else if (parts[0] == "synthetic") {
    s.kind = Kind::synthetic;
  } else {
    throw UsageError("unknown backend '" + std::string(parts[0]) + "' (expected toy, remote or synthetic)");
  }
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string_view::npos) throw UsageError("backend option '" + std::string(parts[i]) + "' must be key=value");
    const auto key = parts[i].substr(0, eq);
    const auto value = parts[i].substr(eq + 1);
    if (s.kind == Kind::toy && key == "seed") {
      s.seed = parse_number<std::uint64_t>(value, "seed");
      s.seed_given = true;
    } else if (s.kind == Kind::toy && key == "vocab") {
      s.vocab = parse_number<int>(value, "vocab");
    } else if (s.kind == Kind::toy && key == "dim") {
      s.dim = parse_number<int>(value, "dim");
    } else if (s.kind == Kind::toy && key == "layers") {
      s.layers = parse_number<int>(value, "layers");
    } else if (s.kind == Kind::toy && key == "heads") {
      s.heads = parse_number<int>(value, "heads");
    } else if (s.kind == Kind::toy && key == "positions") {
      s.positions = parse_number<int>(value, "positions");
    } else if (s.kind == Kind::synthetic && key == "peak") {
      s.peak = parse_number<double>(value, "peak");
    } else if (s.kind == Kind::synthetic && key == "width") {
      s.width = parse_number<double>(value, "width");
    } else {
      throw UsageError("unknown backend option '" + std::string(key) + "'");
    }
  }
  return s;
}

Evaluator tent_evaluator(double peak, double width) {
  return [peak, width](double omega, const std::vector<std::string>&) {
    return std::max(0.0, 1.0 - std::abs(omega - peak) / width);
  };
}

namespace {

struct LoadedBackend {
  std::unique_ptr<Backend> backend;
  std::unique_ptr<Tokenizer> tokenizer;
};

LoadedBackend load_backend(const BackendSelector& sel, std::uint64_t default_seed) {
  LoadedBackend out;
  if (sel.kind == BackendSelector::Kind::synthetic) {
    throw UsageError("the synthetic backend is only available to `tune`");
  }
  if (sel.kind == BackendSelector::Kind::remote) {
    auto remote = wire::RemoteBackend::connect({sel.host, sel.port});
    // Remote servers are assumed to use the default toy vocabulary layout.
    VocabSpec vocab = make_default_vocab(remote->vocab().size);
    vocab.mask_id = remote->vocab().mask_id;
    vocab.stop_ids = remote->vocab().stop_ids;
    out.tokenizer = std::make_unique<Tokenizer>(vocab);
    out.backend = std::move(remote);
    return out;
  }
  ToyModelConfig config;
  config.seed = sel.seed_given ? sel.seed : default_seed;
  try {
    config.vocab = make_default_vocab(sel.vocab);
  } catch (const ArgumentError& e) {
    throw UsageError(e.what());
  }
  config.embed_dim = sel.dim;
  config.n_layers = sel.layers;
  config.n_heads = sel.heads;
  config.max_positions = sel.positions;
  try {
    config.validate();
  } catch (const ArgumentError& e) {
    throw UsageError(std::string("invalid toy backend: ") + e.what());
  }
  out.tokenizer = std::make_unique<Tokenizer>(config.vocab);
  out.backend = std::make_unique<ToyTransformer>(std::move(config));
  return out;
}

struct AnchorFlags {
  std::string mode;
  std::optional<double> omega;
  std::optional<double> lambda;
  std::optional<int> top_k;
  std::string activation;
  std::string open = Delimiters{}.open;
  std::string close = Delimiters{}.close;

  void add_to(CLI::App& app, bool with_activation) {
    app.add_option("--mode", mode, "Anchoring mode")->check(CLI::IsMember({"off", "fixed", "confidence"}));
    app.add_option("--omega", omega, "Anchoring strength (fixed mode)");
    app.add_option("--lambda", lambda, "Confidence coefficient (confidence mode)");
    app.add_option("--top-k", top_k, "Combine only the top-k original logits");
    if (with_activation) {
      app.add_option("--activation", activation, "When to anchor")->check(CLI::IsMember({"always", "on_test_failure"}));
    }
    app.add_option("--anchor-open", open, "Opening anchor delimiter");
    app.add_option("--anchor-close", close, "Closing anchor delimiter");
  }

  AnchoringConfig build(AnchorMode fallback) const {
    AnchoringConfig c;
    if (mode.empty()) {
      if (omega && lambda) throw UsageError("--omega conflicts with --lambda");
      c.mode = omega ? AnchorMode::fixed : lambda ? AnchorMode::confidence : fallback;
    } else {
      c.mode = mode == "off" ? AnchorMode::off : mode == "fixed" ? AnchorMode::fixed : AnchorMode::confidence;
    }
    switch (c.mode) {
      case AnchorMode::off:
        if (omega) throw UsageError("--mode off conflicts with --omega");
        if (lambda) throw UsageError("--mode off conflicts with --lambda");
        if (top_k) throw UsageError("--mode off conflicts with --top-k");
        break;
      case AnchorMode::fixed:
        if (lambda) throw UsageError("--mode fixed conflicts with --lambda");
        if (omega && !std::isfinite(*omega)) throw UsageError("--omega must be finite");
        c.omega = omega.value_or(preset_strength());
        break;
      case AnchorMode::confidence:
        if (omega) throw UsageError("--mode confidence conflicts with --omega");
        if (top_k) throw UsageError("--mode confidence conflicts with --top-k");
        if (!lambda) throw UsageError("--mode confidence requires --lambda");
        if (!(*lambda >= 0.0)) throw UsageError("--lambda must be nonnegative");
        c.lambda = *lambda;
        break;
    }
    c.top_k = top_k;
    if (activation == "always") c.activation = Activation::always;
    return c;
  }

  Delimiters delimiters() const { return {open, close}; }
};

struct BeamFlags {
  std::optional<int> width;
  std::string strategy = "pruned";

  void add_to(CLI::App& app) {
    app.add_option("--beam", width, "Beam width (enables beam search)");
    app.add_option("--beam-strategy", strategy, "pruned or exact")->check(CLI::IsMember({"pruned", "exact"}));
  }

  std::optional<BeamOptions> build() const {
    if (!width) return std::nullopt;
    if (*width < 1) throw UsageError("--beam must be at least 1");
    BeamOptions b;
    b.width = *width;
    b.strategy = strategy == "exact" ? BeamStrategy::exact : BeamStrategy::pruned;
    return b;
  }
};

const char* mode_name(AnchorMode m) {
  switch (m) {
    case AnchorMode::off:
      return "off";
    case AnchorMode::fixed:
      return "fixed";
    case AnchorMode::confidence:
      return "confidence";
  }
  return "off";
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  out << data;
  if (!out) throw std::runtime_error("cannot write " + path);
}

std::string join_tokens(const Tokens& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) s += (i ? " " : "") + std::to_string(tokens[i]);
  return s;
}

std::vector<double> parse_grid(const std::string& text) {
  if (text.find(':') != std::string::npos) {
    const auto parts = split(text, ':');
    if (parts.size() != 3) throw UsageError("--grid must be START:STOP:STEP or a comma list");
    const double lo = parse_number<double>(parts[0], "grid start");
    const double hi = parse_number<double>(parts[1], "grid stop");
    const double step = parse_number<double>(parts[2], "grid step");
    if (!(step > 0.0) || hi < lo) throw UsageError("invalid grid range");
    std::vector<double> grid;
    const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
    // Round to 1e-9 so that lattice points such as 1.0 come out exact.
    for (long i = 0; i <= n; ++i) grid.push_back(std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9);
    return grid;
  }
  std::vector<double> grid;
  for (auto part : split(text, ',')) grid.push_back(parse_number<double>(part, "grid value"));
  return grid;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Anchored decoding toolkit", "anchor"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("anchor ") + ANCHOR_VERSION);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every source of randomness");

  // generate
  auto* gen = app.add_subcommand("generate", "Decode a continuation of a prompt");
  std::string gen_backend;
  std::string gen_prompt;
  std::string gen_trace;
  int gen_max_new = 64;
  bool gen_attention = false;
  bool gen_json = false;
  AnchorFlags gen_anchor;
  BeamFlags gen_beam;
  gen->add_option("--backend", gen_backend, "Backend selector")->required();
  gen->add_option("--prompt", gen_prompt, "Prompt with anchored spans in delimiters")->required();
  gen->add_option("--max-new", gen_max_new, "Maximum new tokens");
  gen->add_option("--trace", gen_trace, "Write a per-step trace (NDJSON)");
  gen->add_flag("--attention", gen_attention, "Capture attention rows");
  gen->add_flag("--json", gen_json, "Machine-readable output");
  gen_anchor.add_to(*gen, false);
  gen_beam.add_to(*gen);

  // tune
  auto* tune = app.add_subcommand("tune", "Grid-search the anchoring strength");
  std::string tune_backend;
  std::string tune_corpus;
  std::string tune_grid;
  std::string tune_out;
  int tune_folds = 5;
  int tune_max_new = 32;
  int tune_timeout = 2000;
  int tune_workers = 1;
  bool tune_early = false;
  bool tune_flip = false;
  bool tune_json = false;
  tune->add_option("--backend", tune_backend, "Backend selector")->required();
  tune->add_option("--corpus", tune_corpus, "Task corpus (NDJSON)")->required();
  tune->add_option("--grid", tune_grid, "START:STOP:STEP or comma list");
  tune->add_option("--folds", tune_folds, "Number of folds");
  tune->add_option("--max-new", tune_max_new, "Maximum new tokens");
  tune->add_option("--timeout-ms", tune_timeout, "Per-test timeout");
  tune->add_option("--workers", tune_workers, "Concurrent evaluations");
  tune->add_option("--out", tune_out, "Write the report JSON here");
  tune->add_flag("--early-exit", tune_early, "Stop after two consecutive decreases");
  tune->add_flag("--flip-folds", tune_flip, "Tune on k-1 folds, evaluate on one");
  tune->add_flag("--json", tune_json, "Machine-readable output");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a corpus");
  std::string eval_backend;
  std::string eval_corpus;
  std::string eval_out;
  std::string eval_csv;
  int eval_max_new = 64;
  int eval_timeout = 2000;
  int eval_workers = 1;
  bool eval_json = false;
  AnchorFlags eval_anchor;
  BeamFlags eval_beam;
  eval->add_option("--backend", eval_backend, "Backend selector")->required();
  eval->add_option("--corpus", eval_corpus, "Task corpus (NDJSON)")->required();
  eval->add_option("--out", eval_out, "Write the report JSON here");
  eval->add_option("--csv", eval_csv, "Write a CSV summary here");
  eval->add_option("--max-new", eval_max_new, "Maximum new tokens");
  eval->add_option("--timeout-ms", eval_timeout, "Per-test timeout");
  eval->add_option("--workers", eval_workers, "Concurrent tasks");
  eval->add_flag("--json", eval_json, "Machine-readable output");
  eval_anchor.add_to(*eval, true);
  eval_beam.add_to(*eval);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Attention and length instruments");
  analyze->require_subcommand(1);
  auto* dilution = analyze->add_subcommand("dilution", "Attention-to-prompt ratio per step from a trace");
  std::string dil_trace;
  std::string dil_out;
  dilution->add_option("--trace", dil_trace, "Trace file from generate --attention --trace")->required();
  dilution->add_option("--out", dil_out, "CSV output (default stdout)");
  auto* gradients = analyze->add_subcommand("gradients", "Finite-difference input sensitivity");
  std::string grad_backend;
  std::string grad_prompt;
  std::string grad_out;
  double grad_delta = kGradientStep;
  gradients->add_option("--backend", grad_backend, "Toy backend selector")->required();
  gradients->add_option("--prompt", grad_prompt, "Prompt text")->required();
  gradients->add_option("--delta", grad_delta, "Central-difference step");
  gradients->add_option("--out", grad_out, "CSV output (default stdout)");
  auto* lengths = analyze->add_subcommand("lengths", "Generated length by outcome and difficulty");
  std::string len_report;
  std::string len_out;
  lengths->add_option("--report", len_report, "Report from eval --out")->required();
  lengths->add_option("--out", len_out, "CSV output (default stdout)");

  // serve
  auto* srv = app.add_subcommand("serve", "Serve a toy backend over the logit wire protocol");
  std::string srv_backend;
  std::string srv_listen = "127.0.0.1:7070";
  bool srv_stdio = false;
  srv->add_option("--backend", srv_backend, "Toy backend selector")->required();
  srv->add_option("--listen", srv_listen, "HOST:PORT");
  srv->add_flag("--stdio", srv_stdio, "Serve on standard input/output");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  auto emit = [&](const std::string& path, const std::string& data) {
    if (path.empty()) {
      out << data;
    } else {
      write_file(path, data);
    }
  };

  try {
    if (gen->parsed()) {
      const AnchoringConfig config = gen_anchor.build(AnchorMode::off);
      const auto beam = gen_beam.build();
      auto loaded = load_backend(BackendSelector::parse(gen_backend), seed);
      const PromptSpec prompt = parse_markup(gen_prompt, gen_anchor.delimiters());
      const ResolvedPrompt resolved = resolve_anchors(prompt, *loaded.tokenizer);
      const DecodeLimits limits{gen_max_new};

      if (beam) {
        if (!gen_trace.empty()) throw UsageError("--trace conflicts with --beam");
        const auto candidates = beam_search_anchored(*loaded.backend, resolved, config, *beam, limits);
        nlohmann::ordered_json j;
        j["mode"] = mode_name(config.mode);
        auto arr = nlohmann::ordered_json::array();
        for (const auto& c : candidates) {
          arr.push_back({{"tokens", c.tokens}, {"text", loaded.tokenizer->decode(c.tokens)}, {"score", c.score}, {"finished", c.finished}});
        }
        j["candidates"] = std::move(arr);
        if (gen_json) {
          out << j.dump() << '\n';
        } else {
          for (std::size_t i = 0; i < candidates.size(); ++i) {
            out << "#" << i + 1 << " score=" << wire::format_decimal(candidates[i].score) << " tokens: " << join_tokens(candidates[i].tokens)
                << "\n   text: " << nlohmann::json(loaded.tokenizer->decode(candidates[i].tokens)).dump() << '\n';
          }
        }
        return 0;
      }

      const DecodeOptions options{.want_attention = gen_attention};
      const GenerationTrace trace = config.mode == AnchorMode::off
                                        ? greedy_decode(*loaded.backend, resolved.tokens, limits, options)
                                        : anchored_decode(*loaded.backend, resolved, config, limits, options);
      if (!gen_trace.empty()) {
        std::ofstream tf(gen_trace);
        write_trace_ndjson(tf, trace);
        if (!tf) throw std::runtime_error("cannot write " + gen_trace);
      }
      const Tokens tokens = trace.generated();
      const char* finished = trace.finished == FinishReason::stop_token ? "stop_token" : "length_limit";
      if (gen_json) {
        nlohmann::ordered_json j;
        j["mode"] = mode_name(config.mode);
        j["tokens"] = tokens;
        j["text"] = loaded.tokenizer->decode(tokens);
        j["finished"] = finished;
        j["steps"] = trace.steps.size();
        out << j.dump() << '\n';
      } else {
        out << "tokens: " << join_tokens(tokens) << '\n'
            << "text: " << nlohmann::json(loaded.tokenizer->decode(tokens)).dump() << '\n'
            << "finished: " << finished << '\n'
            << "steps: " << trace.steps.size() << '\n';
      }
      return 0;
    }

    if (tune->parsed()) {
      TuneSpec spec;
      if (!tune_grid.empty()) spec.grid = parse_grid(tune_grid);
      spec.folds = tune_folds;
      spec.seed = seed;
      spec.early_exit = tune_early;
      spec.tune_on_single_fold = !tune_flip;
      spec.workers = tune_workers;
      const auto corpus = load_corpus(tune_corpus);
      std::vector<std::string> ids;
      for (const auto& t : corpus) ids.push_back(t.id);
      try {
        spec.validate(ids.size());
      } catch (const ArgumentError& e) {
        throw UsageError(e.what());
      }

      const auto selector = BackendSelector::parse(tune_backend);
      TuneReport report;
      if (selector.kind == BackendSelector::Kind::synthetic) {
        report = grid_search(tent_evaluator(selector.peak, selector.width), ids, spec);
      } else {
        auto loaded = load_backend(selector, seed);
        EvalOptions options;
        options.config.mode = AnchorMode::fixed;
        options.config.activation = Activation::always;
        options.limits.max_new_tokens = tune_max_new;
        options.timeout_ms = tune_timeout;
        const Evaluator evaluator = [&](double omega, const std::vector<std::string>& subset) {
          std::vector<Task> tasks;
          for (const auto& t : corpus) {
            if (std::find(subset.begin(), subset.end(), t.id) != subset.end()) tasks.push_back(t);
          }
          EvalOptions o = options;
          o.config.omega = omega;
          return evaluate(*loaded.backend, *loaded.tokenizer, tasks, o).pass_at_1;
        };
        report = grid_search(evaluator, ids, spec);
      }
      if (!tune_out.empty()) write_file(tune_out, report.to_json() + "\n");
      if (tune_json) {
        out << report.to_json() << '\n';
      } else {
        for (const auto& f : report.folds) {
          out << "fold " << f.fold << ": best_omega=" << wire::format_decimal(f.best_omega)
              << " holdout_pass1=" << wire::format_decimal(f.holdout_pass1) << '\n';
        }
        out << "variance: " << wire::format_decimal(report.variance) << '\n'
            << "recommended: " << wire::format_decimal(report.recommended) << '\n';
      }
      return 0;
    }

    if (eval->parsed()) {
      EvalOptions options;
      options.config = eval_anchor.build(AnchorMode::fixed);
      options.beam = eval_beam.build();
      options.limits.max_new_tokens = eval_max_new;
      options.timeout_ms = eval_timeout;
      options.workers = eval_workers;
      options.delimiters = eval_anchor.delimiters();
      if (options.timeout_ms < 1) throw UsageError("--timeout-ms must be at least 1");
      if (options.workers < 1) throw UsageError("--workers must be at least 1");
      auto loaded = load_backend(BackendSelector::parse(eval_backend), seed);
      const auto corpus = load_corpus(eval_corpus);
      const EvalReport report = evaluate(*loaded.backend, *loaded.tokenizer, corpus, options);
      if (!eval_out.empty()) write_file(eval_out, report.to_json() + "\n");
      if (!eval_csv.empty()) {
        std::ostringstream csv;
        report.write_csv(csv);
        write_file(eval_csv, csv.str());
      }
      if (eval_json) {
        out << nlohmann::json::parse(report.to_json()).dump() << '\n';
      } else {
        out << "tasks: " << report.tasks.size() << '\n';
        for (const auto& [k, v] : report.pass_at) out << "pass@" << k << ": " << wire::format_decimal(v) << '\n';
        if (report.baseline_pass_at_1) out << "baseline pass@1: " << wire::format_decimal(*report.baseline_pass_at_1) << '\n';
        out << "anchored runs: " << report.anchored_runs << '\n';
      }
      return 0;
    }

    if (dilution->parsed()) {
      std::ifstream in(dil_trace);
      if (!in) throw std::runtime_error("cannot open " + dil_trace);
      std::ostringstream csv;
      write_dilution_csv(csv, read_trace_alphas(in));
      emit(dil_out, csv.str());
      return 0;
    }

    if (gradients->parsed()) {
      const auto selector = BackendSelector::parse(grad_backend);
      if (selector.kind != BackendSelector::Kind::toy) throw UnsupportedError("gradients need a toy backend");
      auto loaded = load_backend(selector, seed);
      const Tokens context = loaded.tokenizer->encode(parse_markup(grad_prompt).text());
      const auto scores = gradient_attention(*loaded.backend, context, grad_delta);
      std::ostringstream csv;
      csv << "position,token,score\n";
      for (std::size_t i = 0; i < scores.size(); ++i) {
        csv << i << ',' << context[i] << ',' << wire::format_decimal(scores[i]) << '\n';
      }
      emit(grad_out, csv.str());
      return 0;
    }

    if (lengths->parsed()) {
      const EvalReport report = EvalReport::from_json(read_file(len_report));
      std::vector<LengthSample> samples;
      for (const auto& t : report.tasks) samples.push_back({t.final_tokens, t.final_passed, t.difficulty.value_or("all")});
      std::ostringstream csv;
      write_length_csv(csv, length_stats(samples));
      emit(len_out, csv.str());
      return 0;
    }

    if (srv->parsed()) {
      const auto selector = BackendSelector::parse(srv_backend);
      if (selector.kind != BackendSelector::Kind::toy) throw UsageError("serve needs a toy backend");
      auto loaded = load_backend(selector, seed);
      if (srv_stdio) {
        wire::serve_stream(*loaded.backend, STDIN_FILENO, STDOUT_FILENO);
        return 0;
      }
      sigset_t signals;
      sigemptyset(&signals);
      sigaddset(&signals, SIGINT);
      sigaddset(&signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &signals, nullptr);
      auto server = wire::serve(*loaded.backend, wire::Endpoint::parse(srv_listen));
      out << "listening on " << wire::Endpoint::parse(srv_listen).host << ':' << server->port() << std::endl;
      int received = 0;
      sigwait(&signals, &received);
      server->stop();
      return 0;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace anchor::cli
