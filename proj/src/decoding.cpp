#include "anchor/decoding.hpp"

#include <algorithm>
#include <chrono>
#include <future>
#include <queue>

#include "anchor/kernels.hpp"

namespace anchor {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

TokenId argmax_of(const Scores& s) {
  if (s.dense()) return static_cast<TokenId>(kernels::argmax(s.values));
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    const double v = s.values[static_cast<Eigen::Index>(i)];
    const double b = s.values[static_cast<Eigen::Index>(best)];
    if (v > b || (v == b && s.ids[i] < s.ids[best])) best = i;
  }
  return s.ids[best];
}

Scores gather(const Logits& dense, const std::vector<TokenId>& ids) {
  Scores out;
  out.ids = ids;
  out.values.resize(static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) out.values[static_cast<Eigen::Index>(i)] = dense[ids[i]];
  return out;
}

void check_prompt(const Backend& backend, const Tokens& prompt, const DecodeLimits& limits) {
  limits.validate();
  if (prompt.empty()) throw ArgumentError("empty prompt");
  if (static_cast<int>(prompt.size()) > backend.max_positions()) {
    throw CapacityError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_positions " +
                        std::to_string(backend.max_positions()));
  }
}

class Decoder {
 public:
  Decoder(const Backend& backend, const DecodeLimits& limits) : backend_(backend), limits_(limits) {}

  template <typename Step>
  GenerationTrace run(GenerationTrace trace, Step&& step) {
    Tokens context = trace.prompt_tokens;
    trace.finished = FinishReason::length_limit;
    try {
      while (static_cast<int>(trace.steps.size()) < limits_.max_new_tokens &&
             static_cast<int>(context.size()) <= backend_.max_positions()) {
        const auto start = Clock::now();
        TraceStep s = step(context);
        s.wall_seconds = seconds_since(start);
        context.push_back(s.token);
        const bool stop = backend_.vocab().is_stop(s.token);
        trace.steps.push_back(std::move(s));
        if (stop) {
          trace.finished = FinishReason::stop_token;
          break;
        }
      }
    } catch (const TransportError& e) {
      throw DecodeAborted(e, std::move(trace));
    }
    return trace;
  }

 private:
  const Backend& backend_;
  DecodeLimits limits_;
};

}  // namespace

void DecodeLimits::validate() const {
  if (max_new_tokens < 1) throw ArgumentError("max_new_tokens must be at least 1");
}

Tokens GenerationTrace::generated() const {
  Tokens out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.token);
  return out;
}

Tokens GenerationTrace::context() const {
  Tokens out = prompt_tokens;
  for (const auto& s : steps) out.push_back(s.token);
  return out;
}

GenerationTrace greedy_decode(const Backend& backend, const Tokens& prompt_tokens, const DecodeLimits& limits,
                              const DecodeOptions& options) {
  check_prompt(backend, prompt_tokens, limits);
  GenerationTrace trace;
  trace.prompt_tokens = prompt_tokens;
  trace.resolution.prompt_length = static_cast<int>(prompt_tokens.size());

  const bool store_dense = backend.vocab().size <= kDenseStorageLimit;
  return Decoder(backend, limits).run(std::move(trace), [&](const Tokens& context) {
    ScoreResult r = backend.score({.tokens = context, .want_attention = options.want_attention});
    TraceStep step;
    step.token = argmax_of(r.logits);
    step.score.original = store_dense ? std::move(r.logits) : top_k(r.logits.values, kDefaultStorageTopK);
    step.score.attention = std::move(r.attention);
    return step;
  });
}

GenerationTrace anchored_decode(const Backend& backend, const ResolvedPrompt& prompt,
                                const AnchoringConfig& config, const DecodeLimits& limits,
                                const DecodeOptions& options) {
  check_prompt(backend, prompt.tokens, limits);
  config.validate(backend.vocab().size);
  if (config.mode == AnchorMode::off) throw ArgumentError("anchored_decode requires an anchoring mode");
  if (prompt.resolution.positions.empty()) throw ArgumentError("prompt has no anchored tokens");
  // Validates positions against the prompt region.
  (void)build_masked_context(prompt.tokens, prompt.resolution, backend.vocab().mask_id);

  GenerationTrace trace;
  trace.prompt_tokens = prompt.tokens;
  trace.resolution = prompt.resolution;
  const Tokens& mask_positions = prompt.resolution.positions;
  const int storage_k = config.top_k.value_or(
      backend.vocab().size <= kDenseStorageLimit ? 0 : std::min(kDefaultStorageTopK, backend.vocab().size));

  return Decoder(backend, limits).run(std::move(trace), [&](const Tokens& context) {
    const ScoreRequest original_req{.tokens = context, .want_attention = options.want_attention, .top_k = config.top_k};
    const ScoreRequest masked_req{.tokens = context, .mask_positions = mask_positions};
    ScoreResult original;
    ScoreResult masked;
    if (options.parallel_passes) {
      auto pending = std::async(std::launch::async, [&] { return backend.score(masked_req); });
      original = backend.score(original_req);
      masked = pending.get();
    } else {
      original = backend.score(original_req);
      masked = backend.score(masked_req);
    }

    TraceStep step;
    if (config.top_k) {
      const Logits& m = masked.logits.values;
      Scores aug = combine_truncated(original.logits, [&](TokenId id) { return m[id]; }, config.omega, *config.top_k);
      step.token = argmax_of(aug);
      step.score.masked = gather(m, original.logits.ids);
      step.score.augmented = std::move(aug);
      step.score.original = std::move(original.logits);
    } else {
      Scores aug{.ids = {}, .values = augment(original.logits.values, masked.logits.values, config)};
      step.token = argmax_of(aug);
      if (storage_k > 0) {
        Scores kept = top_k(original.logits.values, storage_k);
        step.score.masked = gather(masked.logits.values, kept.ids);
        step.score.augmented = gather(aug.values, kept.ids);
        step.score.original = std::move(kept);
      } else {
        step.score.original = std::move(original.logits);
        step.score.masked = std::move(masked.logits);
        step.score.augmented = std::move(aug);
      }
    }
    step.score.attention = std::move(original.attention);
    return step;
  });
}

GenerationTrace anchored_decode(const Backend& backend, const PromptSpec& prompt, const Tokenizer& tokenizer,
                                const AnchoringConfig& config, const DecodeLimits& limits,
                                const DecodeOptions& options) {
  return anchored_decode(backend, resolve_anchors(prompt, tokenizer), config, limits, options);
}

// --- beam search ---

namespace {

struct Node {
  Tokens tokens;
  double score = 0.0;
  bool finished = false;
};

bool better(const Node& a, const Node& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

class Expander {
 public:
  Expander(const Backend& backend, const ResolvedPrompt& prompt, const AnchoringConfig& config, int width,
           const DecodeLimits& limits)
      : backend_(backend), prompt_(prompt), config_(config), width_(width), limits_(limits) {}

  /// Finished, at the token limit, or out of context room.
  bool terminal(const Node& n) const {
    return n.finished || static_cast<int>(n.tokens.size()) >= limits_.max_new_tokens ||
           static_cast<int>(prompt_.tokens.size() + n.tokens.size()) > backend_.max_positions();
  }

  std::vector<Node> children(const Node& n) const {
    Tokens context = prompt_.tokens;
    context.insert(context.end(), n.tokens.begin(), n.tokens.end());
    const Logits original = backend_.score({.tokens = context}).logits.values;
    Logits ranked = original;
    if (config_.mode != AnchorMode::off) {
      const Logits masked = backend_.score({.tokens = context, .mask_positions = prompt_.resolution.positions}).logits.values;
      ranked = augment(original, masked, config_);
    }
    const Logits logp = kernels::log_softmax(original);
    const Scores candidates = top_k(ranked, width_);

    std::vector<Node> out;
    out.reserve(candidates.ids.size());
    for (TokenId id : candidates.ids) {
      Node child{n.tokens, n.score + logp[id], backend_.vocab().is_stop(id)};
      child.tokens.push_back(id);
      out.push_back(std::move(child));
    }
    return out;
  }

 private:
  const Backend& backend_;
  const ResolvedPrompt& prompt_;
  const AnchoringConfig& config_;
  int width_;
  DecodeLimits limits_;
};

std::vector<Node> pruned_search(const Expander& expander, int width) {
  std::vector<Node> live{Node{}};
  std::vector<Node> pool;
  while (!live.empty()) {
    std::vector<Node> extensions;
    for (const Node& beam : live) {
      if (expander.terminal(beam)) {
        pool.push_back(beam);
        continue;
      }
      auto kids = expander.children(beam);
      extensions.insert(extensions.end(), std::make_move_iterator(kids.begin()), std::make_move_iterator(kids.end()));
    }
    std::sort(extensions.begin(), extensions.end(), better);
    if (extensions.size() > static_cast<std::size_t>(width)) extensions.resize(static_cast<std::size_t>(width));
    live.clear();
    for (Node& e : extensions) {
      if (e.finished) {
        pool.push_back(std::move(e));
      } else {
        live.push_back(std::move(e));
      }
    }
  }
  return pool;
}

std::vector<Node> exact_search(const Expander& expander, int width, std::size_t budget) {
  auto worse = [](const Node& a, const Node& b) { return better(b, a); };
  std::priority_queue<Node, std::vector<Node>, decltype(worse)> frontier(worse);
  frontier.push(Node{});
  std::vector<Node> out;
  std::size_t expansions = 0;
  // Extending a sequence never raises its score, so terminals pop in rank order.
  while (!frontier.empty() && out.size() < static_cast<std::size_t>(width)) {
    Node top = frontier.top();
    frontier.pop();
    if (expander.terminal(top)) {
      out.push_back(std::move(top));
      continue;
    }
    if (++expansions > budget) {
      throw CapacityError("exact beam search exceeded its expansion budget of " + std::to_string(budget));
    }
    for (Node& child : expander.children(top)) frontier.push(std::move(child));
  }
  return out;
}

}  // namespace

std::vector<BeamCandidate> beam_search_anchored(const Backend& backend, const ResolvedPrompt& prompt,
                                                const AnchoringConfig& config, const BeamOptions& beam,
                                                const DecodeLimits& limits) {
  check_prompt(backend, prompt.tokens, limits);
  config.validate(backend.vocab().size);
  if (beam.width < 1 || beam.width > backend.vocab().size) throw ArgumentError("beam width must lie in [1, vocab size]");
  if (config.mode != AnchorMode::off) {
    if (prompt.resolution.positions.empty()) throw ArgumentError("prompt has no anchored tokens");
    (void)build_masked_context(prompt.tokens, prompt.resolution, backend.vocab().mask_id);
  }
  AnchoringConfig dense_config = config;
  dense_config.top_k.reset();

  const Expander expander(backend, prompt, dense_config, beam.width, limits);
  std::vector<Node> pool;
  try {
    pool = beam.strategy == BeamStrategy::exact ? exact_search(expander, beam.width, beam.max_expansions)
                                                : pruned_search(expander, beam.width);
  } catch (const TransportError& e) {
    GenerationTrace partial;
    partial.prompt_tokens = prompt.tokens;
    partial.resolution = prompt.resolution;
    throw DecodeAborted(e, std::move(partial));
  }
  std::sort(pool.begin(), pool.end(), better);
  if (pool.size() > static_cast<std::size_t>(beam.width)) pool.resize(static_cast<std::size_t>(beam.width));

  std::vector<BeamCandidate> out;
  out.reserve(pool.size());
  for (Node& n : pool) out.push_back({std::move(n.tokens), n.score, n.finished});
  return out;
}

OverheadReport measure_overhead(const Backend& backend, const ResolvedPrompt& prompt,
                                const AnchoringConfig& config, const DecodeLimits& limits, int repetitions) {
  if (repetitions < 1) throw ArgumentError("repetitions must be positive");
  OverheadReport report;
  CountingBackend counter(backend);
  double best_baseline = 0.0;
  double best_anchored = 0.0;
  for (int r = 0; r < repetitions; ++r) {
    counter.reset();
    auto start = Clock::now();
    const auto baseline = greedy_decode(counter, prompt.tokens, limits);
    const double tb = seconds_since(start);
    report.baseline_tokens = baseline.steps.size();
    report.baseline_calls = counter.calls();

    counter.reset();
    start = Clock::now();
    const auto anchored = anchored_decode(counter, prompt, config, limits);
    const double ta = seconds_since(start);
    report.anchored_tokens = anchored.steps.size();
    report.anchored_calls = counter.calls();

    best_baseline = r == 0 ? tb : std::min(best_baseline, tb);
    best_anchored = r == 0 ? ta : std::min(best_anchored, ta);
  }
  report.baseline_seconds = best_baseline;
  report.anchored_seconds = best_anchored;
  report.baseline_tokens_per_sec = static_cast<double>(report.baseline_tokens) / best_baseline;
  report.anchored_tokens_per_sec = static_cast<double>(report.anchored_tokens) / best_anchored;
  return report;
}

}  // namespace anchor
