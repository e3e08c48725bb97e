#pragma once

#include <optional>
#include <vector>

#include "anchor/anchoring.hpp"
#include "anchor/backend.hpp"

namespace anchor {

struct DecodeLimits {
  int max_new_tokens = 64;

  void validate() const;
};

struct DecodeOptions {
  bool want_attention = false;
  /// Run the original and masked passes of a step on separate threads.
  bool parallel_passes = false;
};

/// Scores recorded for one decoding step. `masked` and `augmented` are
/// present only when anchoring ran. Truncated storage keeps all three
/// vectors at the same ids.
struct StepScore {
  Scores original;
  std::optional<Scores> masked;
  std::optional<Scores> augmented;
  std::optional<Logits> attention;
};

struct TraceStep {
  TokenId token = 0;
  StepScore score;
  double wall_seconds = 0.0;
};

enum class FinishReason { stop_token, length_limit };

struct GenerationTrace {
  Tokens prompt_tokens;
  AnchorResolution resolution;
  std::vector<TraceStep> steps;
  FinishReason finished = FinishReason::length_limit;

  Tokens generated() const;
  /// Prompt followed by every generated token.
  Tokens context() const;
};

/// Vocabularies larger than this store truncated vectors in traces.
constexpr int kDenseStorageLimit = 512;
constexpr int kDefaultStorageTopK = 100;

/// Raised when a backend transport error interrupts a decode.
class DecodeAborted : public TransportError {
 public:
  DecodeAborted(const TransportError& cause, GenerationTrace partial)
      : TransportError(cause.what(), cause.raw(), cause.code()), partial_(std::move(partial)) {}

  const GenerationTrace& partial() const noexcept { return partial_; }

 private:
  GenerationTrace partial_;
};

/// Argmax of the original logits at each step; ties go to the lowest id.
GenerationTrace greedy_decode(const Backend& backend, const Tokens& prompt_tokens, const DecodeLimits& limits,
                              const DecodeOptions& options = {});

/// Two passes per step (original, anchored positions masked), argmax of the
/// augmented logits. The mask set is fixed to the prompt's anchored tokens.
GenerationTrace anchored_decode(const Backend& backend, const ResolvedPrompt& prompt,
                                const AnchoringConfig& config, const DecodeLimits& limits,
                                const DecodeOptions& options = {});

GenerationTrace anchored_decode(const Backend& backend, const PromptSpec& prompt, const Tokenizer& tokenizer,
                                const AnchoringConfig& config, const DecodeLimits& limits,
                                const DecodeOptions& options = {});

struct BeamCandidate {
  Tokens tokens;
  /// Sum of log softmax(original logits) at each chosen token.
  double score = 0.0;
  bool finished = false;
};

enum class BeamStrategy {
  /// Keep the `width` best extensions per step.
  pruned,
  /// Best-first search; returns the exact top `width` sequences.
  exact,
};

struct BeamOptions {
  int width = 1;
  BeamStrategy strategy = BeamStrategy::pruned;
  /// Node expansion budget for the exact strategy.
  std::size_t max_expansions = 200000;
};

/// Candidate tokens are the top `width` ids of the augmented logits (of the
/// original logits when anchoring is off); beam scores accumulate original
/// log-probabilities. Finished beams retire and compete on final score.
/// Result is best-first, ties broken by the lexicographically smaller
/// sequence.
std::vector<BeamCandidate> beam_search_anchored(const Backend& backend, const ResolvedPrompt& prompt,
                                                const AnchoringConfig& config, const BeamOptions& beam,
                                                const DecodeLimits& limits);

struct OverheadReport {
  double baseline_tokens_per_sec = 0.0;
  double anchored_tokens_per_sec = 0.0;
  double baseline_seconds = 0.0;
  double anchored_seconds = 0.0;
  std::size_t baseline_tokens = 0;
  std::size_t anchored_tokens = 0;
  std::size_t baseline_calls = 0;
  std::size_t anchored_calls = 0;
};

/// Times greedy and anchored decodes; each is repeated and the fastest run
/// kept.
OverheadReport measure_overhead(const Backend& backend, const ResolvedPrompt& prompt,
                                const AnchoringConfig& config, const DecodeLimits& limits, int repetitions = 3);

}  // namespace anchor
