#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "anchor/backend.hpp"
#include "anchor/kernels.hpp"
#include "anchor/vocab.hpp"

namespace anchor {

struct Segment {
  std::string text;
  bool anchored = false;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct PromptSpec {
  std::vector<Segment> segments;

  std::string text() const;
  bool has_anchor() const;
};

struct Delimiters {
  std::string open = "⟦";   // ⟦
  std::string close = "⟧";  // ⟧
};

/// Splits marked-up text into plain and anchored segments. A doubled
/// delimiter is a literal delimiter. Throws ArgumentError on unbalanced
/// markup.
PromptSpec parse_markup(std::string_view markup, const Delimiters& delimiters = {});
/// Inverse of parse_markup, except that a literal delimiter at the edge of
/// an anchored segment does not survive the round trip ("⟦⟦⟦" reads as a
/// literal followed by an opening delimiter).
std::string render_markup(const PromptSpec& prompt, const Delimiters& delimiters = {});

enum class AnchorMode { off, fixed, confidence };
enum class Activation { always, on_test_failure };

/// Strength used when no tuning data exists.
constexpr double preset_strength() { return 1.25; }

struct AnchoringConfig {
  AnchorMode mode = AnchorMode::off;
  double omega = preset_strength();
  double lambda = 0.0;
  std::optional<int> top_k;
  Activation activation = Activation::on_test_failure;

  void validate(int vocab_size) const;
};

struct AnchorResolution {
  Tokens positions;  // sorted, unique, all < prompt_length
  int prompt_length = 0;
  /// Set when an anchored span had to be widened to whole tokens.
  bool expanded = false;
};

struct ResolvedPrompt {
  Tokens tokens;
  AnchorResolution resolution;
};

/// Tokenizes each segment on its own, so anchored spans align with token
/// boundaries by construction.
ResolvedPrompt resolve_anchors(const PromptSpec& prompt, const Tokenizer& tokenizer);

/// Tokenizes the concatenated prompt and marks every token overlapping an
/// anchored span (minimal covering set). Sets `expanded` when a token
/// straddles a span boundary.
ResolvedPrompt resolve_anchors_covering(const PromptSpec& prompt, const Tokenizer& tokenizer);

Tokens build_masked_context(std::span<const TokenId> full_context, const AnchorResolution& resolution,
                            TokenId mask_id);

namespace detail {

inline double mix(double original, double masked, double omega) {
  return omega * original + (1.0 - omega) * masked;
}

template <typename DA, typename DB>
void require_same_length(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  if (a.size() != b.size()) {
    throw ArgumentError("logit length mismatch: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
  }
}

}  // namespace detail

/// omega * original + (1 - omega) * masked, elementwise.
template <typename DA, typename DB>
Logits combine_fixed(const Eigen::MatrixBase<DA>& original, const Eigen::MatrixBase<DB>& masked,
                     double omega) {
  detail::require_same_length(original, masked);
  return original.binaryExpr(masked, [omega](double a, double b) { return detail::mix(a, b, omega); });
}

/// original + lambda * (1 - p) * (original - masked) with p = softmax(original).
template <typename DA, typename DB>
Logits combine_confidence(const Eigen::MatrixBase<DA>& original, const Eigen::MatrixBase<DB>& masked,
                          double lambda) {
  detail::require_same_length(original, masked);
  if (!(lambda >= 0.0)) throw ArgumentError("lambda must be nonnegative");
  const Logits p = kernels::softmax(original);
  const Logits weight = lambda * (1.0 - p.array()).matrix();
  return (original.array() + weight.array() * (original.array() - masked.array())).matrix();
}

/// Top-k combination: candidate ids come from the original scores, masked
/// values are looked up at those ids. `masked_lookup(id)` returns a logit.
template <typename Lookup>
Scores combine_truncated(const Scores& original_topk, Lookup&& masked_lookup, double omega, int k) {
  if (original_topk.dense()) throw ArgumentError("combine_truncated expects (id, logit) pairs");
  if (k < 1 || static_cast<std::size_t>(k) != original_topk.size()) {
    throw ArgumentError("k must equal the number of candidate pairs");
  }
  std::unordered_set<TokenId> seen;
  Scores out;
  out.ids = original_topk.ids;
  out.values.resize(k);
  for (int i = 0; i < k; ++i) {
    const TokenId id = original_topk.ids[static_cast<std::size_t>(i)];
    if (!seen.insert(id).second) throw ArgumentError("duplicate id " + std::to_string(id));
    out.values[i] = detail::mix(original_topk.values[i], masked_lookup(id), omega);
  }
  return out;
}

/// Augmented logits for one step under `config` (dense vectors).
Logits augment(const Logits& original, const Logits& masked, const AnchoringConfig& config);

}  // namespace anchor
