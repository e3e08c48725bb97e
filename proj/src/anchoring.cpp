#include "anchor/anchoring.hpp"

#include <algorithm>
#include <cmath>

namespace anchor {

std::string PromptSpec::text() const {
  std::string out;
  for (const auto& s : segments) out += s.text;
  return out;
}

bool PromptSpec::has_anchor() const {
  return std::any_of(segments.begin(), segments.end(), [](const Segment& s) { return s.anchored; });
}

PromptSpec parse_markup(std::string_view markup, const Delimiters& delimiters) {
  const std::string_view open = delimiters.open;
  const std::string_view close = delimiters.close;
  if (open.empty() || close.empty()) throw ArgumentError("delimiters must be non-empty");
  if (open == close) throw ArgumentError("open and close delimiters must differ");

  PromptSpec prompt;
  std::string current;
  bool anchored = false;
  auto flush = [&] {
    if (!current.empty()) prompt.segments.push_back({std::move(current), anchored});
    current.clear();
  };

  std::size_t i = 0;
  while (i < markup.size()) {
    const auto rest = markup.substr(i);
    if (rest.starts_with(open) && rest.substr(open.size()).starts_with(open)) {
      current += open;
      i += 2 * open.size();
    } else if (rest.starts_with(close) && rest.substr(close.size()).starts_with(close)) {
      current += close;
      i += 2 * close.size();
    } else if (rest.starts_with(open)) {
      if (anchored) throw ArgumentError("nested anchor at offset " + std::to_string(i));
      flush();
      anchored = true;
      i += open.size();
    } else if (rest.starts_with(close)) {
      if (!anchored) throw ArgumentError("unmatched anchor close at offset " + std::to_string(i));
      flush();
      anchored = false;
      i += close.size();
    } else {
      current += markup[i++];
    }
  }
  if (anchored) throw ArgumentError("unterminated anchor");
  flush();
  if (prompt.segments.empty()) prompt.segments.push_back({"", false});
  return prompt;
}

std::string render_markup(const PromptSpec& prompt, const Delimiters& delimiters) {
  auto escape = [&](const std::string& text) {
    std::string out;
    std::size_t i = 0;
    while (i < text.size()) {
      const std::string_view rest = std::string_view(text).substr(i);
      if (rest.starts_with(delimiters.open)) {
        out += delimiters.open + delimiters.open;
        i += delimiters.open.size();
      } else if (rest.starts_with(delimiters.close)) {
        out += delimiters.close + delimiters.close;
        i += delimiters.close.size();
      } else {
        out += text[i++];
      }
    }
    return out;
  };
  std::string out;
  for (const auto& s : prompt.segments) {
    if (s.anchored) {
      out += delimiters.open + escape(s.text) + delimiters.close;
    } else {
      out += escape(s.text);
    }
  }
  return out;
}

void AnchoringConfig::validate(int vocab_size) const {
  if (mode == AnchorMode::fixed && !std::isfinite(omega)) throw ArgumentError("omega must be finite");
  if (mode == AnchorMode::confidence && !(lambda >= 0.0 && std::isfinite(lambda))) {
    throw ArgumentError("lambda must be a finite nonnegative number");
  }
  if (top_k && (*top_k < 1 || *top_k > vocab_size)) throw ArgumentError("top_k must lie in [1, vocab size]");
  if (top_k && mode == AnchorMode::confidence) {
    throw ArgumentError("top-k truncation applies to fixed-strength anchoring only");
  }
}

ResolvedPrompt resolve_anchors(const PromptSpec& prompt, const Tokenizer& tokenizer) {
  ResolvedPrompt out;
  for (const auto& segment : prompt.segments) {
    const Tokens tokens = tokenizer.encode(segment.text);
    for (TokenId t : tokens) {
      if (segment.anchored) out.resolution.positions.push_back(static_cast<TokenId>(out.tokens.size()));
      out.tokens.push_back(t);
    }
  }
  out.resolution.prompt_length = static_cast<int>(out.tokens.size());
  return out;
}

ResolvedPrompt resolve_anchors_covering(const PromptSpec& prompt, const Tokenizer& tokenizer) {
  // Character spans of anchored segments.
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t offset = 0;
  for (const auto& segment : prompt.segments) {
    if (segment.anchored && !segment.text.empty()) spans.emplace_back(offset, offset + segment.text.size());
    offset += segment.text.size();
  }

  ResolvedPrompt out;
  out.tokens = tokenizer.encode(prompt.text());
  out.resolution.prompt_length = static_cast<int>(out.tokens.size());
  std::size_t begin = 0;
  for (std::size_t i = 0; i < out.tokens.size(); ++i) {
    const std::size_t end = begin + tokenizer.token_string(out.tokens[i]).size();
    for (const auto& [s, e] : spans) {
      if (begin < e && s < end) {
        out.resolution.positions.push_back(static_cast<TokenId>(i));
        if (begin < s || end > e) out.resolution.expanded = true;
        break;
      }
    }
    begin = end;
  }
  return out;
}

Tokens build_masked_context(std::span<const TokenId> full_context, const AnchorResolution& resolution,
                            TokenId mask_id) {
  if (static_cast<std::size_t>(resolution.prompt_length) > full_context.size()) {
    throw ArgumentError("prompt length exceeds context length");
  }
  for (TokenId p : resolution.positions) {
    if (p < 0 || p >= resolution.prompt_length) {
      throw ArgumentError("anchor position " + std::to_string(p) + " outside the prompt");
    }
  }
  return substitute_mask(full_context, resolution.positions, mask_id);
}

Logits augment(const Logits& original, const Logits& masked, const AnchoringConfig& config) {
  switch (config.mode) {
    case AnchorMode::fixed:
      return combine_fixed(original, masked, config.omega);
    case AnchorMode::confidence:
      return combine_confidence(original, masked, config.lambda);
    case AnchorMode::off:
      break;
  }
  return original;
}

}  // namespace anchor
