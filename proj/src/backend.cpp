#include "anchor/backend.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace anchor {

void validate_request(const ScoreRequest& request, const VocabSpec& vocab, int max_positions) {
  const auto n = static_cast<TokenId>(request.tokens.size());
  if (n == 0) throw ArgumentError("empty context");
  if (n > max_positions) {
    throw CapacityError("context length " + std::to_string(n) + " exceeds max_positions " +
                        std::to_string(max_positions));
  }
  for (TokenId t : request.tokens) {
    if (t < 0 || t >= vocab.size) throw ArgumentError("token id " + std::to_string(t) + " out of range");
  }
  for (TokenId p : request.mask_positions) {
    if (p < 0 || p >= n) throw ArgumentError("mask index " + std::to_string(p) + " out of range");
  }
  if (request.top_k && (*request.top_k < 1 || *request.top_k > vocab.size)) {
    throw ArgumentError("top_k must lie in [1, vocab size]");
  }
}

Tokens substitute_mask(std::span<const TokenId> tokens, std::span<const TokenId> positions,
                       TokenId mask_id) {
  Tokens out(tokens.begin(), tokens.end());
  for (TokenId p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= out.size()) {
      throw ArgumentError("mask index " + std::to_string(p) + " out of range");
    }
    out[static_cast<std::size_t>(p)] = mask_id;
  }
  return out;
}

Scores top_k(const Logits& logits, int k) {
  const auto n = static_cast<int>(logits.size());
  if (k < 1 || k > n) throw ArgumentError("top_k must lie in [1, vocab size]");
  std::vector<TokenId> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](TokenId a, TokenId b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  Scores out;
  out.values.resize(k);
  for (int i = 0; i < k; ++i) out.values[i] = logits[order[static_cast<std::size_t>(i)]];
  out.ids = std::move(order);
  return out;
}

ScoreResult CountingBackend::score(const ScoreRequest& request) const {
  ++calls_;
  if (!request.mask_positions.empty()) ++masked_calls_;
  return inner_.score(request);
}

}  // namespace anchor
