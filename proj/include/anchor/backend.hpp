#pragma once

#include <atomic>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "anchor/types.hpp"
#include "anchor/vocab.hpp"

namespace anchor {

/// Logits over the vocabulary, either dense (ids empty) or as (id, value)
/// pairs sorted by value descending, ties by ascending id.
struct Scores {
  std::vector<TokenId> ids;
  Logits values;

  bool dense() const { return ids.empty(); }
  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
  TokenId id_at(std::size_t i) const { return dense() ? static_cast<TokenId>(i) : ids[i]; }
};

struct ScoreRequest {
  std::span<const TokenId> tokens{};
  /// Context indices replaced by the mask token before the forward pass.
  std::span<const TokenId> mask_positions{};
  bool want_attention = false;
  std::optional<int> top_k{};
};

struct ScoreResult {
  Scores logits;
  /// Last-layer attention of the final position, head-averaged.
  std::optional<Logits> attention;
};

/// Next-token scoring. Implementations are pure functions of the request and
/// safe to share across threads.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const VocabSpec& vocab() const = 0;
  virtual int max_positions() const = 0;
  virtual ScoreResult score(const ScoreRequest& request) const = 0;
};

/// Backends that expose their input embeddings, for sensitivity analysis.
class EmbeddingModel {
 public:
  virtual ~EmbeddingModel() = default;

  /// One row per context position, token embeddings only.
  virtual Matrix<double> input_embeddings(std::span<const TokenId> tokens) const = 0;
  virtual Logits logits_from_embeddings(const Matrix<double>& embeddings) const = 0;
};

/// Checks ScoreRequest preconditions against a backend's limits.
void validate_request(const ScoreRequest& request, const VocabSpec& vocab, int max_positions);

/// Copy of `tokens` with every index in `positions` set to `mask_id`.
Tokens substitute_mask(std::span<const TokenId> tokens, std::span<const TokenId> positions,
                       TokenId mask_id);

/// The k largest entries, value-descending, ties by ascending id.
Scores top_k(const Logits& logits, int k);

/// Counts score() calls on a wrapped backend; calls carrying mask positions
/// are tallied separately.
class CountingBackend final : public Backend {
 public:
  explicit CountingBackend(const Backend& inner) : inner_(inner) {}

  const VocabSpec& vocab() const override { return inner_.vocab(); }
  int max_positions() const override { return inner_.max_positions(); }
  ScoreResult score(const ScoreRequest& request) const override;

  std::size_t calls() const { return calls_.load(); }
  std::size_t masked_calls() const { return masked_calls_.load(); }
  void reset() {
    calls_ = 0;
    masked_calls_ = 0;
  }

 private:
  const Backend& inner_;
  mutable std::atomic<std::size_t> calls_{0};
  mutable std::atomic<std::size_t> masked_calls_{0};
};

}  // namespace anchor
