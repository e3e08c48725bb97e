#pragma once

#include <cstdint>
#include <vector>

#include "anchor/backend.hpp"

namespace anchor {

struct ToyModelConfig {
  std::uint64_t seed = 0;
  VocabSpec vocab = make_default_vocab(16);
  int embed_dim = 16;
  int n_layers = 2;
  int n_heads = 2;
  int max_positions = 256;

  void validate() const;
};

struct ToyLayer {
  Matrix<double> wq, wk, wv, wo;  // embed_dim x embed_dim
  Matrix<double> w1;              // embed_dim x 4*embed_dim
  Matrix<double> w2;              // 4*embed_dim x embed_dim
};

struct ToyParameters {
  Matrix<double> token_embedding;     // vocab x embed_dim
  Matrix<double> position_embedding;  // max_positions x embed_dim
  std::vector<ToyLayer> layers;
  Matrix<double> unembedding;  // embed_dim x vocab
};

/// Draws parameters from uniform(-0.1, 0.1) in a fixed order: token
/// embedding, position embedding, then per layer wq wk wv wo w1 w2, then
/// the unembedding. All matrices are filled row-major.
ToyParameters init_toy_parameters(const ToyModelConfig& config);

/// Untrained pre-norm causal transformer with seeded random weights.
class ToyTransformer final : public Backend, public EmbeddingModel {
 public:
  explicit ToyTransformer(ToyModelConfig config);

  const VocabSpec& vocab() const override { return config_.vocab; }
  int max_positions() const override { return config_.max_positions; }
  ScoreResult score(const ScoreRequest& request) const override;

  Matrix<double> input_embeddings(std::span<const TokenId> tokens) const override;
  Logits logits_from_embeddings(const Matrix<double>& embeddings) const override;

  const ToyModelConfig& config() const { return config_; }
  const ToyParameters& parameters() const { return params_; }

 private:
  Logits forward(const Matrix<double>& embeddings, Logits* attention) const;

  ToyModelConfig config_;
  ToyParameters params_;
};

}  // namespace anchor
