#include "anchor/toy_model.hpp"

#include <random>
#include <string>

#include "anchor/kernels.hpp"

namespace anchor {

namespace {

class UniformSource {
 public:
  explicit UniformSource(std::uint64_t seed) : engine_(seed) {}

  // 53 random mantissa bits mapped onto [-0.1, 0.1).
  double next() {
    const double unit = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return -0.1 + 0.2 * unit;
  }

  Matrix<double> matrix(int rows, int cols) {
    Matrix<double> m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = next();
    }
    return m;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace

void ToyModelConfig::validate() const {
  vocab.validate();
  if (embed_dim < 1 || n_layers < 1 || n_heads < 1 || max_positions < 1) {
    throw ArgumentError("toy model dimensions must be positive");
  }
  if (n_layers > 4) throw ArgumentError("toy model supports at most 4 layers");
  if (embed_dim % n_heads != 0) {
    throw ArgumentError("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
  }
}

ToyParameters init_toy_parameters(const ToyModelConfig& config) {
  config.validate();
  UniformSource rng(config.seed);
  const int d = config.embed_dim;
  ToyParameters p;
  p.token_embedding = rng.matrix(config.vocab.size, d);
  p.position_embedding = rng.matrix(config.max_positions, d);
  p.layers.reserve(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    ToyLayer layer;
    layer.wq = rng.matrix(d, d);
    layer.wk = rng.matrix(d, d);
    layer.wv = rng.matrix(d, d);
    layer.wo = rng.matrix(d, d);
    layer.w1 = rng.matrix(d, 4 * d);
    layer.w2 = rng.matrix(4 * d, d);
    p.layers.push_back(std::move(layer));
  }
  p.unembedding = rng.matrix(d, config.vocab.size);
  return p;
}

ToyTransformer::ToyTransformer(ToyModelConfig config)
    : config_(std::move(config)), params_(init_toy_parameters(config_)) {}

ScoreResult ToyTransformer::score(const ScoreRequest& request) const {
  validate_request(request, config_.vocab, config_.max_positions);
  const Tokens context = substitute_mask(request.tokens, request.mask_positions, config_.vocab.mask_id);

  ScoreResult result;
  Logits attention;
  Logits logits = forward(input_embeddings(context), request.want_attention ? &attention : nullptr);
  if (request.want_attention) result.attention = std::move(attention);
  if (request.top_k) {
    result.logits = top_k(logits, *request.top_k);
  } else {
    result.logits.values = std::move(logits);
  }
  return result;
}

Matrix<double> ToyTransformer::input_embeddings(std::span<const TokenId> tokens) const {
  Matrix<double> x(static_cast<Eigen::Index>(tokens.size()), config_.embed_dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = params_.token_embedding.row(tokens[i]);
  }
  return x;
}

Logits ToyTransformer::logits_from_embeddings(const Matrix<double>& embeddings) const {
  if (embeddings.cols() != config_.embed_dim) throw ArgumentError("embedding width mismatch");
  if (embeddings.rows() < 1) throw ArgumentError("empty context");
  if (embeddings.rows() > config_.max_positions) throw CapacityError("context exceeds max_positions");
  return forward(embeddings, nullptr);
}

Logits ToyTransformer::forward(const Matrix<double>& embeddings, Logits* attention) const {
  const Eigen::Index n = embeddings.rows();
  const int d = config_.embed_dim;
  const int head_dim = d / config_.n_heads;

  Matrix<double> h = embeddings + params_.position_embedding.topRows(n);
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    const ToyLayer& layer = params_.layers[l];
    const bool last = l + 1 == params_.layers.size();

    const Matrix<double> a = kernels::layer_norm(h);
    const Matrix<double> q = a * layer.wq;
    const Matrix<double> k = a * layer.wk;
    const Matrix<double> v = a * layer.wv;
    Matrix<double> heads(n, d);
    if (last && attention) *attention = Logits::Zero(n);
    for (int head = 0; head < config_.n_heads; ++head) {
      const int c0 = head * head_dim;
      Logits row;
      heads.middleCols(c0, head_dim) =
          kernels::causal_attention(q.middleCols(c0, head_dim), k.middleCols(c0, head_dim),
                                    v.middleCols(c0, head_dim), last && attention ? &row : nullptr);
      if (last && attention) *attention += row;
    }
    if (last && attention) *attention /= static_cast<double>(config_.n_heads);
    h += heads * layer.wo;

    const Matrix<double> b = kernels::layer_norm(h);
    h += Matrix<double>(kernels::gelu(Matrix<double>(b * layer.w1))) * layer.w2;
  }
  const Matrix<double> final_row = kernels::layer_norm(h.bottomRows(1));
  return (final_row * params_.unembedding).transpose();
}

}  // namespace anchor
