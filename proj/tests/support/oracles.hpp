#pragma once

// Independent reference implementations and test doubles. Nothing here uses
// the library's kernels: loops over std::vector only.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <vector>

#include "anchor/anchoring.hpp"
#include "anchor/backend.hpp"
#include "anchor/decoding.hpp"
#include "anchor/toy_model.hpp"

namespace oracle {

using anchor::TokenId;
using anchor::Tokens;
using Mat = std::vector<std::vector<double>>;

// Straight-line forward pass of the toy transformer, weights redrawn from the
// seed. Returns next-token logits for the final position.
struct ReferenceModel {
  int vocab = 0, d = 0, layers = 0, heads = 0, positions = 0;
  Mat tok, pos, unemb;
  struct Layer {
    Mat wq, wk, wv, wo, w1, w2;
  };
  std::vector<Layer> ls;

  ReferenceModel(std::uint64_t seed, int vocab_, int d_, int layers_, int heads_, int positions_)
      : vocab(vocab_), d(d_), layers(layers_), heads(heads_), positions(positions_) {
    std::mt19937_64 eng(seed);
    auto draw = [&](int r, int c) {
      Mat m(r, std::vector<double>(c));
      for (auto& row : m)
        for (auto& x : row) x = -0.1 + 0.2 * (std::ldexp(static_cast<double>(eng() >> 11), -53));
      return m;
    };
    tok = draw(vocab, d);
    pos = draw(positions, d);
    for (int l = 0; l < layers; ++l) {
      Layer L;
      L.wq = draw(d, d);
      L.wk = draw(d, d);
      L.wv = draw(d, d);
      L.wo = draw(d, d);
      L.w1 = draw(d, 4 * d);
      L.w2 = draw(4 * d, d);
      ls.push_back(std::move(L));
    }
    unemb = draw(d, vocab);
  }

  static Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < b.size(); ++k)
        for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
  }

  static Mat norm(const Mat& x) {
    Mat out = x;
    for (auto& row : out) {
      double mean = 0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      double var = 0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      for (double& v : row) v = (v - mean) / std::sqrt(var + 1e-5);
    }
    return out;
  }

  std::vector<double> logits(const Tokens& ctx, std::vector<double>* attention = nullptr) const {
    const std::size_t n = ctx.size();
    Mat h(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) h[i][j] = tok[ctx[i]][j] + pos[i][j];
    const int hd = d / heads;
    for (int l = 0; l < layers; ++l) {
      const Layer& L = ls[l];
      const Mat a = norm(h);
      const Mat q = matmul(a, L.wq), k = matmul(a, L.wk), v = matmul(a, L.wv);
      Mat cat(n, std::vector<double>(d, 0.0));
      if (attention && l == layers - 1) attention->assign(n, 0.0);
      for (int hh = 0; hh < heads; ++hh) {
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> w(i + 1);
          double top = -INFINITY;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0;
            for (int c = 0; c < hd; ++c) s += q[i][hh * hd + c] * k[j][hh * hd + c];
            w[j] = s / std::sqrt(static_cast<double>(hd));
            top = std::max(top, w[j]);
          }
          double z = 0;
          for (double& x : w) z += (x = std::exp(x - top));
          for (double& x : w) x /= z;
          for (std::size_t j = 0; j <= i; ++j)
            for (int c = 0; c < hd; ++c) cat[i][hh * hd + c] += w[j] * v[j][hh * hd + c];
          if (attention && l == layers - 1 && i == n - 1)
            for (std::size_t j = 0; j <= i; ++j) (*attention)[j] += w[j] / heads;
        }
      }
      const Mat o = matmul(cat, L.wo);
      for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) h[i][j] += o[i][j];
      Mat f = matmul(norm(h), L.w1);
      const double c = std::sqrt(2.0 / std::numbers::pi);
      for (auto& row : f)
        for (double& x : row) x = 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
      const Mat g = matmul(f, L.w2);
      for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) h[i][j] += g[i][j];
    }
    const Mat last = norm(Mat{h.back()});
    return matmul(last, unemb)[0];
  }
};

inline std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::vector<double> log_softmax(const std::vector<double>& v) {
  const double top = *std::max_element(v.begin(), v.end());
  double z = 0;
  for (double x : v) z += std::exp(x - top);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - top - std::log(z);
  return out;
}

// Linear probe: logits = W^T * sum_i c_i * e(token_i). The gradient of logit
// a with respect to embedding i is c_i * W[:, a], whose norm is closed form.
class LinearProbe final : public anchor::Backend, public anchor::EmbeddingModel {
 public:
  LinearProbe(int vocab, int dim, std::vector<double> weights_by_position, std::uint64_t seed)
      : vocab_(anchor::make_default_vocab(vocab)), c_(std::move(weights_by_position)),
        emb_(vocab, dim), w_(dim, vocab) {
    std::mt19937_64 eng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < emb_.rows(); ++i)
      for (int j = 0; j < dim; ++j) emb_(i, j) = u(eng);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < vocab; ++j) w_(i, j) = u(eng);
  }

  const anchor::VocabSpec& vocab() const override { return vocab_; }
  int max_positions() const override { return static_cast<int>(c_.size()); }
  anchor::ScoreResult score(const anchor::ScoreRequest& request) const override {
    const Tokens ctx = anchor::substitute_mask(request.tokens, request.mask_positions, vocab_.mask_id);
    anchor::ScoreResult r;
    r.logits.values = logits_from_embeddings(input_embeddings(ctx));
    return r;
  }
  anchor::Matrix<double> input_embeddings(std::span<const TokenId> tokens) const override {
    anchor::Matrix<double> x(static_cast<Eigen::Index>(tokens.size()), emb_.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = emb_.row(tokens[i]);
    return x;
  }
  anchor::Logits logits_from_embeddings(const anchor::Matrix<double>& e) const override {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(e.cols());
    for (Eigen::Index i = 0; i < e.rows(); ++i) sum += c_[static_cast<std::size_t>(i)] * e.row(i).transpose();
    return w_.transpose() * sum;
  }

  // Closed form: |c_i| * ||W[:, a]|| with a the argmax token.
  std::vector<double> expected(const Tokens& ctx) const {
    const auto logits = logits_from_embeddings(input_embeddings(ctx));
    Eigen::Index a = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[a]) a = i;
    double col = 0;
    for (Eigen::Index j = 0; j < w_.rows(); ++j) col += w_(j, a) * w_(j, a);
    std::vector<double> out;
    for (std::size_t i = 0; i < ctx.size(); ++i) out.push_back(std::abs(c_[i]) * std::sqrt(col));
    return out;
  }

 private:
  anchor::VocabSpec vocab_;
  std::vector<double> c_;
  anchor::Matrix<double> emb_;
  anchor::Matrix<double> w_;
};

// Exhaustive enumeration under the hybrid rule: every path whose tokens are
// each among the top-k augmented ids, scored by summed original log-probs.
struct Path {
  Tokens tokens;
  double score = 0.0;
  bool finished = false;
};

inline std::vector<double> dense(const anchor::Backend& b, const Tokens& ctx, const Tokens& mask = {}) {
  const auto r = b.score({.tokens = ctx, .mask_positions = mask});
  return std::vector<double>(r.logits.values.data(), r.logits.values.data() + r.logits.values.size());
}

inline void enumerate(const anchor::Backend& b, const anchor::ResolvedPrompt& p, const anchor::AnchoringConfig& cfg,
                      int k, int max_new, Path cur, std::vector<Path>& out) {
  if (cur.finished || static_cast<int>(cur.tokens.size()) == max_new) {
    out.push_back(cur);
    return;
  }
  Tokens ctx = p.tokens;
  ctx.insert(ctx.end(), cur.tokens.begin(), cur.tokens.end());
  const auto orig = dense(b, ctx);
  std::vector<double> ranked = orig;
  if (cfg.mode == anchor::AnchorMode::fixed) {
    const auto masked = dense(b, ctx, p.resolution.positions);
    for (std::size_t i = 0; i < ranked.size(); ++i) ranked[i] = cfg.omega * orig[i] + (1.0 - cfg.omega) * masked[i];
  }
  std::vector<TokenId> ids(ranked.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId x, TokenId y) { return ranked[x] > ranked[y]; });
  const auto lp = log_softmax(orig);
  for (int j = 0; j < k; ++j) {
    Path next = cur;
    next.tokens.push_back(ids[j]);
    next.score += lp[ids[j]];
    next.finished = b.vocab().is_stop(ids[j]);
    enumerate(b, p, cfg, k, max_new, std::move(next), out);
  }
}

inline std::vector<Path> exhaustive_beam(const anchor::Backend& b, const anchor::ResolvedPrompt& p,
                                         const anchor::AnchoringConfig& cfg, int k, int max_new) {
  std::vector<Path> all;
  enumerate(b, p, cfg, k, max_new, Path{}, all);
  std::sort(all.begin(), all.end(), [](const Path& x, const Path& y) {
    return x.score != y.score ? x.score > y.score : x.tokens < y.tokens;
  });
  if (all.size() > static_cast<std::size_t>(k)) all.resize(static_cast<std::size_t>(k));
  return all;
}

// Classic width-pruned beam: every step keeps the `k` best extensions of the
// live beams; finished or full-length beams wait in a pool ranked at the end.
inline std::vector<Path> classic_beam(const anchor::Backend& b, const anchor::ResolvedPrompt& p,
                                      const anchor::AnchoringConfig& cfg, int k, int max_new) {
  auto rank = [](const Path& x, const Path& y) { return x.score != y.score ? x.score > y.score : x.tokens < y.tokens; };
  std::vector<Path> live{Path{}}, pool;
  for (int step = 0; step < max_new && !live.empty(); ++step) {
    std::vector<Path> ext;
    for (const Path& beam : live) {
      std::vector<Path> kids;
      enumerate(b, p, cfg, k, static_cast<int>(beam.tokens.size()) + 1, beam, kids);
      ext.insert(ext.end(), kids.begin(), kids.end());
    }
    std::sort(ext.begin(), ext.end(), rank);
    if (ext.size() > static_cast<std::size_t>(k)) ext.resize(static_cast<std::size_t>(k));
    live.clear();
    for (auto& e : ext) (e.finished || step + 1 == max_new ? pool : live).push_back(e);
  }
  std::sort(pool.begin(), pool.end(), rank);
  if (pool.size() > static_cast<std::size_t>(k)) pool.resize(static_cast<std::size_t>(k));
  return pool;
}

// Backend for the harness corpus. Prompts are letters; generated tokens are
// digits or <eos>. At the first generation step the ten digits lead, ordered
// by a per-task permutation keyed on the last two prompt tokens (which are
// never anchored); afterwards <eos> dominates. Contexts containing the mask
// token see the permutation rotated by `masked_shift`.
class ScriptedBackend final : public anchor::Backend {
 public:
  explicit ScriptedBackend(int masked_shift = 1) : vocab_(anchor::make_default_vocab(64)), shift_(masked_shift) {}

  static TokenId digit(int d) { return static_cast<TokenId>(2 + 26 + d); }
  static bool is_digit(TokenId t) { return t >= digit(0) && t <= digit(9); }

  void set_order(TokenId k0, TokenId k1, std::vector<int> digits_best_first) {
    orders_[{k0, k1}] = std::move(digits_best_first);
  }

  const anchor::VocabSpec& vocab() const override { return vocab_; }
  int max_positions() const override { return 64; }
  anchor::ScoreResult score(const anchor::ScoreRequest& request) const override {
    anchor::validate_request(request, vocab_, max_positions());
    const Tokens ctx = anchor::substitute_mask(request.tokens, request.mask_positions, vocab_.mask_id);
    anchor::Logits v = anchor::Logits::Zero(vocab_.size);
    std::size_t prompt_len = ctx.size();
    while (prompt_len > 0 && (is_digit(ctx[prompt_len - 1]) || ctx[prompt_len - 1] == 1)) --prompt_len;
    if (prompt_len < ctx.size()) {
      v[1] = 20.0;
    } else {
      const bool masked = std::find(ctx.begin(), ctx.end(), vocab_.mask_id) != ctx.end();
      const auto& order = orders_.at({ctx[ctx.size() - 2], ctx[ctx.size() - 1]});
      v[1] = -5.0;
      for (int r = 0; r < 10; ++r) {
        const int d = order[static_cast<std::size_t>((r + (masked ? shift_ : 0)) % 10)];
        v[digit(d)] = 10.0 - 0.5 * r;
      }
    }
    anchor::ScoreResult out;
    if (request.top_k) {
      out.logits = anchor::top_k(v, *request.top_k);
    } else {
      out.logits.values = std::move(v);
    }
    return out;
  }

 private:
  anchor::VocabSpec vocab_;
  int shift_;
  std::map<std::pair<TokenId, TokenId>, std::vector<int>> orders_;
};

}  // namespace oracle
