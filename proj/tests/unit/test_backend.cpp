#include <doctest.h>

#include "anchor/backend.hpp"
#include "anchor/toy_model.hpp"
#include "anchor/vocab.hpp"
#include "oracles.hpp"

using namespace anchor;

namespace {

ToyTransformer model(std::uint64_t seed, int vocab = 16, int dim = 16, int layers = 2, int heads = 2) {
  ToyModelConfig c;
  c.seed = seed;
  c.vocab = make_default_vocab(vocab);
  c.embed_dim = dim;
  c.n_layers = layers;
  c.n_heads = heads;
  return ToyTransformer(c);
}

Logits run(const Backend& b, const Tokens& t, const Tokens& mask = {}) {
  return b.score({.tokens = t, .mask_positions = mask}).logits.values;
}

}  // namespace

TEST_CASE("toy scoring is deterministic") {
  const auto m = model(3);
  const Tokens ctx{4};
  const Logits a = run(m, ctx);
  const Logits b = run(m, ctx);
  CHECK(a.size() == 16);
  CHECK(a == b);
}

TEST_CASE("mask positions are equivalent to literal mask tokens") {
  const auto m = model(5);
  CHECK(run(m, {3, 4}, {0, 1}) == run(m, {0, 0}));
}

TEST_CASE("forward pass matches the straight-line reference") {
  const auto m = model(7);
  const oracle::ReferenceModel ref(7, 16, 16, 2, 2, 256);
  const Tokens ctx{3, 5, 2};
  const Logits got = run(m, ctx);
  const auto want = ref.logits(ctx);
  REQUIRE(got.size() == static_cast<Eigen::Index>(want.size()));
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[static_cast<Eigen::Index>(i)] - want[i]) < 1e-6);

  SUBCASE("attention row") {
    std::vector<double> att;
    ref.logits(ctx, &att);
    const auto r = m.score({.tokens = ctx, .want_attention = true});
    REQUIRE(r.attention);
    for (std::size_t i = 0; i < att.size(); ++i) CHECK(std::abs((*r.attention)[static_cast<Eigen::Index>(i)] - att[i]) < 1e-9);
    CHECK(std::abs(r.attention->sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("reference agrees on other shapes") {
  for (std::uint64_t seed : {1u, 2u, 9u}) {
    const auto m = model(seed, 24, 8, 3, 4);
    const oracle::ReferenceModel ref(seed, 24, 8, 3, 4, 256);
    const Tokens ctx{2, 9, 13, 1, 0, 7};
    const Logits got = run(m, ctx);
    const auto want = ref.logits(ctx);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[static_cast<Eigen::Index>(i)] - want[i]) < 1e-9);
  }
}

TEST_CASE("request validation") {
  const auto m = model(1);
  CHECK_THROWS_AS(run(m, {}), ArgumentError);
  CHECK_THROWS_AS(run(m, {3, 4}, {2}), ArgumentError);
  CHECK_THROWS_AS(run(m, {3, 99}), ArgumentError);
  CHECK_THROWS_AS(run(m, Tokens(257, 2)), CapacityError);
  CHECK_NOTHROW(run(m, Tokens(256, 2)));
  const Tokens ctx{3};
  CHECK_THROWS_AS(m.score({.tokens = ctx, .top_k = 0}), ArgumentError);
  CHECK_THROWS_AS(m.score({.tokens = ctx, .top_k = 17}), ArgumentError);
}

TEST_CASE("top_k orders by value then id") {
  Logits v(5);
  v << 1.0, 3.0, 3.0, -1.0, 2.0;
  const Scores s = top_k(v, 3);
  CHECK(s.ids == std::vector<TokenId>{1, 2, 4});
  CHECK(s.values[0] == 3.0);
  CHECK(s.values[2] == 2.0);
  CHECK_FALSE(s.dense());

  const auto m = model(4);
  const Tokens ctx{5, 6};
  const auto r = m.score({.tokens = ctx, .top_k = 4});
  const Logits full = run(m, ctx);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.logits.values[static_cast<Eigen::Index>(i)] == full[r.logits.ids[i]]);
}

TEST_CASE("substitute_mask touches exactly the listed indices") {
  std::mt19937_64 rng(11);
  Tokens ctx(50);
  for (auto& t : ctx) t = static_cast<TokenId>(2 + rng() % 14);
  Tokens pos(50);
  std::iota(pos.begin(), pos.end(), 0);
  std::shuffle(pos.begin(), pos.end(), rng);
  pos.resize(10);
  const Tokens out = substitute_mask(ctx, pos, 0);
  int diffs = 0;
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    const bool listed = std::find(pos.begin(), pos.end(), static_cast<TokenId>(i)) != pos.end();
    CHECK((out[i] != ctx[i]) == listed);
    diffs += out[i] != ctx[i];
  }
  CHECK(diffs == 10);
  CHECK(substitute_mask(ctx, {}, 0) == ctx);
}

TEST_CASE("counting backend separates masked calls") {
  const auto m = model(2);
  CountingBackend c(m);
  run(c, {3, 4});
  run(c, {3, 4}, {0});
  CHECK(c.calls() == 2);
  CHECK(c.masked_calls() == 1);
  c.reset();
  CHECK(c.calls() == 0);
}

TEST_CASE("weights are drawn in the documented order") {
  const auto m = model(7);
  const oracle::ReferenceModel ref(7, 16, 16, 2, 2, 256);
  const auto& p = m.parameters();
  CHECK(p.token_embedding(3, 4) == ref.tok[3][4]);
  CHECK(p.position_embedding(255, 15) == ref.pos[255][15]);
  CHECK(p.layers[1].w2(63, 15) == ref.ls[1].w2[63][15]);
  CHECK(p.unembedding(15, 15) == ref.unemb[15][15]);
  CHECK(p.token_embedding.maxCoeff() < 0.1);
  CHECK(p.token_embedding.minCoeff() >= -0.1);
}

TEST_CASE("default vocabulary and tokenizer") {
  const VocabSpec v = make_default_vocab(64);
  CHECK(v.mask_id == 0);
  CHECK(v.stop_ids == std::vector<TokenId>{1});
  CHECK(v.token_strings[2] == "a");
  const Tokenizer tok(v);
  const Tokens t = tok.encode("ab9");
  CHECK(t == Tokens{2, 3, 37});
  CHECK(tok.decode({2, 3, 1}) == "ab");
  CHECK_THROWS_WITH_AS(tok.encode("a\xe2\x9f\xa6"), doctest::Contains("\xe2\x9f\xa6"), ArgumentError);
  CHECK_THROWS_AS(make_default_vocab(2), ArgumentError);

  const Tokenizer big(make_default_vocab(200));
  CHECK(big.decode(big.encode("<t150>z")) == "<t150>z");
}

TEST_CASE("model config validation") {
  ToyModelConfig c;
  c.embed_dim = 15;
  c.n_heads = 2;
  CHECK_THROWS_AS(ToyTransformer{c}, ArgumentError);
  c = {};
  c.n_layers = 5;
  CHECK_THROWS_AS(ToyTransformer{c}, ArgumentError);
}
