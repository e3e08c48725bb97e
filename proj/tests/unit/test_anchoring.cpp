#include <doctest.h>

#include <random>

#include "anchor/anchoring.hpp"

using namespace anchor;

namespace {

const Tokenizer& tokenizer() {
  static const Tokenizer t(make_default_vocab(64));
  return t;
}

Logits vec(std::initializer_list<double> v) {
  Logits out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST_CASE("markup parsing") {
  const PromptSpec p = parse_markup("ab⟦cd⟧e");
  REQUIRE(p.segments.size() == 3);
  CHECK(p.segments[1] == Segment{"cd", true});
  CHECK(p.text() == "abcde");
  CHECK(p.has_anchor());
  CHECK_FALSE(parse_markup("plain").has_anchor());
  CHECK(parse_markup("a⟦⟦b").segments == std::vector<Segment>{{"a⟦b", false}});
  CHECK_THROWS_AS(parse_markup("⟦a⟦b⟧⟧⟧"), ArgumentError);
  CHECK_THROWS_AS(parse_markup("a⟧"), ArgumentError);
  CHECK_THROWS_AS(parse_markup("⟦a"), ArgumentError);

  const Delimiters ascii{"[[", "]]"};
  CHECK(parse_markup("x[[y]]", ascii).segments.back() == Segment{"y", true});
}

TEST_CASE("markup round trip") {
  const std::vector<PromptSpec> prompts = {
      {{{"ab", false}, {"cd", true}}},
      {{{"a⟦b", true}, {"x⟧y", false}}},
      {{{"a", true}, {"b", false}, {"c", true}}},
  };
  for (const auto& p : prompts) CHECK(parse_markup(render_markup(p)).segments == p.segments);
  // A literal delimiter at a segment boundary renders ambiguously.
  CHECK(render_markup({{{"⟦", true}}}) == "⟦⟦⟦⟧");
}

TEST_CASE("anchor resolution") {
  SUBCASE("segment boundaries") {
    const auto r = resolve_anchors({{{"ab", false}, {"cd", true}}}, tokenizer());
    CHECK(r.tokens == tokenizer().encode("abcd"));
    CHECK(r.resolution.positions == Tokens{2, 3});
    CHECK(r.resolution.prompt_length == 4);
  }
  SUBCASE("everything anchored") {
    const auto r = resolve_anchors({{{"abc", true}, {"de", true}}}, tokenizer());
    CHECK(r.resolution.positions == Tokens{0, 1, 2, 3, 4});
  }
  SUBCASE("prefix sums over segment token counts") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      PromptSpec p;
      for (int s = 0; s < 1 + static_cast<int>(rng() % 6); ++s) {
        std::string text(1 + rng() % 4, 'a');
        for (auto& c : text) c = static_cast<char>('a' + rng() % 26);
        p.segments.push_back({text, rng() % 2 == 0});
      }
      Tokens want;
      int offset = 0;
      for (const auto& s : p.segments) {
        const int n = static_cast<int>(tokenizer().encode(s.text).size());
        if (s.anchored)
          for (int i = 0; i < n; ++i) want.push_back(offset + i);
        offset += n;
      }
      CHECK(resolve_anchors(p, tokenizer()).resolution.positions == want);
    }
  }
  SUBCASE("a c anchored") {
    const auto r = resolve_anchors({{{"a", true}, {"b", false}, {"c", true}}}, tokenizer());
    CHECK(r.resolution.positions == Tokens{0, 2});
  }
  SUBCASE("untokenizable segment names the substring") {
    CHECK_THROWS_WITH_AS(resolve_anchors({{{"ab\x01", true}}}, tokenizer()), doctest::Contains("\x01"), ArgumentError);
  }
}

TEST_CASE("covering resolution widens straddling tokens") {
  const Tokenizer big(make_default_vocab(200));
  // "<t150>" is one token; anchoring only its tail must widen to the whole token.
  const PromptSpec p{{{"a<t1", false}, {"50>b", true}}};
  const auto r = resolve_anchors_covering(p, big);
  CHECK(r.tokens.size() == 3);
  CHECK(r.resolution.positions == Tokens{1, 2});
  CHECK(r.resolution.expanded);
  const auto aligned = resolve_anchors_covering({{{"ab", false}, {"c", true}}}, big);
  CHECK_FALSE(aligned.resolution.expanded);
  CHECK(aligned.resolution.positions == Tokens{2});
}

TEST_CASE("masked context construction") {
  const AnchorResolution res{{1, 2}, 3, false};
  CHECK(build_masked_context(Tokens{5, 6, 7, 8, 9}, res, 0) == Tokens{5, 0, 0, 8, 9});
  CHECK(build_masked_context(Tokens{5, 6, 7}, AnchorResolution{{}, 3, false}, 0) == Tokens{5, 6, 7});
  CHECK_THROWS_AS(build_masked_context(Tokens{5, 6, 7}, AnchorResolution{{3}, 3, false}, 0), ArgumentError);
}

TEST_CASE("fixed-strength combination") {
  const Logits a = vec({2.0, 0.0});
  const Logits b = vec({0.0, 1.0});
  CHECK(combine_fixed(a, b, 1.25) == vec({2.5, -0.25}));
  CHECK(combine_fixed(a, b, 1.0) == a);
  CHECK(combine_fixed(a, b, 0.0) == b);
  CHECK_THROWS_AS(combine_fixed(a, vec({1.0}), 1.0), ArgumentError);
}

TEST_CASE("affine shift leaves the argmax unchanged") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  for (int t = 0; t < 100; ++t) {
    Logits a(12), b(12);
    for (int i = 0; i < 12; ++i) {
      a[i] = n(rng);
      b[i] = n(rng);
    }
    const double c = 3.0 * n(rng);
    const Logits base = combine_fixed(a, b, 1.5);
    const Logits shifted = combine_fixed((a.array() + c).matrix(), (b.array() + c).matrix(), 1.5);
    Eigen::Index i0, i1;
    base.maxCoeff(&i0);
    shifted.maxCoeff(&i1);
    CHECK(i0 == i1);
  }
}

TEST_CASE("confidence combination") {
  CHECK(combine_confidence(vec({1.0, 1.0}), vec({0.0, 2.0}), 0.5) == vec({1.25, 0.75}));
  const Logits a = vec({0.3, -1.0, 2.0});
  CHECK(combine_confidence(a, vec({1.0, 1.0, 1.0}), 0.0) == a);
  const Logits sat = combine_confidence(vec({10.0, -10.0}), vec({0.0, 0.0}), 1.0);
  CHECK(std::abs(sat[0] - 10.0) < 1e-3);
  CHECK_THROWS_AS(combine_confidence(a, a, -1.0), ArgumentError);
}

TEST_CASE("truncated combination") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n;
  Logits a(32), b(32);
  for (int i = 0; i < 32; ++i) {
    a[i] = n(rng);
    b[i] = n(rng);
  }
  const Logits full = combine_fixed(a, b, 1.4);
  for (int k : {1, 8, 32}) {
    const Scores s = combine_truncated(top_k(a, k), [&](TokenId id) { return b[id]; }, 1.4, k);
    REQUIRE(s.size() == static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) CHECK(s.values[i] == full[s.ids[static_cast<std::size_t>(i)]]);
    if (k == 1) {
      Eigen::Index top;
      a.maxCoeff(&top);
      CHECK(s.ids[0] == top);
    }
  }
  Scores dup = top_k(a, 2);
  dup.ids[1] = dup.ids[0];
  CHECK_THROWS_AS(combine_truncated(dup, [&](TokenId id) { return b[id]; }, 1.4, 2), ArgumentError);
}

TEST_CASE("config validation") {
  AnchoringConfig c;
  c.mode = AnchorMode::confidence;
  c.lambda = 1.0;
  c.top_k = 4;
  CHECK_THROWS_AS(c.validate(16), ArgumentError);
  c.mode = AnchorMode::fixed;
  CHECK_NOTHROW(c.validate(16));
  c.top_k = 17;
  CHECK_THROWS_AS(c.validate(16), ArgumentError);
  CHECK(preset_strength() == 1.25);
  CHECK(AnchoringConfig{}.omega == 1.25);
}
