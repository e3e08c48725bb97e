#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "anchor/types.hpp"

namespace anchor {

struct VocabSpec {
  int size = 0;
  TokenId mask_id = 0;
  std::vector<TokenId> stop_ids;
  /// Surface strings indexed by id. Empty for remote vocabularies.
  std::vector<std::string> token_strings;

  bool is_stop(TokenId id) const;
  /// Throws ArgumentError when an invariant is violated.
  void validate() const;
};

/// `<mask>`, `<eos>` (stop), then printable characters, then `<tN>` fillers.
VocabSpec make_default_vocab(int size);

/// Greedy longest-match tokenizer over a bijective string vocabulary.
/// The mask token is never produced by `encode`.
class Tokenizer {
 public:
  explicit Tokenizer(const VocabSpec& vocab);

  /// Throws ArgumentError naming the first substring that matches no token.
  Tokens encode(std::string_view text) const;
  /// Stop tokens are dropped from the output text.
  std::string decode(const Tokens& tokens) const;
  const std::string& token_string(TokenId id) const;
  const VocabSpec& vocab() const { return vocab_; }

 private:
  VocabSpec vocab_;
  std::unordered_map<std::string, TokenId> lookup_;
  std::size_t longest_ = 0;
};

}  // namespace anchor
