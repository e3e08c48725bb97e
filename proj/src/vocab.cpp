#include "anchor/vocab.hpp"

#include <algorithm>
#include <set>

namespace anchor {

namespace {

constexpr std::string_view kCharset =
    "abcdefghijklmnopqrstuvwxyz0123456789 ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "\n.,;:!?()[]{}<>=+-*/_%&|^~#@$'\"`\\";

}  // namespace

bool VocabSpec::is_stop(TokenId id) const {
  return std::find(stop_ids.begin(), stop_ids.end(), id) != stop_ids.end();
}

void VocabSpec::validate() const {
  if (size <= 0) throw ArgumentError("vocab size must be positive");
  if (mask_id < 0 || mask_id >= size) throw ArgumentError("mask_id out of range");
  for (TokenId s : stop_ids) {
    if (s < 0 || s >= size) throw ArgumentError("stop id " + std::to_string(s) + " out of range");
  }
  if (!token_strings.empty()) {
    if (static_cast<int>(token_strings.size()) != size) {
      throw ArgumentError("token_strings must have one entry per id");
    }
    std::set<std::string_view> seen;
    for (const auto& s : token_strings) {
      if (s.empty()) throw ArgumentError("empty token string");
      if (!seen.insert(s).second) throw ArgumentError("duplicate token string '" + s + "'");
    }
  }
}

VocabSpec make_default_vocab(int size) {
  if (size < 3) throw ArgumentError("default vocabulary needs at least 3 tokens");
  VocabSpec v;
  v.size = size;
  v.mask_id = 0;
  v.stop_ids = {1};
  v.token_strings.reserve(size);
  v.token_strings.emplace_back("<mask>");
  v.token_strings.emplace_back("<eos>");
  for (int id = 2; id < size; ++id) {
    const auto c = static_cast<std::size_t>(id - 2);
    if (c < kCharset.size()) {
      v.token_strings.emplace_back(1, kCharset[c]);
    } else {
      v.token_strings.push_back("<t" + std::to_string(id) + ">");
    }
  }
  return v;
}

Tokenizer::Tokenizer(const VocabSpec& vocab) : vocab_(vocab) {
  vocab_.validate();
  if (vocab_.token_strings.empty()) throw ArgumentError("tokenizer needs token strings");
  for (int id = 0; id < vocab_.size; ++id) {
    if (id == vocab_.mask_id) continue;
    const auto& s = vocab_.token_strings[id];
    lookup_.emplace(s, id);
    longest_ = std::max(longest_, s.size());
  }
}

Tokens Tokenizer::encode(std::string_view text) const {
  Tokens out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    bool matched = false;
    for (std::size_t len = std::min(longest_, text.size() - pos); len > 0; --len) {
      auto it = lookup_.find(std::string(text.substr(pos, len)));
      if (it != lookup_.end()) {
        out.push_back(it->second);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      // Report the untokenizable run up to the next tokenizable position.
      std::size_t end = pos + 1;
      while (end < text.size() && !lookup_.count(std::string(text.substr(end, 1)))) ++end;
      throw ArgumentError("untokenizable substring '" + std::string(text.substr(pos, end - pos)) +
                          "' at offset " + std::to_string(pos));
    }
  }
  return out;
}

std::string Tokenizer::decode(const Tokens& tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (vocab_.is_stop(t)) continue;
    out += token_string(t);
  }
  return out;
}

const std::string& Tokenizer::token_string(TokenId id) const {
  if (id < 0 || id >= vocab_.size) throw ArgumentError("token id out of range");
  return vocab_.token_strings[id];
}

}  // namespace anchor
