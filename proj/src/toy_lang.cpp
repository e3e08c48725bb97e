#include "anchor/toy_lang.hpp"

#include <algorithm>
#include <cctype>

namespace anchor::toy {

namespace {
constexpr std::size_t kMaxLength = 1 << 16;
}

std::optional<std::string> run(std::string_view program, std::string_view input) {
  std::string s(input);
  for (char op : program) {
    switch (op) {
      case 'd':
        if (2 * s.size() > kMaxLength) return std::nullopt;
        s += s;
        break;
      case 'r':
        std::reverse(s.begin(), s.end());
        break;
      case 'u':
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::toupper(ch)); });
        break;
      case 'l':
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
        break;
      case 'h':
        if (!s.empty()) s.erase(s.begin());
        break;
      case 't':
        if (!s.empty()) s.pop_back();
        break;
      case 's':
        std::sort(s.begin(), s.end());
        break;
      case 'c':
        if (!s.empty()) std::rotate(s.begin(), s.begin() + 1, s.end());
        break;
      case ' ':
      case '\t':
      case '\n':
        break;
      default:
        if (op >= '0' && op <= '9') {
          if (s.size() + 1 > kMaxLength) return std::nullopt;
          s.push_back(op);
          break;
        }
        return std::nullopt;
    }
  }
  return s;
}

}  // namespace anchor::toy
