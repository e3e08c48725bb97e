#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace anchor::toy {

/// Runs a toy string-transformation program on `input`.
///
/// Instructions, applied left to right:
///   d  duplicate        r  reverse        u  uppercase      l  lowercase
///   h  drop first char  t  drop last char s  sort chars     c  rotate left
///   0-9  append that digit
/// Whitespace is ignored. Any other character is a syntax error, reported
/// as std::nullopt, as is output growing past 65536 characters.
std::optional<std::string> run(std::string_view program, std::string_view input);

}  // namespace anchor::toy
