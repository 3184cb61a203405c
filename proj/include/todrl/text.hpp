#ifndef TODRL_TEXT_HPP_
#define TODRL_TEXT_HPP_

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace todrl {

// Lowercases and collapses every whitespace run to a single space.
std::string normalize_text(std::string_view text);

// Splits on whitespace; the result never contains empty tokens.
std::vector<std::string> split_tokens(std::string_view text);

std::string join_tokens(std::span<const std::string> tokens);

// True for identifiers: non-empty, lowercase, no whitespace.
bool is_identifier(std::string_view text);

}  // namespace todrl

#endif  // TODRL_TEXT_HPP_
