#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace daptkit::utf8 {

/// Byte offset of the first malformed sequence, or nullopt if `text` is valid
/// UTF-8 (overlong forms, surrogates and code points above U+10FFFF rejected).
std::optional<std::size_t> find_invalid(std::string_view text);

/// Length in bytes of the sequence starting with lead byte `lead`.
std::size_t sequence_length(unsigned char lead);

/// Splits valid UTF-8 into one string per code point.
std::vector<std::string> split_code_points(std::string_view text);

/// Decodes the code point starting at `text[pos]`; assumes valid input.
char32_t decode_at(std::string_view text, std::size_t pos);

}  // namespace daptkit::utf8
