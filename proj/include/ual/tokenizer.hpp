#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ual {

// Byte-level vocabulary: ids 0-255 are raw bytes, followed by three specials.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kByteVocabSize = 259;

inline bool is_special_token(int id) noexcept { return id >= 256; }

/// Bytes of `text` without any specials.
std::vector<int> encode_bytes(std::string_view text);

/// [BOS] + bytes + [EOS].
std::vector<int> tokenize(std::string_view text);

/// Concatenates byte tokens; specials are dropped.
std::string detokenize(std::span<const int> ids);

}  // namespace ual
