#pragma once

// Fixed token table, version "vocab-v1".
//
//   id  0..3    <pad> <bos> <eos> <sep>
//   id  4..13   digits 0..9
//   id 14..23   letters a..j
//   id 24..29   INSTR_COPY INSTR_REV INSTR_SORT INSTR_INC INSTR_CAESAR INSTR_GENERIC
//   id 30..34   CUE_1..CUE_5
//   id 35..47   FILL_0..FILL_12 (filler words for expert prompts)

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace metatuner::vocab {

inline constexpr std::string_view kVersion = "vocab-v1";
inline constexpr int kSize = 48;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kDigit0 = 4;
inline constexpr int kLetterA = 14;
inline constexpr int kInstrCopy = 24;
inline constexpr int kInstrRev = 25;
inline constexpr int kInstrSort = 26;
inline constexpr int kInstrInc = 27;
inline constexpr int kInstrCaesar = 28;
inline constexpr int kInstrGeneric = 29;
inline constexpr int kCue1 = 30;
inline constexpr int kFill0 = 35;
inline constexpr int kNumCues = 5;
inline constexpr int kNumFill = 13;

constexpr bool is_digit(int id) { return id >= kDigit0 && id < kDigit0 + 10; }
constexpr bool is_letter(int id) { return id >= kLetterA && id < kLetterA + 10; }
constexpr bool is_symbol(int id) { return is_digit(id) || is_letter(id); }
constexpr bool is_instruction(int id) { return id >= kInstrCopy && id <= kInstrGeneric; }
constexpr bool is_cue(int id) { return id >= kCue1 && id < kCue1 + kNumCues; }
constexpr bool is_special(int id) { return id >= kPad && id <= kSep; }

const std::array<std::string_view, kSize>& names();
std::string_view name(int id);
std::optional<int> lookup(std::string_view token);

/// Space-separated token names.
std::string encode_text(std::span<const int> ids);
/// Inverse of encode_text; throws FormatError on unknown names.
std::vector<int> decode_text(std::string_view text);

}  // namespace metatuner::vocab
