#include "metatuner/vocab.hpp"

#include <sstream>

#include "metatuner/errors.hpp"

namespace metatuner::vocab {

const std::array<std::string_view, kSize>& names() {
  static const std::array<std::string_view, kSize> table = {
      "<pad>",  "<bos>",  "<eos>",  "<sep>",  "0",          "1",         "2",          "3",
      "4",      "5",      "6",      "7",      "8",          "9",         "a",          "b",
      "c",      "d",      "e",      "f",      "g",          "h",         "i",          "j",
      "INSTR_COPY", "INSTR_REV", "INSTR_SORT", "INSTR_INC", "INSTR_CAESAR", "INSTR_GENERIC", "CUE_1", "CUE_2",
      "CUE_3",  "CUE_4",  "CUE_5",  "FILL_0", "FILL_1",     "FILL_2",    "FILL_3",     "FILL_4",
      "FILL_5", "FILL_6", "FILL_7", "FILL_8", "FILL_9",     "FILL_10",   "FILL_11",    "FILL_12",
  };
  return table;
}

std::string_view name(int id) {
  if (id < 0 || id >= kSize) throw IndexError("vocab: id " + std::to_string(id) + " out of range");
  return names()[static_cast<std::size_t>(id)];
}

std::optional<int> lookup(std::string_view token) {
  const auto& t = names();
  for (int i = 0; i < kSize; ++i) {
    if (t[static_cast<std::size_t>(i)] == token) return i;
  }
  return std::nullopt;
}

std::string encode_text(std::span<const int> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += name(ids[i]);
  }
  return out;
}

std::vector<int> decode_text(std::string_view text) {
  std::vector<int> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    if (pos >= text.size()) break;
    std::size_t end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto tok = text.substr(pos, end - pos);
    const auto id = lookup(tok);
    if (!id) throw FormatError("vocab: unknown token '" + std::string(tok) + "'");
    ids.push_back(*id);
    pos = end;
  }
  return ids;
}

}  // namespace metatuner::vocab
