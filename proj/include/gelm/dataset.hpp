#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gelm/model.hpp"
#include "gelm/tokenizer.hpp"

namespace gelm {

struct DatasetRecord {
  std::string id;
  std::string text;
  std::optional<std::string> label;
  std::optional<std::string> prompt_template;  // exactly one "{text}"

  std::string prompt() const;
};

// JSONL, one record per line. Blank lines are skipped; extra fields are
// ignored. Throws FormatError naming the line on malformed input and on
// duplicate ids.
std::vector<DatasetRecord> parse_dataset(const std::string& contents);
std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path);

// Prompt tokens with template positions flagged. Template text and record
// text are tokenized separately so the flags are exact.
struct PromptTokens {
  TokenSequence tokens;
  std::vector<bool> special;
};

// Text before and after the placeholder. Throws FormatError unless there is
// exactly one.
std::pair<std::string, std::string> split_template(const std::string& prompt_template);

template <typename Encode>
PromptTokens encode_prompt(const DatasetRecord& record, Encode&& encode) {
  PromptTokens out;
  auto append = [&](const std::string& text, bool special) {
    if (text.empty()) return;
    for (TokenId id : encode(text)) {
      out.tokens.push_back(id);
      out.special.push_back(special);
    }
  };
  if (!record.prompt_template) {
    append(record.text, false);
    return out;
  }
  const auto [before, after] = split_template(*record.prompt_template);
  append(before, true);
  append(record.text, false);
  append(after, true);
  return out;
}

// 64-bit FNV-1a; used to derive stream keys from record ids.
std::uint64_t fnv1a(std::string_view text);

}  // namespace gelm
