#include "gelm/tokenizer.hpp"

#include "gelm/errors.hpp"

namespace gelm {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::optional<TokenId> Tokenizer::single_token(std::string_view text) const {
  try {
    const TokenSequence ids = encode(text);
    if (ids.size() == 1) return ids.front();
  } catch (const InputError&) {
  }
  return std::nullopt;
}

WhitespaceTokenizer::WhitespaceTokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  if (vocab_.size() < 2) throw ConfigError("whitespace vocabulary needs at least two entries");
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const std::string& word = vocab_[i];
    if (word.empty()) throw ConfigError("empty vocabulary entry at index " + std::to_string(i));
    for (char c : word) {
      if (is_space(c)) throw ConfigError("vocabulary entry '" + word + "' contains whitespace");
    }
    if (!index_.emplace(word, static_cast<TokenId>(i)).second) {
      throw ConfigError("duplicate vocabulary entry '" + word + "'");
    }
  }
  if (auto it = index_.find("<unk>"); it != index_.end()) unk_ = it->second;
}

TokenSequence WhitespaceTokenizer::encode(std::string_view text) const {
  TokenSequence ids;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) {
      const std::string word(text.substr(i, j - i));
      if (auto it = index_.find(word); it != index_.end()) {
        ids.push_back(it->second);
      } else if (unk_) {
        ids.push_back(*unk_);
      } else {
        throw InputError("word '" + word + "' is not in the vocabulary");
      }
    }
    i = j;
  }
  return ids;
}

std::optional<TokenId> WhitespaceTokenizer::single_token(std::string_view text) const {
  std::size_t begin = 0, end = text.size();
  while (begin < end && is_space(text[begin])) ++begin;
  while (end > begin && is_space(text[end - 1])) --end;
  if (const auto it = index_.find(std::string(text.substr(begin, end - begin))); it != index_.end()) return it->second;
  return std::nullopt;
}

std::string WhitespaceTokenizer::token_text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) throw InputError("token id out of range");
  return vocab_[static_cast<std::size_t>(id)];
}

ByteTokenizer::ByteTokenizer(std::size_t vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size < 256) throw ConfigError("byte tokenizer needs vocab_size >= 256");
}

TokenSequence ByteTokenizer::encode(std::string_view text) const {
  TokenSequence ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string ByteTokenizer::token_text(TokenId id) const {
  if (id < 0 || id > 255) throw InputError("byte token id out of range");
  return std::string(1, static_cast<char>(id));
}

std::unique_ptr<Tokenizer> make_tokenizer(std::string_view kind, std::size_t vocab_size,
                                          const std::vector<std::string>& vocab) {
  if (kind == "whitespace") {
    if (vocab.size() != vocab_size) {
      throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " entries, model expects " +
                        std::to_string(vocab_size));
    }
    return std::make_unique<WhitespaceTokenizer>(vocab);
  }
  if (kind == "byte") return std::make_unique<ByteTokenizer>(vocab_size);
  throw ConfigError("unknown tokenizer '" + std::string(kind) + "'");
}

}  // namespace gelm
