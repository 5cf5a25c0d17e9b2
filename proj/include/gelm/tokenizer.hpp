#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gelm/model.hpp"

namespace gelm {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual std::string_view name() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual TokenSequence encode(std::string_view text) const = 0;
  // Display text for one token id.
  virtual std::string token_text(TokenId id) const = 0;
  // Id of a text that encodes to exactly one token, if any.
  virtual std::optional<TokenId> single_token(std::string_view text) const;
};

// Splits on ASCII whitespace and looks words up in a fixed vocabulary.
// Unknown words map to "<unk>" when the vocabulary has it; otherwise
// encoding throws InputError.
class WhitespaceTokenizer final : public Tokenizer {
 public:
  explicit WhitespaceTokenizer(std::vector<std::string> vocab);

  std::string_view name() const override { return "whitespace"; }
  std::size_t vocab_size() const override { return vocab_.size(); }
  TokenSequence encode(std::string_view text) const override;
  std::string token_text(TokenId id) const override;
  // Exact vocabulary entries only; words that would fall back to "<unk>"
  // have no id.
  std::optional<TokenId> single_token(std::string_view text) const override;

  const std::vector<std::string>& vocab() const { return vocab_; }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  std::optional<TokenId> unk_;
};

// One token per byte; ids 0..255.
class ByteTokenizer final : public Tokenizer {
 public:
  explicit ByteTokenizer(std::size_t vocab_size);

  std::string_view name() const override { return "byte"; }
  std::size_t vocab_size() const override { return vocab_size_; }
  TokenSequence encode(std::string_view text) const override;
  std::string token_text(TokenId id) const override;

 private:
  std::size_t vocab_size_;
};

// "whitespace" needs a vocabulary; "byte" ignores it.
std::unique_ptr<Tokenizer> make_tokenizer(std::string_view kind, std::size_t vocab_size,
                                          const std::vector<std::string>& vocab);

}  // namespace gelm
