#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gelm/model.hpp"
#include "gelm/tokenizer.hpp"

namespace gelm {

// Tokenizer description stored alongside the weights.
struct TokenizerSpec {
  std::string kind = "byte";       // "byte" or "whitespace"
  std::vector<std::string> vocab;  // whitespace only

  friend bool operator==(const TokenizerSpec&, const TokenizerSpec&) = default;
};

struct Checkpoint {
  ModelParameters params;
  std::optional<TokenizerSpec> tokenizer;

  // Builds the stored tokenizer, or nullptr when none is stored.
  std::unique_ptr<Tokenizer> make_tokenizer() const;
};

nlohmann::json config_to_json(const ModelConfig& config);
// Strict: unknown keys and wrong types raise ConfigError. Missing keys keep
// their defaults.
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json tokenizer_to_json(const TokenizerSpec& spec);
TokenizerSpec tokenizer_from_json(const nlohmann::json& j);

// File layout: "GELM", u32 version (LE), u64 header length (LE), JSON
// header, then every tensor as little-endian f64, row-major, in manifest
// order. Manifest offsets are bytes from the start of the data region.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
// Writes through a temporary file and renames it into place.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace gelm
