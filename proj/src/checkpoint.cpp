#include "gelm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "gelm/errors.hpp"

namespace gelm {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'G', 'E', 'L', 'M'};
constexpr std::size_t kPreambleSize = 4 + 4 + 8;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& bytes, std::size_t offset) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return value;
}

template <typename T>
T field(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' is missing or has the wrong type");
  }
}

}  // namespace

std::unique_ptr<Tokenizer> Checkpoint::make_tokenizer() const {
  if (!tokenizer) return nullptr;
  return gelm::make_tokenizer(tokenizer->kind, params.config.vocab_size, tokenizer->vocab);
}

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
              {"d_model", c.d_model},         {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len}, {"attention_only", c.attention_only},
              {"use_norm", c.use_norm},       {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known = {"n_layers",    "n_heads",        "d_model",  "vocab_size",
                                              "max_seq_len", "attention_only", "use_norm", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown model config field '" + key + "'");
  }
  ModelConfig c;
  if (j.contains("n_layers")) c.n_layers = field<std::size_t>(j, "n_layers");
  if (j.contains("n_heads")) c.n_heads = field<std::size_t>(j, "n_heads");
  if (j.contains("d_model")) c.d_model = field<std::size_t>(j, "d_model");
  if (j.contains("vocab_size")) c.vocab_size = field<std::size_t>(j, "vocab_size");
  if (j.contains("max_seq_len")) c.max_seq_len = field<std::size_t>(j, "max_seq_len");
  if (j.contains("attention_only")) c.attention_only = field<bool>(j, "attention_only");
  if (j.contains("use_norm")) c.use_norm = field<bool>(j, "use_norm");
  if (j.contains("seed")) c.seed = field<std::uint64_t>(j, "seed");
  c.validate();
  return c;
}

json tokenizer_to_json(const TokenizerSpec& spec) {
  json j{{"kind", spec.kind}};
  if (spec.kind == "whitespace") j["vocab"] = spec.vocab;
  return j;
}

TokenizerSpec tokenizer_from_json(const json& j) {
  TokenizerSpec spec;
  try {
    spec.kind = j.at("kind").get<std::string>();
    if (spec.kind == "whitespace") spec.vocab = j.at("vocab").get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw ConfigError("tokenizer needs a 'kind' and, for whitespace, a 'vocab' list of strings");
  }
  if (spec.kind != "whitespace" && spec.kind != "byte") throw ConfigError("unknown tokenizer '" + spec.kind + "'");
  return spec;
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  const ModelParameters& params = checkpoint.params;
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : params.named_tensors()) {
    manifest.push_back(json{{"name", name}, {"shape", tensor->shape()}, {"offset", offset}});
    offset += tensor->size() * sizeof(double);
  }
  json header{{"config", config_to_json(params.config)}, {"tensors", manifest}};
  if (checkpoint.tokenizer) header["tokenizer"] = tokenizer_to_json(*checkpoint.tokenizer);
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  out.reserve(out.size() + offset);
  for (const auto& [name, tensor] : params.named_tensors()) {
    for (double x : tensor->data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < kPreambleSize) throw FormatError("checkpoint is shorter than its preamble");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw FormatError("bad checkpoint magic");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_length = get_le<std::uint64_t>(bytes, 8);
  if (header_length > bytes.size() - kPreambleSize) throw FormatError("checkpoint header is truncated");

  json header;
  try {
    header = json::parse(bytes.substr(kPreambleSize, header_length));
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint header is not valid JSON at byte " + std::to_string(e.byte));
  }

  Checkpoint checkpoint;
  try {
    ModelConfig config = config_from_json(header.at("config"));
    config.validate();
    // Tensors of the right shapes; every one is overwritten below.
    checkpoint.params = init_model(config);
    if (header.contains("tokenizer")) checkpoint.tokenizer = tokenizer_from_json(header.at("tokenizer"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header lacks a config: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }

  const std::size_t data_start = kPreambleSize + header_length;
  const std::size_t data_size = bytes.size() - data_start;
  auto tensors = checkpoint.params.named_tensors();
  const json* manifest = nullptr;
  try {
    manifest = &header.at("tensors");
  } catch (const json::exception&) {
    throw FormatError("checkpoint header lacks a tensor manifest");
  }
  if (!manifest->is_array() || manifest->size() != tensors.size()) {
    throw FormatError("checkpoint manifest lists " + std::to_string(manifest->size()) + " tensors, expected " +
                      std::to_string(tensors.size()));
  }
  std::uint64_t expected_offset = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& [name, tensor] = tensors[t];
    const json& entry = (*manifest)[t];
    std::string entry_name;
    Tensor::Shape shape;
    std::uint64_t offset = 0;
    try {
      entry_name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Tensor::Shape>();
      offset = entry.at("offset").get<std::uint64_t>();
    } catch (const json::exception&) {
      throw FormatError("malformed manifest entry " + std::to_string(t));
    }
    if (entry_name != name) throw FormatError("manifest entry " + std::to_string(t) + " is '" + entry_name +
                                              "', expected '" + name + "'");
    if (shape != tensor->shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(tensor->shape()));
    }
    if (offset != expected_offset) throw FormatError("tensor '" + name + "' has an unexpected offset");
    const std::uint64_t length = tensor->size() * sizeof(double);
    if (offset + length > data_size) throw FormatError("checkpoint truncated inside tensor '" + name + "'");
    auto values = tensor->data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, data_start + offset + i * sizeof(double)));
    }
    expected_offset = offset + length;
  }
  if (expected_offset != data_size) throw FormatError("checkpoint has trailing bytes after the last tensor");
  return checkpoint;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write to '" + path.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace gelm
