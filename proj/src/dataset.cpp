#include "gelm/dataset.hpp"

#include <nlohmann/json.hpp>
#include <sstream>
#include <unordered_set>

#include "gelm/checkpoint.hpp"
#include "gelm/errors.hpp"

namespace gelm {

using nlohmann::json;

namespace {

constexpr std::string_view kPlaceholder = "{text}";

std::size_t count_placeholders(const std::string& s) {
  std::size_t count = 0;
  for (auto pos = s.find(kPlaceholder); pos != std::string::npos; pos = s.find(kPlaceholder, pos + 1)) ++count;
  return count;
}

std::optional<std::string> optional_string(const json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw FormatError("line " + std::to_string(line) + ": '" + key + "' must be a string");
  return it->get<std::string>();
}

}  // namespace

std::pair<std::string, std::string> split_template(const std::string& prompt_template) {
  if (count_placeholders(prompt_template) != 1) {
    throw FormatError("prompt template must contain exactly one {text}: '" + prompt_template + "'");
  }
  const auto pos = prompt_template.find(kPlaceholder);
  return {prompt_template.substr(0, pos), prompt_template.substr(pos + kPlaceholder.size())};
}

std::string DatasetRecord::prompt() const {
  if (!prompt_template) return text;
  const auto [before, after] = split_template(*prompt_template);
  return before + text + after;
}

std::vector<DatasetRecord> parse_dataset(const std::string& contents) {
  std::vector<DatasetRecord> records;
  std::unordered_set<std::string> seen;
  std::istringstream in(contents);
  std::size_t line_number = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_number);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(where + ": invalid JSON at byte " + std::to_string(e.byte));
    }
    if (!j.is_object()) throw FormatError(where + ": record must be a JSON object");
    DatasetRecord record;
    const auto id = optional_string(j, "id", line_number);
    const auto text = optional_string(j, "text", line_number);
    if (!id || id->empty()) throw FormatError(where + ": missing 'id'");
    if (!text) throw FormatError(where + ": missing 'text'");
    record.id = *id;
    record.text = *text;
    record.label = optional_string(j, "label", line_number);
    record.prompt_template = optional_string(j, "prompt_template", line_number);
    if (record.prompt_template && count_placeholders(*record.prompt_template) != 1) {
      throw FormatError(where + ": prompt_template must contain exactly one {text}");
    }
    if (!seen.insert(record.id).second) throw FormatError(where + ": duplicate id '" + record.id + "'");
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path) {
  return parse_dataset(read_file(path));
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace gelm
