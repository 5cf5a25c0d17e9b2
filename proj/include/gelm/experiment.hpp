#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gelm/attribution.hpp"
#include "gelm/metrics.hpp"

namespace gelm {

enum class TaskMode { kToken, kSequence };

std::string_view task_mode_name(TaskMode mode);
TaskMode parse_task_mode(std::string_view name);

struct ExperimentConfig {
  // At least one model source. With both, the checkpoint drives attribution
  // and the oracle command drives the metrics.
  std::optional<std::filesystem::path> model_path;
  std::optional<std::string> oracle_cmd;
  std::filesystem::path dataset_path;

  std::vector<Method> methods = {Method::kGradEllm, Method::kRandom};
  CurveSettings curve;
  std::optional<std::vector<std::size_t>> layers;
  bool loosen = true;
  std::size_t ig_steps = 20;

  TaskMode mode = TaskMode::kToken;
  std::size_t stride = 5;
  std::size_t gen_len = 11;  // sequence mode continuation length

  // Label string -> token text (string) or token id (integer).
  std::map<std::string, nlohmann::json> label_map;
  // Whitespace vocabulary used when neither a checkpoint tokenizer nor
  // backend tokenization is available.
  std::vector<std::string> fallback_vocab;

  bool compute_curves = true;
  bool deletion_insertion = false;
  DeletionInsertionSettings delins;

  std::size_t threads = 1;  // does not affect the report

  // Throws ConfigError.
  void validate() const;
  nlohmann::json echo() const;
};

inline constexpr std::string_view kReportSchema = "gelm.metric_report/1";

// Runs every (sample, method) cell. Per-sample failures are recorded as
// skips and the run continues.
nlohmann::json run_experiment(const ExperimentConfig& config);

// Throws FormatError when the report does not match its schema id.
void validate_report(const nlohmann::json& report);

// Stable text forms of a report.
std::string report_to_json_text(const nlohmann::json& report);
std::string report_to_csv(const nlohmann::json& report);

}  // namespace gelm
