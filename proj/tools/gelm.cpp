// Command-line front end: model initialization, attribution, evaluation,
// reporting and a protocol server for the built-in decoder.

#include <CLI11.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gelm/checkpoint.hpp"
#include "gelm/dataset.hpp"
#include "gelm/errors.hpp"
#include "gelm/experiment.hpp"
#include "gelm/html.hpp"
#include "gelm/oracle.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gelm {
namespace {

json read_json_file(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON at byte " + std::to_string(e.byte));
  }
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, sep);) {
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

std::optional<std::vector<std::size_t>> parse_layers(const std::string& spec) {
  if (spec == "all") return std::nullopt;
  std::vector<std::size_t> layers;
  for (const std::string& part : split(spec, ',')) {
    std::size_t used = 0;
    unsigned long value = 0;
    try {
      value = std::stoul(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size() || part.empty()) throw ConfigError("bad layer index '" + part + "'");
    layers.push_back(value);
  }
  if (layers.empty()) throw ConfigError("layer list is empty");
  return layers;
}

std::vector<Method> parse_methods(const std::string& spec) {
  if (spec == "all") return all_methods();
  std::vector<Method> methods;
  for (const std::string& name : split(spec, ',')) methods.push_back(parse_method(name));
  if (methods.empty()) throw ConfigError("method list is empty");
  return methods;
}

std::map<std::string, json> load_label_map(const std::string& path) {
  std::map<std::string, json> out;
  if (path.empty()) return out;
  const json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError("label map must be a JSON object");
  for (const auto& [label, value] : j.items()) out[label] = value;
  return out;
}

std::string sanitize(const std::string& id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  if (out != id || out.empty()) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(id)));
    out += std::string("-") + buf;
  }
  return out;
}

int cmd_init_model(const fs::path& config_path, std::optional<std::uint64_t> seed, const fs::path& out) {
  json j = read_json_file(config_path);
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  Checkpoint checkpoint;
  if (j.contains("tokenizer")) {
    checkpoint.tokenizer = tokenizer_from_json(j["tokenizer"]);
    j.erase("tokenizer");
  }
  ModelConfig config = config_from_json(j);
  if (seed) config.seed = *seed;
  checkpoint.params = init_model(config);
  checkpoint.make_tokenizer();  // validates the vocabulary against the config
  save_checkpoint(checkpoint, out);
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

struct AttributeOptions {
  fs::path model, input, out;
  std::string method = "grad_ellm", layers = "all", label_map;
  bool no_loosen = false;
  std::size_t draws = 3, ig_steps = 20;
  std::uint64_t seed = 0;
};

int cmd_attribute(const AttributeOptions& opt) {
  const Checkpoint checkpoint = load_checkpoint(opt.model);
  const auto tokenizer = checkpoint.make_tokenizer();
  if (!tokenizer) throw ConfigError("checkpoint stores no tokenizer");
  const Method method = parse_method(opt.method);
  const auto layers = parse_layers(opt.layers);
  const auto label_map = load_label_map(opt.label_map);
  InProcessOracle oracle(checkpoint.params, tokenizer.get());
  fs::create_directories(opt.out);

  for (const DatasetRecord& record : load_dataset(opt.input)) {
    const PromptTokens prompt = encode_prompt(record, [&](const std::string& t) { return tokenizer->encode(t); });
    if (prompt.tokens.empty()) {
      std::cerr << "skipping '" << record.id << "': empty prompt\n";
      continue;
    }
    const ForwardTrace trace = forward(checkpoint.params, prompt.tokens);
    const std::size_t t = prompt.tokens.size() - 1;

    // The label token when it resolves to one token, otherwise the model's
    // own next-token prediction.
    TokenId target = static_cast<TokenId>(argmax(next_token_distribution(trace, t).probs));
    if (record.label) {
      std::string text = *record.label;
      if (const auto it = label_map.find(text); it != label_map.end()) {
        if (it->second.is_number_integer()) {
          text.clear();
          target = it->second.get<TokenId>();
        } else {
          text = it->second.get<std::string>();
        }
      }
      if (!text.empty()) {
        if (auto id = tokenizer->single_token(text)) target = *id;
      }
    }

    AttributionRequest req;
    req.method = method;
    req.target = target;
    req.query_position = t;
    req.layers = layers;
    req.loosen = !opt.no_loosen;
    req.ig_steps = opt.ig_steps;
    req.random_seed = opt.seed ^ fnv1a(record.id);
    const RawHeat heat = attribute(checkpoint.params, trace, req);
    ScoreVector scores = normalize_scores(heat);
    for (std::size_t i = 0; i < scores.size(); ++i) scores.special[i] = prompt.special[i];

    std::vector<std::string> texts;
    for (TokenId id : prompt.tokens) texts.push_back(tokenizer->token_text(id));
    json doc{{"schema", "gelm.attribution/1"},
             {"id", record.id},
             {"method", method_name(method)},
             {"tokens", texts},
             {"token_ids", prompt.tokens},
             {"special", scores.special},
             {"raw", heat.total},
             {"scores", scores.scores},
             {"target", target},
             {"target_text", tokenizer->token_text(target)},
             {"query_position", t},
             {"layers", layers ? json(*layers) : json("all")},
             {"loosen", !opt.no_loosen}};

    const MetricSample sample = make_metric_sample(oracle, prompt.tokens, scores, fnv1a(record.id));
    doc["pi"] = scores.mean();
    if (sample.skipped) {
      doc["soft_ns"] = nullptr;
      doc["soft_nc"] = nullptr;
    } else {
      const StreamKey key{opt.seed, sample.id, 0, 0, MaskMode::kKeep};
      doc["soft_ns"] = soft_ns(oracle, sample, key, opt.draws).value;
      doc["soft_nc"] = soft_nc(oracle, sample, key, opt.draws).value;
    }
    const fs::path path = opt.out / (sanitize(record.id) + "." + std::string(method_name(method)) + ".json");
    write_file(path, doc.dump(2) + "\n");
    std::cout << path.string() << "\n";
  }
  return 0;
}

int cmd_render(const fs::path& attribution, const fs::path& out) {
  const json doc = read_json_file(attribution);
  ScoreVector scores;
  std::vector<std::string> tokens;
  HeatmapMetadata meta;
  try {
    scores.scores = doc.at("scores").get<std::vector<double>>();
    tokens = doc.at("tokens").get<std::vector<std::string>>();
    scores.special = doc.value("special", std::vector<bool>(tokens.size(), false));
    meta.method = doc.at("method").get<std::string>();
    meta.title = doc.value("id", std::string("attribution"));
    if (doc.contains("pi") && doc["pi"].is_number()) meta.pi = doc["pi"].get<double>();
    if (doc.contains("soft_ns") && doc["soft_ns"].is_number()) meta.soft_ns = doc["soft_ns"].get<double>();
    if (doc.contains("soft_nc") && doc["soft_nc"].is_number()) meta.soft_nc = doc["soft_nc"].get<double>();
  } catch (const json::exception& e) {
    throw FormatError("'" + attribution.string() + "' is not an attribution file: " + e.what());
  }
  write_file(out, render_heatmap_html(tokens, scores, meta));
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

struct EvaluateOptions {
  std::string model, oracle_cmd, dataset, methods = "grad_ellm,random", pi_grid = "0.05:0.05:0.95";
  std::string mode = "token", layers = "all", label_map, vocab, out;
  std::size_t draws = 3, stride = 5, gen_len = 11, threads = 1, ig_steps = 20;
  std::uint64_t seed = 0;
  bool no_loosen = false, delins = false;
  std::size_t steps = 20;
  double step_frac = 0.05;
};

ExperimentConfig to_config(const EvaluateOptions& opt) {
  ExperimentConfig cfg;
  if (!opt.model.empty()) cfg.model_path = opt.model;
  if (!opt.oracle_cmd.empty()) cfg.oracle_cmd = opt.oracle_cmd;
  cfg.dataset_path = opt.dataset;
  cfg.methods = parse_methods(opt.methods);
  cfg.curve.pi_grid = parse_pi_grid(opt.pi_grid);
  cfg.curve.n_draws = opt.draws;
  cfg.curve.seed = opt.seed;
  cfg.layers = parse_layers(opt.layers);
  cfg.loosen = !opt.no_loosen;
  cfg.ig_steps = opt.ig_steps;
  cfg.mode = parse_task_mode(opt.mode);
  cfg.stride = opt.stride;
  cfg.gen_len = opt.gen_len;
  cfg.label_map = load_label_map(opt.label_map);
  if (!opt.vocab.empty()) cfg.fallback_vocab = read_json_file(opt.vocab).get<std::vector<std::string>>();
  cfg.threads = opt.threads;
  cfg.deletion_insertion = opt.delins;
  cfg.delins.steps = opt.steps;
  cfg.delins.step_fraction = opt.step_frac;
  return cfg;
}

void print_summary(const json& report) {
  std::printf("%-26s %8s %10s %10s\n", "method", "samples", "auc_ns", "auc_nc");
  for (const auto& [method, avg] : report["averages"].items()) {
    auto cell = [&](const char* key) { return avg.contains(key) ? avg[key].get<double>() : std::nan(""); };
    std::printf("%-26s %8zu %10.4f %10.4f\n", method.c_str(), avg["samples"].get<std::size_t>(), cell("auc_ns"),
                cell("auc_nc"));
  }
  const json& skips = report["skips"];
  std::printf("skipped %zu of %zu samples\n", skips["samples"].get<std::size_t>(), skips["total"].get<std::size_t>());
  for (const auto& [reason, count] : skips["reasons"].items()) {
    std::printf("  %zu x %s\n", count.get<std::size_t>(), reason.c_str());
  }
}

int cmd_evaluate(const EvaluateOptions& opt) {
  const json report = run_experiment(to_config(opt));
  validate_report(report);
  fs::create_directories(opt.out);
  write_file(fs::path(opt.out) / "report.json", report_to_json_text(report));
  write_file(fs::path(opt.out) / "curves.csv", report_to_csv(report));
  print_summary(report);
  return 0;
}

int cmd_curve_auc(const fs::path& report_path) {
  const json report = read_json_file(report_path);
  validate_report(report);
  print_summary(report);
  return 0;
}

int cmd_delins(EvaluateOptions opt) {
  ExperimentConfig cfg = to_config(opt);
  cfg.compute_curves = false;
  cfg.deletion_insertion = true;
  const json report = run_experiment(cfg);
  validate_report(report);
  if (!opt.out.empty()) {
    fs::create_directories(opt.out);
    write_file(fs::path(opt.out) / "delins.json", report_to_json_text(report));
  }
  std::printf("%-26s %8s %13s %13s\n", "method", "samples", "deletion_auc", "insertion_auc");
  for (const auto& [method, avg] : report["averages"].items()) {
    if (!avg.contains("deletion_insertion")) {
      std::printf("%-26s %8d %13s %13s\n", method.c_str(), 0, "n/a", "n/a");
      continue;
    }
    const json& d = avg["deletion_insertion"];
    std::printf("%-26s %8zu %13.4f %13.4f\n", method.c_str(), d["samples"].get<std::size_t>(),
                d["deletion_auc"].get<double>(), d["insertion_auc"].get<double>());
  }
  return 0;
}

int cmd_serve(const fs::path& model) {
  const Checkpoint checkpoint = load_checkpoint(model);
  const auto tokenizer = checkpoint.make_tokenizer();
  InProcessOracle oracle(checkpoint.params, tokenizer.get());
  std::ios::sync_with_stdio(false);
  serve_protocol(oracle, std::cin, std::cout);
  return 0;
}

int cmd_conformance(const std::string& model, const std::string& oracle_cmd, std::size_t length, std::uint64_t seed) {
  std::optional<Checkpoint> checkpoint;
  std::unique_ptr<ModelOracle> oracle;
  if (!oracle_cmd.empty()) {
    oracle = ProtocolOracle::spawn(oracle_cmd);
  } else if (!model.empty()) {
    checkpoint = load_checkpoint(model);
    oracle = std::make_unique<InProcessOracle>(checkpoint->params);
  } else {
    throw ConfigError("need --model or --oracle-cmd");
  }
  const auto& caps = oracle->capabilities();
  if (length == 0 || length > caps.max_len) throw ConfigError("length must lie in [1, max_len]");
  TokenSequence tokens(length);
  for (std::size_t i = 0; i < length; ++i) tokens[i] = static_cast<TokenId>((seed + 7 * i) % caps.vocab_size);
  const ConformanceReport report = run_conformance(*oracle, tokens, seed);
  std::printf("backend          %s\n", caps.backend.c_str());
  std::printf("mask neutrality  %.3e\n", report.mask_neutrality);
  std::printf("mask composition %.3e\n", report.mask_composition);
  std::printf("token erasure    %.3e\n", report.token_erasure);
  std::printf("determinism      %.3e\n", report.determinism);
  for (const auto& f : report.failures) std::printf("FAIL %s\n", f.c_str());
  std::printf("%s\n", report.passed() ? "conformance passed" : "conformance failed");
  return report.passed() ? 0 : 1;
}

void add_metric_flags(CLI::App* cmd, EvaluateOptions& opt) {
  cmd->add_option("--model", opt.model, "Checkpoint path");
  cmd->add_option("--dataset", opt.dataset, "JSONL dataset")->required();
  cmd->add_option("--methods", opt.methods, "Comma-separated methods or 'all'");
  cmd->add_option("--seed", opt.seed, "Seed for every random stream");
  cmd->add_option("--layers", opt.layers, "Comma-separated block indices or 'all'");
  cmd->add_flag("--no-loosen", opt.no_loosen, "Use softmax attention instead of loosened similarities");
  cmd->add_option("--label-map", opt.label_map, "JSON object mapping label strings to a token or id");
  cmd->add_option("--ig-steps", opt.ig_steps, "Integrated-gradients steps");
  cmd->add_option("--threads", opt.threads, "Worker threads");
}

}  // namespace
}  // namespace gelm

int main(int argc, char** argv) {
  using namespace gelm;
  CLI::App app{"Grad-ELLM attribution and soft faithfulness metrics"};
  app.require_subcommand(1);

  fs::path init_config, init_out;
  std::optional<std::uint64_t> init_seed;
  auto* init = app.add_subcommand("init-model", "Initialize a decoder checkpoint");
  init->add_option("--config", init_config, "Model config JSON")->required();
  init->add_option("--seed", init_seed, "Override the config seed");
  init->add_option("--out", init_out, "Checkpoint path")->required();

  AttributeOptions attr;
  auto* attribute_cmd = app.add_subcommand("attribute", "Write attribution heatmaps for each dataset record");
  attribute_cmd->add_option("--model", attr.model, "Checkpoint path")->required();
  attribute_cmd->add_option("--method", attr.method, "Attribution method");
  attribute_cmd->add_option("--input", attr.input, "JSONL dataset")->required();
  attribute_cmd->add_option("--layers", attr.layers, "Comma-separated block indices or 'all'");
  attribute_cmd->add_flag("--no-loosen", attr.no_loosen, "Use softmax attention");
  attribute_cmd->add_option("--label-map", attr.label_map, "JSON label map");
  attribute_cmd->add_option("--draws", attr.draws, "Draws for the Soft-NS/NC summary");
  attribute_cmd->add_option("--seed", attr.seed, "Seed");
  attribute_cmd->add_option("--ig-steps", attr.ig_steps, "Integrated-gradients steps");
  attribute_cmd->add_option("--out", attr.out, "Output directory")->required();

  EvaluateOptions eval;
  auto* evaluate = app.add_subcommand("evaluate", "Run the pi-Soft-NS/NC evaluation");
  add_metric_flags(evaluate, eval);
  evaluate->add_option("--oracle-cmd", eval.oracle_cmd, "Backend command speaking the wire protocol");
  evaluate->add_option("--pi-grid", eval.pi_grid, "start:step:stop or comma list");
  evaluate->add_option("--draws", eval.draws, "Mask draws per pi");
  evaluate->add_option("--mode", eval.mode, "token or sequence");
  evaluate->add_option("--stride", eval.stride, "Sequence-mode step stride");
  evaluate->add_option("--gen-len", eval.gen_len, "Sequence-mode continuation length");
  evaluate->add_option("--vocab", eval.vocab, "Whitespace vocabulary JSON for backends that cannot tokenize");
  evaluate->add_flag("--delins", eval.delins, "Also compute deletion/insertion curves");
  evaluate->add_option("--out", eval.out, "Output directory")->required();

  fs::path auc_report;
  auto* curve_auc = app.add_subcommand("curve-auc", "Print per-method AUCs of a report");
  curve_auc->add_option("--report", auc_report, "report.json")->required();

  fs::path render_in, render_out;
  auto* render = app.add_subcommand("render", "Render an attribution file as an HTML heatmap");
  render->add_option("--attribution", render_in, "Attribution JSON")->required();
  render->add_option("--out", render_out, "HTML path")->required();

  EvaluateOptions del;
  auto* delins = app.add_subcommand("delins", "Deletion/insertion flip-probability curves");
  add_metric_flags(delins, del);
  delins->add_option("--steps", del.steps, "Number of steps");
  delins->add_option("--step-frac", del.step_frac, "Fraction of tokens per step");
  delins->add_option("--out", del.out, "Output directory");

  fs::path serve_model;
  auto* serve = app.add_subcommand("serve", "Serve a checkpoint over the wire protocol on stdin/stdout");
  serve->add_option("--model", serve_model, "Checkpoint path")->required();

  std::string conf_model, conf_cmd;
  std::size_t conf_length = 8;
  std::uint64_t conf_seed = 0;
  auto* conformance = app.add_subcommand("conformance", "Run the backend conformance checks");
  conformance->add_option("--model", conf_model, "Checkpoint path");
  conformance->add_option("--oracle-cmd", conf_cmd, "Backend command");
  conformance->add_option("--length", conf_length, "Probe sequence length");
  conformance->add_option("--seed", conf_seed, "Seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) return cmd_init_model(init_config, init_seed, init_out);
    if (*attribute_cmd) return cmd_attribute(attr);
    if (*evaluate) return cmd_evaluate(eval);
    if (*curve_auc) return cmd_curve_auc(auc_report);
    if (*render) return cmd_render(render_in, render_out);
    if (*delins) {
      if (del.model.empty()) throw ConfigError("delins needs --model");
      return cmd_delins(del);
    }
    if (*serve) return cmd_serve(serve_model);
    if (*conformance) return cmd_conformance(conf_model, conf_cmd, conf_length, conf_seed);
  } catch (const gelm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
