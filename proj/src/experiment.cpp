#include "gelm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <sstream>
#include <thread>
#include <variant>

#include "gelm/checkpoint.hpp"
#include "gelm/dataset.hpp"
#include "gelm/errors.hpp"
#include "gelm/oracle.hpp"
#include "gelm/tokenizer.hpp"

namespace gelm {

using nlohmann::json;

namespace {

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

json curve_json(const FaithfulnessCurve& c) {
  json j{{"pi", c.pi_grid},       {"ns_mean", c.ns_mean}, {"ns_std", c.ns_std},   {"nc_mean", c.nc_mean},
         {"nc_std", c.nc_std},    {"auc_ns", c.auc_ns},   {"auc_nc", c.auc_nc},   {"samples", c.samples},
         {"skipped", c.skipped}};
  if (!c.alpha.empty()) j["alpha"] = c.alpha;
  return j;
}

json delins_json(const DeletionInsertionResult& r) {
  return json{{"fraction", r.fraction},         {"masked_count", r.masked_count},
              {"deletion", r.deletion},         {"insertion", r.insertion},
              {"deletion_auc", r.deletion_auc}, {"insertion_auc", r.insertion_auc}};
}

struct CellResult {
  std::optional<FaithfulnessCurve> curve;  // pooled over steps in sequence mode
  std::optional<DeletionInsertionResult> delins;
};

struct SampleResult {
  json entry;
  std::map<Method, CellResult> cells;  // empty when the sample was skipped
  std::optional<std::string> skip_reason;
};

// Shared, read-only state of one run.
struct RunContext {
  const ExperimentConfig& config;
  const ModelParameters* params = nullptr;
  const Tokenizer* tokenizer = nullptr;  // nullptr: ask the oracle
};

class SampleRunner {
 public:
  SampleRunner(const RunContext& ctx, ModelOracle& oracle) : ctx_(ctx), cfg_(ctx.config), oracle_(oracle) {}

  SampleResult run(const DatasetRecord& record) {
    SampleResult result;
    const std::uint64_t key = fnv1a(record.id);
    result.entry = json{{"id", record.id}, {"key", hex64(key)}};
    try {
      if (auto reason = evaluate(record, key, result)) {
        result.cells.clear();
        result.skip_reason = *reason;
      }
    } catch (const Error& e) {
      result.cells.clear();
      result.skip_reason = std::string("error: ") + e.what();
    }
    if (result.skip_reason) {
      result.entry["status"] = "skipped";
      result.entry["reason"] = *result.skip_reason;
      json methods = json::object();
      for (Method m : cfg_.methods) {
        methods[std::string(method_name(m))] = json{{"status", "skipped"}, {"reason", *result.skip_reason}};
      }
      result.entry["methods"] = methods;
    } else {
      result.entry["status"] = "ok";
    }
    return result;
  }

 private:
  TokenSequence encode(const std::string& text) {
    return ctx_.tokenizer ? ctx_.tokenizer->encode(text) : oracle_.tokenize(text);
  }

  std::optional<TokenId> single_token(const std::string& text) {
    if (ctx_.tokenizer) return ctx_.tokenizer->single_token(text);
    try {
      const TokenSequence ids = oracle_.tokenize(text);
      if (ids.size() == 1) return ids.front();
    } catch (const Error&) {
    }
    return std::nullopt;
  }

  std::variant<TokenId, std::string> resolve_label(const std::string& label) {
    std::string text = label;
    if (const auto it = cfg_.label_map.find(label); it != cfg_.label_map.end()) {
      if (it->second.is_number_integer()) {
        const auto id = it->second.get<TokenId>();
        if (id < 0 || static_cast<std::size_t>(id) >= oracle_.capabilities().vocab_size) {
          return "label map sends '" + label + "' to out-of-vocabulary id " + std::to_string(id);
        }
        return id;
      }
      text = it->second.get<std::string>();
    }
    if (auto id = single_token(text)) return *id;
    return "label '" + label + "' is not a single vocabulary token; map it to one token with --label-map";
  }

  ScoreVector scores_for(Method method, const TokenSequence& prefix, const ForwardTrace* trace, TokenId target,
                         std::uint64_t random_seed, std::size_t step, const std::vector<bool>& special) {
    RawHeat heat;
    if (method == Method::kRandom) {
      heat = random_heat(prefix.size(), random_seed);
    } else {
      AttributionRequest req;
      req.method = method;
      req.target = target;
      req.query_position = prefix.size() - 1;
      req.layers = cfg_.layers;
      req.loosen = cfg_.loosen;
      req.ig_steps = cfg_.ig_steps;
      req.random_seed = random_seed;
      heat = attribute(*ctx_.params, *trace, req);
    }
    ScoreVector s = normalize_scores(heat);
    for (std::size_t i = 0; i < std::min(special.size(), s.special.size()); ++i) s.special[i] = special[i];
    s.step = step;
    return s;
  }

  std::uint64_t random_seed(std::uint64_t key, std::size_t step) const {
    return step_sample_id(key ^ (cfg_.curve.seed * 0x9e3779b97f4a7c15ULL), step);
  }

  std::optional<ForwardTrace> trace_if_needed(const TokenSequence& prefix) const {
    for (Method m : cfg_.methods) {
      if (!is_model_free(m)) return forward(*ctx_.params, prefix);
    }
    return std::nullopt;
  }

  // Fills result.entry and result.cells; returns a skip reason instead when
  // the sample cannot be evaluated.
  std::optional<std::string> evaluate(const DatasetRecord& record, std::uint64_t key, SampleResult& result) {
    const PromptTokens prompt = encode_prompt(record, [&](const std::string& text) { return encode(text); });
    if (prompt.tokens.empty()) return "empty prompt";
    const std::size_t max_len = oracle_.capabilities().max_len;
    const std::size_t needed = prompt.tokens.size() + (cfg_.mode == TaskMode::kSequence ? cfg_.gen_len : 0);
    if (needed > max_len) {
      return "prompt needs " + std::to_string(needed) + " positions, backend allows " + std::to_string(max_len);
    }
    result.entry["tokens"] = prompt.tokens;
    result.entry["special"] = prompt.special;
    return cfg_.mode == TaskMode::kToken ? evaluate_token(record, key, prompt, result)
                                         : evaluate_sequence(key, prompt, result);
  }

  std::optional<std::string> evaluate_token(const DatasetRecord& record, std::uint64_t key,
                                            const PromptTokens& prompt, SampleResult& result) {
    if (!record.label) return "record has no label";
    const auto label = resolve_label(*record.label);
    if (const auto* reason = std::get_if<std::string>(&label)) return *reason;
    const TokenId target = std::get<TokenId>(label);
    result.entry["target"] = target;

    // Reference and zero-baseline quantities are shared by every method.
    const ScoreVector placeholder = normalize_scores(std::vector<double>(prompt.tokens.size(), 0.0));
    const MetricSample base = make_metric_sample(oracle_, prompt.tokens, placeholder, key);
    result.entry["baseline_delta"] = base.baseline_delta;
    if (cfg_.compute_curves && base.skipped) return base.skip_reason;

    const auto trace = trace_if_needed(prompt.tokens);
    json methods = json::object();
    for (Method m : cfg_.methods) {
      CellResult cell;
      MetricSample sample = base;
      sample.scores = scores_for(m, prompt.tokens, trace ? &*trace : nullptr, target, random_seed(key, 0), 0,
                                 prompt.special);
      json j{{"status", "ok"}, {"scores", sample.scores.scores}};
      if (cfg_.compute_curves) {
        cell.curve = pi_curve(oracle_, sample, cfg_.curve);
        j["curve"] = curve_json(*cell.curve);
        j["auc_ns"] = cell.curve->auc_ns;
        j["auc_nc"] = cell.curve->auc_nc;
      }
      if (cfg_.deletion_insertion) {
        cell.delins = deletion_insertion_curve(oracle_, prompt.tokens, sample.scores, target, cfg_.delins);
        j["deletion_insertion"] = delins_json(*cell.delins);
      }
      methods[std::string(method_name(m))] = std::move(j);
      result.cells.emplace(m, std::move(cell));
    }
    result.entry["methods"] = std::move(methods);
    return std::nullopt;
  }

  std::optional<std::string> evaluate_sequence(std::uint64_t key, const PromptTokens& prompt, SampleResult& result) {
    const TokenSequence continuation = oracle_.generate(prompt.tokens, cfg_.gen_len);
    if (continuation.size() != cfg_.gen_len) return "backend generated a continuation of the wrong length";
    result.entry["continuation"] = continuation;
    TokenSequence full = prompt.tokens;
    full.insert(full.end(), continuation.begin(), continuation.end());
    const std::vector<std::size_t> steps = sequence_steps(cfg_.gen_len, cfg_.stride);

    std::map<Method, std::map<std::size_t, ScoreVector>> scores;
    for (std::size_t t : steps) {
      const TokenSequence prefix(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(prompt.tokens.size() + t - 1));
      const TokenId target = full[prefix.size()];
      const auto trace = trace_if_needed(prefix);
      for (Method m : cfg_.methods) {
        scores[m][t] = scores_for(m, prefix, trace ? &*trace : nullptr, target, random_seed(key, t), t, prompt.special);
      }
    }

    json methods = json::object();
    bool any_usable = false;
    for (Method m : cfg_.methods) {
      const SequenceEvaluation eval =
          sequence_level_eval(oracle_, full, prompt.tokens.size(), scores[m], cfg_.curve, cfg_.stride, key);
      json per_step = json::array();
      for (std::size_t s = 0; s < eval.steps.size(); ++s) {
        const FaithfulnessCurve& c = eval.per_step[s];
        json step{{"step", eval.steps[s]}, {"scores", scores[m][eval.steps[s]].scores}};
        if (c.samples > 0) {
          step["auc_ns"] = c.auc_ns;
          step["auc_nc"] = c.auc_nc;
        } else {
          step["skipped"] = c.skip_reasons.empty() ? std::string("skipped") : c.skip_reasons.front();
        }
        per_step.push_back(std::move(step));
      }
      if (eval.skipped) {
        methods[std::string(method_name(m))] = json{{"status", "skipped"}, {"per_step", per_step}};
        continue;
      }
      any_usable = true;
      methods[std::string(method_name(m))] = json{{"status", "ok"},
                                                  {"auc_ns", eval.auc_ns},
                                                  {"auc_nc", eval.auc_nc},
                                                  {"curve", curve_json(eval.mean)},
                                                  {"per_step", per_step}};
      CellResult cell;
      cell.curve = eval.mean;
      cell.curve->auc_ns = eval.auc_ns;
      cell.curve->auc_nc = eval.auc_nc;
      result.cells.emplace(m, std::move(cell));
    }
    if (!any_usable) return "every evaluated step has a degenerate zero-baseline disturbance";
    result.entry["methods"] = std::move(methods);
    return std::nullopt;
  }

  const RunContext& ctx_;
  const ExperimentConfig& cfg_;
  ModelOracle& oracle_;
};

json method_average(const ExperimentConfig& cfg, Method m, const std::vector<SampleResult>& results) {
  std::vector<FaithfulnessCurve> curves;
  double auc_ns = 0.0, auc_nc = 0.0, del_auc = 0.0, ins_auc = 0.0;
  std::vector<double> del_mean, ins_mean, fraction;
  std::size_t n = 0, n_delins = 0;
  for (const SampleResult& r : results) {
    const auto it = r.cells.find(m);
    if (it == r.cells.end()) continue;
    if (it->second.curve) {
      curves.push_back(*it->second.curve);
      auc_ns += it->second.curve->auc_ns;
      auc_nc += it->second.curve->auc_nc;
      ++n;
    }
    if (const auto& d = it->second.delins) {
      if (del_mean.empty()) {
        del_mean.assign(d->deletion.size(), 0.0);
        ins_mean.assign(d->insertion.size(), 0.0);
        fraction = d->fraction;
      }
      for (std::size_t k = 0; k < d->deletion.size(); ++k) {
        del_mean[k] += d->deletion[k];
        ins_mean[k] += d->insertion[k];
      }
      del_auc += d->deletion_auc;
      ins_auc += d->insertion_auc;
      ++n_delins;
    }
  }
  json j{{"samples", n}};
  if (cfg.compute_curves && n > 0) {
    j["auc_ns"] = auc_ns / static_cast<double>(n);
    j["auc_nc"] = auc_nc / static_cast<double>(n);
    j["curve"] = curve_json(aggregate_curves(curves));
  }
  if (n_delins > 0) {
    const double inv = 1.0 / static_cast<double>(n_delins);
    for (double& x : del_mean) x *= inv;
    for (double& x : ins_mean) x *= inv;
    j["deletion_insertion"] = json{{"samples", n_delins},       {"fraction", fraction},
                                   {"deletion", del_mean},       {"insertion", ins_mean},
                                   {"deletion_auc", del_auc * inv}, {"insertion_auc", ins_auc * inv}};
  }
  return j;
}

std::string csv_number(const json& x) { return x.is_number() ? x.dump() : std::string(); }

void require(bool condition, const std::string& what) {
  if (!condition) throw FormatError("report does not match " + std::string(kReportSchema) + ": " + what);
}

}  // namespace

std::string_view task_mode_name(TaskMode mode) { return mode == TaskMode::kToken ? "token" : "sequence"; }

TaskMode parse_task_mode(std::string_view name) {
  if (name == "token") return TaskMode::kToken;
  if (name == "sequence") return TaskMode::kSequence;
  throw ConfigError("mode must be 'token' or 'sequence', got '" + std::string(name) + "'");
}

void ExperimentConfig::validate() const {
  if (!model_path && !oracle_cmd) throw ConfigError("need a model checkpoint or an oracle command");
  if (methods.empty()) throw ConfigError("no attribution methods selected");
  if (!model_path) {
    for (Method m : methods) {
      if (!is_model_free(m)) {
        throw ConfigError("method '" + std::string(method_name(m)) +
                          "' needs model internals; pass a checkpoint or use model-free methods only");
      }
    }
  }
  validate_pi_grid(curve.pi_grid);
  if (curve.n_draws == 0) throw ConfigError("n_draws must be at least 1");
  if (stride == 0) throw ConfigError("stride must be at least 1");
  if (mode == TaskMode::kSequence && gen_len == 0) throw ConfigError("gen_len must be at least 1");
  if (layers && layers->empty()) throw ConfigError("layer list is empty");
  if (ig_steps == 0) throw ConfigError("ig_steps must be at least 1");
  if (!compute_curves && !deletion_insertion) throw ConfigError("nothing to compute");
  if (deletion_insertion && mode != TaskMode::kToken) {
    throw ConfigError("deletion/insertion curves need token mode (a designated label token)");
  }
  if (deletion_insertion && (delins.steps == 0 || !(delins.step_fraction > 0.0))) {
    throw ConfigError("deletion/insertion needs positive steps and step fraction");
  }
  for (const auto& [label, value] : label_map) {
    if (!value.is_string() && !value.is_number_integer()) {
      throw ConfigError("label map entry '" + label + "' must be a token string or an integer id");
    }
  }
}

json ExperimentConfig::echo() const {
  std::vector<std::string> names;
  for (Method m : methods) names.emplace_back(method_name(m));
  json j{{"model", model_path ? json(model_path->string()) : json(nullptr)},
         {"oracle_cmd", oracle_cmd ? json(*oracle_cmd) : json(nullptr)},
         {"dataset", dataset_path.string()},
         {"methods", names},
         {"pi_grid", curve.pi_grid},
         {"n_draws", curve.n_draws},
         {"seed", curve.seed},
         {"layers", layers ? json(*layers) : json("all")},
         {"loosen", loosen},
         {"ig_steps", ig_steps},
         {"mode", task_mode_name(mode)},
         {"stride", stride},
         {"gen_len", gen_len},
         {"label_map", label_map},
         {"curves", compute_curves},
         {"deletion_insertion", deletion_insertion}};
  if (deletion_insertion) j["delins"] = json{{"steps", delins.steps}, {"step_fraction", delins.step_fraction}};
  return j;
}

json run_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::vector<DatasetRecord> records = load_dataset(config.dataset_path);

  std::optional<Checkpoint> checkpoint;
  std::unique_ptr<Tokenizer> tokenizer;
  if (config.model_path) {
    checkpoint = load_checkpoint(*config.model_path);
    tokenizer = checkpoint->make_tokenizer();
  }

  // One oracle per worker; the in-process oracle is reentrant and shared.
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(config.threads, records.size()));
  std::vector<std::unique_ptr<ModelOracle>> oracles;
  if (config.oracle_cmd) {
    for (std::size_t w = 0; w < n_workers; ++w) oracles.push_back(ProtocolOracle::spawn(*config.oracle_cmd));
  } else {
    oracles.push_back(std::make_unique<InProcessOracle>(checkpoint->params, tokenizer.get()));
  }
  const OracleCapabilities& caps = oracles.front()->capabilities();
  if (checkpoint && caps.vocab_size != checkpoint->params.config.vocab_size) {
    throw ConfigError("oracle vocabulary size differs from the checkpoint's");
  }
  if (!tokenizer && !caps.supports_tokenize) {
    if (config.fallback_vocab.empty()) {
      throw ConfigError("backend cannot tokenize; supply a whitespace vocabulary");
    }
    if (config.fallback_vocab.size() > caps.vocab_size) throw ConfigError("fallback vocabulary exceeds backend vocab");
    tokenizer = std::make_unique<WhitespaceTokenizer>(config.fallback_vocab);
  }

  const RunContext ctx{config, checkpoint ? &checkpoint->params : nullptr, tokenizer.get()};
  std::vector<SampleResult> results(records.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> failures(n_workers);
  auto work = [&](std::size_t w) {
    try {
      SampleRunner runner(ctx, *oracles[std::min(w, oracles.size() - 1)]);
      for (std::size_t i = next++; i < records.size(); i = next++) results[i] = runner.run(records[i]);
    } catch (...) {
      failures[w] = std::current_exception();
    }
  };
  if (n_workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  json samples = json::array();
  std::map<std::string, std::size_t> reasons;
  std::size_t skipped = 0;
  for (const SampleResult& r : results) {
    samples.push_back(r.entry);
    if (r.skip_reason) {
      ++skipped;
      ++reasons[*r.skip_reason];
    }
  }
  json averages = json::object();
  for (Method m : config.methods) averages[std::string(method_name(m))] = method_average(config, m, results);

  return json{{"schema", kReportSchema},
              {"config", config.echo()},
              {"backend", json{{"name", caps.backend}, {"vocab_size", caps.vocab_size}, {"max_len", caps.max_len}}},
              {"samples", samples},
              {"averages", averages},
              {"skips", json{{"samples", skipped}, {"total", records.size()}, {"reasons", reasons}}}};
}

void validate_report(const json& report) {
  require(report.is_object(), "not a JSON object");
  require(report.contains("schema") && report["schema"] == kReportSchema, "missing or wrong schema id");
  require(report.contains("config") && report["config"].is_object(), "missing config echo");
  require(report["config"].contains("methods") && report["config"]["methods"].is_array(), "config lacks methods");
  require(report.contains("samples") && report["samples"].is_array(), "missing samples");
  require(report.contains("averages") && report["averages"].is_object(), "missing averages");
  require(report.contains("skips") && report["skips"].is_object(), "missing skip summary");
  const json& methods = report["config"]["methods"];
  for (const json& s : report["samples"]) {
    require(s.is_object() && s.contains("id") && s["id"].is_string(), "sample without id");
    const std::string where = "sample '" + s["id"].get<std::string>() + "'";
    require(s.contains("status") && (s["status"] == "ok" || s["status"] == "skipped"), where + " has no status");
    if (s["status"] == "skipped") require(s.contains("reason"), where + " is skipped without a reason");
    require(s.contains("methods") && s["methods"].is_object(), where + " has no method cells");
    for (const json& m : methods) {
      const std::string name = m.get<std::string>();
      require(s["methods"].contains(name), where + " lacks method '" + name + "'");
      const json& cell = s["methods"][name];
      require(cell.contains("status"), where + " method '" + name + "' has no status");
      if (cell["status"] == "ok" && report["config"].value("curves", true)) {
        require(cell.contains("auc_ns") && cell.contains("auc_nc") && cell.contains("curve"),
                where + " method '" + name + "' lacks AUCs");
      }
    }
  }
  for (const json& m : methods) {
    require(report["averages"].contains(m.get<std::string>()), "averages lack method '" + m.get<std::string>() + "'");
  }
}

std::string report_to_json_text(const json& report) { return report.dump(2) + "\n"; }

std::string report_to_csv(const json& report) {
  validate_report(report);
  std::ostringstream out;
  out << "sample,method,pi,ns_mean,ns_std,nc_mean,nc_std\n";
  auto rows = [&](const std::string& sample, const std::string& method, const json& curve) {
    const json& pi = curve["pi"];
    for (std::size_t j = 0; j < pi.size(); ++j) {
      out << sample << ',' << method << ',' << csv_number(pi[j]) << ',' << csv_number(curve["ns_mean"][j]) << ','
          << csv_number(curve["ns_std"][j]) << ',' << csv_number(curve["nc_mean"][j]) << ','
          << csv_number(curve["nc_std"][j]) << '\n';
    }
  };
  // Sample ids are free text; quote them.
  auto quoted = [](const std::string& s) {
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (const json& s : report["samples"]) {
    for (const auto& [method, cell] : s["methods"].items()) {
      if (cell.contains("curve")) rows(quoted(s["id"].get<std::string>()), method, cell["curve"]);
    }
  }
  for (const auto& [method, avg] : report["averages"].items()) {
    if (avg.contains("curve")) rows("\"__average__\"", method, avg["curve"]);
  }
  return out.str();
}

}  // namespace gelm
