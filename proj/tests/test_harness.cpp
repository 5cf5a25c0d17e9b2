#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gelm/checkpoint.hpp"
#include "gelm/dataset.hpp"
#include "gelm/errors.hpp"
#include "gelm/experiment.hpp"
#include "gelm/html.hpp"
#include "support/toy_models.hpp"

namespace gelm {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

template <typename F>
std::string message_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& text, const std::string& needle) { return text.find(needle) != std::string::npos; }

// ---------------------------------------------------------------- dataset

TEST(Dataset, EmptyAndBlankInput) {
  EXPECT_TRUE(parse_dataset("").empty());
  EXPECT_TRUE(parse_dataset("\n  \n").empty());
}

TEST(Dataset, TemplateRendering) {
  const auto records = parse_dataset(R"({"id":"a","text":"good film","prompt_template":"Text: {text}","extra":1})");
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].prompt(), "Text: good film");
  EXPECT_FALSE(records[0].label.has_value());

  const WhitespaceTokenizer tok({"<unk>", "Text:", "good", "film", "Label:"});
  DatasetRecord r = records[0];
  r.prompt_template = "Text: {text} Label:";
  const PromptTokens p = encode_prompt(r, [&](const std::string& s) { return tok.encode(s); });
  EXPECT_EQ(p.tokens, (TokenSequence{1, 2, 3, 4}));
  EXPECT_EQ(p.special, (std::vector<bool>{true, false, false, true}));
}

TEST(Dataset, ErrorsNameTheLine) {
  const std::string dup = "{\"id\":\"x\",\"text\":\"a\"}\n\n{\"id\":\"x\",\"text\":\"b\"}\n";
  const std::string msg = message_of([&] { parse_dataset(dup); });
  EXPECT_TRUE(contains(msg, "line 3")) << msg;
  EXPECT_TRUE(contains(msg, "duplicate id 'x'")) << msg;

  EXPECT_TRUE(contains(message_of([] { parse_dataset("{\"id\":\"a\",\"text\":\"b\"}\n{oops"); }), "line 2"));
  EXPECT_TRUE(contains(message_of([] { parse_dataset(R"({"text":"b"})"); }), "line 1"));
  EXPECT_TRUE(contains(message_of([] { parse_dataset(R"({"id":"a"})"); }), "text"));
  EXPECT_THROW(parse_dataset(R"({"id":"a","text":"b","prompt_template":"no placeholder"})"), FormatError);
  EXPECT_THROW(parse_dataset(R"({"id":"a","text":"b","prompt_template":"{text} {text}"})"), FormatError);
  EXPECT_THROW(parse_dataset(R"({"id":1,"text":"b"})"), FormatError);
  EXPECT_THROW(load_dataset("/nonexistent/data.jsonl"), Error);
}

// ------------------------------------------------------------- checkpoint

Checkpoint sample_checkpoint() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 6;
  c.max_seq_len = 10;
  c.seed = 21;
  return Checkpoint{init_model(c), TokenizerSpec{"whitespace", {"<unk>", "a", "b", "c", "d", "e"}}};
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const Checkpoint ckpt = sample_checkpoint();
  const std::string bytes = serialize_checkpoint(ckpt);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.tokenizer, ckpt.tokenizer);
  EXPECT_TRUE(std::ranges::equal(back.params.unembedding.data(), ckpt.params.unembedding.data()));

  const fs::path path = fs::temp_directory_path() / ("gelm_ckpt_" + std::to_string(::getpid()) + ".gelm");
  save_checkpoint(ckpt, path);
  EXPECT_EQ(read_file(path), bytes);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);
  fs::remove(path);
}

TEST(Checkpoint, RejectsCorruption) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());

  std::string magic = bytes;
  magic[0] ^= 0x01;
  EXPECT_TRUE(contains(message_of([&] { parse_checkpoint(magic); }), "magic"));

  std::string version = bytes;
  version[4] = 9;
  EXPECT_TRUE(contains(message_of([&] { parse_checkpoint(version); }), "version"));

  const std::string truncated = bytes.substr(0, bytes.size() - 8 * 5);
  const std::string msg = message_of([&] { parse_checkpoint(truncated); });
  EXPECT_TRUE(contains(msg, "truncated inside tensor '")) << msg;
  EXPECT_TRUE(contains(msg, "unembedding")) << msg;

  EXPECT_THROW(parse_checkpoint(bytes + "x"), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 10)), FormatError);
  EXPECT_THROW(parse_checkpoint(""), FormatError);

  // Every truncation point is rejected with a FormatError, never a crash.
  for (std::size_t cut = 0; cut < bytes.size(); cut += 97) EXPECT_THROW(parse_checkpoint(bytes.substr(0, cut)), FormatError);
}

TEST(Checkpoint, StrictConfigJson) {
  const ModelConfig c = sample_checkpoint().params.config;
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  json bad = config_to_json(c);
  bad["n_layerz"] = 2;
  EXPECT_THROW(config_from_json(bad), ConfigError);
  bad = config_to_json(c);
  bad["d_model"] = "eight";
  EXPECT_THROW(config_from_json(bad), ConfigError);
}

// ------------------------------------------------------------------- html

std::vector<double> emitted_alphas(const std::string& html) {
  static const std::regex re(R"(rgba\(0,160,0,([0-9.]+)\))");
  std::vector<double> out;
  for (auto it = std::sregex_iterator(html.begin(), html.end(), re); it != std::sregex_iterator(); ++it) {
    out.push_back(std::stod((*it)[1].str()));
  }
  return out;
}

ScoreVector scores_of(std::vector<double> s) {
  ScoreVector v;
  v.special.assign(s.size(), false);
  v.scores = std::move(s);
  return v;
}

TEST(Html, UniformScoresGiveUniformGreen) {
  const std::string html = render_heatmap_html({"a", "b", "c"}, scores_of({0.5, 0.5, 0.5}), {"t", "grad_ellm", 0.5, 0.7, 0.2});
  EXPECT_EQ(emitted_alphas(html), (std::vector<double>{0.5, 0.5, 0.5}));
  EXPECT_TRUE(contains(html, "grad_ellm"));
  EXPECT_FALSE(contains(html, "http"));
  EXPECT_FALSE(contains(html, "<link"));
  EXPECT_FALSE(contains(html, "<script"));
}

TEST(Html, ArgmaxHasStrongestOpacity) {
  std::mt19937_64 rng(60);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = testing::uniform_index(rng, 1, 30);
    std::vector<double> s(m);
    for (double& x : s) x = testing::uniform(rng, 0.0, 1.0);
    const std::string html = render_heatmap_html(std::vector<std::string>(m, "w"), scores_of(s), {});
    const auto alphas = emitted_alphas(html);
    ASSERT_EQ(alphas.size(), m);
    const auto argmax = std::max_element(s.begin(), s.end()) - s.begin();
    EXPECT_EQ(std::max_element(alphas.begin(), alphas.end()) - alphas.begin(), argmax);
  }
}

TEST(Html, EscapingFuzz) {
  std::mt19937_64 rng(61);
  const std::string alphabet = "<>&\"'/=;` scriptonload{}()\\\n\t\xc3\xa9";
  const std::string one_token_page = render_heatmap_html({"x"}, scores_of({0.5}), {});
  for (int trial = 0; trial < 1000; ++trial) {
    std::string token;
    const std::size_t len = testing::uniform_index(rng, 0, 40);
    for (std::size_t i = 0; i < len; ++i) token += alphabet[testing::uniform_index(rng, 0, alphabet.size() - 1)];
    if (trial % 10 == 0) token = "<script>alert(" + std::to_string(trial) + ")</script>" + token;
    const std::string escaped = escape_html(token);
    for (char c : std::string("<>\"'")) EXPECT_EQ(escaped.find(c), std::string::npos);

    std::string unescaped = std::regex_replace(escaped, std::regex("&lt;"), "<");
    unescaped = std::regex_replace(unescaped, std::regex("&gt;"), ">");
    unescaped = std::regex_replace(unescaped, std::regex("&quot;"), "\"");
    unescaped = std::regex_replace(unescaped, std::regex("&#39;"), "'");
    unescaped = std::regex_replace(unescaped, std::regex("&amp;"), "&");
    EXPECT_EQ(unescaped, token);

    const std::string html = render_heatmap_html({token, "ok"}, scores_of({0.3, 0.9}), {token, token, {}, {}, {}});
    EXPECT_FALSE(contains(html, "<script"));
    EXPECT_EQ(std::count(html.begin(), html.end(), '<'), std::count(one_token_page.begin(), one_token_page.end(), '<') + 2);
  }
}

TEST(Html, Errors) {
  EXPECT_THROW(render_heatmap_html({"a"}, scores_of({0.1, 0.2}), {}), InputError);
  EXPECT_THROW(render_heatmap_html({"a"}, scores_of({std::nan("")}), {}), InputError);
}

// ------------------------------------------------------------- experiment

class ExperimentTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("gelm_harness_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    const std::vector<std::string> vocab{"<unk>", "the", "a",      "movie",     "film", "was",      "great",
                                         "bad",   "plot", "acting", "Review:", "Sentiment:", "positive", "negative"};
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.vocab_size = vocab.size();
    c.max_seq_len = 32;
    c.seed = 5;
    save_checkpoint(Checkpoint{init_model(c), TokenizerSpec{"whitespace", vocab}}, dir_ / "model.gelm");

    std::mt19937_64 rng(62);
    std::ofstream data(dir_ / "data.jsonl");
    for (int i = 0; i < 8; ++i) {
      std::string text;
      const std::size_t len = testing::uniform_index(rng, 2, 7);
      for (std::size_t k = 0; k < len; ++k) text += (k ? " " : "") + vocab[testing::uniform_index(rng, 1, 9)];
      data << json{{"id", "s" + std::to_string(i)},
                   {"text", text},
                   {"label", i % 2 ? "positive" : "negative"},
                   {"prompt_template", "Review: {text} Sentiment:"}}
                  .dump()
           << "\n";
    }
    data << json{{"id", "unknown-label"}, {"text", "the movie"}, {"label", "zebra"}}.dump() << "\n";
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static ExperimentConfig config() {
    ExperimentConfig cfg;
    cfg.model_path = dir_ / "model.gelm";
    cfg.dataset_path = dir_ / "data.jsonl";
    cfg.methods = all_methods();
    cfg.ig_steps = 4;
    return cfg;
  }

  static fs::path dir_;
};
fs::path ExperimentTest::dir_;

TEST_F(ExperimentTest, ReportIsDeterministicAcrossThreadCounts) {
  ExperimentConfig a = config(), b = config();
  b.threads = 3;
  a.deletion_insertion = b.deletion_insertion = true;
  const json ra = run_experiment(a), rb = run_experiment(b);
  EXPECT_EQ(report_to_json_text(ra), report_to_json_text(rb));
  EXPECT_EQ(report_to_csv(ra), report_to_csv(rb));
  EXPECT_NO_THROW(validate_report(ra));
}

TEST_F(ExperimentTest, EveryCellPresentOrSkipped) {
  const json report = run_experiment(config());
  EXPECT_EQ(report.at("schema"), std::string(kReportSchema));
  ASSERT_EQ(report.at("samples").size(), 9u);
  std::size_t skipped = 0;
  for (const json& sample : report.at("samples")) {
    if (sample.at("status") != "ok") {
      ++skipped;
      EXPECT_EQ(sample.at("id"), "unknown-label");
      EXPECT_TRUE(contains(sample.at("reason").get<std::string>(), "label")) << sample.at("reason");
      continue;
    }
    ASSERT_EQ(sample.at("methods").size(), all_methods().size());
    for (const auto& [name, cell] : sample.at("methods").items()) {
      if (cell.at("status") != "ok") continue;
      // Same grid, same number of draws for every method.
      EXPECT_EQ(cell.at("curve").at("pi"), report.at("config").at("pi_grid")) << name;
      EXPECT_EQ(cell.at("scores").size(), sample.at("tokens").size()) << name;
      EXPECT_GE(cell.at("auc_ns").get<double>(), 0.0);
      EXPECT_LE(cell.at("auc_ns").get<double>(), 1.0);
    }
  }
  EXPECT_EQ(skipped, 1u);
  EXPECT_EQ(report.at("skips").at("samples"), 1);
  EXPECT_EQ(report.at("averages").size(), all_methods().size());
  EXPECT_EQ(report.at("averages").at("grad_ellm").at("samples"), 8);
}

TEST_F(ExperimentTest, SequenceModeRuns) {
  ExperimentConfig cfg = config();
  cfg.methods = {Method::kGradEllm, Method::kRandom};
  cfg.mode = TaskMode::kSequence;
  cfg.gen_len = 6;
  const json report = run_experiment(cfg);
  validate_report(report);
  for (const json& sample : report.at("samples")) {
    ASSERT_EQ(sample.at("status"), "ok") << sample.dump();
    EXPECT_EQ(sample.at("continuation").size(), 6u);
  }
}

TEST_F(ExperimentTest, ValidationRejectsBadReportsAndConfigs) {
  json report = run_experiment(config());
  json wrong = report;
  wrong["schema"] = "gelm.metric_report/0";
  EXPECT_THROW(validate_report(wrong), FormatError);
  wrong = report;
  wrong.erase("samples");
  EXPECT_THROW(validate_report(wrong), FormatError);
  wrong = report;
  wrong["samples"][0]["methods"].erase("random");
  EXPECT_THROW(validate_report(wrong), FormatError);

  ExperimentConfig cfg = config();
  cfg.model_path.reset();
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.oracle_cmd = "true";
  EXPECT_THROW(cfg.validate(), ConfigError);  // grad_ellm needs internals
  cfg = config();
  cfg.mode = TaskMode::kSequence;
  cfg.deletion_insertion = true;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST_F(ExperimentTest, CsvHasOneRowPerSampleMethodAndPi) {
  ExperimentConfig cfg = config();
  cfg.methods = {Method::kRandom};
  const std::string csv = report_to_csv(run_experiment(cfg));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "sample,method,pi,ns_mean,ns_std,nc_mean,nc_std");
  // 8 usable samples plus the average row, 19 grid points each.
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 9 * 19);
  EXPECT_TRUE(contains(csv, "\"__average__\"") || contains(csv, "__average__,"));
}

TEST_F(ExperimentTest, CliEvaluateIsByteIdentical) {
  auto run = [&](const std::string& out, int threads) {
    const std::string cmd = std::string("'") + GELM_CLI_PATH + "' evaluate --model '" + (dir_ / "model.gelm").string() +
                            "' --dataset '" + (dir_ / "data.jsonl").string() +
                            "' --methods all --ig-steps 4 --seed 9 --threads " + std::to_string(threads) + " --out '" +
                            (dir_ / out).string() + "' > /dev/null";
    return std::system(cmd.c_str());
  };
  ASSERT_EQ(run("cli1", 1), 0);
  ASSERT_EQ(run("cli2", 2), 0);
  EXPECT_EQ(read_file(dir_ / "cli1" / "report.json"), read_file(dir_ / "cli2" / "report.json"));
  EXPECT_EQ(read_file(dir_ / "cli1" / "curves.csv"), read_file(dir_ / "cli2" / "curves.csv"));
}

}  // namespace
}  // namespace gelm
