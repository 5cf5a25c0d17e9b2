#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gelm/checkpoint.hpp"
#include "gelm/errors.hpp"
#include "gelm/oracle.hpp"
#include "gelm/tokenizer.hpp"
#include "support/toy_models.hpp"

namespace gelm {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Answers each written line with whatever `respond` returns; nullopt closes
// the stream.
class ScriptedChannel final : public LineChannel {
 public:
  using Responder = std::function<std::optional<std::string>(const std::string&)>;
  explicit ScriptedChannel(Responder respond) : respond_(std::move(respond)) {}

  void write_line(const std::string& line) override { pending_.push_back(respond_(line)); }
  std::optional<std::string> read_line() override {
    if (pending_.empty()) return std::nullopt;
    auto out = pending_.front();
    pending_.pop_front();
    return out;
  }

 private:
  Responder respond_;
  std::deque<std::optional<std::string>> pending_;
};

std::unique_ptr<LineChannel> loopback(ModelOracle& backend) {
  return std::make_unique<ScriptedChannel>([&backend](const std::string& line) { return handle_request(backend, line); });
}

std::string good_hello(std::size_t vocab = 4) {
  return json{{"ok", true},           {"proto", 1},   {"backend", "fake"},          {"vocab_size", vocab},
              {"max_len", 8},         {"reentrant", false}, {"supports_tokenize", false}}
      .dump();
}

// Handshake succeeds, then every request gets `reply`.
std::unique_ptr<LineChannel> after_hello(std::string reply) {
  auto first = std::make_shared<bool>(true);
  return std::make_unique<ScriptedChannel>([first, reply](const std::string&) -> std::optional<std::string> {
    if (*first) {
      *first = false;
      return good_hello();
    }
    return reply;
  });
}

ModelParameters small_model(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 260;
  c.max_seq_len = 24;
  c.seed = seed;
  return init_model(c);
}

double max_abs_diff(const VocabDistribution& a, const VocabDistribution& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.probs.size(); ++i) worst = std::max(worst, std::abs(a.probs[i] - b.probs[i]));
  return a.probs.size() == b.probs.size() ? worst : 1.0;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ProtocolError& e) {
    return e.what();
  }
  return "";
}

TEST(ValidateDistribution, RenormalizesWithinTolerance) {
  const auto d = validate_distribution({0.5, 0.5 + 5e-7}, 2);
  EXPECT_NEAR(d.probs[0] + d.probs[1], 1.0, 1e-15);
  EXPECT_THROW(validate_distribution({0.5, 0.6}, 2), ProtocolError);
  EXPECT_THROW(validate_distribution({1.1, -0.1}, 2), ProtocolError);
  EXPECT_THROW(validate_distribution({1.0}, 2), ProtocolError);
  EXPECT_THROW(validate_distribution({std::nan(""), 1.0}, 2), ProtocolError);
}

TEST(ProtocolClient, Handshake) {
  ProtocolOracle ok(after_hello("{}"));
  EXPECT_EQ(ok.capabilities().backend, "fake");
  EXPECT_EQ(ok.capabilities().vocab_size, 4u);
  EXPECT_FALSE(ok.capabilities().supports_tokenize);

  const std::string mismatch = error_of([] {
    ProtocolOracle o(std::make_unique<ScriptedChannel>(
        [](const std::string&) { return std::optional<std::string>(R"({"ok":false,"error":"x","proto":2})"); }));
  });
  EXPECT_NE(mismatch.find("protocol version mismatch"), std::string::npos) << mismatch;

  const std::string garbage = error_of([] {
    ProtocolOracle o(std::make_unique<ScriptedChannel>(
        [](const std::string&) { return std::optional<std::string>("{\"ok\": tru}"); }));
  });
  EXPECT_NE(garbage.find("at byte"), std::string::npos) << garbage;

  const std::string closed = error_of([] {
    ProtocolOracle o(std::make_unique<ScriptedChannel>([](const std::string&) { return std::nullopt; }));
  });
  EXPECT_NE(closed.find("closed"), std::string::npos) << closed;
}

TEST(ProtocolClient, ReplyFailures) {
  const std::vector<TokenId> tokens{1, 2};
  ProtocolOracle err(after_hello(R"({"ok":false,"error":"CUDA out of memory"})"));
  EXPECT_EQ(error_of([&] { err.forward(tokens); }), "CUDA out of memory");
  ProtocolOracle bad_sum(after_hello(R"({"ok":true,"probs":[0.5,0.5,0.5,0.5]})"));
  EXPECT_THROW(bad_sum.forward(tokens), ProtocolError);
  ProtocolOracle bad_len(after_hello(R"({"ok":true,"probs":[1.0]})"));
  EXPECT_THROW(bad_len.forward(tokens), ProtocolError);
  ProtocolOracle no_ok(after_hello(R"({"probs":[0.25,0.25,0.25,0.25]})"));
  EXPECT_THROW(no_ok.forward(tokens), ProtocolError);
  ProtocolOracle not_object(after_hello("[1,2]"));
  EXPECT_THROW(not_object.forward(tokens), ProtocolError);
  ProtocolOracle no_tokenize(after_hello("{}"));
  EXPECT_THROW(no_tokenize.tokenize("hi"), ProtocolError);
  EXPECT_THROW(no_tokenize.forward(tokens, std::vector<double>{1.0}), Error);
}

TEST(ProtocolClient, FuzzedRepliesNeverCrash) {
  std::mt19937_64 rng(50);
  const std::string valid = R"({"ok":true,"probs":[0.25,0.25,0.25,0.25]})";
  const std::string alphabet = "{}[]\",:0123456789.eE+-truefalsnl okprobs\\\x01\xff";
  const std::vector<TokenId> tokens{1};
  std::size_t rejected = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::string line = valid;
    const std::size_t edits = testing::uniform_index(rng, 1, 4);
    for (std::size_t e = 0; e < edits; ++e) {
      const std::size_t pos = testing::uniform_index(rng, 0, line.size() - 1);
      const char c = alphabet[testing::uniform_index(rng, 0, alphabet.size() - 1)];
      switch (testing::uniform_index(rng, 0, 2)) {
        case 0: line[pos] = c; break;
        case 1: line.insert(line.begin() + static_cast<std::ptrdiff_t>(pos), c); break;
        default: line.erase(pos, 1); break;
      }
    }
    ProtocolOracle oracle(after_hello(line));
    try {
      const auto d = oracle.forward(tokens);
      double total = 0.0;
      for (double p : d.probs) total += p;
      EXPECT_NEAR(total, 1.0, 1e-12);
    } catch (const ProtocolError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 1000u);
}

TEST(ProtocolServer, HandlesEveryOp) {
  const ModelParameters params = small_model(1);
  ByteTokenizer tok(260);
  InProcessOracle backend(params, &tok);

  const json hello = json::parse(handle_request(backend, R"({"op":"hello","proto":1})"));
  EXPECT_TRUE(hello.at("ok").get<bool>());
  EXPECT_EQ(hello.at("vocab_size"), 260);
  EXPECT_TRUE(hello.at("supports_tokenize").get<bool>());
  const json old = json::parse(handle_request(backend, R"({"op":"hello","proto":7})"));
  EXPECT_FALSE(old.at("ok").get<bool>());
  EXPECT_EQ(old.at("proto"), 1);

  const json tokens = json::parse(handle_request(backend, R"({"op":"tokenize","text":"ab"})"));
  EXPECT_EQ(tokens.at("tokens"), json::parse("[97,98]"));
  const json fwd = json::parse(handle_request(backend, R"({"op":"forward","tokens":[97,98],"embed_mask":[1,0]})"));
  EXPECT_EQ(fwd.at("probs").size(), 260u);
  const json gen = json::parse(handle_request(backend, R"({"op":"generate","tokens":[97],"max_new":3})"));
  EXPECT_EQ(gen.at("tokens").size(), 3u);

  for (const char* bad : {"nonsense", "[]", R"({"op":"launch"})", R"({"op":"forward"})",
                          R"({"op":"forward","tokens":[97],"embed_mask":[1,1]})",
                          R"({"op":"forward","tokens":[9999]})", R"({"op":"forward","tokens":[]})"}) {
    const json reply = json::parse(handle_request(backend, bad));
    EXPECT_FALSE(reply.at("ok").get<bool>()) << bad;
    EXPECT_FALSE(reply.at("error").get<std::string>().empty());
  }
  EXPECT_NE(json::parse(handle_request(backend, "{\"op\":")).at("error").get<std::string>().find("byte"),
            std::string::npos);
}

TEST(ProtocolServer, OneResponsePerLine) {
  const ModelParameters params = small_model(2);
  InProcessOracle backend(params);
  std::istringstream in("{\"op\":\"hello\",\"proto\":1}\r\ngarbage\n{\"op\":\"forward\",\"tokens\":[3]}\n");
  std::ostringstream out;
  serve_protocol(backend, in, out);
  std::istringstream lines(out.str());
  std::vector<json> replies;
  for (std::string line; std::getline(lines, line);) replies.push_back(json::parse(line));
  ASSERT_EQ(replies.size(), 3u);
  EXPECT_TRUE(replies[0].at("ok").get<bool>());
  EXPECT_FALSE(replies[1].at("ok").get<bool>());
  EXPECT_TRUE(replies[2].at("ok").get<bool>());
}

TEST(InProcessOracle, MatchesDirectForwardBitwise) {
  const ModelParameters params = small_model(3);
  InProcessOracle oracle(params);
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenSequence tokens = testing::random_tokens(rng, testing::uniform_index(rng, 1, 24), 260);
    std::vector<double> mask(tokens.size());
    for (double& x : mask) x = testing::uniform(rng, 0.0, 1.0);
    const ForwardTrace trace = forward(params, tokens, mask);
    EXPECT_EQ(oracle.forward(tokens, mask).probs, next_token_distribution(trace, tokens.size() - 1).probs);
  }
  EXPECT_THROW(oracle.forward(TokenSequence{1, 2}, std::vector<double>{1.0}), Error);
  EXPECT_THROW(oracle.forward(TokenSequence{1}, std::vector<double>{1.5}), Error);
  EXPECT_THROW(oracle.tokenize("x"), ProtocolError);
}

TEST(InProcessOracle, GenerateReturnsOnlyNewTokens) {
  const ModelParameters params = small_model(4);
  InProcessOracle oracle(params);
  const TokenSequence prompt{5, 6, 7};
  const TokenSequence out = oracle.generate(prompt, 4);
  ASSERT_EQ(out.size(), 4u);
  TokenSequence full = prompt;
  full.insert(full.end(), out.begin(), out.end());
  EXPECT_EQ(generate(params, prompt, 4), full);
}

TEST(Tokenize, EmptyTextAndDeterminism) {
  const ModelParameters params = small_model(5);
  ByteTokenizer bytes(260);
  InProcessOracle oracle(params, &bytes);
  ProtocolOracle remote(loopback(oracle));
  EXPECT_TRUE(remote.tokenize("").empty());
  EXPECT_EQ(remote.tokenize("héllo wörld"), remote.tokenize("héllo wörld"));
  EXPECT_EQ(remote.tokenize("héllo"), oracle.tokenize("héllo"));

  WhitespaceTokenizer words({"<unk>", "the", "cat"});
  EXPECT_TRUE(words.encode("").empty());
  EXPECT_EQ(words.encode("the  cat\tdog"), (TokenSequence{1, 2, 0}));
  EXPECT_EQ(words.single_token(" cat "), std::optional<TokenId>(2));
  EXPECT_EQ(words.single_token("dog"), std::nullopt);
}

TEST(Conformance, LoopbackBackendPasses) {
  const ModelParameters params = small_model(6);
  InProcessOracle oracle(params);
  ProtocolOracle remote(loopback(oracle));
  const TokenSequence tokens{4, 8, 15, 16, 23, 42};
  const ConformanceReport direct = run_conformance(oracle, tokens, 7);
  EXPECT_TRUE(direct.passed());
  const ConformanceReport wire = run_conformance(remote, tokens, 7);
  EXPECT_TRUE(wire.passed());
  // JSON round-trips doubles exactly; the client's renormalization may move the last bit.
  EXPECT_LE(max_abs_diff(remote.forward(tokens), oracle.forward(tokens)), 1e-15);
}

// Ignores the embedding mask on the first position.
class LeakyOracle final : public ModelOracle {
 public:
  explicit LeakyOracle(ModelOracle& inner) : inner_(inner) {}
  const OracleCapabilities& capabilities() const override { return inner_.capabilities(); }
  VocabDistribution forward(std::span<const TokenId> tokens, std::span<const double> mask) override {
    std::vector<double> m(mask.begin(), mask.end());
    if (!m.empty()) m[0] = 1.0;
    return inner_.forward(tokens, m);
  }
  TokenSequence tokenize(std::string_view text) override { return inner_.tokenize(text); }
  TokenSequence generate(std::span<const TokenId> tokens, std::size_t n) override { return inner_.generate(tokens, n); }
  using ModelOracle::forward;

 private:
  ModelOracle& inner_;
};

TEST(Conformance, DetectsIgnoredMask) {
  const ModelParameters params = small_model(7);
  InProcessOracle inner(params);
  LeakyOracle leaky(inner);
  EXPECT_FALSE(run_conformance(leaky, TokenSequence{4, 8, 15, 16}, 3).passed());
}

class ChildProcessTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("gelm_oracle_test_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    Checkpoint ckpt{small_model(8), TokenizerSpec{"byte", {}}};
    save_checkpoint(ckpt, dir_ / "model.gelm");
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string serve_command() {
    return std::string("'") + GELM_CLI_PATH + "' serve --model '" + (dir_ / "model.gelm").string() + "'";
  }

  static fs::path dir_;
};
fs::path ChildProcessTest::dir_;

TEST_F(ChildProcessTest, ServeSubprocessPassesConformance) {
  auto remote = ProtocolOracle::spawn(serve_command());
  EXPECT_EQ(remote->capabilities().backend, "gelm-decoder");
  EXPECT_TRUE(remote->capabilities().supports_tokenize);
  const TokenSequence tokens = remote->tokenize("conformance");
  const ConformanceReport report = run_conformance(*remote, tokens, 11);
  EXPECT_TRUE(report.passed()) << (report.failures.empty() ? "" : report.failures.front());

  const Checkpoint local = load_checkpoint(dir_ / "model.gelm");
  InProcessOracle oracle(local.params);
  EXPECT_LE(max_abs_diff(remote->forward(tokens), oracle.forward(tokens)), 1e-15);
}

TEST_F(ChildProcessTest, MisbehavingChildren) {
  EXPECT_NE(error_of([] { ProtocolOracle::spawn("exit 0"); }).find("closed"), std::string::npos);
  EXPECT_NE(error_of([] { ProtocolOracle::spawn("echo 'hello there'"); }).find("at byte"), std::string::npos);
  EXPECT_NE(error_of([] { ProtocolOracle::spawn(R"(echo '{"ok":false,"error":"old","proto":2}')"); })
                .find("protocol version mismatch"),
            std::string::npos);

  // The child answers the handshake, then dies.
  auto oracle = ProtocolOracle::spawn("read line; echo '" + good_hello() + "'");
  EXPECT_NE(error_of([&] { oracle->forward(TokenSequence{1}); }).find("closed"), std::string::npos);
}

}  // namespace
}  // namespace gelm
