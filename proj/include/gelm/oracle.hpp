#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gelm/model.hpp"

namespace gelm {

class Tokenizer;

inline constexpr int kProtocolVersion = 1;

struct OracleCapabilities {
  int proto = kProtocolVersion;
  std::string backend;
  std::size_t vocab_size = 0;
  std::size_t max_len = 0;
  bool reentrant = false;
  bool supports_tokenize = false;
};

// The minimal model surface the faithfulness metrics need: the next-token
// distribution at the final position of a sequence whose token embeddings
// are scaled position-wise by a mask.
class ModelOracle {
 public:
  virtual ~ModelOracle() = default;

  virtual const OracleCapabilities& capabilities() const = 0;
  // An empty mask means "unmasked".
  virtual VocabDistribution forward(std::span<const TokenId> tokens, std::span<const double> embed_mask) = 0;
  // Throws ProtocolError when the backend cannot tokenize.
  virtual TokenSequence tokenize(std::string_view text) = 0;
  // Returns only the newly generated ids.
  virtual TokenSequence generate(std::span<const TokenId> tokens, std::size_t max_new) = 0;

  VocabDistribution forward(std::span<const TokenId> tokens) { return forward(tokens, {}); }
};

// Wraps a decoder-model in the oracle interface. Reentrant: forward() is a
// pure function of immutable parameters.
class InProcessOracle final : public ModelOracle {
 public:
  explicit InProcessOracle(const ModelParameters& params, const Tokenizer* tokenizer = nullptr,
                           std::string backend = "gelm-decoder");

  const OracleCapabilities& capabilities() const override { return caps_; }
  VocabDistribution forward(std::span<const TokenId> tokens, std::span<const double> embed_mask) override;
  TokenSequence tokenize(std::string_view text) override;
  TokenSequence generate(std::span<const TokenId> tokens, std::size_t max_new) override;
  using ModelOracle::forward;

 private:
  const ModelParameters& params_;
  const Tokenizer* tokenizer_;
  OracleCapabilities caps_;
};

// Checks |sum(p) - 1| <= 1e-6 and p >= 0, renormalizing within tolerance.
// Throws ProtocolError otherwise.
VocabDistribution validate_distribution(std::vector<double> probs, std::size_t expected_size);

// Line-oriented JSON transport. Implementations must deliver whole lines
// without the trailing LF; nullopt means the peer closed the stream.
class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual void write_line(const std::string& line) = 0;
  virtual std::optional<std::string> read_line() = 0;
};

// Talks to a child process over its stdin/stdout. The child inherits stderr.
class ChildProcessChannel final : public LineChannel {
 public:
  explicit ChildProcessChannel(const std::string& command);
  ~ChildProcessChannel() override;
  ChildProcessChannel(const ChildProcessChannel&) = delete;
  ChildProcessChannel& operator=(const ChildProcessChannel&) = delete;

  void write_line(const std::string& line) override;
  std::optional<std::string> read_line() override;

 private:
  int to_child_ = -1;
  int from_child_ = -1;
  int pid_ = -1;
  std::string buffer_;
};

// Client side of the wire protocol. Sequential: one request, one response.
class ProtocolOracle final : public ModelOracle {
 public:
  // Performs the hello handshake; throws ProtocolError on rejection,
  // version mismatch, malformed reply or closed stream.
  explicit ProtocolOracle(std::unique_ptr<LineChannel> channel);

  static std::unique_ptr<ProtocolOracle> spawn(const std::string& command);

  const OracleCapabilities& capabilities() const override { return caps_; }
  VocabDistribution forward(std::span<const TokenId> tokens, std::span<const double> embed_mask) override;
  TokenSequence tokenize(std::string_view text) override;
  TokenSequence generate(std::span<const TokenId> tokens, std::size_t max_new) override;
  using ModelOracle::forward;

 private:
  struct Reply;
  Reply request(const std::string& line);

  std::unique_ptr<LineChannel> channel_;
  OracleCapabilities caps_;
};

// Serves the wire protocol for `backend` until the input stream ends.
// Every request line gets exactly one response line; failures become
// {"ok":false,"error":...} responses.
void serve_protocol(ModelOracle& backend, std::istream& in, std::ostream& out);

// Answers one request line. Exposed for tests.
std::string handle_request(ModelOracle& backend, const std::string& line);

// Conformance checks any backend should pass.
struct ConformanceReport {
  double mask_neutrality = 0.0;   // max |p(unmasked) - p(all ones)|
  double mask_composition = 0.0;  // max |p((m1*m2)*m3) - p(m1*(m2*m3))|, other requests in between
  double token_erasure = 0.0;     // max |p| change when a zero-masked token is swapped
  double determinism = 0.0;       // max |p| change across repeated requests
  std::vector<std::string> failures;

  bool passed() const { return failures.empty(); }
};

ConformanceReport run_conformance(ModelOracle& oracle, std::span<const TokenId> tokens, std::uint64_t seed,
                                  double tolerance = 1e-5);

}  // namespace gelm
