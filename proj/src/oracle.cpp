#include "gelm/oracle.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <istream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <ostream>
#include <random>
#include <thread>

#include "gelm/errors.hpp"
#include "gelm/tokenizer.hpp"

namespace gelm {

using nlohmann::json;

namespace {

constexpr double kDistributionTolerance = 1e-6;

void check_mask(std::span<const TokenId> tokens, std::span<const double> mask) {
  if (mask.empty()) return;
  if (mask.size() != tokens.size()) {
    throw InputError("embed mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(tokens.size()) + " tokens");
  }
  for (double m : mask) {
    if (!(m >= 0.0 && m <= 1.0)) throw InputError("embed mask entries must lie in [0, 1]");
  }
}

json parse_line(const std::string& line, const char* what) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    throw ProtocolError(std::string("malformed ") + what + " at byte " + std::to_string(e.byte) + ": not valid JSON");
  }
}

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

}  // namespace

InProcessOracle::InProcessOracle(const ModelParameters& params, const Tokenizer* tokenizer, std::string backend)
    : params_(params), tokenizer_(tokenizer) {
  caps_.backend = std::move(backend);
  caps_.vocab_size = params.config.vocab_size;
  caps_.max_len = params.config.max_seq_len;
  caps_.reentrant = true;
  caps_.supports_tokenize = tokenizer != nullptr;
}

VocabDistribution InProcessOracle::forward(std::span<const TokenId> tokens, std::span<const double> embed_mask) {
  check_mask(tokens, embed_mask);
  ForwardOptions options;
  if (!embed_mask.empty()) options.embed_mask.emplace(embed_mask.begin(), embed_mask.end());
  const ForwardTrace trace = gelm::forward(params_, tokens, options);
  return next_token_distribution(trace, tokens.size() - 1);
}

TokenSequence InProcessOracle::tokenize(std::string_view text) {
  if (tokenizer_ == nullptr) throw ProtocolError("backend does not support tokenize");
  return tokenizer_->encode(text);
}

TokenSequence InProcessOracle::generate(std::span<const TokenId> tokens, std::size_t max_new) {
  TokenSequence full = gelm::generate(params_, tokens, max_new);
  return TokenSequence(full.begin() + static_cast<std::ptrdiff_t>(tokens.size()), full.end());
}

VocabDistribution validate_distribution(std::vector<double> probs, std::size_t expected_size) {
  if (probs.size() != expected_size) {
    throw ProtocolError("distribution has " + std::to_string(probs.size()) + " entries, expected " +
                        std::to_string(expected_size));
  }
  double total = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) throw ProtocolError("distribution has a negative or non-finite entry");
    total += p;
  }
  if (std::abs(total - 1.0) > kDistributionTolerance) {
    throw ProtocolError("distribution sums to " + std::to_string(total));
  }
  for (double& p : probs) p /= total;
  return VocabDistribution{std::move(probs)};
}

ChildProcessChannel::ChildProcessChannel(const std::string& command) {
  ignore_sigpipe();
  int in_pipe[2], out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw ProtocolError(errno_text("pipe"));
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw ProtocolError(errno_text("pipe"));
  }
  const pid_t pid = ::fork();
  if (pid < 0) {
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) ::close(fd);
    throw ProtocolError(errno_text("fork"));
  }
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  pid_ = pid;
}

ChildProcessChannel::~ChildProcessChannel() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ <= 0) return;
  // Closing stdin asks a well-behaved server to exit; give it a moment.
  int status = 0;
  for (int i = 0; i < 100; ++i) {
    if (::waitpid(pid_, &status, WNOHANG) != 0) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ::kill(pid_, SIGKILL);
  ::waitpid(pid_, &status, 0);
}

void ChildProcessChannel::write_line(const std::string& line) {
  if (line.find('\n') != std::string::npos) throw ContractError("protocol line contains a newline");
  std::string framed = line + '\n';
  std::size_t sent = 0;
  while (sent < framed.size()) {
    const ssize_t n = ::write(to_child_, framed.data() + sent, framed.size() - sent);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(errno_text("backend stream closed"));
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::optional<std::string> ChildProcessChannel::read_line() {
  for (;;) {
    if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    char chunk[4096];
    const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(errno_text("read from backend"));
    }
    if (n == 0) {
      if (buffer_.empty()) return std::nullopt;
      std::string line = std::move(buffer_);
      buffer_.clear();
      return line;
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

struct ProtocolOracle::Reply {
  json body;
};

ProtocolOracle::ProtocolOracle(std::unique_ptr<LineChannel> channel) : channel_(std::move(channel)) {
  channel_->write_line(json{{"op", "hello"}, {"proto", kProtocolVersion}}.dump());
  const auto line = channel_->read_line();
  if (!line) throw ProtocolError("backend closed the stream during handshake");
  const json body = parse_line(*line, "handshake reply");
  if (!body.is_object()) throw ProtocolError("handshake reply is not a JSON object");
  try {
    if (body.contains("proto") && body.at("proto").get<int>() != kProtocolVersion) {
      throw ProtocolError("protocol version mismatch: backend speaks " + std::to_string(body.at("proto").get<int>()) +
                          ", client speaks " + std::to_string(kProtocolVersion));
    }
    if (!body.at("ok").get<bool>()) {
      throw ProtocolError("backend rejected handshake: " + body.value("error", std::string("(no message)")));
    }
    if (!body.contains("proto")) throw ProtocolError("handshake reply lacks a protocol version");
    caps_.proto = body.at("proto").get<int>();
    caps_.backend = body.at("backend").get<std::string>();
    caps_.vocab_size = body.at("vocab_size").get<std::size_t>();
    caps_.max_len = body.at("max_len").get<std::size_t>();
    caps_.reentrant = body.at("reentrant").get<bool>();
    caps_.supports_tokenize = body.at("supports_tokenize").get<bool>();
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed handshake reply: ") + e.what());
  }
  if (caps_.vocab_size < 2) throw ProtocolError("backend reports vocab_size < 2");
}

std::unique_ptr<ProtocolOracle> ProtocolOracle::spawn(const std::string& command) {
  return std::make_unique<ProtocolOracle>(std::make_unique<ChildProcessChannel>(command));
}

ProtocolOracle::Reply ProtocolOracle::request(const std::string& line) {
  channel_->write_line(line);
  const auto reply = channel_->read_line();
  if (!reply) throw ProtocolError("backend closed the stream");
  Reply out{parse_line(*reply, "reply")};
  if (!out.body.is_object()) throw ProtocolError("reply is not a JSON object");
  const auto ok = out.body.find("ok");
  if (ok == out.body.end() || !ok->is_boolean()) throw ProtocolError("reply lacks a boolean 'ok'");
  if (!ok->get<bool>()) {
    const auto err = out.body.find("error");
    throw ProtocolError(err != out.body.end() && err->is_string() ? err->get<std::string>() : "backend error");
  }
  return out;
}

VocabDistribution ProtocolOracle::forward(std::span<const TokenId> tokens, std::span<const double> embed_mask) {
  check_mask(tokens, embed_mask);
  json req{{"op", "forward"}, {"tokens", tokens}};
  if (!embed_mask.empty()) req["embed_mask"] = embed_mask;
  const Reply reply = request(req.dump());
  try {
    return validate_distribution(reply.body.at("probs").get<std::vector<double>>(), caps_.vocab_size);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed forward reply: ") + e.what());
  }
}

TokenSequence ProtocolOracle::tokenize(std::string_view text) {
  if (!caps_.supports_tokenize) throw ProtocolError("backend does not support tokenize");
  const Reply reply = request(json{{"op", "tokenize"}, {"text", text}}.dump());
  try {
    return reply.body.at("tokens").get<TokenSequence>();
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed tokenize reply: ") + e.what());
  }
}

TokenSequence ProtocolOracle::generate(std::span<const TokenId> tokens, std::size_t max_new) {
  const Reply reply = request(json{{"op", "generate"}, {"tokens", tokens}, {"max_new", max_new}}.dump());
  try {
    return reply.body.at("tokens").get<TokenSequence>();
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed generate reply: ") + e.what());
  }
}

std::string handle_request(ModelOracle& backend, const std::string& line) {
  auto fail = [](const std::string& message) { return json{{"ok", false}, {"error", message}}.dump(); };
  json req;
  try {
    req = json::parse(line);
  } catch (const json::parse_error& e) {
    return fail("malformed request at byte " + std::to_string(e.byte) + ": not valid JSON");
  }
  if (!req.is_object()) return fail("request is not a JSON object");
  try {
    const std::string op = req.at("op").get<std::string>();
    if (op == "hello") {
      const int proto = req.at("proto").get<int>();
      if (proto != kProtocolVersion) {
        return json{{"ok", false},
                    {"error", "unsupported protocol version " + std::to_string(proto)},
                    {"proto", kProtocolVersion}}
            .dump();
      }
      const OracleCapabilities& caps = backend.capabilities();
      return json{{"ok", true},
                  {"proto", kProtocolVersion},
                  {"backend", caps.backend},
                  {"vocab_size", caps.vocab_size},
                  {"max_len", caps.max_len},
                  {"reentrant", caps.reentrant},
                  {"supports_tokenize", caps.supports_tokenize}}
          .dump();
    }
    if (op == "tokenize") {
      return json{{"ok", true}, {"tokens", backend.tokenize(req.at("text").get<std::string>())}}.dump();
    }
    if (op == "forward") {
      const auto tokens = req.at("tokens").get<TokenSequence>();
      std::vector<double> mask;
      if (req.contains("embed_mask")) mask = req.at("embed_mask").get<std::vector<double>>();
      return json{{"ok", true}, {"probs", backend.forward(tokens, mask).probs}}.dump();
    }
    if (op == "generate") {
      const auto tokens = req.at("tokens").get<TokenSequence>();
      return json{{"ok", true}, {"tokens", backend.generate(tokens, req.at("max_new").get<std::size_t>())}}.dump();
    }
    return fail("unknown op '" + op + "'");
  } catch (const json::exception& e) {
    return fail(std::string("bad request: ") + e.what());
  } catch (const Error& e) {
    return fail(e.what());
  }
}

void serve_protocol(ModelOracle& backend, std::istream& in, std::ostream& out) {
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out << handle_request(backend, line) << '\n' << std::flush;
  }
}

ConformanceReport run_conformance(ModelOracle& oracle, std::span<const TokenId> tokens, std::uint64_t seed,
                                  double tolerance) {
  if (tokens.empty()) throw InputError("conformance needs a non-empty sequence");
  const std::size_t m = tokens.size();
  std::mt19937_64 rng(seed);
  auto random_mask = [&] {
    std::vector<double> mask(m);
    for (double& x : mask) x = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return mask;
  };
  auto max_diff = [](const VocabDistribution& a, const VocabDistribution& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
  };
  auto product = [&](const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = a[i] * b[i];
    return out;
  };

  ConformanceReport report;
  const VocabDistribution unmasked = oracle.forward(tokens);
  report.mask_neutrality = max_diff(unmasked, oracle.forward(tokens, std::vector<double>(m, 1.0)));

  // Masks applied in sequence compose multiplicatively; a black box can only
  // be probed through the combined mask, so compare association orders and
  // make sure earlier requests leave no state behind.
  const auto m1 = random_mask(), m2 = random_mask(), m3 = random_mask();
  oracle.forward(tokens, m1);
  oracle.forward(tokens, m2);
  const VocabDistribution left = oracle.forward(tokens, product(product(m1, m2), m3));
  oracle.forward(tokens, m3);
  const VocabDistribution right = oracle.forward(tokens, product(m1, product(m2, m3)));
  report.mask_composition = max_diff(left, right);

  const std::size_t erased = static_cast<std::size_t>(rng() % m);
  auto erasing = random_mask();
  erasing[erased] = 0.0;
  TokenSequence swapped(tokens.begin(), tokens.end());
  swapped[erased] = (swapped[erased] + 1) % static_cast<TokenId>(oracle.capabilities().vocab_size);
  report.token_erasure = max_diff(oracle.forward(tokens, erasing), oracle.forward(swapped, erasing));

  const VocabDistribution first = oracle.forward(tokens, m1);
  for (int repeat = 0; repeat < 3; ++repeat) {
    report.determinism = std::max(report.determinism, max_diff(first, oracle.forward(tokens, m1)));
  }

  auto check = [&](const char* name, double value) {
    if (value > tolerance) report.failures.push_back(std::string(name) + ": " + std::to_string(value));
  };
  check("mask neutrality", report.mask_neutrality);
  check("mask composition", report.mask_composition);
  check("token erasure", report.token_erasure);
  check("determinism", report.determinism);
  return report;
}

}  // namespace gelm
