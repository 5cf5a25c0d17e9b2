#include "gelm/model.hpp"

#include <cmath>
#include <random>
#include <utility>

#include "gelm/errors.hpp"

namespace gelm {
namespace {

constexpr double kNormEps = 1e-6;

Tensor uniform_tensor(std::mt19937_64& rng, Tensor::Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) {
    // 53 random mantissa bits, mapped to [-bound, bound).
    const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    x = (2.0 * unit - 1.0) * bound;
  }
  return t;
}

Tensor ones(std::size_t n) { return Tensor({n}, std::vector<double>(n, 1.0)); }

std::vector<double> checked_mask(const ForwardOptions& options, std::size_t length) {
  if (!options.embed_mask) return std::vector<double>(length, 1.0);
  const auto& mask = *options.embed_mask;
  if (mask.size() != length) {
    throw InputError("embed_mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(length) + " tokens");
  }
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!(mask[i] >= 0.0 && mask[i] <= 1.0)) {
      throw InputError("embed_mask[" + std::to_string(i) + "] outside [0,1]");
    }
  }
  return mask;
}

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (tokens.size() > config.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of size " + std::to_string(config.vocab_size));
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers == 0) throw ConfigError("n_layers must be positive");
  if (n_heads == 0) throw ConfigError("n_heads must be positive");
  if (d_model == 0) throw ConfigError("d_model must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (max_seq_len < 2) throw ConfigError("max_seq_len must be at least 2");
}

std::vector<std::pair<std::string, const Tensor*>> ModelParameters::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.emplace_back("token_embedding", &token_embedding);
  out.emplace_back("position_embedding", &position_embedding);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const std::string prefix = "blocks." + std::to_string(k) + ".";
    const BlockParameters& b = blocks[k];
    out.emplace_back(prefix + "wq", &b.wq);
    out.emplace_back(prefix + "wk", &b.wk);
    out.emplace_back(prefix + "wv", &b.wv);
    out.emplace_back(prefix + "wo", &b.wo);
    out.emplace_back(prefix + "attn_norm", &b.attn_norm);
    if (!config.attention_only) {
      out.emplace_back(prefix + "ffn_norm", &b.ffn_norm);
      out.emplace_back(prefix + "w_up", &b.w_up);
      out.emplace_back(prefix + "w_down", &b.w_down);
    }
  }
  out.emplace_back("final_norm", &final_norm);
  out.emplace_back("unembedding", &unembedding);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelParameters::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, ptr] : std::as_const(*this).named_tensors()) {
    out.emplace_back(name, const_cast<Tensor*>(ptr));
  }
  return out;
}

ModelParameters init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const std::size_t d = config.d_model;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));

  ModelParameters p;
  p.config = config;
  p.token_embedding = uniform_tensor(rng, {config.vocab_size, d}, bound);
  p.position_embedding = uniform_tensor(rng, {config.max_seq_len, d}, bound);
  p.blocks.resize(config.n_layers);
  for (BlockParameters& b : p.blocks) {
    b.wq = uniform_tensor(rng, {d, d}, bound);
    b.wk = uniform_tensor(rng, {d, d}, bound);
    b.wv = uniform_tensor(rng, {d, d}, bound);
    b.wo = uniform_tensor(rng, {d, d}, bound);
    b.attn_norm = ones(d);
    if (!config.attention_only) {
      b.ffn_norm = ones(d);
      b.w_up = uniform_tensor(rng, {d, config.d_ff()}, bound);
      b.w_down = uniform_tensor(rng, {config.d_ff(), d}, bound);
    }
  }
  p.final_norm = ones(d);
  p.unembedding = uniform_tensor(rng, {d, config.vocab_size}, bound);
  return p;
}

BuiltForward build_forward(Tape& tape, const ModelParameters& params, std::span<const TokenId> tokens,
                           const ForwardOptions& options, const ForwardHooks& hooks) {
  const ModelConfig& cfg = params.config;
  check_tokens(cfg, tokens);
  const std::size_t m = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.d_head();
  const std::vector<double> mask = checked_mask(options, m);

  BuiltForward built;
  built.attention_output.resize(cfg.n_layers);
  built.residual.resize(cfg.n_layers + 1);
  built.heads.resize(cfg.n_layers);

  Tensor gathered({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    auto src = params.token_embedding.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), gathered.row(i).begin());
  }
  Var x = tape.scale_rows(tape.leaf(std::move(gathered)), mask);
  if (hooks.input_embedding) x = hooks.input_embedding(tape, x);
  built.input_embedding = x;

  Var z = tape.add(x, tape.leaf(slice_rows(params.position_embedding, 0, m)));
  built.residual[cfg.n_layers] = z;

  std::vector<double> value_keep(m, 1.0);
  for (std::size_t pos : options.zero_value_positions) {
    if (pos >= m) throw InputError("zero_value position out of range");
    value_keep[pos] = 0.0;
  }
  const bool zero_values = !options.zero_value_positions.empty();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t k = cfg.n_layers; k-- > 0;) {
    const BlockParameters& bp = params.blocks[k];
    const Var h = cfg.use_norm ? tape.rms_norm_rows(z, tape.leaf(bp.attn_norm), kNormEps) : z;
    const Var q = tape.matmul(h, tape.leaf(bp.wq));
    const Var kk = tape.matmul(h, tape.leaf(bp.wk));
    Var v = tape.matmul(h, tape.leaf(bp.wv));
    if (zero_values) v = tape.scale_rows(v, value_keep);

    std::vector<Var> head_outputs;
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      BuiltForward::Head hv;
      hv.q = tape.slice_cols(q, head * dh, (head + 1) * dh);
      hv.k = tape.slice_cols(kk, head * dh, (head + 1) * dh);
      hv.v = tape.slice_cols(v, head * dh, (head + 1) * dh);
      hv.similarity = tape.matmul_bt(hv.q, hv.k);
      hv.attention = tape.softmax_rows(hv.similarity, score_scale, /*causal=*/true);
      head_outputs.push_back(tape.matmul(hv.attention, hv.v));
      built.heads[k].push_back(hv);
    }
    Var o = tape.matmul(tape.concat_cols(head_outputs), tape.leaf(bp.wo));
    if (hooks.attention_output) o = hooks.attention_output(tape, k, o);
    built.attention_output[k] = o;

    Var u = tape.add(z, o);
    if (!cfg.attention_only) {
      const Var hn = cfg.use_norm ? tape.rms_norm_rows(u, tape.leaf(bp.ffn_norm), kNormEps) : u;
      const Var up = tape.gelu(tape.matmul(hn, tape.leaf(bp.w_up)));
      u = tape.add(u, tape.matmul(up, tape.leaf(bp.w_down)));
    }
    z = u;
    built.residual[k] = z;
  }

  const Var final_hidden = cfg.use_norm ? tape.rms_norm_rows(z, tape.leaf(params.final_norm), kNormEps) : z;
  built.logits = tape.matmul(final_hidden, tape.leaf(params.unembedding));
  return built;
}

ForwardTrace forward(const ModelParameters& params, std::span<const TokenId> tokens,
                     const ForwardOptions& options) {
  auto tape = std::make_shared<Tape>();
  const BuiltForward built = build_forward(*tape, params, tokens, options);
  const ModelConfig& cfg = params.config;
  const std::size_t dh = cfg.d_head();

  ForwardTrace trace;
  trace.tokens.assign(tokens.begin(), tokens.end());
  trace.embed_mask = checked_mask(options, tokens.size());
  trace.blocks.resize(cfg.n_layers);
  for (std::size_t k = 0; k < cfg.n_layers; ++k) {
    BlockTrace& bt = trace.blocks[k];
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      const auto& hv = built.heads[k][head];
      bt.q.push_back(tape->value(hv.q));
      bt.k.push_back(tape->value(hv.k));
      bt.v.push_back(tape->value(hv.v));
      bt.similarity.push_back(tape->value(hv.similarity));
      bt.attention.push_back(tape->value(hv.attention));
      bt.projected_values.push_back(
          matmul(tape->value(hv.v), slice_rows(params.blocks[k].wo, head * dh, (head + 1) * dh)));
    }
    bt.output = tape->value(built.attention_output[k]);
  }
  for (Var r : built.residual) trace.residual.push_back(tape->value(r));
  trace.logits = tape->value(built.logits);

  trace.input_embedding = built.input_embedding;
  trace.attention_output_vars = built.attention_output;
  trace.residual_vars = built.residual;
  trace.logits_var = built.logits;
  trace.tape = std::move(tape);
  return trace;
}

VocabDistribution next_token_distribution(const ForwardTrace& trace, std::size_t position) {
  if (position >= trace.length()) {
    throw InputError("position " + std::to_string(position) + " outside trace of length " +
                     std::to_string(trace.length()));
  }
  return VocabDistribution{softmax(trace.logits.row(position))};
}

TokenSequence generate(const ModelParameters& params, std::span<const TokenId> tokens, std::size_t max_new) {
  if (max_new == 0) throw InputError("max_new must be at least 1");
  if (tokens.size() + max_new > params.config.max_seq_len) {
    throw InputError("generation would exceed max_seq_len " + std::to_string(params.config.max_seq_len));
  }
  TokenSequence seq(tokens.begin(), tokens.end());
  for (std::size_t step = 0; step < max_new; ++step) {
    const ForwardTrace trace = forward(params, seq);
    seq.push_back(static_cast<TokenId>(argmax(trace.logits.row(seq.size() - 1))));
  }
  return seq;
}

LogitDecomposition logit_decomposition(const ModelParameters& params, const ForwardTrace& trace,
                                       TokenId target, std::size_t position) {
  if (position >= trace.length()) throw InputError("position outside trace");
  if (target < 0 || static_cast<std::size_t>(target) >= params.config.vocab_size) {
    throw InputError("target token outside vocabulary");
  }
  const auto column = static_cast<std::size_t>(target);
  auto project = [&](const Tensor& states) {
    double acc = 0.0;
    for (std::size_t c = 0; c < states.cols(); ++c) acc += states.at(position, c) * params.unembedding.at(c, column);
    return acc;
  };

  LogitDecomposition out;
  double total = 0.0;
  for (const BlockTrace& block : trace.blocks) {
    out.block_terms.push_back(project(block.output));
    total += out.block_terms.back();
  }
  out.embedding_term = project(trace.residual.back());
  total += out.embedding_term;
  out.logit = trace.logits.at(position, column);
  out.gap = out.logit - total;
  return out;
}

}  // namespace gelm
