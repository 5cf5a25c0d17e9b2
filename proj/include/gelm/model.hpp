#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gelm/autodiff.hpp"
#include "gelm/tensor.hpp"

namespace gelm {

using TokenId = std::int64_t;
using TokenSequence = std::vector<TokenId>;

// Architecture of the toy decoder.
//
// Blocks are indexed by distance from the output: block 0 feeds the
// unembedding, block n_layers-1 reads the embeddings. Residual states follow
// the same convention, so residual[n_layers] holds the embeddings and
// residual[0] the final hidden states, and block k maps residual[k+1] to
// residual[k].
struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 16;
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 32;
  bool attention_only = false;  // drop the feed-forward sublayer
  bool use_norm = true;         // RMS normalization before each sublayer and the unembedding
  std::uint64_t seed = 0;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t d_ff() const { return 4 * d_model; }

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct BlockParameters {
  Tensor wq, wk, wv, wo;  // d_model x d_model
  Tensor attn_norm;       // d_model gain
  Tensor ffn_norm;        // d_model gain (unused when attention_only)
  Tensor w_up;            // d_model x d_ff
  Tensor w_down;          // d_ff x d_model

  friend bool operator==(const BlockParameters&, const BlockParameters&) = default;
};

struct ModelParameters {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d_model
  Tensor position_embedding;  // max_seq_len x d_model
  std::vector<BlockParameters> blocks;  // blocks[k], k = distance from output
  Tensor final_norm;          // d_model gain
  Tensor unembedding;         // d_model x vocab: the linear projection to logits

  // Every tensor in checkpoint order with its stable name.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor*>> named_tensors();

  friend bool operator==(const ModelParameters&, const ModelParameters&) = default;
};

// Deterministic scaled-uniform init, U(-1/sqrt(d_model), 1/sqrt(d_model)).
// Normalization gains start at one.
ModelParameters init_model(const ModelConfig& config);

// Intermediates of one attention block.
struct BlockTrace {
  std::vector<Tensor> q, k, v;            // per head, m x d_head
  std::vector<Tensor> similarity;         // per head, raw q k^T, m x m
  std::vector<Tensor> attention;          // per head, causal softmax of similarity / sqrt(d_head)
  std::vector<Tensor> projected_values;   // per head, v_h W_O[h rows], m x d_model
  Tensor output;                          // attention sublayer output o^(k), m x d_model
};

// Everything recorded by one forward pass. The tape is kept so gradients of
// any logit can be taken later; it is immutable once the trace exists.
struct ForwardTrace {
  TokenSequence tokens;
  std::vector<double> embed_mask;  // one factor per position (all ones when unmasked)
  std::vector<BlockTrace> blocks;  // blocks[k]
  std::vector<Tensor> residual;    // residual[k], k = 0..n_layers
  Tensor logits;                   // m x vocab

  std::shared_ptr<const Tape> tape;
  Var input_embedding;             // masked token embeddings, before positions are added
  std::vector<Var> attention_output_vars;  // o^(k)
  std::vector<Var> residual_vars;          // residual[k]
  Var logits_var;

  std::size_t length() const { return tokens.size(); }
  std::size_t n_layers() const { return blocks.size(); }
};

struct ForwardOptions {
  std::optional<std::vector<double>> embed_mask;
  // Positions whose value vectors are zeroed in every block.
  std::vector<std::size_t> zero_value_positions;
};

// Hooks to splice extra tape nodes into a forward pass (used for gradient
// checks against perturbed intermediates). Each receives the node the model
// would use and returns its replacement.
struct ForwardHooks {
  std::function<Var(Tape&, Var)> input_embedding;
  std::function<Var(Tape&, std::size_t block, Var)> attention_output;
};

struct BuiltForward {
  Var logits;
  Var input_embedding;
  std::vector<Var> attention_output;
  std::vector<Var> residual;
  // Per block, per head: q, k, v, similarity and attention nodes.
  struct Head {
    Var q, k, v, similarity, attention;
  };
  std::vector<std::vector<Head>> heads;
};

// Records the forward pass on `tape`. Lower-level entry used by forward() and
// by gradient checks that need to differentiate through substituted nodes.
BuiltForward build_forward(Tape& tape, const ModelParameters& params, std::span<const TokenId> tokens,
                           const ForwardOptions& options = {}, const ForwardHooks& hooks = {});

ForwardTrace forward(const ModelParameters& params, std::span<const TokenId> tokens,
                     const ForwardOptions& options = {});

inline ForwardTrace forward(const ModelParameters& params, std::span<const TokenId> tokens,
                            std::vector<double> embed_mask) {
  ForwardOptions options;
  options.embed_mask = std::move(embed_mask);
  return forward(params, tokens, options);
}

// P_{X,t}: probability of each vocabulary entry following `position`.
struct VocabDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
};

VocabDistribution next_token_distribution(const ForwardTrace& trace, std::size_t position);

// Greedy decoding; ties go to the lowest token id.
TokenSequence generate(const ModelParameters& params, std::span<const TokenId> tokens, std::size_t max_new);

// Per-block split of one logit: block_terms[k] = LP(o^(k)_t)[target],
// embedding_term = LP(residual[N]_t)[target]. `gap` is whatever the
// attention-plus-residual picture misses (FFN and normalization); it is exactly
// zero for attention_only models without normalization.
struct LogitDecomposition {
  std::vector<double> block_terms;
  double embedding_term = 0.0;
  double logit = 0.0;
  double gap = 0.0;
};

LogitDecomposition logit_decomposition(const ModelParameters& params, const ForwardTrace& trace,
                                       TokenId target, std::size_t position);

}  // namespace gelm
