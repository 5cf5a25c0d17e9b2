#pragma once

// Test-only model constructions shared by the unit and acceptance suites.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "gelm/model.hpp"

namespace gelm::testing {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct ConfigRanges {
  std::size_t max_layers = 3;
  std::size_t max_d_model = 32;
  bool random_switches = true;  // draw attention_only / use_norm
  bool attention_only = false;
  bool use_norm = true;
};

inline ModelConfig random_config(std::mt19937_64& rng, const ConfigRanges& ranges = {}) {
  ModelConfig c;
  c.n_layers = uniform_index(rng, 1, ranges.max_layers);
  const std::size_t heads[] = {1, 2, 4};
  c.n_heads = heads[uniform_index(rng, 0, 2)];
  const std::size_t per_head_max = std::max<std::size_t>(1, ranges.max_d_model / c.n_heads);
  c.d_model = c.n_heads * uniform_index(rng, std::min<std::size_t>(2, per_head_max), per_head_max);
  c.vocab_size = uniform_index(rng, 5, 40);
  c.max_seq_len = uniform_index(rng, 4, 16);
  if (ranges.random_switches) {
    c.attention_only = uniform_index(rng, 0, 1) == 1;
    c.use_norm = uniform_index(rng, 0, 1) == 1;
  } else {
    c.attention_only = ranges.attention_only;
    c.use_norm = ranges.use_norm;
  }
  c.seed = rng();
  return c;
}

inline TokenSequence random_tokens(std::mt19937_64& rng, std::size_t length, std::size_t vocab) {
  TokenSequence out(length);
  for (auto& t : out) t = static_cast<TokenId>(uniform_index(rng, 0, vocab - 1));
  return out;
}

// Multiplies every weight matrix by `factor` so attention becomes peaky,
// the way it is in trained models.
inline void sharpen(ModelParameters& p, double factor) {
  for (auto& b : p.blocks) {
    b.wq *= factor;
    b.wk *= factor;
  }
}

// One-layer, one-head, attention-only model in which the next-token logit
// of `target` depends on a single earlier position: the one holding the
// signal token. The routing is planted on top of small random weights.
struct PlantedDependence {
  ModelParameters params;
  TokenSequence tokens;
  std::size_t planted_position = 0;
  TokenId target = 0;
};

inline PlantedDependence make_planted_dependence(std::mt19937_64& rng, std::size_t length) {
  constexpr std::size_t kBias = 0, kSignal = 1, kOut = 2;
  constexpr TokenId kSignalToken = 0;
  constexpr double kRoute = 9.0;   // q.k for the signal token is kRoute^2
  constexpr double kValue = 3.0;   // signal -> output channel gain
  constexpr double kNoise = 0.05;

  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 16;
  c.vocab_size = 24;
  c.max_seq_len = 16;
  c.attention_only = true;
  c.use_norm = false;
  c.seed = rng();
  const std::size_t d = c.d_model;

  ModelParameters p = init_model(c);
  auto noise = [&](Tensor& t, double scale) {
    for (double& x : t.data()) x = uniform(rng, -scale, scale);
  };
  for (std::size_t v = 0; v < c.vocab_size; ++v) {
    auto row = p.token_embedding.row(v);
    for (std::size_t j = 0; j < d; ++j) row[j] = j > kOut ? uniform(rng, -0.5, 0.5) : 0.0;
    row[kBias] = 1.0;
    row[kSignal] = v == static_cast<std::size_t>(kSignalToken) ? 1.0 : 0.0;
  }
  for (std::size_t i = 0; i < c.max_seq_len; ++i) {
    auto row = p.position_embedding.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] = j > kOut ? uniform(rng, -0.1, 0.1) : 0.0;
  }
  auto& b = p.blocks[0];
  noise(b.wq, kNoise);
  noise(b.wk, kNoise);
  noise(b.wv, kNoise);
  noise(b.wo, kNoise);
  b.wq.at(kBias, kSignal) = kRoute;
  b.wk.at(kSignal, kSignal) = kRoute;
  b.wv.at(kSignal, kOut) = kValue;
  for (std::size_t j = 0; j < d; ++j) b.wo.at(j, j) += 1.0;

  PlantedDependence out;
  out.target = static_cast<TokenId>(uniform_index(rng, 1, c.vocab_size - 1));
  noise(p.unembedding, 0.1);
  p.unembedding.at(kOut, static_cast<std::size_t>(out.target)) = 1.0;

  out.planted_position = uniform_index(rng, 0, length - 2);
  out.tokens.resize(length);
  for (std::size_t i = 0; i < length; ++i) {
    out.tokens[i] = i == out.planted_position ? kSignalToken
                                              : static_cast<TokenId>(uniform_index(rng, 1, c.vocab_size - 1));
  }
  out.params = std::move(p);
  return out;
}

// Unembedding = embedding^T, one head attending to position 0 and copying
// its token into the residual stream.
inline ModelParameters make_copy_model(std::size_t vocab) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = vocab + 2;
  c.vocab_size = vocab;
  c.max_seq_len = 12;
  c.attention_only = true;
  c.use_norm = false;
  ModelParameters p = init_model(c);
  const std::size_t bias = vocab, first = vocab + 1;
  p.token_embedding = Tensor({vocab, c.d_model});
  for (std::size_t v = 0; v < vocab; ++v) p.token_embedding.at(v, v) = 1.0;
  p.position_embedding = Tensor({c.max_seq_len, c.d_model});
  for (std::size_t i = 0; i < c.max_seq_len; ++i) p.position_embedding.at(i, bias) = 1.0;
  p.position_embedding.at(0, first) = 1.0;
  auto& b = p.blocks[0];
  b.wq = Tensor({c.d_model, c.d_model});
  b.wk = Tensor({c.d_model, c.d_model});
  b.wv = Tensor({c.d_model, c.d_model});
  b.wo = Tensor({c.d_model, c.d_model});
  b.wq.at(bias, 0) = 8.0;
  b.wk.at(first, 0) = 8.0;
  for (std::size_t v = 0; v < vocab; ++v) b.wv.at(v, v) = 3.0;
  for (std::size_t j = 0; j < c.d_model; ++j) b.wo.at(j, j) = 1.0;
  p.unembedding = transpose(p.token_embedding);
  return p;
}

}  // namespace gelm::testing
