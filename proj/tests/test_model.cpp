#include <random>

#include <gtest/gtest.h>

#include "gelm/errors.hpp"
#include "gelm/model.hpp"
#include "support/toy_models.hpp"

namespace gelm {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 11;
  c.max_seq_len = 10;
  c.seed = 42;
  return c;
}

TEST(InitModel, DeterministicGivenSeed) {
  const auto a = init_model(small_config());
  const auto b = init_model(small_config());
  EXPECT_EQ(a, b);
}

TEST(InitModel, SeedChangesWeights) {
  auto c = small_config();
  const auto a = init_model(c);
  c.seed = 43;
  const auto b = init_model(c);
  EXPECT_NE(a.token_embedding, b.token_embedding);
}

TEST(InitModel, RejectsIndivisibleHeads) {
  auto c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(init_model(c), ConfigError);
  c = small_config();
  c.max_seq_len = 1;
  EXPECT_THROW(init_model(c), ConfigError);
}

TEST(InitModel, ScaledUniformRange) {
  const auto p = init_model(small_config());
  const double bound = 1.0 / std::sqrt(8.0);
  for (const auto& [name, t] : p.named_tensors()) {
    if (name.find("norm") != std::string::npos) continue;
    for (double x : t->data()) ASSERT_LE(std::abs(x), bound) << name;
  }
}

TEST(Forward, AllOnesMaskMatchesNoMask) {
  const auto p = init_model(small_config());
  const TokenSequence tokens = {1, 4, 2, 7, 3};
  const auto a = forward(p, tokens);
  const auto b = forward(p, tokens, std::vector<double>(tokens.size(), 1.0));
  EXPECT_EQ(a.logits, b.logits);
}

TEST(Forward, ZeroMaskRemovesTokenIdentity) {
  // The zero baseline keeps only position embeddings, so it cannot depend on
  // which tokens were there.
  const auto p = init_model(small_config());
  const std::vector<double> zeros(4, 0.0);
  const auto a = forward(p, TokenSequence{1, 2, 3, 4}, zeros);
  const auto b = forward(p, TokenSequence{9, 0, 5, 5}, zeros);
  EXPECT_EQ(a.logits, b.logits);
  for (std::size_t i = 0; i < 4; ++i)
    for (double x : a.tape->value(a.input_embedding).row(i)) EXPECT_EQ(x, 0.0);
}

TEST(Forward, InputValidation) {
  const auto p = init_model(small_config());
  EXPECT_THROW(forward(p, TokenSequence{}), InputError);
  EXPECT_THROW(forward(p, TokenSequence(11, 1)), InputError);
  EXPECT_THROW(forward(p, TokenSequence{1, 11}), InputError);
  EXPECT_THROW(forward(p, TokenSequence{1, 2}, std::vector<double>{1.0}), InputError);
  EXPECT_THROW(forward(p, TokenSequence{1, 2}, std::vector<double>{1.0, 1.5}), InputError);
}

TEST(Forward, CausalityUnderAppendAndPerturbation) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const auto c = testing::random_config(rng);
    const auto p = init_model(c);
    const std::size_t m = testing::uniform_index(rng, 2, c.max_seq_len);
    auto tokens = testing::random_tokens(rng, m, c.vocab_size);
    const auto base = forward(p, tokens);
    const std::size_t t = testing::uniform_index(rng, 0, m - 2);
    auto changed = tokens;
    for (std::size_t i = t + 1; i < m; ++i) changed[i] = static_cast<TokenId>((changed[i] + 1) % c.vocab_size);
    const auto other = forward(p, changed);
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t v = 0; v < c.vocab_size; ++v) ASSERT_EQ(base.logits.at(i, v), other.logits.at(i, v));
    const auto prefix = forward(p, std::span(tokens).first(t + 1));
    for (std::size_t v = 0; v < c.vocab_size; ++v) ASSERT_EQ(base.logits.at(t, v), prefix.logits.at(t, v));
  }
}

TEST(Forward, AttentionRowsAreCausalDistributions) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = testing::random_config(rng);
    const auto p = init_model(c);
    const auto tokens = testing::random_tokens(rng, c.max_seq_len, c.vocab_size);
    const auto trace = forward(p, tokens);
    for (const auto& block : trace.blocks) {
      for (const auto& att : block.attention) {
        for (std::size_t r = 0; r < att.rows(); ++r) {
          double total = 0.0;
          for (std::size_t i = 0; i < att.cols(); ++i) {
            if (i > r) ASSERT_EQ(att.at(r, i), 0.0);
            ASSERT_GE(att.at(r, i), 0.0);
            total += att.at(r, i);
          }
          ASSERT_NEAR(total, 1.0, 1e-12);
        }
      }
    }
  }
}

TEST(Forward, ProjectedValuesReproduceAttentionOutput) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = testing::random_config(rng);
    const auto p = init_model(c);
    const auto tokens = testing::random_tokens(rng, c.max_seq_len, c.vocab_size);
    const auto trace = forward(p, tokens);
    for (const auto& block : trace.blocks) {
      Tensor rebuilt(block.output.shape());
      for (std::size_t h = 0; h < c.n_heads; ++h) rebuilt += matmul(block.attention[h], block.projected_values[h]);
      ASSERT_LT(max_abs_diff(rebuilt, block.output), 1e-12);
    }
  }
}

TEST(Forward, ResidualIdentityInExactRegime) {
  std::mt19937_64 rng(13);
  testing::ConfigRanges ranges;
  ranges.random_switches = false;
  ranges.attention_only = true;
  ranges.use_norm = false;
  const auto c = testing::random_config(rng, ranges);
  const auto p = init_model(c);
  const auto trace = forward(p, testing::random_tokens(rng, c.max_seq_len, c.vocab_size));
  for (std::size_t k = 0; k < c.n_layers; ++k) {
    EXPECT_EQ(trace.residual[k], add(trace.residual[k + 1], trace.blocks[k].output));
  }
}

TEST(Forward, MasksComposeMultiplicatively) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = testing::random_config(rng);
    const auto p = init_model(c);
    const std::size_t m = testing::uniform_index(rng, 1, c.max_seq_len);
    const auto tokens = testing::random_tokens(rng, m, c.vocab_size);
    std::vector<double> m1(m), m2(m), both(m);
    for (std::size_t i = 0; i < m; ++i) {
      m1[i] = testing::uniform(rng, 0, 1);
      m2[i] = testing::uniform(rng, 0, 1);
      both[i] = m1[i] * m2[i];
    }
    ForwardOptions first;
    first.embed_mask = m1;
    ForwardHooks then_second;
    then_second.input_embedding = [&](Tape& t, Var x) { return t.scale_rows(x, m2); };
    Tape tape;
    const auto built = build_forward(tape, p, tokens, first, then_second);
    const auto direct = forward(p, tokens, both);
    ASSERT_LT(max_abs_diff(tape.value(built.logits), direct.logits), 1e-12);
  }
}

TEST(NextTokenDistribution, MatchesSoftmaxOfLogits) {
  const auto p = init_model(small_config());
  const auto trace = forward(p, TokenSequence{3, 1, 4, 1, 5});
  for (std::size_t pos = 0; pos < 5; ++pos) {
    const auto dist = next_token_distribution(trace, pos);
    EXPECT_EQ(dist.probs, softmax(trace.logits.row(pos)));
    EXPECT_EQ(argmax(dist.probs), argmax(trace.logits.row(pos)));
    EXPECT_NEAR(sum(dist.probs), 1.0, 1e-9);
  }
  EXPECT_THROW(next_token_distribution(trace, 5), InputError);
}

TEST(NextTokenDistribution, UniformLogitsGiveUniform) {
  auto p = init_model(small_config());
  p.unembedding = Tensor(p.unembedding.shape());
  const auto trace = forward(p, TokenSequence{1, 2});
  for (double x : next_token_distribution(trace, 1).probs) EXPECT_DOUBLE_EQ(x, 1.0 / 11.0);
}

TEST(Generate, FirstTokenIsArgmaxAndDeterministic) {
  const auto p = init_model(small_config());
  const TokenSequence prompt = {2, 7, 1};
  const auto out = generate(p, prompt, 1);
  const auto trace = forward(p, prompt);
  EXPECT_EQ(out.back(), static_cast<TokenId>(argmax(next_token_distribution(trace, 2).probs)));
  EXPECT_EQ(generate(p, prompt, 5), generate(p, prompt, 5));
  EXPECT_THROW(generate(p, prompt, 8), InputError);
  EXPECT_THROW(generate(p, prompt, 0), InputError);
}

TEST(Generate, TiesGoToLowestId) {
  auto p = init_model(small_config());
  p.unembedding = Tensor(p.unembedding.shape());
  EXPECT_EQ(generate(p, TokenSequence{5}, 3), (TokenSequence{5, 0, 0, 0}));
}

TEST(Generate, CopyModelRepeatsFirstToken) {
  const auto p = testing::make_copy_model(8);
  for (TokenId first = 0; first < 8; ++first) {
    const TokenSequence prompt = {first, 3, 6, 2};
    EXPECT_EQ(generate(p, prompt, 1).back(), first);
  }
}

TEST(LogitDecomposition, ExactWithoutFfnOrNorm) {
  std::mt19937_64 rng(15);
  testing::ConfigRanges ranges;
  ranges.random_switches = false;
  ranges.attention_only = true;
  ranges.use_norm = false;
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = testing::random_config(rng, ranges);
    const auto p = init_model(c);
    const auto trace = forward(p, testing::random_tokens(rng, c.max_seq_len, c.vocab_size));
    const auto target = static_cast<TokenId>(testing::uniform_index(rng, 0, c.vocab_size - 1));
    const auto dec = logit_decomposition(p, trace, target, c.max_seq_len - 1);
    double total = dec.embedding_term;
    for (double x : dec.block_terms) total += x;
    EXPECT_LE(std::abs(total - dec.logit), 1e-9);
    EXPECT_LE(std::abs(dec.gap), 1e-9);
  }
}

TEST(LogitDecomposition, ZeroedOutputProjectionsLeaveEmbeddingTerm) {
  ModelConfig c = small_config();
  c.attention_only = true;
  c.use_norm = false;
  auto p = init_model(c);
  for (auto& b : p.blocks) b.wo = Tensor(b.wo.shape());
  const auto trace = forward(p, TokenSequence{1, 2, 3});
  const auto dec = logit_decomposition(p, trace, 4, 2);
  for (double x : dec.block_terms) EXPECT_EQ(x, 0.0);
  EXPECT_NEAR(dec.logit, dec.embedding_term, 1e-12);
}

TEST(LogitDecomposition, GapIsTheResidualOfTheFullModel) {
  const auto p = init_model(small_config());
  const auto trace = forward(p, TokenSequence{1, 2, 3, 4});
  const auto dec = logit_decomposition(p, trace, 6, 3);
  // Recompute both sides independently.
  double blocks = 0.0;
  for (const auto& b : trace.blocks)
    for (std::size_t cidx = 0; cidx < 8; ++cidx) blocks += b.output.at(3, cidx) * p.unembedding.at(cidx, 6);
  double embed = 0.0;
  for (std::size_t cidx = 0; cidx < 8; ++cidx) embed += trace.residual[2].at(3, cidx) * p.unembedding.at(cidx, 6);
  EXPECT_DOUBLE_EQ(dec.gap, trace.logits.at(3, 6) - blocks - embed);
  EXPECT_GT(std::abs(dec.gap), 1e-6);
}

}  // namespace
}  // namespace gelm
