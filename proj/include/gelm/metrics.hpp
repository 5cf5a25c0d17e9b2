#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gelm/attribution.hpp"
#include "gelm/model.hpp"
#include "gelm/oracle.hpp"

namespace gelm {

// (1/sqrt 2) * || sqrt(p) - sqrt(q) ||_2, in [0, 1].
double hellinger(std::span<const double> p, std::span<const double> q);
inline double hellinger(const VocabDistribution& p, const VocabDistribution& q) {
  return hellinger(p.probs, q.probs);
}

enum class MaskMode : std::uint8_t {
  kKeep,    // e_i ~ Bernoulli(s_i)
  kRemove,  // e_i ~ Bernoulli(1 - s_i)
};

// Identifies one random draw. Every mask is a pure function of its key, so
// results do not depend on evaluation order or worker scheduling.
struct StreamKey {
  std::uint64_t seed = 0;
  std::uint64_t sample = 0;
  std::uint64_t pi_index = 0;
  std::uint64_t draw = 0;
  MaskMode mode = MaskMode::kKeep;

  std::uint64_t hash() const;
};

struct PerturbationMask {
  std::vector<double> bits;  // 0.0 or 1.0 per position, usable directly as an embed mask
  StreamKey key;
};

PerturbationMask sample_mask(std::span<const double> scores, MaskMode mode, const StreamKey& key);
inline PerturbationMask sample_mask(const ScoreVector& s, MaskMode mode, const StreamKey& key) {
  return sample_mask(s.scores, mode, key);
}

inline constexpr double kDegenerateBaseline = 1e-9;

// One explained prediction together with its cached reference quantities.
struct MetricSample {
  TokenSequence tokens;           // prefix whose next token is explained
  ScoreVector scores;             // one score per prefix position
  std::uint64_t id = 0;           // stream-key sample component
  VocabDistribution reference;    // P_{X,t}
  double baseline_delta = 0.0;    // Delta P_0 = H(P_X, P_zero)
  bool skipped = false;
  std::string skip_reason;
};

MetricSample make_metric_sample(ModelOracle& oracle, TokenSequence tokens, ScoreVector scores, std::uint64_t id);

struct SoftEstimate {
  double value = 0.0;      // mean over draws
  double std_error = 0.0;  // sample stdev / sqrt(draws)
  std::vector<double> per_draw;
  bool skipped = false;
};

// Draw d uses StreamKey{base.seed, base.sample, base.pi_index, d, mode}.
SoftEstimate soft_ns(ModelOracle& oracle, const MetricSample& sample, const StreamKey& base, std::size_t n_draws);
SoftEstimate soft_nc(ModelOracle& oracle, const MetricSample& sample, const StreamKey& base, std::size_t n_draws);

struct AlphaSolution {
  double alpha = 0.0;
  double residual = 0.0;  // |mean(s^alpha) - pi|
  std::size_t iterations = 0;
  bool clamped = false;   // pi at or below epsilon: alpha pinned to kAlphaMax
};

inline constexpr double kAlphaMax = 1e6;

// Finds alpha >= 0 with mean(s^alpha) = pi by bisection. Scores must lie in
// (0, 1) so that mean(s^alpha) is strictly decreasing.
AlphaSolution solve_alpha(std::span<const double> scores, double pi, double tol = 1e-10);

std::vector<double> power_transform(std::span<const double> scores, double alpha);

std::vector<double> default_pi_grid();  // 0.05, 0.10, ..., 0.95
// Accepts "start:step:stop" or a comma-separated list.
std::vector<double> parse_pi_grid(const std::string& spec);
void validate_pi_grid(std::span<const double> grid);

struct CurveSettings {
  std::vector<double> pi_grid = default_pi_grid();
  std::size_t n_draws = 3;
  std::uint64_t seed = 0;
};

struct FaithfulnessCurve {
  std::vector<double> pi_grid;
  std::vector<double> alpha;  // single-sample curves only
  std::vector<std::vector<double>> ns_values;  // per pi: every draw of every sample
  std::vector<std::vector<double>> nc_values;
  std::vector<double> ns_mean, ns_std, nc_mean, nc_std;
  double auc_ns = 0.0;
  double auc_nc = 0.0;
  std::size_t samples = 0;
  std::size_t skipped = 0;
  std::vector<std::string> skip_reasons;
};

// Trapezoid area under y(x), divided by the x span (a single point returns y).
double normalized_auc(std::span<const double> x, std::span<const double> y);

FaithfulnessCurve pi_curve(ModelOracle& oracle, const MetricSample& sample, const CurveSettings& settings);

// Pools draws of several curves over the same grid. AUCs are taken on the
// pooled mean curve.
FaithfulnessCurve aggregate_curves(std::span<const FaithfulnessCurve> curves);

// Evaluated generation steps (1-based) for a continuation of `length`
// tokens: 1, 1+stride, ... <= length. When length < stride only the last
// step is evaluated.
std::vector<std::size_t> sequence_steps(std::size_t length, std::size_t stride);
std::uint64_t step_sample_id(std::uint64_t sample_id, std::size_t step);

struct SequenceEvaluation {
  std::vector<std::size_t> steps;
  std::vector<FaithfulnessCurve> per_step;
  FaithfulnessCurve mean;  // pooled over steps
  double auc_ns = 0.0;     // mean of per-step AUCs
  double auc_nc = 0.0;
  bool skipped = false;
};

// `tokens` holds the prompt followed by the generated continuation; step t
// explains continuation token t from the prefix before it.
SequenceEvaluation sequence_level_eval(ModelOracle& oracle, std::span<const TokenId> tokens, std::size_t prompt_length,
                                       const std::map<std::size_t, ScoreVector>& step_scores,
                                       const CurveSettings& settings, std::size_t stride, std::uint64_t sample_id);

struct ExactExpectation {
  double expected_delta = 0.0;   // E[Delta P] over all 2^m masks
  double expected_metric = 0.0;  // E[Soft-NS] (keep) or E[Soft-NC] (remove)
};

inline constexpr std::size_t kMaxBruteForceLength = 12;

ExactExpectation brute_force_expected_delta(ModelOracle& oracle, const MetricSample& sample, MaskMode mode);

struct DeletionInsertionSettings {
  std::size_t steps = 20;
  double step_fraction = 0.05;
};

struct DeletionInsertionResult {
  std::vector<double> fraction;   // steps + 1 points
  std::vector<std::size_t> masked_count;
  std::vector<double> deletion;   // flip probability after masking the top positions
  std::vector<double> insertion;  // flip probability after unmasking the top positions
  double deletion_auc = 0.0;      // higher is better
  double insertion_auc = 0.0;     // lower is better
};

// Positions in descending score order, ties broken by lower index.
std::vector<std::size_t> rank_positions(std::span<const double> scores);

DeletionInsertionResult deletion_insertion_curve(ModelOracle& oracle, std::span<const TokenId> tokens,
                                                 const ScoreVector& scores, TokenId label,
                                                 const DeletionInsertionSettings& settings = {});

}  // namespace gelm
