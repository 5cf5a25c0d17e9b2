#include "gelm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "gelm/errors.hpp"

namespace gelm {
namespace {

constexpr std::size_t kMaxBisectionIterations = 200;

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t mix(std::uint64_t h, std::uint64_t value) {
  std::uint64_t state = h ^ value;
  return splitmix64(state);
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : sum(v) / static_cast<double>(v.size());
}

double sample_stdev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

double mean_power(std::span<const double> s, double alpha) {
  double acc = 0.0;
  for (double x : s) acc += std::pow(x, alpha);
  return acc / static_cast<double>(s.size());
}

enum class SoftKind { kSufficiency, kComprehensiveness };

SoftEstimate soft_metric(ModelOracle& oracle, const MetricSample& sample, const StreamKey& base,
                         std::size_t n_draws, SoftKind kind) {
  SoftEstimate est;
  if (sample.skipped) {
    est.skipped = true;
    return est;
  }
  if (n_draws == 0) throw ConfigError("n_draws must be at least 1");
  const MaskMode mode = kind == SoftKind::kSufficiency ? MaskMode::kKeep : MaskMode::kRemove;
  const double base_delta = sample.baseline_delta;
  est.per_draw.reserve(n_draws);
  for (std::size_t d = 0; d < n_draws; ++d) {
    StreamKey key = base;
    key.draw = d;
    key.mode = mode;
    const PerturbationMask mask = sample_mask(sample.scores.scores, mode, key);
    const double delta = hellinger(sample.reference, oracle.forward(sample.tokens, mask.bits));
    est.per_draw.push_back(kind == SoftKind::kSufficiency ? std::max(0.0, base_delta - delta) / base_delta
                                                          : delta / base_delta);
  }
  est.value = mean_of(est.per_draw);
  est.std_error = sample_stdev(est.per_draw) / std::sqrt(static_cast<double>(n_draws));
  return est;
}

void finish_curve(FaithfulnessCurve& c) {
  const std::size_t n = c.pi_grid.size();
  c.ns_mean.assign(n, 0.0);
  c.ns_std.assign(n, 0.0);
  c.nc_mean.assign(n, 0.0);
  c.nc_std.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    c.ns_mean[j] = mean_of(c.ns_values[j]);
    c.ns_std[j] = sample_stdev(c.ns_values[j]);
    c.nc_mean[j] = mean_of(c.nc_values[j]);
    c.nc_std[j] = sample_stdev(c.nc_values[j]);
  }
  c.auc_ns = normalized_auc(c.pi_grid, c.ns_mean);
  c.auc_nc = normalized_auc(c.pi_grid, c.nc_mean);
}

}  // namespace

double hellinger(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw DomainError("hellinger: distributions of length " + std::to_string(p.size()) + " and " +
                      std::to_string(q.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double diff = std::sqrt(p[i]) - std::sqrt(q[i]);
    acc += diff * diff;
  }
  return std::min(1.0, std::sqrt(acc / 2.0));
}

std::uint64_t StreamKey::hash() const {
  std::uint64_t h = mix(0x6a09e667f3bcc908ULL, seed);
  h = mix(h, sample);
  h = mix(h, pi_index);
  h = mix(h, draw);
  return mix(h, static_cast<std::uint64_t>(mode) + 1);
}

PerturbationMask sample_mask(std::span<const double> scores, MaskMode mode, const StreamKey& key) {
  PerturbationMask mask;
  mask.key = key;
  mask.bits.resize(scores.size());
  std::uint64_t state = key.hash();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double keep = mode == MaskMode::kKeep ? scores[i] : 1.0 - scores[i];
    const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
    mask.bits[i] = u < keep ? 1.0 : 0.0;
  }
  return mask;
}

MetricSample make_metric_sample(ModelOracle& oracle, TokenSequence tokens, ScoreVector scores, std::uint64_t id) {
  if (scores.size() != tokens.size()) {
    throw InputError("score vector has " + std::to_string(scores.size()) + " entries for " +
                     std::to_string(tokens.size()) + " tokens");
  }
  MetricSample sample;
  sample.reference = oracle.forward(tokens);
  const std::vector<double> zeros(tokens.size(), 0.0);
  sample.baseline_delta = hellinger(sample.reference, oracle.forward(tokens, zeros));
  if (sample.baseline_delta < kDegenerateBaseline) {
    sample.skipped = true;
    sample.skip_reason = "degenerate zero-baseline disturbance";
  }
  sample.tokens = std::move(tokens);
  sample.scores = std::move(scores);
  sample.id = id;
  return sample;
}

SoftEstimate soft_ns(ModelOracle& oracle, const MetricSample& sample, const StreamKey& base, std::size_t n_draws) {
  return soft_metric(oracle, sample, base, n_draws, SoftKind::kSufficiency);
}

SoftEstimate soft_nc(ModelOracle& oracle, const MetricSample& sample, const StreamKey& base, std::size_t n_draws) {
  return soft_metric(oracle, sample, base, n_draws, SoftKind::kComprehensiveness);
}

AlphaSolution solve_alpha(std::span<const double> scores, double pi, double tol) {
  if (scores.empty()) throw DomainError("solve_alpha: empty score vector");
  for (double s : scores) {
    if (!(s > 0.0 && s < 1.0)) throw DomainError("solve_alpha: scores must lie strictly inside (0, 1)");
  }
  if (!(pi >= 0.0 && pi <= 1.0)) throw DomainError("solve_alpha: target outside [0, 1]");

  AlphaSolution out;
  if (pi >= 1.0) return out;  // s^0 == 1
  if (pi <= ScoreVector::kEpsilon) {
    out.alpha = kAlphaMax;
    out.clamped = true;
    out.residual = std::abs(mean_power(scores, kAlphaMax) - pi);
    return out;
  }

  double lo = 0.0, hi = 1.0;
  while (mean_power(scores, hi) >= pi) {
    lo = hi;
    hi *= 2.0;
    if (!std::isfinite(hi)) throw NumericalError("solve_alpha: could not bracket the root");
  }
  for (std::size_t it = 1; it <= kMaxBisectionIterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double value = mean_power(scores, mid);
    out.alpha = mid;
    out.residual = std::abs(value - pi);
    out.iterations = it;
    if (out.residual <= tol) return out;
    (value > pi ? lo : hi) = mid;
  }
  throw NumericalError("solve_alpha: tolerance not reached in 200 bisection steps");
}

std::vector<double> power_transform(std::span<const double> scores, double alpha) {
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = std::pow(scores[i], alpha);
  return out;
}

std::vector<double> default_pi_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 19; ++i) grid.push_back(i / 20.0);
  return grid;
}

void validate_pi_grid(std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("pi grid is empty");
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (!(grid[j] > 0.0 && grid[j] < 1.0)) throw ConfigError("pi grid values must lie in (0, 1)");
    if (j > 0 && !(grid[j] > grid[j - 1])) throw ConfigError("pi grid must be strictly increasing");
  }
}

std::vector<double> parse_pi_grid(const std::string& spec) {
  std::vector<double> grid;
  auto parse = [&](const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(text, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad pi grid value '" + text + "'");
    }
    if (used != text.size()) throw ConfigError("bad pi grid value '" + text + "'");
    return v;
  };
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
    if (parts.size() != 3) throw ConfigError("pi grid range must be start:step:stop");
    const double start = parse(parts[0]), step = parse(parts[1]), stop = parse(parts[2]);
    if (!(step > 0.0)) throw ConfigError("pi grid step must be positive");
    const auto count = static_cast<long>(std::floor((stop - start) / step + 1e-9));
    // Rounded so that "0.05:0.05:0.95" yields the same doubles as the literal list.
    for (long i = 0; i <= count; ++i) grid.push_back(std::round((start + step * static_cast<double>(i)) * 1e12) / 1e12);
  } else {
    std::stringstream ss(spec);
    for (std::string part; std::getline(ss, part, ',');) grid.push_back(parse(part));
  }
  validate_pi_grid(grid);
  return grid;
}

double normalized_auc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw DomainError("normalized_auc: bad curve");
  if (x.size() == 1) return y[0];
  double area = 0.0;
  for (std::size_t j = 1; j < x.size(); ++j) area += 0.5 * (y[j] + y[j - 1]) * (x[j] - x[j - 1]);
  return area / (x.back() - x.front());
}

FaithfulnessCurve pi_curve(ModelOracle& oracle, const MetricSample& sample, const CurveSettings& settings) {
  validate_pi_grid(settings.pi_grid);
  FaithfulnessCurve curve;
  curve.pi_grid = settings.pi_grid;
  const std::size_t n = settings.pi_grid.size();
  curve.ns_values.resize(n);
  curve.nc_values.resize(n);
  if (sample.skipped) {
    curve.skipped = 1;
    curve.skip_reasons.push_back(sample.skip_reason);
    finish_curve(curve);
    return curve;
  }
  curve.samples = 1;
  for (std::size_t j = 0; j < n; ++j) {
    const AlphaSolution alpha = solve_alpha(sample.scores.scores, settings.pi_grid[j]);
    curve.alpha.push_back(alpha.alpha);
    MetricSample transformed = sample;
    transformed.scores.scores = power_transform(sample.scores.scores, alpha.alpha);
    const StreamKey key{settings.seed, sample.id, j, 0, MaskMode::kKeep};
    curve.ns_values[j] = soft_ns(oracle, transformed, key, settings.n_draws).per_draw;
    curve.nc_values[j] = soft_nc(oracle, transformed, key, settings.n_draws).per_draw;
  }
  finish_curve(curve);
  return curve;
}

FaithfulnessCurve aggregate_curves(std::span<const FaithfulnessCurve> curves) {
  if (curves.empty()) throw DomainError("aggregate_curves: nothing to aggregate");
  FaithfulnessCurve out;
  out.pi_grid = curves.front().pi_grid;
  out.ns_values.resize(out.pi_grid.size());
  out.nc_values.resize(out.pi_grid.size());
  for (const FaithfulnessCurve& c : curves) {
    if (c.pi_grid != out.pi_grid) throw DomainError("aggregate_curves: grids differ");
    out.samples += c.samples;
    out.skipped += c.skipped;
    out.skip_reasons.insert(out.skip_reasons.end(), c.skip_reasons.begin(), c.skip_reasons.end());
    for (std::size_t j = 0; j < out.pi_grid.size(); ++j) {
      out.ns_values[j].insert(out.ns_values[j].end(), c.ns_values[j].begin(), c.ns_values[j].end());
      out.nc_values[j].insert(out.nc_values[j].end(), c.nc_values[j].begin(), c.nc_values[j].end());
    }
  }
  finish_curve(out);
  return out;
}

std::vector<std::size_t> sequence_steps(std::size_t length, std::size_t stride) {
  if (length == 0) throw InputError("empty continuation");
  if (stride == 0) throw ConfigError("stride must be at least 1");
  if (length < stride) return {length};
  std::vector<std::size_t> steps;
  for (std::size_t t = 1; t <= length; t += stride) steps.push_back(t);
  return steps;
}

std::uint64_t step_sample_id(std::uint64_t sample_id, std::size_t step) {
  return mix(mix(0xbb67ae8584caa73bULL, sample_id), step);
}

SequenceEvaluation sequence_level_eval(ModelOracle& oracle, std::span<const TokenId> tokens, std::size_t prompt_length,
                                       const std::map<std::size_t, ScoreVector>& step_scores,
                                       const CurveSettings& settings, std::size_t stride, std::uint64_t sample_id) {
  if (prompt_length == 0 || prompt_length > tokens.size()) throw InputError("bad prompt length");
  const std::size_t continuation = tokens.size() - prompt_length;
  SequenceEvaluation eval;
  eval.steps = sequence_steps(continuation, stride);
  std::vector<FaithfulnessCurve> usable;
  for (std::size_t t : eval.steps) {
    const auto it = step_scores.find(t);
    if (it == step_scores.end()) throw InputError("missing score vector for step " + std::to_string(t));
    TokenSequence prefix(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(prompt_length + t - 1));
    const MetricSample sample = make_metric_sample(oracle, std::move(prefix), it->second, step_sample_id(sample_id, t));
    eval.per_step.push_back(pi_curve(oracle, sample, settings));
    if (eval.per_step.back().samples > 0) usable.push_back(eval.per_step.back());
  }
  if (usable.empty()) {
    eval.skipped = true;
    eval.mean = aggregate_curves(eval.per_step);
    return eval;
  }
  eval.mean = aggregate_curves(usable);
  for (const auto& c : usable) {
    eval.auc_ns += c.auc_ns;
    eval.auc_nc += c.auc_nc;
  }
  eval.auc_ns /= static_cast<double>(usable.size());
  eval.auc_nc /= static_cast<double>(usable.size());
  // Surface skipped steps in the pooled curve as well.
  for (const auto& c : eval.per_step) {
    eval.mean.skipped += c.skipped;
    eval.mean.skip_reasons.insert(eval.mean.skip_reasons.end(), c.skip_reasons.begin(), c.skip_reasons.end());
  }
  return eval;
}

ExactExpectation brute_force_expected_delta(ModelOracle& oracle, const MetricSample& sample, MaskMode mode) {
  const std::size_t m = sample.tokens.size();
  if (m > kMaxBruteForceLength) {
    throw InputError("brute force enumeration refused for length " + std::to_string(m) + " > " +
                     std::to_string(kMaxBruteForceLength));
  }
  if (sample.skipped) throw InputError("brute force on a skipped sample: " + sample.skip_reason);
  std::vector<double> keep(m);
  for (std::size_t i = 0; i < m; ++i) {
    keep[i] = mode == MaskMode::kKeep ? sample.scores.scores[i] : 1.0 - sample.scores.scores[i];
  }
  ExactExpectation out;
  std::vector<double> mask(m);
  for (std::uint64_t bits = 0; bits < (std::uint64_t{1} << m); ++bits) {
    double prob = 1.0;
    for (std::size_t i = 0; i < m; ++i) {
      const bool on = (bits >> i) & 1U;
      mask[i] = on ? 1.0 : 0.0;
      prob *= on ? keep[i] : 1.0 - keep[i];
    }
    const double delta = hellinger(sample.reference, oracle.forward(sample.tokens, mask));
    out.expected_delta += prob * delta;
    out.expected_metric += prob * (mode == MaskMode::kKeep
                                       ? std::max(0.0, sample.baseline_delta - delta) / sample.baseline_delta
                                       : delta / sample.baseline_delta);
  }
  return out;
}

std::vector<std::size_t> rank_positions(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

DeletionInsertionResult deletion_insertion_curve(ModelOracle& oracle, std::span<const TokenId> tokens,
                                                 const ScoreVector& scores, TokenId label,
                                                 const DeletionInsertionSettings& settings) {
  const std::size_t m = tokens.size();
  if (scores.size() != m) throw InputError("score vector length does not match tokens");
  if (label < 0 || static_cast<std::size_t>(label) >= oracle.capabilities().vocab_size) {
    throw InputError("label token " + std::to_string(label) + " outside vocabulary");
  }
  if (settings.steps == 0 || !(settings.step_fraction > 0.0)) throw ConfigError("bad deletion/insertion settings");
  const auto order = rank_positions(scores.scores);
  const auto label_index = static_cast<std::size_t>(label);

  DeletionInsertionResult out;
  for (std::size_t k = 0; k <= settings.steps; ++k) {
    const double fraction = static_cast<double>(k) * settings.step_fraction;
    auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(m)));
    count = std::min(count, m);
    std::vector<double> deletion_mask(m, 1.0), insertion_mask(m, 0.0);
    for (std::size_t r = 0; r < count; ++r) {
      deletion_mask[order[r]] = 0.0;
      insertion_mask[order[r]] = 1.0;
    }
    out.fraction.push_back(fraction);
    out.masked_count.push_back(count);
    out.deletion.push_back(1.0 - oracle.forward(tokens, deletion_mask)[label_index]);
    out.insertion.push_back(1.0 - oracle.forward(tokens, insertion_mask)[label_index]);
  }
  auto area = [&](const std::vector<double>& y) {
    double acc = 0.0;
    for (std::size_t k = 1; k < y.size(); ++k) acc += 0.5 * (y[k] + y[k - 1]) * (out.fraction[k] - out.fraction[k - 1]);
    return acc;
  };
  out.deletion_auc = area(out.deletion);
  out.insertion_auc = area(out.insertion);
  return out;
}

}  // namespace gelm
