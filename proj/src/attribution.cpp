#include "gelm/attribution.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "gelm/errors.hpp"
#include "gelm/metrics.hpp"

namespace gelm {
namespace {

struct MethodEntry {
  Method method;
  std::string_view name;
};

constexpr std::array kMethods = {
    MethodEntry{Method::kGradEllm, "grad_ellm"},
    MethodEntry{Method::kAttention, "attention"},
    MethodEntry{Method::kSaliency, "saliency"},
    MethodEntry{Method::kInputXGradient, "input_x_gradient"},
    MethodEntry{Method::kIntegratedGradients, "integrated_gradients"},
    MethodEntry{Method::kLayerGradXActivation, "layer_grad_x_activation"},
    MethodEntry{Method::kValueZeroingLite, "value_zeroing_lite"},
    MethodEntry{Method::kRandom, "random"},
};

void check_position(const ForwardTrace& trace, std::size_t position) {
  if (position >= trace.length()) {
    throw InputError("query position " + std::to_string(position) + " outside trace of length " +
                     std::to_string(trace.length()));
  }
}

void check_layer(const ForwardTrace& trace, std::size_t layer) {
  if (layer >= trace.n_layers()) {
    throw ConfigError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(trace.n_layers()) + ")");
  }
}

// Gradients of one logit entry with respect to every node of the trace's tape.
Gradients logit_gradients(const ForwardTrace& trace, TokenId target, std::size_t position) {
  check_position(trace, position);
  if (target < 0 || static_cast<std::size_t>(target) >= trace.logits.cols()) {
    throw InputError("target token " + std::to_string(target) + " outside vocabulary");
  }
  Tensor seed = Tensor::zeros_like(trace.logits);
  seed.at(position, static_cast<std::size_t>(target)) = 1.0;
  return trace.tape->backward(trace.logits_var, seed);
}

TokenSequence prefix_of(const ForwardTrace& trace, std::size_t position) {
  return TokenSequence(trace.tokens.begin(), trace.tokens.begin() + static_cast<std::ptrdiff_t>(position + 1));
}

std::vector<double> prefix_mask(const ForwardTrace& trace, std::size_t position, double factor) {
  std::vector<double> mask(trace.embed_mask.begin(),
                           trace.embed_mask.begin() + static_cast<std::ptrdiff_t>(position + 1));
  for (double& x : mask) x *= factor;
  return mask;
}

RawHeat attention_heat(const ForwardTrace& trace, std::size_t t) {
  const BlockTrace& last = trace.blocks.at(0);
  RawHeat heat;
  heat.total.assign(t + 1, 0.0);
  for (const Tensor& att : last.attention)
    for (std::size_t i = 0; i <= t; ++i) heat.total[i] += att.at(t, i);
  for (double& x : heat.total) x /= static_cast<double>(last.attention.size());
  return heat;
}

RawHeat embedding_gradient_heat(const ForwardTrace& trace, const AttributionRequest& req) {
  const std::size_t t = req.query_position;
  const Gradients grads = logit_gradients(trace, req.target, t);
  const Tensor& g = grads[trace.input_embedding];
  const Tensor& x = trace.tape->value(trace.input_embedding);
  RawHeat heat;
  heat.total.resize(t + 1);
  for (std::size_t i = 0; i <= t; ++i) {
    heat.total[i] = req.method == Method::kSaliency ? l2_norm(g.row(i)) : std::abs(dot(x.row(i), g.row(i)));
  }
  return heat;
}

RawHeat integrated_gradients_heat(const ModelParameters& params, const ForwardTrace& trace,
                                  const AttributionRequest& req) {
  if (req.ig_steps == 0) throw ConfigError("integrated_gradients needs at least one step");
  const std::size_t t = req.query_position;
  check_position(trace, t);
  const TokenSequence tokens = prefix_of(trace, t);
  const Tensor& x = trace.tape->value(trace.input_embedding);

  Tensor mean_grad({t + 1, x.cols()});
  for (std::size_t s = 0; s < req.ig_steps; ++s) {
    // Left Riemann sum along alpha * x, alpha = s / steps.
    const double alpha = static_cast<double>(s) / static_cast<double>(req.ig_steps);
    const ForwardTrace scaled_trace = forward(params, tokens, prefix_mask(trace, t, alpha));
    mean_grad += logit_gradients(scaled_trace, req.target, t)[scaled_trace.input_embedding];
  }
  mean_grad *= 1.0 / static_cast<double>(req.ig_steps);

  RawHeat heat;
  heat.total.resize(t + 1);
  for (std::size_t i = 0; i <= t; ++i) heat.total[i] = std::abs(dot(x.row(i), mean_grad.row(i)));
  return heat;
}

RawHeat layer_grad_x_activation_heat(const ForwardTrace& trace, const AttributionRequest& req) {
  const std::size_t t = req.query_position;
  const std::size_t layer = req.activation_layer.value_or(trace.n_layers());
  if (layer > trace.n_layers()) throw ConfigError("activation layer outside [0, N]");
  const Gradients grads = logit_gradients(trace, req.target, t);
  const Tensor& g = grads[trace.residual_vars[layer]];
  const Tensor& z = trace.residual[layer];
  RawHeat heat;
  heat.total.assign(t + 1, 0.0);
  for (std::size_t i = 0; i <= t; ++i)
    for (std::size_t c = 0; c < z.cols(); ++c) heat.total[i] += std::abs(z.at(i, c) * g.at(i, c));
  return heat;
}

RawHeat value_zeroing_heat(const ModelParameters& params, const ForwardTrace& trace, const AttributionRequest& req) {
  const std::size_t t = req.query_position;
  check_position(trace, t);
  const VocabDistribution original = next_token_distribution(trace, t);
  const TokenSequence tokens = prefix_of(trace, t);
  RawHeat heat;
  heat.total.resize(t + 1);
  for (std::size_t i = 0; i <= t; ++i) {
    ForwardOptions options;
    options.embed_mask = prefix_mask(trace, t, 1.0);
    options.zero_value_positions = {i};
    const ForwardTrace zeroed = forward(params, tokens, options);
    heat.total[i] = hellinger(original, next_token_distribution(zeroed, t));
  }
  return heat;
}

}  // namespace

RawHeat random_heat(std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RawHeat heat;
  heat.total.resize(length);
  for (double& x : heat.total) x = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return heat;
}

std::string_view method_name(Method method) {
  for (const auto& e : kMethods)
    if (e.method == method) return e.name;
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (const auto& e : kMethods)
    if (e.name == name) return e.method;
  throw ConfigError("unknown attribution method '" + std::string(name) + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> out;
    for (const auto& e : kMethods) out.push_back(e.method);
    return out;
  }();
  return methods;
}

bool is_model_free(Method method) { return method == Method::kRandom; }

double ScoreVector::mean() const {
  if (scores.empty()) return 0.0;
  return sum(scores) / static_cast<double>(scores.size());
}

std::vector<double> channel_weights(const ForwardTrace& trace, TokenId target, std::size_t query_position,
                                    std::size_t layer) {
  check_layer(trace, layer);
  const Gradients grads = logit_gradients(trace, target, query_position);
  auto row = grads[trace.attention_output_vars[layer]].row(query_position);
  return {row.begin(), row.end()};
}

std::vector<double> loosened_attention(const ForwardTrace& trace, std::size_t layer, std::size_t head,
                                       std::size_t query_position, bool loosen) {
  check_layer(trace, layer);
  check_position(trace, query_position);
  const BlockTrace& block = trace.blocks[layer];
  if (head >= block.similarity.size()) throw ConfigError("head index out of range");
  const Tensor& source = loosen ? block.similarity[head] : block.attention[head];
  auto row = source.row(query_position).first(query_position + 1);
  if (!loosen) return {row.begin(), row.end()};
  return zero_one_normalize(row);
}

RawHeat grad_ellm(const ForwardTrace& trace, const AttributionRequest& request) {
  if (request.method != Method::kGradEllm) throw ConfigError("grad_ellm called with a different method");
  const std::size_t t = request.query_position;
  std::vector<std::size_t> layers;
  if (request.layers) {
    layers = *request.layers;
    if (layers.empty()) throw ConfigError("grad_ellm needs at least one layer");
  } else {
    for (std::size_t k = 0; k < trace.n_layers(); ++k) layers.push_back(k);
  }
  for (std::size_t k : layers) check_layer(trace, k);

  const Gradients grads = logit_gradients(trace, request.target, t);

  RawHeat heat;
  heat.total.assign(t + 1, 0.0);
  std::vector<double> unrectified(t + 1, 0.0);
  for (std::size_t k : layers) {
    auto w = grads[trace.attention_output_vars[k]].row(t);
    const BlockTrace& block = trace.blocks[k];
    std::vector<double> layer_heat(t + 1, 0.0);
    for (std::size_t h = 0; h < block.projected_values.size(); ++h) {
      const auto token_weights = loosened_attention(trace, k, h, t, request.loosen);
      for (std::size_t i = 0; i <= t; ++i) {
        layer_heat[i] += token_weights[i] * dot(w, block.projected_values[h].row(i));
      }
    }
    for (std::size_t i = 0; i <= t; ++i) {
      unrectified[i] += layer_heat[i];
      layer_heat[i] = std::max(0.0, layer_heat[i]);
      heat.total[i] += layer_heat[i];
    }
    heat.layers.push_back(k);
    heat.per_layer.push_back(std::move(layer_heat));
  }
  if (!request.relu_per_layer) {
    for (std::size_t i = 0; i <= t; ++i) heat.total[i] = std::max(0.0, unrectified[i]);
  }
  return heat;
}

RawHeat attribute(const ModelParameters& params, const ForwardTrace& trace, const AttributionRequest& request) {
  check_position(trace, request.query_position);
  switch (request.method) {
    case Method::kGradEllm:
      return grad_ellm(trace, request);
    case Method::kAttention:
      return attention_heat(trace, request.query_position);
    case Method::kSaliency:
    case Method::kInputXGradient:
      return embedding_gradient_heat(trace, request);
    case Method::kIntegratedGradients:
      return integrated_gradients_heat(params, trace, request);
    case Method::kLayerGradXActivation:
      return layer_grad_x_activation_heat(trace, request);
    case Method::kValueZeroingLite:
      return value_zeroing_heat(params, trace, request);
    case Method::kRandom:
      return random_heat(request.query_position + 1, request.random_seed);
  }
  throw ConfigError("unknown attribution method");
}

ScoreVector normalize_scores(const std::vector<double>& raw) {
  ScoreVector out;
  out.special.assign(raw.size(), false);
  if (raw.empty()) return out;
  for (double x : raw) {
    if (!std::isfinite(x)) throw DomainError("normalize_scores: non-finite raw score");
  }
  const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
  const double lo = *lo_it, hi = *hi_it;
  constexpr double eps = ScoreVector::kEpsilon;
  out.scores.assign(raw.size(), 0.5);
  if (hi > lo) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
      // Clamp: the affine map can round one ulp past 1 - eps.
      out.scores[i] = std::clamp(eps + (1.0 - 2.0 * eps) * (raw[i] - lo) / (hi - lo), eps, 1.0 - eps);
    }
  }
  return out;
}

}  // namespace gelm
