#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gelm/model.hpp"

namespace gelm {

enum class Method {
  kGradEllm,
  kAttention,
  kSaliency,
  kInputXGradient,
  kIntegratedGradients,
  kLayerGradXActivation,
  kValueZeroingLite,
  kRandom,
};

std::string_view method_name(Method method);
// Throws ConfigError for an unknown name.
Method parse_method(std::string_view name);
const std::vector<Method>& all_methods();
// True for methods that only need the token sequence, not model internals.
bool is_model_free(Method method);

struct AttributionRequest {
  TokenId target = 0;              // token whose logit is explained
  std::size_t query_position = 0;  // position whose next-token logit is explained
  std::optional<std::vector<std::size_t>> layers;  // nullopt: every block
  bool loosen = true;
  Method method = Method::kGradEllm;

  bool relu_per_layer = true;  // false: sum layers first, then one ReLU
  std::size_t ig_steps = 20;
  std::uint64_t random_seed = 0;
  // Residual state used by layer_grad_x_activation; nullopt means residual[N],
  // the embedding layer output.
  std::optional<std::size_t> activation_layer;
};

// Unnormalized importance per prefix position 0..query_position.
struct RawHeat {
  std::vector<double> total;
  std::vector<std::size_t> layers;             // grad_ellm only
  std::vector<std::vector<double>> per_layer;  // grad_ellm only, aligned with `layers`
};

// Scores in [epsilon, 1 - epsilon] consumed by the faithfulness metrics.
struct ScoreVector {
  static constexpr double kEpsilon = 1e-6;

  std::vector<double> scores;
  std::vector<bool> special;  // prompt-template or special-token positions
  std::size_t step = 0;       // generation step the heatmap explains

  std::size_t size() const { return scores.size(); }
  double mean() const;
};

// dl_t[target] / d o^(layer)_t.
std::vector<double> channel_weights(const ForwardTrace& trace, TokenId target, std::size_t query_position,
                                    std::size_t layer);

// Min-max normalized raw similarities q_t . k_i over causal positions, or the
// softmax attention row when `loosen` is false.
std::vector<double> loosened_attention(const ForwardTrace& trace, std::size_t layer, std::size_t head,
                                       std::size_t query_position, bool loosen = true);

RawHeat grad_ellm(const ForwardTrace& trace, const AttributionRequest& request);

// Uniform [0, 1) scores from mt19937_64(seed); needs no model.
RawHeat random_heat(std::size_t length, std::uint64_t seed);

// Dispatches to any method, including grad_ellm.
RawHeat attribute(const ModelParameters& params, const ForwardTrace& trace, const AttributionRequest& request);

ScoreVector normalize_scores(const std::vector<double>& raw);
inline ScoreVector normalize_scores(const RawHeat& raw) { return normalize_scores(raw.total); }

}  // namespace gelm
