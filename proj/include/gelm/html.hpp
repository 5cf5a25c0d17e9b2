#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gelm/attribution.hpp"

namespace gelm {

struct HeatmapMetadata {
  std::string title;
  std::string method;
  std::optional<double> pi;
  std::optional<double> soft_ns;
  std::optional<double> soft_nc;
};

std::string escape_html(std::string_view text);

// Self-contained HTML page: one span per token with a green background whose
// alpha is the token's score.
std::string render_heatmap_html(const std::vector<std::string>& tokens, const ScoreVector& scores,
                                const HeatmapMetadata& metadata);

}  // namespace gelm
