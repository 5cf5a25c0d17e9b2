#include "gelm/html.hpp"

#include <cmath>
#include <cstdio>

#include "gelm/errors.hpp"

namespace gelm {
namespace {

std::string fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

}  // namespace

std::string escape_html(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string render_heatmap_html(const std::vector<std::string>& tokens, const ScoreVector& scores,
                                const HeatmapMetadata& metadata) {
  if (tokens.size() != scores.size()) {
    throw InputError("heatmap has " + std::to_string(tokens.size()) + " tokens and " +
                     std::to_string(scores.size()) + " scores");
  }
  std::string html =
      "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>" + escape_html(metadata.title) +
      "</title>\n<style>\nbody{font-family:sans-serif;margin:2em;}\n"
      ".tok{padding:2px 3px;margin:1px;border-radius:3px;white-space:pre-wrap;}\n"
      ".special{outline:1px dashed #888;}\n</style>\n</head>\n<body>\n<header>\n";
  html += "<h1>" + escape_html(metadata.title) + "</h1>\n<dl>\n";
  html += "<dt>method</dt><dd>" + escape_html(metadata.method) + "</dd>\n";
  auto optional_row = [&](const char* name, const std::optional<double>& value) {
    html += std::string("<dt>") + name + "</dt><dd>" + (value ? fixed(*value, 4) : std::string("n/a")) + "</dd>\n";
  };
  optional_row("&pi;", metadata.pi);
  optional_row("Soft-NS", metadata.soft_ns);
  optional_row("Soft-NC", metadata.soft_nc);
  html += "</dl>\n</header>\n<main>\n<p>\n";
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double s = scores.scores[i];
    if (!std::isfinite(s)) throw InputError("non-finite score at position " + std::to_string(i));
    const bool special = i < scores.special.size() && scores.special[i];
    html += "<span class=\"tok" + std::string(special ? " special" : "") +
            "\" style=\"background-color:rgba(0,160,0," + fixed(s, 6) + ")\" title=\"" + fixed(s, 6) + "\">" +
            escape_html(tokens[i]) + "</span>\n";
  }
  html += "</p>\n</main>\n</body>\n</html>\n";
  return html;
}

}  // namespace gelm
