#pragma once

#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "noiser/core.hpp"

namespace noiser {

inline std::string html_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      case '\n': out += "&#8629;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Background opacity per token: min-max normalized scores, so the most
/// important token is fully saturated.
inline std::vector<double> heatmap_alpha(std::span<const double> scores) {
  return minmax_normalize(scores);
}

struct HeatmapRow {
  std::string title;
  std::vector<std::string> tokens;
  std::vector<double> scores;
  std::string target;
};

inline std::string render_heatmap_row(const HeatmapRow& row) {
  require(row.tokens.size() == row.scores.size(), "token/score length mismatch");
  const auto alpha = heatmap_alpha(row.scores);
  std::ostringstream html;
  html << "<div class=\"row\"><div class=\"title\">" << html_escape(row.title) << "</div><div class=\"tokens\">";
  for (std::size_t i = 0; i < row.tokens.size(); ++i) {
    char style[64];
    std::snprintf(style, sizeof style, "background:rgba(0,128,128,%.4f)", alpha[i]);
    html << "<span class=\"tok\" style=\"" << style << "\" title=\"" << row.scores[i] << "\">"
         << html_escape(row.tokens[i]) << "</span>";
  }
  html << "<span class=\"target\">&rarr; " << html_escape(row.target) << "</span></div></div>\n";
  return html.str();
}

inline std::string render_heatmap_page(const std::vector<HeatmapRow>& rows) {
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Token attributions</title>\n"
          "<style>body{font-family:sans-serif;margin:2em}"
          ".row{margin-bottom:1.2em}.title{font-size:0.85em;color:#555}"
          ".tokens{font-family:monospace;white-space:pre;font-size:1.1em}"
          ".tok{padding:1px 0}.target{margin-left:0.8em;color:#a33}</style></head><body>\n";
  for (const auto& r : rows) html << render_heatmap_row(r);
  html << "</body></html>\n";
  return html.str();
}

}  // namespace noiser
