#include "lmas/heatmap.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>

#include "lmas/error.hpp"
#include "lmas/io.hpp"
#include "lmas/train.hpp"

namespace lmas {

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

constexpr std::string_view kStyle =
    "body{font-family:sans-serif;margin:2em;}"
    ".example{margin-bottom:1.5em;}"
    ".meta{font-size:0.9em;color:#444;margin-bottom:0.3em;}"
    ".tok{position:relative;display:inline-block;margin:1px;padding:1px 3px;}"
    ".tok .bg{position:absolute;inset:0;background:#c0392b;z-index:-1;}";

}  // namespace

std::string html_escape(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char ch : text) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::vector<HeatmapEntry> attention_maps(ModelCheckpoint& model, std::span<const LabeledText> examples) {
  if (!model.classifier) {
    fail(ErrorCategory::Checkpoint,
         "attention heatmaps need a classifier checkpoint, got stage " + stage_name(model.stage));
  }
  const auto predictions = predict(model, examples);
  std::vector<HeatmapEntry> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    HeatmapEntry e;
    e.map.tokens = examples[i].tokens;
    e.map.alpha = predictions[i].alpha;
    e.label = predictions[i].label;
    e.predicted = predictions[i].predicted;
    out.push_back(std::move(e));
  }
  return out;
}

std::string render_heatmap_html(std::span<const HeatmapEntry> entries) {
  std::string html = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Attention heatmap</title>\n<style>";
  html += kStyle;
  html += "</style>\n</head>\n<body>\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const double peak = e.map.alpha.empty() ? 0.0 : *std::max_element(e.map.alpha.begin(), e.map.alpha.end());
    html += "<div class=\"example\" data-index=\"" + std::to_string(i) + "\" data-label=\"" +
            std::to_string(e.label) + "\" data-predicted=\"" + std::to_string(e.predicted) + "\">\n";
    html += "<div class=\"meta\">example " + std::to_string(i) + ": predicted class " + std::to_string(e.predicted) +
            ", true class " + std::to_string(e.label) + "</div>\n<div class=\"tokens\">";
    for (std::size_t t = 0; t < e.map.alpha.size(); ++t) {
      const double a = e.map.alpha[t];
      const double opacity = peak > 0.0 ? a / peak : 0.0;
      const std::string token = t < e.map.tokens.size() ? e.map.tokens[t] : std::string();
      html += "<span class=\"tok\" data-alpha=\"" + format_double(a) + "\"><span class=\"bg\" style=\"opacity:" +
              format_double(opacity) + "\"></span>" + html_escape(token) + "</span>";
    }
    html += "</div>\n</div>\n";
  }
  html += "</body>\n</html>\n";
  return html;
}

void emit_attention_heatmap(ModelCheckpoint& model, std::span<const LabeledText> examples,
                            const std::filesystem::path& out_path) {
  const auto entries = attention_maps(model, examples);
  write_file_atomic(out_path, render_heatmap_html(entries));
}

std::vector<std::vector<double>> parse_heatmap_alphas(std::string_view html) {
  constexpr std::string_view kExample = "<div class=\"example\"";
  constexpr std::string_view kAlpha = "data-alpha=\"";
  std::vector<std::vector<double>> out;
  std::size_t pos = 0;
  while (true) {
    const auto ex = html.find(kExample, pos);
    const auto al = html.find(kAlpha, pos);
    if (ex == std::string_view::npos && al == std::string_view::npos) break;
    if (ex < al) {
      out.emplace_back();
      pos = ex + kExample.size();
      continue;
    }
    const auto start = al + kAlpha.size();
    const auto end = html.find('"', start);
    if (out.empty() || end == std::string_view::npos) fail(ErrorCategory::Format, "malformed heatmap document");
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(html.data() + start, html.data() + end, v);
    if (ec != std::errc() || ptr != html.data() + end) fail(ErrorCategory::Format, "malformed alpha attribute");
    out.back().push_back(v);
    pos = end;
  }
  return out;
}

}  // namespace lmas
