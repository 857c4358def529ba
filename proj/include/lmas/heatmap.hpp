#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmas/attention.hpp"
#include "lmas/checkpoint.hpp"
#include "lmas/text.hpp"

namespace lmas {

struct HeatmapEntry {
  AttentionMap map;
  std::size_t label = 0;
  std::size_t predicted = 0;
};

/// Evaluation-mode attention over each example. The checkpoint must carry a
/// classifier head (stage classifier or multitask).
std::vector<HeatmapEntry> attention_maps(ModelCheckpoint& model, std::span<const LabeledText> examples);

/// Static HTML page: one block per example, each token a span whose
/// background opacity is alpha / max(alpha) and whose data-alpha attribute
/// holds the raw score.
std::string render_heatmap_html(std::span<const HeatmapEntry> entries);

void emit_attention_heatmap(ModelCheckpoint& model, std::span<const LabeledText> examples,
                            const std::filesystem::path& out_path);

/// Reads back the data-alpha attributes of a rendered page, one vector per
/// example.
std::vector<std::vector<double>> parse_heatmap_alphas(std::string_view html);

std::string html_escape(std::string_view text);

}  // namespace lmas
