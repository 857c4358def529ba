#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lmas/attention.hpp"
#include "lmas/lm.hpp"
#include "lmas/train.hpp"

namespace lmas {

struct RunPaths {
  std::optional<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> validation;
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> test;
  std::optional<std::filesystem::path> checkpoint_in;
  std::optional<std::filesystem::path> checkpoint_out;
  std::optional<std::filesystem::path> vocab;
  std::optional<std::filesystem::path> report;
};

struct RunConfig {
  std::string command;
  RunPaths paths;
  TrainConfig train;
  HeadConfig head;
  Arch arch = Arch::AwdLstm;
  std::optional<std::size_t> embed_dim;
  std::optional<std::size_t> hidden_dim;
  std::optional<std::size_t> num_layers;
  std::optional<std::size_t> projection_dim;
  /// True once any architecture key was given.
  bool arch_set = false;
  std::string task = "classification";
  std::size_t heatmap_samples = 16;
  std::vector<std::string> warnings;

  /// Defaults of the chosen architecture with explicit sizes applied.
  LMConfig lm_config() const;
};

/// Every accepted key as it appears outside a section header, e.g. "lambda"
/// or "model.hidden-dim". Keys before the first header belong to [train].
const std::vector<std::string>& config_keys();

/// Parses, type-checks and range-checks one value into `config`.
/// `where` prefixes error messages (for example "run.cfg:7").
void apply_setting(RunConfig& config, const std::string& key, std::string_view value, const std::string& where);

/// `key = value` lines, `#` comments and `[section]` headers. Unknown keys and
/// bad values raise Config errors naming the key and line; a repeated key
/// keeps its last value and leaves a warning.
void parse_config_text(RunConfig& config, std::string_view text, const std::string& source);

RunConfig load_config(const std::filesystem::path& path);

}  // namespace lmas
