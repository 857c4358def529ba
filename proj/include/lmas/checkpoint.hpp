#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "lmas/attention.hpp"
#include "lmas/lm.hpp"
#include "lmas/text.hpp"

namespace lmas {

/// Pipeline position of a model. Pretrained and LmFinetuned carry only the
/// language model; Classifier and Multitask also carry the attention head.
enum class Stage { Pretrained, LmFinetuned, Classifier, Multitask };

std::string stage_name(Stage stage);
Stage parse_stage(const std::string& text);

struct ModelCheckpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  Stage stage = Stage::Pretrained;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  Vocabulary vocab;
  LMParams lm;
  std::optional<AttentionClassifier> classifier;

  /// Trainable parameters: LM first, then the classifier if present.
  ParameterList parameters();
};

/// Binary layout (all integers little-endian):
///   "LMAS" | u32 version | section CONF | section VOCB | section TENS | u32 crc32
/// where each section is a 4-byte tag, a u64 payload length and the payload.
/// CONF is sorted `key = value` text, VOCB is one token per line and TENS is
/// u32 count followed by (u32 name length, name, u32 rank, u64 dims, f64 data).
std::string checkpoint_serialize(const ModelCheckpoint& checkpoint);
ModelCheckpoint checkpoint_deserialize(std::string_view bytes);

void checkpoint_save(const ModelCheckpoint& checkpoint, const std::filesystem::path& path);
ModelCheckpoint checkpoint_load(const std::filesystem::path& path);

}  // namespace lmas
