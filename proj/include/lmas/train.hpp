#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmas/attention.hpp"
#include "lmas/checkpoint.hpp"
#include "lmas/lm.hpp"
#include "lmas/optim.hpp"
#include "lmas/text.hpp"

namespace lmas {

struct TrainConfig {
  /// 0 freezes the run: forward passes happen, but neither parameters nor
  /// batch-norm running statistics change.
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::size_t epochs = 1;
  std::size_t bptt_len = 35;
  std::size_t batch_size = 16;
  double grad_clip = 0.25;
  double lambda = kDefaultLambda;
  std::uint64_t seed = 0;
  double dropconnect_keep = 0.5;
  std::size_t min_freq = 2;
  std::size_t max_vocab = 60000;
  /// Multi-task only: start the LM decoder from fresh weights instead of the
  /// pre-trained output matrix.
  bool reinit_lm_decoder = false;

  void validate() const;
  OptimizerSettings optimizer_settings() const;
};

struct MetricsRecord {
  std::string stage;
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  std::optional<double> perplexity;
  std::optional<double> error_rate;
  double seconds = 0.0;

  /// One JSON object on a single line.
  std::string to_line() const;
  /// Equality on everything except wall-clock time.
  bool same_result(const MetricsRecord& other) const;
};

struct MetricsLog {
  std::vector<MetricsRecord> records;

  void add(MetricsRecord r) { records.push_back(std::move(r)); }
  /// Appends one line per record.
  void append_to(const std::filesystem::path& path) const;
  bool same_results(const MetricsLog& other) const;
};

struct StepInfo {
  std::size_t step = 0;  // 0-based optimizer step
  std::size_t epoch = 0;
  double loss = 0.0;
  double cls_loss = 0.0;
  double lm_loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  ModelCheckpoint* model = nullptr;  // state after the update
};

using StepObserver = std::function<void(const StepInfo&)>;

struct TrainResult {
  ModelCheckpoint checkpoint;
  MetricsLog log;
};

/// Untrained LM checkpoint over a fixed vocabulary (stage pretrained, step 0).
ModelCheckpoint initial_lm_checkpoint(LMConfig arch, const Vocabulary& vocab, std::uint64_t seed);

/// Tagged token stream of plain-text documents (each tagged as field 1).
std::vector<TokenId> corpus_stream(const Vocabulary& vocab, std::span<const std::string> documents);

struct LMTrainOptions {
  /// Model to continue from. Without it a vocabulary is built from the corpus
  /// and a fresh model is pre-trained (stage pretrained); with it the model is
  /// fine-tuned on the new corpus, whose unseen tokens map to <unk> (stage
  /// lm-finetuned).
  const ModelCheckpoint* init = nullptr;
  /// Architecture for a fresh model. When given together with `init` it must
  /// match the checkpoint.
  std::optional<LMConfig> arch;
  std::span<const std::string> validation;
  StepObserver observer;
};

TrainResult train_lm(const TrainConfig& config, std::span<const std::string> corpus, const LMTrainOptions& options = {});

struct FineTuneOptions {
  std::span<const LabeledText> test;
  StepObserver observer;
};

/// Builds attention pooling and the two-block head on top of the LM encoder
/// and trains every layer on the classification loss.
TrainResult train_classifier(const TrainConfig& config, const HeadConfig& head, std::span<const LabeledText> data,
                             const ModelCheckpoint& lm_checkpoint, const FineTuneOptions& options = {});

/// Classification loss plus lambda times the LM loss over the same batch's
/// tokens, optimized jointly starting from a pre-trained LM.
TrainResult train_multitask(const TrainConfig& config, const HeadConfig& head, std::span<const LabeledText> data,
                            const ModelCheckpoint& lm_checkpoint, const FineTuneOptions& options = {});

/// Mean next-token NLL over a token stream, evaluated lane-by-lane with no
/// masks. `chunk` bounds the unrolled length per forward pass.
double lm_mean_nll(LMParams& lm, std::span<const TokenId> stream, std::size_t chunk = 64);

struct Prediction {
  std::size_t label = 0;
  std::size_t predicted = 0;
  std::vector<double> probabilities;
  std::vector<double> alpha;
};

/// Evaluation-mode predictions, one per example, in input order.
std::vector<Prediction> predict(ModelCheckpoint& model, std::span<const LabeledText> data, std::size_t batch_size = 32);

MetricsRecord evaluate_lm(ModelCheckpoint& model, std::span<const std::string> documents);
MetricsRecord evaluate_classifier(ModelCheckpoint& model, std::span<const LabeledText> data);

}  // namespace lmas
