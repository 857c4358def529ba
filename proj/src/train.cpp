#include "lmas/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "lmas/error.hpp"

namespace lmas {

void TrainConfig::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorCategory::Config, msg); };
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be finite and non-negative");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) bad("lambda must be finite and non-negative");
  if (!(grad_clip > 0.0)) bad("grad_clip must be positive");
  if (batch_size == 0) bad("batch_size must be positive");
  if (bptt_len == 0) bad("bptt must be positive");
  if (!(dropconnect_keep >= 0.0 && dropconnect_keep <= 1.0)) bad("dropconnect_keep must lie in [0, 1]");
  if (min_freq == 0) bad("min_freq must be at least 1");
}

OptimizerSettings TrainConfig::optimizer_settings() const {
  OptimizerSettings s;
  s.kind = optimizer;
  s.learning_rate = learning_rate;
  return s;
}

// ---------------------------------------------------------------------------
// Metrics

std::string MetricsRecord::to_line() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["split"] = split;
  j["loss"] = loss;
  j["perplexity"] = perplexity ? nlohmann::ordered_json(*perplexity) : nlohmann::ordered_json(nullptr);
  j["error_rate"] = error_rate ? nlohmann::ordered_json(*error_rate) : nlohmann::ordered_json(nullptr);
  j["seconds"] = seconds;
  return j.dump();
}

bool MetricsRecord::same_result(const MetricsRecord& o) const {
  return stage == o.stage && epoch == o.epoch && split == o.split && loss == o.loss && perplexity == o.perplexity &&
         error_rate == o.error_rate;
}

void MetricsLog::append_to(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::app);
  if (!out) fail(ErrorCategory::IO, "cannot append metrics to " + path.string());
  for (const auto& r : records) out << r.to_line() << '\n';
}

bool MetricsLog::same_results(const MetricsLog& other) const {
  if (records.size() != other.records.size()) return false;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!records[i].same_result(other.records[i])) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

/// Independent random streams derived from one seed.
struct Streams {
  Rng init;
  Rng masks;
  Rng shuffle;

  explicit Streams(std::uint64_t seed) : Streams(Rng(seed)) {}

 private:
  explicit Streams(Rng master) : init(master.split()), masks(master.split()), shuffle(master.split()) {}
};

ClsBatch pad_rows(std::span<const LabeledExample> examples, std::span<const std::size_t> order) {
  std::size_t width = 0;
  for (std::size_t i : order) width = std::max(width, examples[i].ids.size());
  ClsBatch batch;
  batch.ids = TokenGrid(order.size(), width, kPadId);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& ex = examples[order[r]];
    std::copy(ex.ids.begin(), ex.ids.end(), batch.ids.ids.begin() + static_cast<std::ptrdiff_t>(r * width));
    batch.lengths.push_back(ex.ids.size());
    batch.labels.push_back(ex.label);
    batch.source.push_back(order[r]);
  }
  return batch;
}

/// Batch-norm statistics need two rows, so a trailing singleton batch joins
/// the one before it.
void absorb_singleton(std::vector<ClsBatch>& batches, std::span<const LabeledExample> examples) {
  if (batches.size() < 2 || batches.back().labels.size() != 1) return;
  std::vector<std::size_t> order = batches[batches.size() - 2].source;
  order.push_back(batches.back().source[0]);
  batches.pop_back();
  batches.back() = pad_rows(examples, order);
}

struct ClassifierPass {
  Var logits;
  Var alpha;
  Var states;  // time-major rows of the top LM layer
};

ClassifierPass classifier_pass(Tape& tape, ModelCheckpoint& model, const ClsBatch& batch, Mode mode, Rng* rng,
                               const DropConnectMasks* masks, bool update_stats) {
  AttentionClassifier& cls = *model.classifier;
  const std::size_t rows = batch.ids.rows;
  LMForwardOptions lm_opts;
  lm_opts.dropconnect = masks;
  lm_opts.dropout_rng = mode == Mode::Train ? rng : nullptr;
  LMForward fwd = run_lm_forward(tape, model.lm, batch.ids, LMState::zeros(model.lm.config, rows), lm_opts);
  Var states = concat_rows(fwd.top());
  PoolResult pool = attention_pool_batch(tape, cls.attention, states, rows, batch.lengths, cls.config.pool_hidden);
  HeadForwardOptions head_opts;
  head_opts.mode = mode;
  head_opts.dropout_rng = mode == Mode::Train ? rng : nullptr;
  head_opts.update_running_stats = update_stats;
  Var logits = classifier_forward(tape, cls, pool.context, head_opts);
  return {logits, pool.alpha, states};
}

void require_classifier(const ModelCheckpoint& model) {
  if (!model.classifier) {
    fail(ErrorCategory::Checkpoint, "checkpoint at stage " + stage_name(model.stage) + " has no classifier head");
  }
}

bool same_architecture(const LMConfig& a, const LMConfig& b) {
  return a.arch == b.arch && a.embed_dim == b.embed_dim && a.hidden_dim == b.hidden_dim &&
         a.num_layers == b.num_layers && a.projection_dim == b.projection_dim;
}

}  // namespace

// ---------------------------------------------------------------------------
// Language model

ModelCheckpoint initial_lm_checkpoint(LMConfig arch, const Vocabulary& vocab, std::uint64_t seed) {
  arch.vocab_size = vocab.size();
  Streams streams(seed);
  ModelCheckpoint c;
  c.stage = Stage::Pretrained;
  c.seed = seed;
  c.vocab = vocab;
  c.lm = LMParams::init(arch, streams.init);
  return c;
}

std::vector<TokenId> corpus_stream(const Vocabulary& vocab, std::span<const std::string> documents) {
  std::vector<TokenId> stream;
  for (const auto& doc : documents) {
    auto ids = vocab.numericalize(tokenize_and_tag(doc, 1));
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  return stream;
}

double lm_mean_nll(LMParams& lm, std::span<const TokenId> stream, std::size_t chunk) {
  if (stream.size() < 2) fail(ErrorCategory::Data, "need at least two tokens to score a language model");
  if (chunk == 0) fail(ErrorCategory::Config, "chunk must be positive");
  LMState state = LMState::zeros(lm.config, 1);
  double total = 0.0;
  const std::size_t predictions = stream.size() - 1;
  for (std::size_t start = 0; start < predictions; start += chunk) {
    const std::size_t len = std::min(chunk, predictions - start);
    TokenGrid inputs(1, len), targets(1, len);
    for (std::size_t t = 0; t < len; ++t) {
      inputs(0, t) = stream[start + t];
      targets(0, t) = stream[start + t + 1];
    }
    Tape tape;
    LMForward fwd = run_lm_forward(tape, lm, inputs, state);
    total += lm_loss(tape, lm, fwd.top(), targets).value().item() * static_cast<double>(len);
    state = std::move(fwd.final_state);
  }
  return total / static_cast<double>(predictions);
}

TrainResult train_lm(const TrainConfig& config, std::span<const std::string> corpus, const LMTrainOptions& options) {
  config.validate();
  Streams streams(config.seed);
  ModelCheckpoint model;
  if (options.init) {
    if (options.init->classifier || options.init->stage == Stage::Classifier || options.init->stage == Stage::Multitask) {
      fail(ErrorCategory::Checkpoint, "LM training needs a language-model checkpoint, got stage " +
                                          stage_name(options.init->stage));
    }
    if (options.arch && !same_architecture(*options.arch, options.init->lm.config)) {
      fail(ErrorCategory::Checkpoint, "requested architecture does not match the checkpoint's " +
                                          arch_name(options.init->lm.config.arch) + " configuration");
    }
    model = *options.init;
    model.stage = Stage::LmFinetuned;
    model.seed = config.seed;
  } else {
    std::vector<std::vector<std::string>> docs;
    docs.reserve(corpus.size());
    for (const auto& d : corpus) docs.push_back(tokenize_and_tag(d, 1));
    Vocabulary vocab = build_vocab(docs, config.min_freq, config.max_vocab);
    LMConfig arch = options.arch.value_or(LMConfig{});
    arch.vocab_size = vocab.size();
    arch.dropconnect_keep = config.dropconnect_keep;
    model.stage = Stage::Pretrained;
    model.seed = config.seed;
    model.vocab = std::move(vocab);
    model.lm = LMParams::init(arch, streams.init);
  }
  model.lm.config.dropconnect_keep = config.dropconnect_keep;

  const auto stream = corpus_stream(model.vocab, corpus);
  const auto batches = make_lm_batches(stream, config.batch_size, config.bptt_len);
  const auto valid_stream = corpus_stream(model.vocab, options.validation);
  const std::string stage = stage_name(model.stage);

  ParameterList params = model.lm.parameters();
  Optimizer optimizer(config.optimizer_settings());
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = Clock::now();
    LMState state = LMState::zeros(model.lm.config, config.batch_size);
    double loss_sum = 0.0;
    for (const LMBatch& batch : batches) {
      DropConnectMasks masks = sample_dropconnect(streams.masks, model.lm, config.dropconnect_keep);
      Tape tape;
      LMForwardOptions fwd_opts;
      fwd_opts.dropconnect = &masks;
      fwd_opts.dropout_rng = &streams.masks;
      LMForward fwd = run_lm_forward(tape, model.lm, batch.inputs, state, fwd_opts);
      Var loss = lm_loss(tape, model.lm, fwd.top(), batch.targets);
      zero_grads(params);
      tape.backward(loss);
      const double norm = clip_grad_norm(params, config.grad_clip);
      if (config.learning_rate > 0.0) optimizer.step(params);
      state = std::move(fwd.final_state);
      loss_sum += loss.value().item();
      ++model.step;
      if (options.observer) {
        const double l = loss.value().item();
        options.observer({step, epoch, l, 0.0, l, norm, &model});
      }
      ++step;
    }
    MetricsRecord train_rec{stage, epoch, "train", loss_sum / static_cast<double>(batches.size()), {}, {}, 0.0};
    train_rec.perplexity = perplexity(train_rec.loss);
    train_rec.seconds = seconds_since(start);
    result.log.add(train_rec);
    if (valid_stream.size() >= 2) {
      const auto vstart = Clock::now();
      const double nll = lm_mean_nll(model.lm, valid_stream, config.bptt_len);
      result.log.add({stage, epoch, "valid", nll, perplexity(nll), {}, seconds_since(vstart)});
    }
  }
  for (Parameter* p : params) p->zero_grad();
  result.checkpoint = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Classification

namespace {

TrainResult fine_tune(const TrainConfig& config, const HeadConfig& head, std::span<const LabeledText> data,
                      const ModelCheckpoint& lm_checkpoint, const FineTuneOptions& options, bool multitask) {
  config.validate();
  head.validate();
  if (multitask) {
    if (lm_checkpoint.stage != Stage::Pretrained || lm_checkpoint.classifier) {
      fail(ErrorCategory::Checkpoint, "multi-task fine-tuning starts from a pretrained LM, got stage " +
                                          stage_name(lm_checkpoint.stage));
    }
  } else if ((lm_checkpoint.stage != Stage::Pretrained && lm_checkpoint.stage != Stage::LmFinetuned) ||
             lm_checkpoint.classifier) {
    fail(ErrorCategory::Checkpoint, "classifier fine-tuning needs a pretrained or lm-finetuned LM, got stage " +
                                        stage_name(lm_checkpoint.stage));
  }
  if (data.size() < 2) fail(ErrorCategory::Data, "batch-norm head needs at least 2 labeled training examples");
  if (config.batch_size < 2) fail(ErrorCategory::Config, "batch-norm head needs batch_size >= 2");
  for (const auto& set : {data, options.test}) {
    for (const auto& ex : set) {
      if (ex.label >= head.num_classes) {
        fail(ErrorCategory::Config, "label " + std::to_string(ex.label) + " does not fit the configured " +
                                        std::to_string(head.num_classes) + " classes");
      }
    }
  }

  Streams streams(config.seed);
  ModelCheckpoint model = lm_checkpoint;
  model.stage = multitask ? Stage::Multitask : Stage::Classifier;
  model.seed = config.seed;
  model.lm.config.dropconnect_keep = config.dropconnect_keep;
  model.classifier = AttentionClassifier::init(head, model.lm.config.output_dim(), streams.init);
  if (multitask && config.reinit_lm_decoder) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(model.lm.config.output_dim()));
    for (double& v : model.lm.output_U.value.values()) v = streams.init.uniform(-bound, bound);
  }

  const auto examples = numericalize(model.vocab, data);
  const bool frozen = config.learning_rate == 0.0;
  const std::string stage = stage_name(model.stage);
  ParameterList params = model.parameters();
  Optimizer optimizer(config.optimizer_settings());
  TrainResult result;

  auto record_eval = [&](std::size_t epoch) {
    const auto start = Clock::now();
    MetricsRecord train_rec = evaluate_classifier(model, data);
    train_rec.stage = stage;
    train_rec.epoch = epoch;
    train_rec.split = "train";
    train_rec.seconds = seconds_since(start);
    result.log.add(train_rec);
    if (!options.test.empty()) {
      const auto tstart = Clock::now();
      MetricsRecord test_rec = evaluate_classifier(model, options.test);
      test_rec.stage = stage;
      test_rec.epoch = epoch;
      test_rec.split = "test";
      test_rec.seconds = seconds_since(tstart);
      result.log.add(test_rec);
    }
  };

  record_eval(0);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto batches = make_cls_batches(examples, config.batch_size, streams.shuffle.next());
    absorb_singleton(batches, examples);
    for (const ClsBatch& batch : batches) {
      DropConnectMasks masks = sample_dropconnect(streams.masks, model.lm, config.dropconnect_keep);
      Tape tape;
      ClassifierPass pass = classifier_pass(tape, model, batch, Mode::Train, &streams.masks, &masks, !frozen);
      Var cls_loss = classification_loss(pass.logits, batch.labels);
      Var total = cls_loss;
      double lm_value = 0.0;
      if (multitask) {
        const std::size_t rows = batch.ids.rows;
        std::vector<std::size_t> state_rows, targets;
        for (std::size_t b = 0; b < rows; ++b) {
          for (std::size_t t = 0; t + 1 < batch.lengths[b]; ++t) {
            state_rows.push_back(t * rows + b);
            targets.push_back(batch.ids(b, t + 1));
          }
        }
        if (!state_rows.empty()) {
          Var lm_term = lm_loss_rows(tape, model.lm, gather_rows(pass.states, state_rows), targets);
          lm_value = lm_term.value().item();
          total = multi_task_loss(cls_loss, lm_term, config.lambda);
        }
      }
      zero_grads(params);
      tape.backward(total);
      const double norm = clip_grad_norm(params, config.grad_clip);
      if (!frozen) optimizer.step(params);
      ++model.step;
      if (options.observer) {
        options.observer({step, epoch, total.value().item(), cls_loss.value().item(), lm_value, norm, &model});
      }
      ++step;
    }
    record_eval(epoch);
  }
  for (Parameter* p : params) p->zero_grad();
  result.checkpoint = std::move(model);
  return result;
}

}  // namespace

TrainResult train_classifier(const TrainConfig& config, const HeadConfig& head, std::span<const LabeledText> data,
                             const ModelCheckpoint& lm_checkpoint, const FineTuneOptions& options) {
  return fine_tune(config, head, data, lm_checkpoint, options, false);
}

TrainResult train_multitask(const TrainConfig& config, const HeadConfig& head, std::span<const LabeledText> data,
                            const ModelCheckpoint& lm_checkpoint, const FineTuneOptions& options) {
  return fine_tune(config, head, data, lm_checkpoint, options, true);
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<Prediction> predict(ModelCheckpoint& model, std::span<const LabeledText> data, std::size_t batch_size) {
  require_classifier(model);
  if (batch_size == 0) fail(ErrorCategory::Config, "batch_size must be positive");
  const auto examples = numericalize(model.vocab, data);
  std::vector<Prediction> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<std::size_t> order;
    for (std::size_t i = start; i < end; ++i) {
      if (examples[i].ids.empty()) fail(ErrorCategory::Data, "example " + std::to_string(i) + " has no tokens");
      order.push_back(i);
    }
    const ClsBatch batch = pad_rows(examples, order);
    Tape tape;
    ClassifierPass pass = classifier_pass(tape, model, batch, Mode::Eval, nullptr, nullptr, false);
    const Tensor probs = classifier_probabilities(pass.logits).value();
    const Tensor& alpha = pass.alpha.value();
    for (std::size_t r = 0; r < order.size(); ++r) {
      Prediction p;
      p.label = batch.labels[r];
      for (std::size_t k = 0; k < probs.cols(); ++k) p.probabilities.push_back(probs(r, k));
      p.predicted = static_cast<std::size_t>(
          std::max_element(p.probabilities.begin(), p.probabilities.end()) - p.probabilities.begin());
      for (std::size_t t = 0; t < batch.lengths[r]; ++t) p.alpha.push_back(alpha(r, t));
      out.push_back(std::move(p));
    }
  }
  return out;
}

MetricsRecord evaluate_lm(ModelCheckpoint& model, std::span<const std::string> documents) {
  const auto start = Clock::now();
  const auto stream = corpus_stream(model.vocab, documents);
  const double nll = lm_mean_nll(model.lm, stream);
  return {stage_name(model.stage), 0, "eval", nll, perplexity(nll), {}, seconds_since(start)};
}

MetricsRecord evaluate_classifier(ModelCheckpoint& model, std::span<const LabeledText> data) {
  const auto start = Clock::now();
  if (data.empty()) fail(ErrorCategory::Data, "no examples to evaluate");
  const auto predictions = predict(model, data);
  double nll = 0.0;
  std::size_t wrong = 0;
  for (const auto& p : predictions) {
    nll -= std::log(std::max(p.probabilities[p.label], 1e-300));
    if (p.predicted != p.label) ++wrong;
  }
  const double n = static_cast<double>(predictions.size());
  return {stage_name(model.stage), 0, "eval", nll / n, {}, static_cast<double>(wrong) / n, seconds_since(start)};
}

}  // namespace lmas
