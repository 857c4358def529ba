// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lmas/attention.hpp"
#include "lmas/checkpoint.hpp"
#include "lmas/cli.hpp"
#include "lmas/error.hpp"
#include "lmas/heatmap.hpp"
#include "lmas/io.hpp"
#include "lmas/lm.hpp"
#include "lmas/text.hpp"
#include "lmas/train.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace lmas;
using testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failed checks; the first few are kept for the report line.
struct Checks {
  std::size_t failed = 0;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failed;
    if (notes.size() < 3) notes.push_back(what);
  }
  Outcome outcome(std::string summary) const {
    if (failed) {
      summary += "; " + std::to_string(failed) + " check(s) failed";
      for (const auto& n : notes) summary += " [" + n + "]";
    }
    return {failed == 0, summary};
  }
};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "lmas_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

ErrorCategory category_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.category();
  }
  return ErrorCategory::Usage;
}

std::string csv_line(std::size_t label, const std::string& title, const std::string& body) {
  return std::to_string(label + 1) + ",\"" + title + "\",\"" + body + "\"\n";
}

std::vector<LabeledText> write_and_read_csv(const std::string& name, const std::string& text, std::size_t classes) {
  const fs::path p = scratch_dir() / name;
  std::ofstream(p, std::ios::binary) << text;
  CsvSchema schema;
  schema.num_classes = classes;
  return read_labeled_csv(p, schema);
}

std::string words(Rng& rng, const std::vector<std::string>& pool, std::size_t lo, std::size_t hi) {
  const std::size_t n = lo + rng.below(hi - lo + 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + pool[rng.below(pool.size())];
  return s;
}

std::vector<std::string> numbered(const std::string& prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

std::string snapshot(ModelCheckpoint& model, bool skip_decoder) {
  std::string bytes;
  for (Parameter* p : model.parameters()) {
    if (skip_decoder && p == &model.lm.output_U) continue;
    bytes.append(reinterpret_cast<const char*>(p->value.values().data()), p->value.size() * sizeof(double));
  }
  return bytes;
}

// ---------------------------------------------------------------------------
// 1. gradients

Outcome gradient_oracle_suite() {
  Checks checks;
  double worst = 0.0;
  auto track = [&](double err, const std::string& what) {
    worst = std::max(worst, err);
    checks.expect(err <= 1e-4, what + " rel err " + fmt("%.3g", err));
  };

  Rng rng(101);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), c = random_tensor({4, 2}, rng);
  const Tensor row = random_tensor({1, 4}, rng), gamma = random_tensor({1, 4}, rng), beta = random_tensor({1, 4}, rng);
  const std::vector<std::size_t> targets{1, 3, 0}, lengths{4, 2, 1}, pick{2, 0, 2};
  using Op = std::function<Var(Var)>;
  const std::vector<std::tuple<std::string, Tensor, Op>> prims{
      {"tanh", a, [](Var x) { return tanh(x); }},
      {"sigmoid", a, [](Var x) { return sigmoid(x); }},
      {"relu", a, [](Var x) { return relu(x); }},
      {"add", a, [&](Var x) { return add(x, x.tape().constant(b)); }},
      {"sub", a, [&](Var x) { return sub(x.tape().constant(b), x); }},
      {"mul", a, [&](Var x) { return mul(x, x.tape().constant(b)); }},
      {"mul self", a, [](Var x) { return mul(x, x); }},
      {"scale", a, [](Var x) { return scale(x, -2.5); }},
      {"matmul lhs", a, [&](Var x) { return matmul(x, x.tape().constant(c)); }},
      {"matmul rhs", c, [&](Var x) { return matmul(x.tape().constant(a), x); }},
      {"matmul_nt lhs", a, [&](Var x) { return matmul_nt(x, x.tape().constant(b)); }},
      {"matmul_nt rhs", b, [&](Var x) { return matmul_nt(x.tape().constant(a), x); }},
      {"transpose", a, [](Var x) { return transpose(x); }},
      {"reshape", a, [](Var x) { return reshape(x, {2, 6}); }},
      {"add_row row", row, [&](Var x) { return add_row(x.tape().constant(a), x); }},
      {"add_row matrix", a, [&](Var x) { return add_row(x, x.tape().constant(row)); }},
      {"mul_row row", row, [&](Var x) { return mul_row(x.tape().constant(a), x); }},
      {"mul_row matrix", a, [&](Var x) { return mul_row(x, x.tape().constant(row)); }},
      {"sum", a, [](Var x) { return sum(x); }},
      {"mean", a, [](Var x) { return mean(x); }},
      {"softmax_rows", a, [](Var x) { return softmax_rows(x); }},
      {"masked_softmax_rows", a, [&](Var x) { return masked_softmax_rows(x, lengths); }},
      {"cross_entropy", a, [&](Var x) { return cross_entropy(x, targets); }},
      {"gather_rows", a, [&](Var x) { return gather_rows(x, pick); }},
      {"concat_rows", a,
       [&](Var x) {
         const std::array parts{x, x.tape().constant(b), x};
         return concat_rows(parts);
       }},
      {"batch_norm x", a,
       [&](Var x) { return batch_norm_train(x, x.tape().constant(gamma), x.tape().constant(beta), 1e-5); }},
      {"batch_norm gamma", gamma,
       [&](Var g) { return batch_norm_train(g.tape().constant(a), g, g.tape().constant(beta), 1e-5); }},
      {"batch_norm beta", beta,
       [&](Var bt) { return batch_norm_train(bt.tape().constant(a), bt.tape().constant(gamma), bt, 1e-5); }},
  };
  std::uint64_t seed = 1;
  for (const auto& [name, x0, op] : prims) track(testing::leaf_grad_error(x0, op, seed++), name);

  // LM -> attention -> head -> loss at vocab 8, hidden <= 6, T 5, batch 2
  struct Variant {
    std::string name;
    Arch arch;
    bool pool_hidden;
    double lambda;
  };
  for (const Variant& v : {Variant{"awd-lstm stack", Arch::AwdLstm, false, 0.0},
                           Variant{"awd-lstm multitask stack", Arch::AwdLstm, false, kDefaultLambda},
                           Variant{"lstmp stack", Arch::Lstmp, true, kDefaultLambda}}) {
    LMConfig cfg;
    cfg.arch = v.arch;
    cfg.vocab_size = 8;
    cfg.embed_dim = 4;
    cfg.hidden_dim = 6;
    cfg.num_layers = 2;
    if (v.arch == Arch::Lstmp) cfg.projection_dim = 3;
    Rng r(7);
    LMParams lm = LMParams::init(cfg, r);
    for (auto& layer : lm.layers)
      for (auto& bias : layer.b) bias.value = random_tensor(bias.value.shape(), r, 0.3);
    HeadConfig h;
    h.num_classes = 3;
    h.hidden_width = 4;
    h.pool_hidden = v.pool_hidden;
    AttentionClassifier cls = AttentionClassifier::init(h, cfg.output_dim(), r);
    cls.attention.b_u.value = random_tensor(cls.attention.b_u.value.shape(), r, 0.5);
    for (auto* blk : {&cls.head.block1, &cls.head.block2}) {
      blk->gamma.value = random_tensor(blk->gamma.value.shape(), r);
      blk->beta.value = random_tensor(blk->beta.value.shape(), r);
    }
    TokenGrid ids(2, 5);
    for (auto& id : ids.ids) id = static_cast<TokenId>(r.below(8));
    const std::vector<std::size_t> lens{5, 3}, labels{2, 0};
    const auto masks = sample_dropconnect(r, lm, 0.5);
    ParameterList params = lm.parameters();
    for (Parameter* p : cls.parameters()) params.push_back(p);
    const auto report = testing::check_gradients(params, [&](Tape& tape) {
      LMForwardOptions opts;
      opts.dropconnect = &masks;
      auto fwd = run_lm_forward(tape, lm, ids, LMState::zeros(cfg, 2), opts);
      Var states = concat_rows(fwd.top());
      auto pool = attention_pool_batch(tape, cls.attention, states, 2, lens, v.pool_hidden);
      Var loss = classification_loss(classifier_forward(tape, cls, pool.context, {Mode::Train, nullptr, false}), labels);
      std::vector<std::size_t> rows, next;
      for (std::size_t bb = 0; bb < 2; ++bb)
        for (std::size_t t = 0; t + 1 < lens[bb]; ++t) {
          rows.push_back(t * 2 + bb);
          next.push_back(ids(bb, t + 1));
        }
      return multi_task_loss(loss, lm_loss_rows(tape, lm, gather_rows(states, rows), next), v.lambda);
    });
    track(report.worst, v.name + " at " + report.where);
  }
  return checks.outcome(std::to_string(prims.size()) + " primitives + 3 full stacks, worst rel err " +
                        fmt("%.2e", worst) + " (limit 1e-4)");
}

// ---------------------------------------------------------------------------
// 2. normalization

Outcome normalization_suite() {
  Checks checks;
  Rng rng(202);
  double worst_alpha = 0.0, worst_prob = 0.0;
  std::size_t t1_cases = 0, padded_cases = 0, padded_zero = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.below(6), batch = 1 + rng.below(4);
    const std::size_t steps = trial % 10 == 0 ? 1 : 1 + rng.below(8);
    HeadConfig h;
    h.num_classes = 2 + rng.below(4);
    h.hidden_width = 1 + rng.below(6);
    h.pool_hidden = rng.below(2) == 1;
    AttentionClassifier cls = AttentionClassifier::init(h, d, rng);
    cls.attention.b_u.value = random_tensor(cls.attention.b_u.value.shape(), rng, 2.0);
    cls.attention.W_a.value = random_tensor(cls.attention.W_a.value.shape(), rng, 1 + 9 * rng.uniform());
    std::vector<std::size_t> lengths;
    for (std::size_t b = 0; b < batch; ++b) lengths.push_back(1 + rng.below(steps));
    const Tensor states = random_tensor({steps * batch, d}, rng, 5.0);
    Tape tape;
    auto pool = attention_pool_batch(tape, cls.attention, tape.constant(states), batch, lengths, h.pool_hidden);
    const Tensor alpha = pool.alpha.value();
    for (std::size_t b = 0; b < batch; ++b) {
      double total = 0.0;
      for (std::size_t t = 0; t < steps; ++t) {
        total += alpha(b, t);
        checks.expect(alpha(b, t) >= 0.0, "negative alpha");
        if (t >= lengths[b]) {
          ++padded_cases;
          padded_zero += alpha(b, t) == 0.0;
          checks.expect(alpha(b, t) == 0.0, "padded alpha not exactly 0");
        }
      }
      worst_alpha = std::max(worst_alpha, std::abs(total - 1.0));
      if (steps == 1) {
        ++t1_cases;
        checks.expect(alpha(b, 0) == 1.0, "T=1 alpha != 1");
      }
    }
    // single-sequence pooling over the first row's valid prefix
    Tensor own({lengths[0], d});
    for (std::size_t t = 0; t < lengths[0]; ++t)
      for (std::size_t j = 0; j < d; ++j) own(t, j) = states(t * batch, j);
    auto single = self_attention_pool(tape, cls.attention, tape.constant(own), h.pool_hidden);
    double total = 0.0;
    for (double v : single.alpha.value().values()) total += v;
    worst_alpha = std::max(worst_alpha, std::abs(total - 1.0));

    const Tensor ctx = random_tensor({std::max<std::size_t>(batch, 2), cls.context_dim()}, rng, 3.0);
    for (Mode mode : {Mode::Eval, Mode::Train}) {
      Tape t2;
      const Tensor probs =
          classifier_probabilities(classifier_forward(t2, cls, t2.constant(ctx), {mode, nullptr, false})).value();
      for (std::size_t r = 0; r < probs.rows(); ++r) {
        double sum_p = 0.0;
        for (std::size_t k = 0; k < probs.cols(); ++k) sum_p += probs(r, k);
        worst_prob = std::max(worst_prob, std::abs(sum_p - 1.0));
      }
    }
  }
  checks.expect(worst_alpha <= 1e-9, "alpha sum error " + fmt("%.3g", worst_alpha));
  checks.expect(worst_prob <= 1e-9, "softmax sum error " + fmt("%.3g", worst_prob));
  checks.expect(t1_cases > 0 && padded_cases > 0, "coverage");
  return checks.outcome("1000 inputs (" + std::to_string(t1_cases) + " T=1 rows, " + std::to_string(padded_cases) +
                        " padded slots, " + std::to_string(padded_zero) + " exactly 0), max |sum alpha - 1| " +
                        fmt("%.2e", worst_alpha) + ", max |sum p - 1| " + fmt("%.2e", worst_prob));
}

// ---------------------------------------------------------------------------
// 3. language model sanity

/// Sentences over 12 words where each word is followed by its successor in
/// a fixed cycle nine times in ten.
std::vector<std::string> pattern_corpus(std::size_t n, Rng& rng) {
  const auto vocab = numbered("w", 12);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t w = rng.below(12);
    const std::size_t len = 6 + rng.below(5);
    std::string s = vocab[w];
    for (std::size_t k = 1; k < len; ++k) {
      w = rng.uniform() < 0.9 ? (w * 5 + 3) % 12 : rng.below(12);
      s += " " + vocab[w];
    }
    out.push_back(s);
  }
  return out;
}

Outcome lm_sanity() {
  Checks checks;
  Rng rng(303);
  const auto train_docs = pattern_corpus(200, rng);
  const auto valid_docs = pattern_corpus(40, rng);

  TrainConfig t;
  t.seed = 3;
  t.epochs = 8;
  t.bptt_len = 20;
  t.batch_size = 8;
  t.min_freq = 1;
  t.learning_rate = 1e-2;
  t.dropconnect_keep = 0.9;
  LMConfig arch;
  arch.embed_dim = 16;
  arch.hidden_dim = 32;
  arch.num_layers = 1;
  LMTrainOptions o;
  o.arch = arch;
  o.validation = valid_docs;
  TrainResult r = train_lm(t, train_docs, o);
  ModelCheckpoint& model = r.checkpoint;

  const auto train_ids = corpus_stream(model.vocab, train_docs);
  const auto valid_ids = corpus_stream(model.vocab, valid_docs);
  const std::vector<unsigned> tr(train_ids.begin(), train_ids.end()), va(valid_ids.begin() + 1, valid_ids.end());
  const double unigram = static_cast<double>(oracle::unigram_perplexity(tr, va));
  const double trained = perplexity(lm_mean_nll(model.lm, valid_ids));
  checks.expect(trained < unigram, "trained " + fmt("%.3f", trained) + " >= unigram " + fmt("%.3f", unigram));

  ModelCheckpoint uniform = model;
  uniform.lm = LMParams::zeros(model.lm.config);
  const double v = static_cast<double>(model.vocab.size());
  const double ppl_uniform = perplexity(lm_mean_nll(uniform.lm, valid_ids));
  checks.expect(std::abs(ppl_uniform - v) <= 1e-9, "uniform ppl " + fmt("%.12g", ppl_uniform));
  return checks.outcome("valid ppl " + fmt("%.3f", trained) + " < unigram " + fmt("%.3f", unigram) +
                        "; untrained ppl " + fmt("%.12g", ppl_uniform) + " vs V=" + fmt("%.0f", v));
}

// ---------------------------------------------------------------------------
// 4. overfit

Outcome classifier_overfit() {
  Checks checks;
  Rng rng(404);
  const auto filler = numbered("f", 20);
  const auto keyword = numbered("key", 4);
  std::string csv;
  for (std::size_t i = 0; i < 64; ++i) {
    const std::size_t label = i % 4;
    csv += csv_line(label, words(rng, filler, 1, 4) + " " + keyword[label] + " " + words(rng, filler, 1, 4),
                    words(rng, filler, 2, 6));
  }
  const auto data = write_and_read_csv("overfit.csv", csv, 4);

  std::vector<std::vector<std::string>> docs;
  for (const auto& d : data) docs.push_back(d.tokens);
  LMConfig arch;
  arch.embed_dim = 16;
  arch.hidden_dim = 24;
  arch.num_layers = 1;
  const ModelCheckpoint lm = initial_lm_checkpoint(arch, build_vocab(docs, 1), 4);

  TrainConfig t;
  t.seed = 4;
  t.epochs = 200;
  t.batch_size = 16;
  t.learning_rate = 1e-2;
  t.dropconnect_keep = 1.0;
  HeadConfig h;
  h.num_classes = 4;
  h.hidden_width = 16;
  h.dropout_keep = 1.0;
  TrainResult r = train_classifier(t, h, data, lm);
  std::size_t first = 0;
  for (const auto& rec : r.log.records) {
    if (rec.split == "train" && rec.error_rate.value() == 0.0) {
      first = rec.epoch;
      break;
    }
  }
  checks.expect(first > 0, "train accuracy never reached 1.0 in 200 epochs");
  const double final_train_error = r.log.records.back().error_rate.value();

  // evaluate through the command line on the saved checkpoint
  const fs::path ckpt = scratch_dir() / "overfit.lmas";
  checkpoint_save(r.checkpoint, ckpt);
  std::ostringstream out, err;
  const int code =
      run_cli({"evaluate", "--task", "classification", "--checkpoint", ckpt.string(), "--dataset", (scratch_dir() / "overfit.csv").string()}, out,
              err);
  checks.expect(code == 0, "evaluate exit " + std::to_string(code) + ": " + err.str());
  double reported = -1.0;
  if (code == 0) reported = nlohmann::json::parse(out.str())["error_rate"].get<double>();
  checks.expect(reported == 0.0, "evaluate reported error " + fmt("%g", reported));
  return checks.outcome("train accuracy 1.0 first at epoch " + std::to_string(first) + " (limit 200); final train error " +
                        fmt("%g", final_train_error) + "; evaluate error_rate " + fmt("%g", reported));
}

// ---------------------------------------------------------------------------
// 5. multi-task reduction

Outcome multitask_reduction() {
  Checks checks;
  Rng rng(505);
  const auto filler = numbered("f", 15);
  std::string csv;
  for (std::size_t i = 0; i < 40; ++i) csv += csv_line(i % 3, words(rng, filler, 2, 6), words(rng, filler, 1, 5));
  const auto data = write_and_read_csv("multitask.csv", csv, 3);
  std::vector<std::string> corpus;
  for (int i = 0; i < 60; ++i) corpus.push_back(words(rng, filler, 4, 9));

  TrainConfig t;
  t.seed = 11;
  t.bptt_len = 8;
  t.batch_size = 4;
  t.min_freq = 1;
  t.learning_rate = 5e-3;
  LMConfig arch;
  arch.embed_dim = 6;
  arch.hidden_dim = 8;
  arch.num_layers = 2;
  LMTrainOptions lo;
  lo.arch = arch;
  const ModelCheckpoint lm = train_lm(t, corpus, lo).checkpoint;

  HeadConfig h;
  h.num_classes = 3;
  h.hidden_width = 5;

  // lambda = 0: same seed, same trajectory for every non-decoder parameter
  t.epochs = 1;
  t.lambda = 0.0;
  std::vector<std::string> cls_traj, mt_traj;
  FineTuneOptions co, mo;
  co.observer = [&](const StepInfo& s) { cls_traj.push_back(snapshot(*s.model, true)); };
  mo.observer = [&](const StepInfo& s) { mt_traj.push_back(snapshot(*s.model, true)); };
  train_classifier(t, h, data, lm, co);
  train_multitask(t, h, data, lm, mo);
  std::size_t identical = 0;
  for (std::size_t i = 0; i < std::min<std::size_t>({10, cls_traj.size(), mt_traj.size()}); ++i)
    identical += cls_traj[i] == mt_traj[i];
  checks.expect(cls_traj.size() >= 10 && identical == 10, std::to_string(identical) + "/10 steps bit-identical");

  // lambda = 0.1: recompute step 0 outside the training loop. No dropout so
  // the step-0 forward depends only on the initial weights and first batch.
  t.lambda = kDefaultLambda;
  t.dropconnect_keep = 1.0;
  h.dropout_keep = 1.0;
  StepInfo step0;
  bool seen = false;
  mo.observer = [&](const StepInfo& s) {
    if (!seen) step0 = s, seen = true;
  };
  train_multitask(t, h, data, lm, mo);

  Rng master(t.seed);
  Rng init = master.split();
  master.split();
  Rng shuffle = master.split();
  ModelCheckpoint model = lm;
  model.classifier = AttentionClassifier::init(h, lm.lm.config.output_dim(), init);
  const auto examples = numericalize(model.vocab, data);
  const ClsBatch batch = make_cls_batches(examples, t.batch_size, shuffle.next()).front();
  Tape tape;
  auto fwd = run_lm_forward(tape, model.lm, batch.ids, LMState::zeros(model.lm.config, batch.ids.rows));
  Var states = concat_rows(fwd.top());
  auto pool = attention_pool_batch(tape, model.classifier->attention, states, batch.ids.rows, batch.lengths);
  const double cls =
      classification_loss(classifier_forward(tape, *model.classifier, pool.context, {Mode::Train, nullptr, false}),
                          batch.labels)
          .value()
          .item();
  std::vector<std::size_t> rows, next;
  for (std::size_t b = 0; b < batch.ids.rows; ++b)
    for (std::size_t t2 = 0; t2 + 1 < batch.lengths[b]; ++t2) {
      rows.push_back(t2 * batch.ids.rows + b);
      next.push_back(batch.ids(b, t2 + 1));
    }
  const double lm_term = lm_loss_rows(tape, model.lm, gather_rows(states, rows), next).value().item();
  const double expected = cls + 0.1 * lm_term;
  const double gap = std::abs(step0.loss - expected);
  checks.expect(seen && gap <= 1e-12, "combined loss gap " + fmt("%.3g", gap));
  return checks.outcome("lambda=0: " + std::to_string(identical) + "/10 steps bit-identical; lambda=0.1 step-0 loss " +
                        fmt("%.15g", step0.loss) + " vs cls + 0.1*lm = " + fmt("%.15g", expected) + " (gap " +
                        fmt("%.1e", gap) + ")");
}

// ---------------------------------------------------------------------------
// 6. DropConnect

Outcome dropconnect_contract() {
  Checks checks;
  Rng rng(606);
  LMConfig cfg;
  cfg.vocab_size = 20;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 10;
  cfg.num_layers = 3;
  LMParams lm = LMParams::init(cfg, rng);
  TokenGrid ids(3, 12);
  for (auto& id : ids.ids) id = static_cast<TokenId>(rng.below(20));

  const auto ones = sample_dropconnect(rng, lm, 1.0);
  Tape t1, t2;
  LMForwardOptions with;
  with.dropconnect = &ones;
  auto masked = run_lm_forward(t1, lm, ids, LMState::zeros(cfg, 3), with);
  auto plain = run_lm_forward(t2, lm, ids, LMState::zeros(cfg, 3));
  bool same = true;
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    for (std::size_t t = 0; t < 12; ++t) same = same && bit_identical(masked.states[l][t].value(), plain.states[l][t].value());
  checks.expect(same, "keep=1 forward differs");

  const auto half = sample_dropconnect(rng, lm, 0.5);
  std::map<std::pair<std::size_t, std::size_t>, std::array<Tensor, 4>> seen;
  LMForwardOptions probe;
  probe.dropconnect = &half;
  probe.probe = [&](std::size_t l, std::size_t t, const std::array<Var, 4>& U) {
    seen[{l, t}] = {U[0].value(), U[1].value(), U[2].value(), U[3].value()};
  };
  Tape t3;
  run_lm_forward(t3, lm, ids, LMState::zeros(cfg, 3), probe);
  std::size_t constant = 0;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    bool all = true;
    for (std::size_t t = 1; t < 12; ++t)
      for (std::size_t g = 0; g < 4; ++g) all = all && bit_identical(seen[{l, t}][g], seen[{l, 0}][g]);
    constant += all;
  }
  checks.expect(seen.size() == 36 && constant == cfg.num_layers, "mask varied within a sequence");

  const Shape big{1150, 1150};
  const auto mask = sample_dropconnect(rng, std::span<const Shape>(&big, 1), 0.5)[0];
  double kept = 0.0;
  for (double v : mask.values()) kept += v;
  const double fraction = kept / static_cast<double>(mask.size());
  checks.expect(std::abs(fraction - 0.5) <= 0.01, "ones fraction " + fmt("%.5f", fraction));
  return checks.outcome(std::string("keep=1 bit-identical: ") + (same ? "yes" : "no") + "; one mask per sequence in " +
                        std::to_string(constant) + "/3 layers over 12 steps; 1150x1150 keep=0.5 ones fraction " +
                        fmt("%.5f", fraction));
}

// ---------------------------------------------------------------------------
// 7. transfer benefit

/// Four classes with ten topic words each. In the unlabeled corpus every
/// topic word of class c is followed by the marker word m<c>, so a language
/// model learns which topic words belong together. Labeled training text
/// uses topics 0-4 only and test text uses topics 5-9, so only a model that
/// carries the corpus structure can generalize.
struct TransferTask {
  std::vector<std::string> corpus;
  std::vector<LabeledText> train;
  std::vector<LabeledText> test;
};

TransferTask make_transfer_task(std::uint64_t seed) {
  Rng rng(seed);
  const auto filler = numbered("f", 20);
  auto topic = [](std::size_t c, std::size_t k) { return "t" + std::to_string(c) + "x" + std::to_string(k); };
  TransferTask task;
  for (int i = 0; i < 1600; ++i) {
    const std::size_t c = rng.below(4), k = rng.below(10);
    task.corpus.push_back(words(rng, filler, 1, 3) + " " + topic(c, k) + " m" + std::to_string(c) + " " +
                          words(rng, filler, 1, 3));
  }
  std::string train_csv, test_csv;
  for (std::size_t i = 0; i < 32; ++i) {
    const std::size_t c = i % 4;
    train_csv += csv_line(c, words(rng, filler, 1, 3) + " " + topic(c, rng.below(5)) + " " + words(rng, filler, 1, 3),
                          words(rng, filler, 1, 3));
  }
  for (std::size_t i = 0; i < 80; ++i) {
    const std::size_t c = i % 4;
    test_csv += csv_line(c, words(rng, filler, 1, 3) + " " + topic(c, 5 + rng.below(5)) + " " +
                                words(rng, filler, 1, 3),
                         words(rng, filler, 1, 3));
  }
  task.train = write_and_read_csv("transfer_train.csv", train_csv, 4);
  task.test = write_and_read_csv("transfer_test.csv", test_csv, 4);
  return task;
}

Outcome transfer_benefit() {
  Checks checks;
  std::size_t wins = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TransferTask task = make_transfer_task(1000 + seed);
    LMConfig arch;
    arch.embed_dim = 16;
    arch.hidden_dim = 32;
    arch.num_layers = 1;
    TrainConfig pre;
    pre.seed = seed;
    pre.epochs = 3;
    pre.bptt_len = 20;
    pre.batch_size = 16;
    pre.min_freq = 1;
    pre.learning_rate = 1e-2;
    pre.dropconnect_keep = 0.8;
    LMTrainOptions lo;
    lo.arch = arch;
    const ModelCheckpoint pretrained = train_lm(pre, task.corpus, lo).checkpoint;
    const ModelCheckpoint scratch = initial_lm_checkpoint(pretrained.lm.config, pretrained.vocab, seed);

    TrainConfig ft;
    ft.seed = seed;
    ft.epochs = 15;
    ft.batch_size = 8;
    ft.learning_rate = 3e-3;
    ft.dropconnect_keep = 0.8;
    HeadConfig h;
    h.num_classes = 4;
    h.hidden_width = 16;
    h.dropout_keep = 0.8;
    ModelCheckpoint a = train_classifier(ft, h, task.train, pretrained).checkpoint;
    ModelCheckpoint b = train_classifier(ft, h, task.train, scratch).checkpoint;
    const double acc_pre = 1.0 - evaluate_classifier(a, task.test).error_rate.value();
    const double acc_scratch = 1.0 - evaluate_classifier(b, task.test).error_rate.value();
    wins += acc_pre >= acc_scratch;
    per_seed += (seed ? " " : "") + fmt("%.2f", acc_pre) + "/" + fmt("%.2f", acc_scratch);
  }
  checks.expect(wins >= 8, "pretrained >= scratch in only " + std::to_string(wins) + "/10 seeds");
  return checks.outcome("pretrained >= scratch test accuracy in " + std::to_string(wins) +
                        "/10 seeds (need 8); pretrained/scratch per seed: " + per_seed);
}

// ---------------------------------------------------------------------------
// 8. determinism and persistence

Outcome determinism_and_persistence() {
  Checks checks;
  Rng rng(808);
  const auto filler = numbered("w", 12);
  std::vector<std::string> corpus;
  for (int i = 0; i < 50; ++i) corpus.push_back(words(rng, filler, 3, 8));
  std::string csv;
  for (std::size_t i = 0; i < 16; ++i) csv += csv_line(i % 2, words(rng, filler, 2, 5), words(rng, filler, 1, 4));
  const fs::path corpus_path = scratch_dir() / "det_corpus.txt";
  {
    std::ofstream out(corpus_path);
    for (const auto& d : corpus) out << d << '\n';
  }
  const auto data = write_and_read_csv("det.csv", csv, 2);

  TrainConfig t;
  t.seed = 7;
  t.epochs = 2;
  t.bptt_len = 6;
  t.batch_size = 4;
  t.min_freq = 1;
  LMConfig arch;
  arch.embed_dim = 6;
  arch.hidden_dim = 8;
  arch.num_layers = 2;
  LMTrainOptions lo;
  lo.arch = arch;
  const std::string lm1 = checkpoint_serialize(train_lm(t, corpus, lo).checkpoint);
  const std::string lm2 = checkpoint_serialize(train_lm(t, corpus, lo).checkpoint);
  checks.expect(lm1 == lm2, "train_lm not byte-identical");
  const ModelCheckpoint lm = checkpoint_deserialize(lm1);
  HeadConfig h;
  h.num_classes = 2;
  h.hidden_width = 4;
  const std::string c1 = checkpoint_serialize(train_multitask(t, h, data, lm).checkpoint);
  const std::string c2 = checkpoint_serialize(train_multitask(t, h, data, lm).checkpoint);
  checks.expect(c1 == c2, "train_multitask not byte-identical");
  TrainConfig other = t;
  other.seed = 8;
  checks.expect(checkpoint_serialize(train_lm(other, corpus, lo).checkpoint) != lm1, "seed had no effect");

  // the command line obeys the same contract
  const fs::path cfg_path = scratch_dir() / "det.cfg";
  std::ofstream(cfg_path) << "[model]\nembed-dim = 6\nhidden-dim = 8\nlayers = 2\n[train]\nmin-freq = 1\n";
  auto cli_pretrain = [&](const std::string& name) {
    std::ostringstream out, err;
    const fs::path p = scratch_dir() / name;
    const int code = run_cli({"pretrain", "--config", cfg_path.string(), "--corpus", corpus_path.string(), "--out",
                              p.string(), "--seed", "7",
                              "--epochs", "1", "--bptt", "6", "--batch-size", "4"},
                             out, err);
    checks.expect(code == 0, "cli pretrain failed: " + err.str());
    return code == 0 ? read_file(p) : std::string();
  };
  const std::string f1 = cli_pretrain("det_a.lmas"), f2 = cli_pretrain("det_b.lmas");
  checks.expect(!f1.empty() && f1 == f2, "cli checkpoints differ");

  // save / load / save
  const fs::path p = scratch_dir() / "det_round.lmas";
  ModelCheckpoint loaded = checkpoint_deserialize(c1);
  checkpoint_save(loaded, p);
  checks.expect(read_file(p) == c1, "save/load/save changed bytes");
  checks.expect(checkpoint_serialize(checkpoint_load(p)) == c1, "reload changed bytes");

  // corruption
  std::size_t rejected = 0, probes = 0;
  for (std::size_t pos = 8; pos < c1.size(); pos += std::max<std::size_t>(1, c1.size() / 200)) {
    std::string bad = c1;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x5a);
    ++probes;
    rejected += category_of([&] { checkpoint_deserialize(bad); }) == ErrorCategory::Integrity;
  }
  checks.expect(rejected == probes, "flipped bytes accepted or misreported");
  checks.expect(category_of([&] { checkpoint_deserialize(c1.substr(0, c1.size() / 2)); }) == ErrorCategory::Integrity,
                "truncation");
  std::string magic = c1;
  magic[0] = 'X';
  checks.expect(category_of([&] { checkpoint_deserialize(magic); }) == ErrorCategory::Format, "bad magic");
  std::string version = c1;
  version[4] = 9;
  checks.expect(category_of([&] { checkpoint_deserialize(version); }) == ErrorCategory::Version, "version");
  return checks.outcome("same seed byte-identical (lm, multitask, cli); save/load/save identical; " +
                        std::to_string(rejected) + "/" + std::to_string(probes) +
                        " flipped bytes rejected as integrity errors; truncation, magic and version rejected");
}

// ---------------------------------------------------------------------------
// 9. heatmap fidelity

Outcome heatmap_fidelity() {
  Checks checks;
  Rng rng(909);
  const auto filler = numbered("w", 10);
  std::string csv;
  for (std::size_t i = 0; i < 20; ++i) csv += csv_line(i % 2, words(rng, filler, 1, 6), words(rng, filler, 0, 5));
  const auto data = write_and_read_csv("heat.csv", csv, 2);
  std::vector<std::vector<std::string>> docs;
  for (const auto& d : data) docs.push_back(d.tokens);
  LMConfig arch;
  arch.embed_dim = 6;
  arch.hidden_dim = 8;
  arch.num_layers = 2;
  TrainConfig t;
  t.seed = 9;
  t.epochs = 2;
  t.batch_size = 4;
  HeadConfig h;
  h.num_classes = 2;
  h.hidden_width = 4;
  ModelCheckpoint model =
      train_classifier(t, h, data, initial_lm_checkpoint(arch, build_vocab(docs, 1), 9)).checkpoint;

  auto examples = data;
  examples.push_back({1, {"<xbos>"}});
  const fs::path out = scratch_dir() / "heat.html";
  emit_attention_heatmap(model, examples, out);
  const auto emitted = parse_heatmap_alphas(read_file(out));
  checks.expect(emitted.size() == examples.size(), "example count");

  double worst = 0.0;
  for (std::size_t i = 0; i < std::min(emitted.size(), examples.size()); ++i) {
    const auto ids = model.vocab.numericalize(examples[i].tokens);
    Tape tape;
    auto fwd = run_lm_forward(tape, model.lm, TokenGrid::single(ids), LMState::zeros(model.lm.config, 1));
    auto pool = self_attention_pool(tape, model.classifier->attention, concat_rows(fwd.top()),
                                    model.classifier->config.pool_hidden);
    const Tensor alpha = pool.alpha.value();
    checks.expect(emitted[i].size() == alpha.size(), "token count");
    for (std::size_t k = 0; k < std::min(alpha.size(), emitted[i].size()); ++k)
      worst = std::max(worst, std::abs(alpha[k] - emitted[i][k]));
  }
  checks.expect(worst <= 1e-6, "alpha gap " + fmt("%.3g", worst));
  const double single = emitted.empty() || emitted.back().empty() ? -1.0 : emitted.back()[0];
  checks.expect(single == 1.0, "single-token alpha " + fmt("%.17g", single));
  return checks.outcome(std::to_string(examples.size()) + " examples, max |emitted - direct| " + fmt("%.2e", worst) +
                        " (limit 1e-6); single-token alpha " + fmt("%.17g", single));
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;  // 0 when the criterion has no runtime limit
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient oracle suite", 60, gradient_oracle_suite},
      {2, "normalization suite", 0, normalization_suite},
      {3, "LM sanity", 300, lm_sanity},
      {4, "classifier overfit", 300, classifier_overfit},
      {5, "multi-task reduction", 0, multitask_reduction},
      {6, "DropConnect contract", 0, dropconnect_contract},
      {7, "transfer benefit", 900, transfer_benefit},
      {8, "determinism and persistence", 0, determinism_and_persistence},
      {9, "heatmap fidelity", 0, heatmap_fidelity},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string timing = fmt("%.1f s", secs);
    if (c.limit_seconds > 0) {
      timing += fmt(", limit %.0f s", c.limit_seconds);
      if (secs >= c.limit_seconds) {
        o.pass = false;
        o.detail += "; over the runtime limit";
      }
    }
    std::printf("%s %d %s: %s (%s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
