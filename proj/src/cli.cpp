#include "lmas/cli.hpp"

#include <map>
#include <memory>

#include <CLI11.hpp>

#include "lmas/checkpoint.hpp"
#include "lmas/config.hpp"
#include "lmas/heatmap.hpp"
#include "lmas/text.hpp"
#include "lmas/train.hpp"

namespace lmas {

int exit_code(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::Usage: return 2;
    case ErrorCategory::IO: return 3;
    case ErrorCategory::Config: return 4;
    case ErrorCategory::Checkpoint:
    case ErrorCategory::Format:
    case ErrorCategory::Integrity:
    case ErrorCategory::Version: return 5;
    case ErrorCategory::Data:
    case ErrorCategory::Vocabulary: return 6;
    default: return 1;
  }
}

namespace {

struct FlagSpec {
  const char* flag;
  const char* key;  // config key the flag overrides; empty for --config
  const char* help;
};

constexpr FlagSpec kOverrides[] = {
    {"--seed", "seed", "random seed"},
    {"--lambda", "lambda", "weight of the LM loss in multi-task training"},
    {"--epochs", "epochs", "training epochs"},
    {"--lr", "lr", "learning rate (0 freezes the model)"},
    {"--bptt", "bptt", "BPTT window length"},
    {"--batch-size", "batch-size", "batch size"},
};

struct Command {
  const char* name;
  const char* help;
  std::vector<FlagSpec> flags;
  bool overrides;
};

const std::vector<Command>& commands() {
  static const std::vector<Command> list = {
      {"pretrain", "pre-train a language model on a plain-text corpus",
       {{"--corpus", "paths.corpus", "training corpus, one document per line"},
        {"--valid", "paths.valid", "validation corpus"},
        {"--out", "paths.out", "checkpoint to write"},
        {"--vocab", "paths.vocab", "also write the vocabulary here"},
        {"--report", "paths.report", "append metrics records here"},
        {"--arch", "model.arch", "awd-lstm or lstmp"}},
       true},
      {"finetune-lm", "fine-tune a pre-trained language model on target-task text",
       {{"--checkpoint", "paths.checkpoint", "pre-trained checkpoint"},
        {"--corpus", "paths.corpus", "target-task text, one document per line"},
        {"--valid", "paths.valid", "validation corpus"},
        {"--out", "paths.out", "checkpoint to write"},
        {"--report", "paths.report", "append metrics records here"}},
       true},
      {"train-classifier", "train the attention classifier on top of a language model",
       {{"--checkpoint", "paths.checkpoint", "pretrained or lm-finetuned checkpoint"},
        {"--dataset", "paths.dataset", "labeled CSV (label, title, description)"},
        {"--test", "paths.test", "labeled CSV scored after every epoch"},
        {"--out", "paths.out", "checkpoint to write"},
        {"--report", "paths.report", "append metrics records here"},
        {"--classes", "head.classes", "number of classes"}},
       true},
      {"train-multitask", "train classifier and LM objectives jointly from a pre-trained LM",
       {{"--checkpoint", "paths.checkpoint", "pretrained checkpoint"},
        {"--dataset", "paths.dataset", "labeled CSV (label, title, description)"},
        {"--test", "paths.test", "labeled CSV scored after every epoch"},
        {"--out", "paths.out", "checkpoint to write"},
        {"--report", "paths.report", "append metrics records here"},
        {"--classes", "head.classes", "number of classes"}},
       true},
      {"evaluate", "report perplexity or error rate of a checkpoint",
       {{"--checkpoint", "paths.checkpoint", "checkpoint to score"},
        {"--task", "evaluate.task", "lm or classification"},
        {"--corpus", "paths.corpus", "text for the lm task"},
        {"--dataset", "paths.dataset", "labeled CSV for the classification task"},
        {"--report", "paths.report", "append the metrics record here"}},
       false},
      {"heatmap", "export attention weights as an HTML heatmap",
       {{"--checkpoint", "paths.checkpoint", "classifier or multitask checkpoint"},
        {"--dataset", "paths.dataset", "labeled CSV"},
        {"--out", "paths.out", "HTML file to write"},
        {"--samples", "heatmap.samples", "number of leading examples to render"}},
       false},
  };
  return list;
}

template <class T>
const T& require(const std::optional<T>& value, const std::string& flag, const std::string& command) {
  if (!value) fail(ErrorCategory::Usage, command + " requires " + flag);
  return *value;
}

void report(const MetricsLog& log, const RunConfig& cfg, std::ostream& out) {
  for (const auto& r : log.records) out << r.to_line() << '\n';
  if (cfg.paths.report) log.append_to(*cfg.paths.report);
}

std::vector<LabeledText> read_dataset(const std::filesystem::path& path, std::size_t classes) {
  CsvSchema schema = CsvSchema::ag_news();
  schema.num_classes = classes;
  return read_labeled_csv(path, schema);
}

void run_pretrain(const RunConfig& cfg, std::ostream& out) {
  const auto& corpus_path = require(cfg.paths.corpus, "--corpus", cfg.command);
  const auto& out_path = require(cfg.paths.checkpoint_out, "--out", cfg.command);
  const auto corpus = read_text_corpus(corpus_path);
  std::vector<std::string> valid;
  if (cfg.paths.validation) valid = read_text_corpus(*cfg.paths.validation);
  LMTrainOptions opts;
  opts.arch = cfg.lm_config();
  opts.validation = valid;
  TrainResult result = train_lm(cfg.train, corpus, opts);
  checkpoint_save(result.checkpoint, out_path);
  if (cfg.paths.vocab) result.checkpoint.vocab.save(*cfg.paths.vocab);
  report(result.log, cfg, out);
}

void run_finetune_lm(const RunConfig& cfg, std::ostream& out) {
  const auto& in_path = require(cfg.paths.checkpoint_in, "--checkpoint", cfg.command);
  const auto& corpus_path = require(cfg.paths.corpus, "--corpus", cfg.command);
  const auto& out_path = require(cfg.paths.checkpoint_out, "--out", cfg.command);
  const ModelCheckpoint init = checkpoint_load(in_path);
  const auto corpus = read_text_corpus(corpus_path);
  std::vector<std::string> valid;
  if (cfg.paths.validation) valid = read_text_corpus(*cfg.paths.validation);
  LMTrainOptions opts;
  opts.init = &init;
  if (cfg.arch_set) {
    LMConfig arch = cfg.lm_config();
    arch.vocab_size = init.lm.config.vocab_size;
    opts.arch = arch;
  }
  opts.validation = valid;
  TrainResult result = train_lm(cfg.train, corpus, opts);
  checkpoint_save(result.checkpoint, out_path);
  report(result.log, cfg, out);
}

void run_fine_tune(const RunConfig& cfg, std::ostream& out, bool multitask) {
  const auto& in_path = require(cfg.paths.checkpoint_in, "--checkpoint", cfg.command);
  const auto& data_path = require(cfg.paths.dataset, "--dataset", cfg.command);
  const auto& out_path = require(cfg.paths.checkpoint_out, "--out", cfg.command);
  const ModelCheckpoint lm = checkpoint_load(in_path);
  const auto data = read_dataset(data_path, cfg.head.num_classes);
  std::vector<LabeledText> test;
  if (cfg.paths.test) test = read_dataset(*cfg.paths.test, cfg.head.num_classes);
  FineTuneOptions opts;
  opts.test = test;
  TrainResult result = multitask ? train_multitask(cfg.train, cfg.head, data, lm, opts)
                                 : train_classifier(cfg.train, cfg.head, data, lm, opts);
  checkpoint_save(result.checkpoint, out_path);
  report(result.log, cfg, out);
}

void run_evaluate(const RunConfig& cfg, std::ostream& out) {
  const auto& in_path = require(cfg.paths.checkpoint_in, "--checkpoint", cfg.command);
  ModelCheckpoint model = checkpoint_load(in_path);
  MetricsLog log;
  if (cfg.task == "lm") {
    const auto docs = read_text_corpus(require(cfg.paths.corpus, "--corpus", cfg.command + " --task lm"));
    log.add(evaluate_lm(model, docs));
  } else {
    const auto& data_path = require(cfg.paths.dataset, "--dataset", cfg.command + " --task classification");
    if (!model.classifier) {
      fail(ErrorCategory::Checkpoint,
           "classification needs a classifier checkpoint, got stage " + stage_name(model.stage));
    }
    const auto data = read_dataset(data_path, model.classifier->config.num_classes);
    log.add(evaluate_classifier(model, data));
  }
  report(log, cfg, out);
}

void run_heatmap(const RunConfig& cfg, std::ostream& out) {
  const auto& in_path = require(cfg.paths.checkpoint_in, "--checkpoint", cfg.command);
  const auto& data_path = require(cfg.paths.dataset, "--dataset", cfg.command);
  const auto& out_path = require(cfg.paths.checkpoint_out, "--out", cfg.command);
  ModelCheckpoint model = checkpoint_load(in_path);
  if (!model.classifier) {
    fail(ErrorCategory::Checkpoint, "attention heatmaps need a classifier checkpoint, got stage " +
                                        stage_name(model.stage));
  }
  auto data = read_dataset(data_path, model.classifier->config.num_classes);
  if (data.size() > cfg.heatmap_samples) data.resize(cfg.heatmap_samples);
  emit_attention_heatmap(model, data, out_path);
  out << "wrote " << data.size() << " examples to " << out_path.string() << '\n';
}

std::string one_line(std::string text) {
  for (char& ch : text) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return text;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Language-model transfer learning for text classification", "lmas"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // One string slot per (command, flag); filled only when the flag is given.
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::map<std::string, CLI::Option*>> options;
  std::map<std::string, std::string> config_path;
  std::map<std::string, CLI::App*> subs;
  for (const Command& cmd : commands()) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    subs[cmd.name] = sub;
    sub->add_option("--config", config_path[cmd.name], "config file (key = value)");
    std::vector<FlagSpec> flags = cmd.flags;
    if (cmd.overrides) flags.insert(flags.end(), std::begin(kOverrides), std::end(kOverrides));
    for (const FlagSpec& f : flags) {
      options[cmd.name][f.key] = sub->add_option(f.flag, values[cmd.name][f.key], f.help);
    }
  }

  std::vector<const char*> argv{"lmas"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: usage: " << one_line(e.what()) << '\n';
    return exit_code(ErrorCategory::Usage);
  }

  std::string command;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) command = name;
  }

  try {
    RunConfig cfg;
    if (!config_path[command].empty()) cfg = load_config(config_path[command]);
    cfg.command = command;
    for (const auto& [key, opt] : options[command]) {
      if (opt->count() > 0) apply_setting(cfg, key, values[command][key], "flag " + opt->get_name());
    }
    for (const auto& w : cfg.warnings) err << "warning: " << one_line(w) << '\n';
    cfg.train.validate();
    cfg.head.validate();

    if (command == "pretrain") run_pretrain(cfg, out);
    else if (command == "finetune-lm") run_finetune_lm(cfg, out);
    else if (command == "train-classifier") run_fine_tune(cfg, out, false);
    else if (command == "train-multitask") run_fine_tune(cfg, out, true);
    else if (command == "evaluate") run_evaluate(cfg, out);
    else run_heatmap(cfg, out);
    return 0;
  } catch (const Error& e) {
    err << "error: " << category_name(e.category()) << ": " << one_line(e.what()) << '\n';
    return exit_code(e.category());
  } catch (const std::bad_alloc&) {
    err << "error: resource: out of memory\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace lmas
