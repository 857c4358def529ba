#include "lmas/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "lmas/error.hpp"
#include "lmas/io.hpp"

namespace lmas {

namespace {

using Setter = std::function<void(RunConfig&, std::string_view, const std::string& where)>;

[[noreturn]] void bad_value(const std::string& where, const std::string& key, std::string_view value,
                            const std::string& expected) {
  fail(ErrorCategory::Config,
       where + ": invalid value '" + std::string(value) + "' for key '" + key + "' (expected " + expected + ")");
}

std::size_t parse_count(const std::string& where, const std::string& key, std::string_view v, std::size_t min) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || out < min) {
    bad_value(where, key, v, "an integer >= " + std::to_string(min));
  }
  return out;
}

std::uint64_t parse_u64(const std::string& where, const std::string& key, std::string_view v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(where, key, v, "a non-negative integer");
  return out;
}

double parse_real(const std::string& where, const std::string& key, std::string_view v, double lo, double hi,
                   bool lo_open = false) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  const bool in_range = lo_open ? out > lo : out >= lo;
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out) || !in_range || out > hi) {
    auto num = [](double x) {
      std::ostringstream os;
      os << x;
      return os.str();
    };
    std::string range = (lo_open ? "(" : "[") + num(lo) + ", " + (std::isinf(hi) ? std::string("inf)") : num(hi) + "]");
    bad_value(where, key, v, "a number in " + range);
  }
  return out;
}

bool parse_bool(const std::string& where, const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(where, key, v, "true or false");
}

constexpr double kInf = INFINITY;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["seed"] = [](RunConfig& c, std::string_view v, const std::string& w) { c.train.seed = parse_u64(w, "seed", v); };
    t["lambda"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.lambda = parse_real(w, "lambda", v, 0.0, kInf);
    };
    t["epochs"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.epochs = parse_count(w, "epochs", v, 0);
    };
    t["lr"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.learning_rate = parse_real(w, "lr", v, 0.0, kInf);
    };
    t["bptt"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.bptt_len = parse_count(w, "bptt", v, 1);
    };
    t["batch-size"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.batch_size = parse_count(w, "batch-size", v, 1);
    };
    t["optimizer"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      if (v == "adam") c.train.optimizer = OptimizerKind::Adam;
      else if (v == "sgd-momentum") c.train.optimizer = OptimizerKind::SgdMomentum;
      else bad_value(w, "optimizer", v, "adam or sgd-momentum");
    };
    t["grad-clip"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.grad_clip = parse_real(w, "grad-clip", v, 0.0, kInf, true);
    };
    t["dropconnect-keep"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.dropconnect_keep = parse_real(w, "dropconnect-keep", v, 0.0, 1.0);
    };
    t["min-freq"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.min_freq = parse_count(w, "min-freq", v, 1);
    };
    t["max-vocab"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.max_vocab = parse_count(w, "max-vocab", v, kNumSpecials + 1);
    };
    t["reinit-lm-decoder"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.train.reinit_lm_decoder = parse_bool(w, "reinit-lm-decoder", v);
    };

    t["model.arch"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      if (v == "awd-lstm") c.arch = Arch::AwdLstm;
      else if (v == "lstmp") c.arch = Arch::Lstmp;
      else bad_value(w, "model.arch", v, "awd-lstm or lstmp");
      c.arch_set = true;
    };
    t["model.embed-dim"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.embed_dim = parse_count(w, "model.embed-dim", v, 1);
      c.arch_set = true;
    };
    t["model.hidden-dim"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.hidden_dim = parse_count(w, "model.hidden-dim", v, 1);
      c.arch_set = true;
    };
    t["model.layers"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.num_layers = parse_count(w, "model.layers", v, 1);
      c.arch_set = true;
    };
    t["model.projection-dim"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.projection_dim = parse_count(w, "model.projection-dim", v, 1);
      c.arch_set = true;
    };

    t["head.classes"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.head.num_classes = parse_count(w, "head.classes", v, 2);
    };
    t["head.attention-dim"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.head.attention_dim = parse_count(w, "head.attention-dim", v, 0);
    };
    t["head.hidden-width"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.head.hidden_width = parse_count(w, "head.hidden-width", v, 1);
    };
    t["head.dropout-keep"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.head.dropout_keep = parse_real(w, "head.dropout-keep", v, 0.0, 1.0, true);
    };
    t["head.pool-hidden"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.head.pool_hidden = parse_bool(w, "head.pool-hidden", v);
    };

    auto path_key = [&t](const std::string& key, std::optional<std::filesystem::path> RunPaths::* member) {
      t["paths." + key] = [key, member](RunConfig& c, std::string_view v, const std::string& w) {
        if (v.empty()) bad_value(w, "paths." + key, v, "a path");
        c.paths.*member = std::filesystem::path(std::string(v));
      };
    };
    path_key("corpus", &RunPaths::corpus);
    path_key("valid", &RunPaths::validation);
    path_key("dataset", &RunPaths::dataset);
    path_key("test", &RunPaths::test);
    path_key("checkpoint", &RunPaths::checkpoint_in);
    path_key("out", &RunPaths::checkpoint_out);
    path_key("vocab", &RunPaths::vocab);
    path_key("report", &RunPaths::report);

    t["evaluate.task"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      if (v != "lm" && v != "classification") bad_value(w, "evaluate.task", v, "lm or classification");
      c.task = std::string(v);
    };
    t["heatmap.samples"] = [](RunConfig& c, std::string_view v, const std::string& w) {
      c.heatmap_samples = parse_count(w, "heatmap.samples", v, 1);
    };
    return t;
  }();
  return table;
}

std::string_view trim(std::string_view s) {
  const auto space = [](char ch) { return ch == ' ' || ch == '\t' || ch == '\r'; };
  while (!s.empty() && space(s.front())) s.remove_prefix(1);
  while (!s.empty() && space(s.back())) s.remove_suffix(1);
  return s;
}

const std::set<std::string> kSections{"train", "model", "head", "paths", "evaluate", "heatmap"};

}  // namespace

LMConfig RunConfig::lm_config() const {
  LMConfig c = arch == Arch::Lstmp ? LMConfig::lstmp(0) : LMConfig::awd_lstm(0);
  if (embed_dim) c.embed_dim = *embed_dim;
  if (hidden_dim) c.hidden_dim = *hidden_dim;
  if (num_layers) c.num_layers = *num_layers;
  if (projection_dim) c.projection_dim = *projection_dim;
  c.dropconnect_keep = train.dropconnect_keep;
  return c;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& [k, _] : setters()) out.push_back(k);
    return out;
  }();
  return keys;
}

void apply_setting(RunConfig& config, const std::string& key, std::string_view value, const std::string& where) {
  auto it = setters().find(key);
  if (it == setters().end()) fail(ErrorCategory::Config, where + ": unknown key '" + key + "'");
  it->second(config, trim(value), where);
}

void parse_config_text(RunConfig& config, std::string_view text, const std::string& source) {
  std::string section;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorCategory::Config, where + ": malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!kSections.count(section)) fail(ErrorCategory::Config, where + ": unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(ErrorCategory::Config, where + ": expected 'key = value'");
    const std::string name(trim(line.substr(0, eq)));
    if (name.empty()) fail(ErrorCategory::Config, where + ": missing key before '='");
    const std::string key = section.empty() || section == "train" ? name : section + "." + name;
    apply_setting(config, key, line.substr(eq + 1), where);
    if (auto [it, fresh] = seen.emplace(key, line_no); !fresh) {
      config.warnings.push_back(where + ": key '" + key + "' repeats line " + std::to_string(it->second) +
                                "; the later value wins");
      it->second = line_no;
    }
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  RunConfig config;
  parse_config_text(config, read_file(path), path.string());
  return config;
}

}  // namespace lmas
