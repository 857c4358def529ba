#include "lmas/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <map>
#include <set>
#include <sstream>

#include "lmas/error.hpp"
#include "lmas/io.hpp"

namespace lmas {

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::Pretrained: return "pretrained";
    case Stage::LmFinetuned: return "lm-finetuned";
    case Stage::Classifier: return "classifier";
    case Stage::Multitask: return "multitask";
  }
  return "unknown";
}

Stage parse_stage(const std::string& text) {
  for (Stage s : {Stage::Pretrained, Stage::LmFinetuned, Stage::Classifier, Stage::Multitask}) {
    if (stage_name(s) == text) return s;
  }
  fail(ErrorCategory::Format, "unknown pipeline stage '" + text + "'");
}

ParameterList ModelCheckpoint::parameters() {
  ParameterList out = lm.parameters();
  if (classifier) {
    for (Parameter* p : classifier->parameters()) out.push_back(p);
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'L', 'M', 'A', 'S'};
constexpr const char* kSections[3] = {"CONF", "VOCB", "TENS"};

// ---------------------------------------------------------------------------
// Little-endian encoding

class Writer {
 public:
  void bytes(std::string_view b) { out_.append(b); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}

  std::size_t remaining() const { return data_.size() - pos_; }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) fail(ErrorCategory::Integrity, "checkpoint " + context_ + " is truncated");
  }

  std::string_view data_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// Config text

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string config_text(const ModelCheckpoint& c) {
  std::map<std::string, std::string> kv;
  const LMConfig& lm = c.lm.config;
  kv["lm.arch"] = arch_name(lm.arch);
  kv["lm.vocab_size"] = std::to_string(lm.vocab_size);
  kv["lm.embed_dim"] = std::to_string(lm.embed_dim);
  kv["lm.hidden_dim"] = std::to_string(lm.hidden_dim);
  kv["lm.num_layers"] = std::to_string(lm.num_layers);
  if (lm.projection_dim) kv["lm.projection_dim"] = std::to_string(*lm.projection_dim);
  kv["lm.dropconnect_keep"] = format_double(lm.dropconnect_keep);
  kv["lm.forget_bias"] = format_double(lm.forget_bias);
  kv["lm.embedding_keep"] = format_double(lm.embedding_keep);
  kv["lm.input_keep"] = format_double(lm.input_keep);
  kv["lm.output_keep"] = format_double(lm.output_keep);
  kv["meta.stage"] = stage_name(c.stage);
  kv["meta.step"] = std::to_string(c.step);
  kv["meta.seed"] = std::to_string(c.seed);
  kv["head.present"] = c.classifier ? "1" : "0";
  if (c.classifier) {
    const HeadConfig& h = c.classifier->config;
    kv["head.state_dim"] = std::to_string(c.classifier->state_dim);
    kv["head.num_classes"] = std::to_string(h.num_classes);
    kv["head.attention_dim"] = std::to_string(h.attention_dim);
    kv["head.hidden_width"] = std::to_string(h.hidden_width);
    kv["head.dropout_keep"] = format_double(h.dropout_keep);
    kv["head.pool_hidden"] = h.pool_hidden ? "1" : "0";
    kv["head.bn_eps"] = format_double(h.bn_eps);
    kv["head.bn_momentum"] = format_double(h.bn_momentum);
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

class ConfigView {
 public:
  explicit ConfigView(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) fail(ErrorCategory::Format, "checkpoint config line '" + line + "' is malformed");
      values_[line.substr(0, eq)] = line.substr(eq + 3);
    }
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) fail(ErrorCategory::Format, "checkpoint config lacks '" + key + "'");
    return it->second;
  }
  std::uint64_t integer(const std::string& key) const {
    const std::string& v = text(key);
    try {
      std::size_t used = 0;
      auto out = std::stoull(v, &used);
      if (used == v.size()) return out;
    } catch (const std::exception&) {
    }
    fail(ErrorCategory::Format, "checkpoint config '" + key + "' is not an integer");
  }
  double real(const std::string& key) const {
    const std::string& v = text(key);
    try {
      std::size_t used = 0;
      double out = std::stod(v, &used);
      if (used == v.size()) return out;
    } catch (const std::exception&) {
    }
    fail(ErrorCategory::Format, "checkpoint config '" + key + "' is not a number");
  }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Named tensors

std::vector<std::pair<std::string, Tensor*>> named_tensors(ModelCheckpoint& c) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (Parameter* p : c.parameters()) out.emplace_back(p->name, &p->value);
  if (c.classifier) {
    for (auto& b : c.classifier->buffers()) out.push_back(b);
  }
  return out;
}

}  // namespace

std::string checkpoint_serialize(const ModelCheckpoint& checkpoint) {
  ModelCheckpoint copy = checkpoint;
  Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(ModelCheckpoint::kFormatVersion);

  auto section = [&](const char* tag, const std::string& payload) {
    w.bytes(std::string_view(tag, 4));
    w.u64(payload.size());
    w.bytes(payload);
  };

  section(kSections[0], config_text(copy));

  std::string vocab;
  for (const auto& t : copy.vocab.tokens()) vocab += t + "\n";
  section(kSections[1], vocab);

  Writer tens;
  auto tensors = named_tensors(copy);
  tens.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    tens.u32(static_cast<std::uint32_t>(name.size()));
    tens.bytes(name);
    tens.u32(static_cast<std::uint32_t>(tensor->rank()));
    for (std::size_t d : tensor->shape()) tens.u64(d);
    for (double v : tensor->values()) tens.f64(v);
  }
  section(kSections[2], tens.str());

  const std::uint32_t crc = crc32_of(w.str());
  w.u32(crc);
  return std::move(w.str());
}

ModelCheckpoint checkpoint_deserialize(std::string_view bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCategory::Format, "not a checkpoint file (bad magic bytes)");
  }
  Reader header(bytes.substr(4, 4), "header");
  const std::uint32_t version = header.u32();
  if (version != ModelCheckpoint::kFormatVersion) {
    fail(ErrorCategory::Version, "unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                                     std::to_string(ModelCheckpoint::kFormatVersion) + ")");
  }

  // Frame the sections before trusting any content.
  std::string_view payloads[3];
  std::size_t pos = 8;
  for (int s = 0; s < 3; ++s) {
    const std::string name = kSections[s];
    if (bytes.size() - pos < 12) fail(ErrorCategory::Integrity, "checkpoint truncated: section " + name + " is missing");
    if (bytes.substr(pos, 4) != name) {
      fail(ErrorCategory::Integrity, "checkpoint corrupt: expected section " + name + " at offset " + std::to_string(pos));
    }
    Reader len(bytes.substr(pos + 4, 8), "section " + name);
    const std::uint64_t length = len.u64();
    pos += 12;
    if (length > bytes.size() - pos) {
      fail(ErrorCategory::Integrity, "checkpoint truncated: section " + name + " declares " + std::to_string(length) +
                                         " bytes but only " + std::to_string(bytes.size() - pos) + " remain");
    }
    payloads[s] = bytes.substr(pos, length);
    pos += length;
  }
  if (bytes.size() - pos < 4) fail(ErrorCategory::Integrity, "checkpoint truncated: checksum is missing");
  if (bytes.size() - pos > 4) fail(ErrorCategory::Integrity, "checkpoint has trailing bytes after the checksum");
  Reader tail(bytes.substr(pos), "checksum");
  if (tail.u32() != crc32_of(bytes.substr(0, pos))) fail(ErrorCategory::Integrity, "checkpoint checksum mismatch");

  ConfigView conf(payloads[0]);
  ModelCheckpoint c;
  LMConfig lm;
  lm.arch = parse_arch(conf.text("lm.arch"));
  lm.vocab_size = conf.integer("lm.vocab_size");
  lm.embed_dim = conf.integer("lm.embed_dim");
  lm.hidden_dim = conf.integer("lm.hidden_dim");
  lm.num_layers = conf.integer("lm.num_layers");
  if (conf.has("lm.projection_dim")) lm.projection_dim = conf.integer("lm.projection_dim");
  lm.dropconnect_keep = conf.real("lm.dropconnect_keep");
  lm.forget_bias = conf.real("lm.forget_bias");
  lm.embedding_keep = conf.real("lm.embedding_keep");
  lm.input_keep = conf.real("lm.input_keep");
  lm.output_keep = conf.real("lm.output_keep");
  c.stage = parse_stage(conf.text("meta.stage"));
  c.step = conf.integer("meta.step");
  c.seed = conf.integer("meta.seed");
  c.lm = LMParams::zeros(lm);
  if (conf.integer("head.present") == 1) {
    HeadConfig h;
    h.num_classes = conf.integer("head.num_classes");
    h.attention_dim = conf.integer("head.attention_dim");
    h.hidden_width = conf.integer("head.hidden_width");
    h.dropout_keep = conf.real("head.dropout_keep");
    h.pool_hidden = conf.integer("head.pool_hidden") == 1;
    h.bn_eps = conf.real("head.bn_eps");
    h.bn_momentum = conf.real("head.bn_momentum");
    Rng unused(0);
    c.classifier = AttentionClassifier::init(h, conf.integer("head.state_dim"), unused);
  }
  const bool wants_head = c.stage == Stage::Classifier || c.stage == Stage::Multitask;
  if (wants_head != c.classifier.has_value()) {
    fail(ErrorCategory::Integrity, "checkpoint stage " + stage_name(c.stage) +
                                       (wants_head ? " requires a classifier head" : " cannot carry a classifier head"));
  }

  std::vector<std::string> tokens;
  {
    std::string_view v = payloads[1];
    while (!v.empty()) {
      const auto nl = v.find('\n');
      if (nl == std::string_view::npos) fail(ErrorCategory::Integrity, "checkpoint vocabulary section is truncated");
      tokens.emplace_back(v.substr(0, nl));
      v.remove_prefix(nl + 1);
    }
  }
  c.vocab = Vocabulary(std::move(tokens));
  if (c.vocab.size() != lm.vocab_size) {
    fail(ErrorCategory::Integrity, "checkpoint vocabulary has " + std::to_string(c.vocab.size()) +
                                       " tokens, config declares " + std::to_string(lm.vocab_size));
  }

  std::map<std::string, Tensor*> expected;
  for (auto& [name, tensor] : named_tensors(c)) expected.emplace(name, tensor);
  std::set<std::string> seen;
  Reader tens(payloads[2], "tensor section");
  const std::uint32_t count = tens.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = tens.u32();
    const std::string name(tens.bytes(name_len));
    const std::uint32_t rank = tens.u32();
    if (rank == 0 || rank > 8) fail(ErrorCategory::Integrity, "tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) d = tens.u64();
    auto it = expected.find(name);
    if (it == expected.end()) fail(ErrorCategory::Integrity, "checkpoint holds unexpected tensor '" + name + "'");
    if (!seen.insert(name).second) fail(ErrorCategory::Integrity, "tensor '" + name + "' appears twice");
    if (it->second->shape() != shape) {
      fail(ErrorCategory::Integrity, "tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                                         shape_string(it->second->shape()));
    }
    for (double& v : it->second->values()) v = tens.f64();
  }
  if (tens.remaining() != 0) fail(ErrorCategory::Integrity, "tensor section has trailing bytes");
  for (const auto& [name, tensor] : expected) {
    if (!seen.count(name)) fail(ErrorCategory::Integrity, "checkpoint is missing tensor '" + name + "'");
  }
  for (Parameter* p : c.parameters()) p->zero_grad();
  return c;
}

void checkpoint_save(const ModelCheckpoint& checkpoint, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_serialize(checkpoint));
}

ModelCheckpoint checkpoint_load(const std::filesystem::path& path) { return checkpoint_deserialize(read_file(path)); }

}  // namespace lmas
