#include "lmas/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "lmas/error.hpp"
#include "lmas/rng.hpp"

namespace lmas {

std::string field_tag(std::size_t field_index) { return "<xfld " + std::to_string(field_index) + ">"; }

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      word.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

std::vector<std::string> tokenize_and_tag(std::string_view text, std::size_t field_index) {
  std::vector<std::string> out{std::string(kBos), field_tag(field_index)};
  auto words = tokenize(text);
  out.insert(out.end(), std::make_move_iterator(words.begin()), std::make_move_iterator(words.end()));
  return out;
}

std::vector<std::string> tag_document(std::span<const std::string> fields) {
  std::vector<std::string> out{std::string(kBos)};
  for (std::size_t k = 0; k < fields.size(); ++k) {
    out.push_back(field_tag(k + 1));
    auto words = tokenize(fields[k]);
    out.insert(out.end(), std::make_move_iterator(words.begin()), std::make_move_iterator(words.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary()
    : Vocabulary(std::vector<std::string>{std::string(kUnk), std::string(kPad), std::string(kBos), std::string(kField1)}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const std::string_view specials[kNumSpecials] = {kUnk, kPad, kBos, kField1};
  if (tokens_.size() < kNumSpecials) fail(ErrorCategory::Data, "vocabulary is missing its special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (tokens_[i] != specials[i]) {
      fail(ErrorCategory::Data, "vocabulary id " + std::to_string(i) + " must be " + std::string(specials[i]) +
                                    ", found '" + tokens_[i] + "'");
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      fail(ErrorCategory::Data, "vocabulary token '" + tokens_[i] + "' appears twice");
    }
  }
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    fail(ErrorCategory::Vocabulary, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                        std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

std::vector<TokenId> Vocabulary::numericalize(std::span<const std::string> tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::denumericalize(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCategory::IO, "cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocabulary(std::move(tokens));
}

Vocabulary build_vocab(std::span<const std::vector<std::string>> corpus, std::size_t min_freq, std::size_t max_size) {
  if (max_size <= kNumSpecials) {
    fail(ErrorCategory::Config, "max vocabulary size " + std::to_string(max_size) + " must exceed the " +
                                    std::to_string(kNumSpecials) + " special tokens");
  }
  Vocabulary specials;
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus)
    for (const auto& t : doc)
      if (!specials.contains(t)) ++counts[t];

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [token, count] : counts)
    if (count >= min_freq) ranked.emplace_back(token, count);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens = specials.tokens();
  for (auto& [token, count] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(token);
  }
  return Vocabulary(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Batching

std::vector<LMBatch> make_lm_batches(std::span<const TokenId> stream, std::size_t batch_size, std::size_t bptt_len) {
  if (batch_size == 0 || bptt_len == 0) fail(ErrorCategory::Config, "batch_size and bptt_len must be positive");
  if (stream.size() < batch_size * (bptt_len + 1)) {
    fail(ErrorCategory::Data, "token stream of length " + std::to_string(stream.size()) + " is too short for " +
                                  std::to_string(batch_size) + " lanes of " + std::to_string(bptt_len + 1) + " tokens");
  }
  const std::size_t lane = stream.size() / batch_size;
  const std::size_t windows = (lane - 1) / bptt_len;
  std::vector<LMBatch> batches;
  batches.reserve(windows);
  for (std::size_t w = 0; w < windows; ++w) {
    LMBatch batch{TokenGrid(batch_size, bptt_len), TokenGrid(batch_size, bptt_len)};
    for (std::size_t b = 0; b < batch_size; ++b) {
      const std::size_t base = b * lane + w * bptt_len;
      for (std::size_t t = 0; t < bptt_len; ++t) {
        batch.inputs(b, t) = stream[base + t];
        batch.targets(b, t) = stream[base + t + 1];
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<LabeledExample> numericalize(const Vocabulary& vocab, std::span<const LabeledText> data) {
  std::vector<LabeledExample> out;
  out.reserve(data.size());
  for (const auto& d : data) out.push_back({d.label, vocab.numericalize(d.tokens)});
  return out;
}

std::vector<ClsBatch> make_cls_batches(std::span<const LabeledExample> examples, std::size_t batch_size,
                                       std::uint64_t shuffle_seed) {
  if (examples.empty()) fail(ErrorCategory::Data, "no labeled examples to batch");
  if (batch_size == 0) fail(ErrorCategory::Config, "batch_size must be positive");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(shuffle_seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::vector<ClsBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::size_t width = 0;
    for (std::size_t k = start; k < end; ++k) {
      if (examples[order[k]].ids.empty()) {
        fail(ErrorCategory::Data, "labeled example " + std::to_string(order[k]) + " has no tokens");
      }
      width = std::max(width, examples[order[k]].ids.size());
    }
    ClsBatch batch;
    batch.ids = TokenGrid(end - start, width, kPadId);
    for (std::size_t k = start; k < end; ++k) {
      const auto& ex = examples[order[k]];
      const std::size_t r = k - start;
      std::copy(ex.ids.begin(), ex.ids.end(), batch.ids.ids.begin() + static_cast<std::ptrdiff_t>(r * width));
      batch.lengths.push_back(ex.ids.size());
      batch.labels.push_back(ex.label);
      batch.source.push_back(order[k]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Files

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;      // inside a quoted field
  bool was_quoted = false;  // current field started with a quote
  bool any = false;         // current row has content
  std::size_t row_number = 1;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    was_quoted = false;
  };
  auto end_row = [&] {
    if (any || !row.empty()) {
      end_field();
      rows.push_back(std::move(row));
    }
    row.clear();
    field.clear();
    any = false;
    was_quoted = false;
    ++row_number;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty() || was_quoted) {
          fail(ErrorCategory::Data, "malformed CSV at row " + std::to_string(row_number) + ": stray quote");
        }
        quoted = was_quoted = any = true;
        break;
      case ',':
        end_field();
        any = true;
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') break;
        end_row();
        break;
      case '\n':
        end_row();
        break;
      default:
        if (was_quoted) {
          fail(ErrorCategory::Data,
               "malformed CSV at row " + std::to_string(row_number) + ": text after closing quote");
        }
        field.push_back(c);
        any = true;
    }
  }
  if (quoted) fail(ErrorCategory::Data, "malformed CSV at row " + std::to_string(row_number) + ": unterminated quote");
  end_row();
  return rows;
}

std::vector<LabeledText> read_labeled_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  if (schema.num_classes < 2) fail(ErrorCategory::Config, "CSV schema must declare at least 2 classes");
  if (schema.text_cols.empty()) fail(ErrorCategory::Config, "CSV schema must name at least one text column");
  const auto rows = parse_csv(read_file(path));
  std::size_t needed = schema.label_col;
  for (std::size_t c : schema.text_cols) needed = std::max(needed, c);

  std::vector<LabeledText> out;
  out.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string where = path.string() + " row " + std::to_string(r + 1);
    if (row.size() <= needed) {
      fail(ErrorCategory::Data, where + ": expected at least " + std::to_string(needed + 1) + " columns, found " +
                                    std::to_string(row.size()));
    }
    const std::string& raw = row[schema.label_col];
    std::size_t label = 0;
    std::size_t consumed = 0;
    try {
      label = std::stoul(raw, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed == 0 || consumed != raw.size()) fail(ErrorCategory::Data, where + ": label '" + raw + "' is not an integer");
    if (label < 1 || label > schema.num_classes) {
      fail(ErrorCategory::Data, where + ": label " + raw + " outside declared classes 1.." +
                                    std::to_string(schema.num_classes));
    }
    std::vector<std::string> fields;
    for (std::size_t c : schema.text_cols) fields.push_back(row[c]);
    out.push_back({label - 1, tag_document(fields)});
  }
  return out;
}

std::vector<std::string> read_text_corpus(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) docs.push_back(line);
  }
  return docs;
}

}  // namespace lmas
