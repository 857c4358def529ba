#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lmas/io.hpp"
#include "lmas/tokens.hpp"

namespace lmas {

inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kBos = "<xbos>";
inline constexpr std::string_view kField1 = "<xfld 1>";

inline constexpr TokenId kUnkId = 0;
inline constexpr TokenId kPadId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kField1Id = 3;
inline constexpr std::size_t kNumSpecials = 4;

std::string field_tag(std::size_t field_index);

/// Lowercases and splits on whitespace and ASCII punctuation; every
/// punctuation character becomes its own token. Bytes >= 0x80 are treated as
/// word characters.
std::vector<std::string> tokenize(std::string_view text);

/// ["<xbos>", "<xfld k>", tokens of text...]
std::vector<std::string> tokenize_and_tag(std::string_view text, std::size_t field_index);

/// Tags a multi-field document: <xbos>, then <xfld k> before field k (1-based).
std::vector<std::string> tag_document(std::span<const std::string> fields);

class Vocabulary {
 public:
  /// Specials only.
  Vocabulary();
  /// Takes an id-ordered token list whose first entries are the specials.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> numericalize(std::span<const std::string> tokens) const;
  std::vector<std::string> denumericalize(std::span<const TokenId> ids) const;

  /// One token per line, line number (from 0) is the id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Keeps tokens seen at least min_freq times, most frequent first with ties
/// broken lexicographically, until the vocabulary (specials included) holds
/// max_size entries.
Vocabulary build_vocab(std::span<const std::vector<std::string>> corpus, std::size_t min_freq = 2,
                       std::size_t max_size = 60000);

struct LMBatch {
  TokenGrid inputs;
  TokenGrid targets;
};

/// Splits the stream into batch_size contiguous lanes and cuts each lane into
/// consecutive windows of bptt_len (input, next-token target) pairs.
std::vector<LMBatch> make_lm_batches(std::span<const TokenId> stream, std::size_t batch_size, std::size_t bptt_len);

/// A labeled document before numericalization.
struct LabeledText {
  std::size_t label = 0;
  std::vector<std::string> tokens;
};

struct LabeledExample {
  std::size_t label = 0;
  std::vector<TokenId> ids;
};

std::vector<LabeledExample> numericalize(const Vocabulary& vocab, std::span<const LabeledText> data);

struct ClsBatch {
  TokenGrid ids;  // padded with kPadId
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> source;  // index of each row in the input list
};

/// Seeded shuffle, then consecutive groups of batch_size padded to the
/// longest row of each group.
std::vector<ClsBatch> make_cls_batches(std::span<const LabeledExample> examples, std::size_t batch_size,
                                       std::uint64_t shuffle_seed);

struct CsvSchema {
  std::size_t label_col = 0;
  std::vector<std::size_t> text_cols{1, 2};
  std::size_t num_classes = 4;

  /// label, title, description with 4 classes.
  static CsvSchema ag_news() { return {}; }
};

/// Comma-separated rows with double-quote quoting and quote doubling.
/// Throws Data with the 1-based row number on malformed input.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

/// Labels in the file are 1-based; they become 0-based class indices.
std::vector<LabeledText> read_labeled_csv(const std::filesystem::path& path, const CsvSchema& schema);

/// Non-empty lines of a plain-text corpus, one document per line.
std::vector<std::string> read_text_corpus(const std::filesystem::path& path);

}  // namespace lmas
