#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace lmas {

using TokenId = std::uint32_t;

/// Row-major matrix of token ids: one row per lane / example, one column per
/// time step.
struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> ids;

  TokenGrid() = default;
  TokenGrid(std::size_t rows_, std::size_t cols_, TokenId fill = 0)
      : rows(rows_), cols(cols_), ids(rows_ * cols_, fill) {}

  TokenId& operator()(std::size_t r, std::size_t c) { return ids[r * cols + c]; }
  TokenId operator()(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }

  static TokenGrid single(const std::vector<TokenId>& sequence) {
    TokenGrid g(1, sequence.size());
    g.ids = sequence;
    return g;
  }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

}  // namespace lmas
