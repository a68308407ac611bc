#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <vector>

namespace reg4rec::mpq {

// A semantic token: codeword `code` of codebook `codebook` (both 0-based).
struct Token {
  std::size_t codebook = 0;
  std::size_t code = 0;
  friend auto operator<=>(const Token&, const Token&) = default;
};

// Unordered set of M tokens with exactly one token per codebook. Stored by
// codebook index, so two sets built from the same tokens in any order compare
// equal.
class TokenSet {
 public:
  TokenSet() = default;
  // codes[r] is the token of codebook r.
  explicit TokenSet(std::vector<std::size_t> codes) : codes_(std::move(codes)) {}

  // Accepts tokens in any order; throws "invalid-token-set" unless every
  // codebook 0..num_codebooks-1 appears exactly once.
  static TokenSet from_tokens(std::span<const Token> tokens, std::size_t num_codebooks);

  std::size_t size() const noexcept { return codes_.size(); }
  std::size_t code(std::size_t codebook) const { return codes_.at(codebook); }
  const std::vector<std::size_t>& codes() const noexcept { return codes_; }
  bool contains(Token t) const noexcept { return t.codebook < codes_.size() && codes_[t.codebook] == t.code; }
  std::vector<Token> tokens() const;
  // Number of codebooks on which both sets pick the same codeword.
  std::size_t shared_with(const TokenSet& other) const;

  friend bool operator==(const TokenSet&, const TokenSet&) = default;
  friend auto operator<=>(const TokenSet&, const TokenSet&) = default;

 private:
  std::vector<std::size_t> codes_;
};

}  // namespace reg4rec::mpq
