#include "reg4rec/mpq/token_set.hpp"

#include <limits>
#include <string>

#include "reg4rec/error.hpp"

namespace reg4rec::mpq {

TokenSet TokenSet::from_tokens(std::span<const Token> tokens, std::size_t num_codebooks) {
  constexpr auto kUnset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> codes(num_codebooks, kUnset);
  for (const auto& t : tokens) {
    if (t.codebook >= num_codebooks)
      throw Error("invalid-token-set", "codebook " + std::to_string(t.codebook) + " out of range");
    if (codes[t.codebook] != kUnset)
      throw Error("invalid-token-set", "codebook " + std::to_string(t.codebook) + " appears twice");
    codes[t.codebook] = t.code;
  }
  if (tokens.size() != num_codebooks) throw Error("invalid-token-set", "expected one token per codebook");
  return TokenSet(std::move(codes));
}

std::vector<Token> TokenSet::tokens() const {
  std::vector<Token> out;
  out.reserve(codes_.size());
  for (std::size_t r = 0; r < codes_.size(); ++r) out.push_back({r, codes_[r]});
  return out;
}

std::size_t TokenSet::shared_with(const TokenSet& other) const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < codes_.size() && r < other.codes_.size(); ++r) n += codes_[r] == other.codes_[r];
  return n;
}

}  // namespace reg4rec::mpq
