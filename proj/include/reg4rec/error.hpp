#pragma once

#include <stdexcept>
#include <string>

namespace reg4rec {

// Every failure the library reports carries a stable kebab-case code
// ("empty-logits", "mpq-diverged", ...) plus a human-readable message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& detail)
      : std::runtime_error(detail.empty() ? code : code + ": " + detail),
        code_(std::move(code)) {}

  explicit Error(std::string code) : Error(std::move(code), "") {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace reg4rec
