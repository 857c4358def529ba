#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmas {

enum class ErrorCategory {
  Usage,
  IO,
  Config,
  Dimension,
  Index,
  Contract,
  Vocabulary,
  Data,
  Checkpoint,
  Format,
  Integrity,
  Version,
};

std::string_view category_name(ErrorCategory category);

/// Every failure raised by the library carries a category so callers (the CLI
/// in particular) can map it onto an exit status without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

}  // namespace lmas
