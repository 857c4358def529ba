#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "lmas/error.hpp"

namespace lmas {

/// Process exit status for a failure category: usage 2, I/O 3, config 4,
/// checkpoint problems 5, data problems 6, anything else 1.
int exit_code(ErrorCategory category);

/// Entry point shared by the binary and the tests. `args` excludes the
/// program name. Failures print one line "error: <category>: <message>" to
/// `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lmas
