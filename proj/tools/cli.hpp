#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace esparse::cli {

/// Exit codes: 0 success, 1 internal or invariant failure, 2 usage or validation error.
enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// Runs the command line `args` (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace esparse::cli
