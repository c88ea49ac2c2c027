#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace robtok::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kContract = 2, kIo = 3 };

/// Runs one command line (without the program name) and returns its exit
/// code. Diagnostics go to `err`, progress lines to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace robtok::cli
