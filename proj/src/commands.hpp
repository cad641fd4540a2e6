#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dlnet::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;      // runtime failure (I/O, certification, blow-up)
inline constexpr int kBadUsage = 2;     // bad flags or parameters
inline constexpr int kRunFailed = 3;    // run finished but diverged or broke an invariant

// Parses argv-style arguments (args[0] is the program name) and runs one
// subcommand. Normal output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dlnet::cli
