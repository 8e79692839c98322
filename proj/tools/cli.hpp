#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace proxattack::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;

/// Runs one command line. `args` excludes the program name. Never throws;
/// errors are written to `err` and mapped to the exit codes above.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace proxattack::cli
