#pragma once

#include <iosfwd>

namespace diffnas::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStageDependency = 3;
inline constexpr int kExitNumeric = 4;

/// Parses the command line and runs it. Never throws; library errors map to
/// the exit codes above.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace diffnas::cli
