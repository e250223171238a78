#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace emkd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand. `args` excludes the program name. Reports go to
/// `out` (or the --out file), diagnostics and usage to `err`.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace emkd::cli
