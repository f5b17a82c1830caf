#pragma once

#include <ostream>
#include <span>
#include <string>

namespace nap::cli {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitMissingInput = 2;
inline constexpr int kExitConfigMismatch = 3;
inline constexpr int kExitNumeric = 4;

/// Parses `args` (without the program name) and runs the subcommand.
/// Normal output goes to `out`, diagnostics to `err`.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace nap::cli
