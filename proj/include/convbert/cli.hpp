#pragma once

#include <iosfwd>

namespace convbert {

enum ExitCode : int { kExitOk = 0, kExitVerificationFailure = 1, kExitUsage = 2 };

// Parses and runs one command line. Output goes to `out`, diagnostics and
// usage text to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace convbert
