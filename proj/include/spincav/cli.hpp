#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace spincav {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitInputFormat = 3,
  kExitNonConvergence = 4,
};

/// Runs the command line. args[0] is the program name. Settings resolve as
/// default < --config file < SPINCAV_<KEY> environment < flag.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run_cli(int argc, char** argv);

}  // namespace spincav
