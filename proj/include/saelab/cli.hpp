#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "saelab/error.hpp"

namespace saelab {

/// Process exit codes; a stable contract for scripts.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitDivergence = 4,
  kExitShape = 5,
  kExitCapability = 6,
};

int exit_code_for(ErrorKind kind);

/// Runs the `saelab` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace saelab
