#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace calip::cli {

/// Exit codes shared by every subcommand.
enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,  ///< gradcheck ran but did not pass
  kUsage = 2,        ///< bad flags, parameter, protocol, IO, format or integrity errors
};

/// Runs the command line `args` (args[0] is the program name). Normal output
/// goes to `out`, diagnostics to `err`. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace calip::cli
