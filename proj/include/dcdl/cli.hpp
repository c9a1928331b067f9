#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dcdl {

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitNumerical = 3,
};

// Runs the `dcdl` command line. args excludes the program name. Normal
// output goes to `out`, usage text, progress and errors to `err`.
int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err);

}  // namespace dcdl
