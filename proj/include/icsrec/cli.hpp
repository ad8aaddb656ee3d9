#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace icsrec {

/// Exit codes: 0 success, 1 runtime failure, 2 bad input or usage.
int run_cli(int argc, char** argv);

/// Same as above with explicit arguments (without the program name) and
/// streams.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace icsrec
