#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace arbortune {

/// Entry point behind the `arbortune` executable. argv[0] is the program
/// name. Returns 0 on success, 2 for configuration and usage errors, 3 for
/// data errors and 4 for runtime failures.
int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

} // namespace arbortune
