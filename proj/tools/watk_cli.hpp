#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace watk::cli {

/// Runs one command line (argv[0] is the program name). Returns 0 on success,
/// 1 on invalid input, 2 on internal errors; diagnostics go to `err`.
int run(const std::vector<std::string>& argv, std::ostream& err);

}  // namespace watk::cli
