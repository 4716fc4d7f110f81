#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace liftpose::cli {

enum ExitCode : int { ok = 0, usage = 2, data_error = 3, numerical = 4 };

/// Runs one command line (without the program name). Results go to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace liftpose::cli
