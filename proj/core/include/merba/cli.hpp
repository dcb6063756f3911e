#pragma once
// Command-line front end, runnable in-process so tests can drive it with
// captured streams. Exit codes: 0 success (help included), 1 usage or
// validation problems, 2 numerical failures.

#include <iosfwd>
#include <string>
#include <vector>

namespace merba {

int cli_run(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);
int cli_run(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err);

}  // namespace merba
