#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace imccd::cli {

enum ExitCode : int {
    kOk = 0,
    kCheckFailed = 1,  // oracle-check found a mismatch
    kUsage = 2,
    kData = 3,
    kInternal = 4,
};

int run(int argc, char** argv);

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Reads `key = value` lines ('#' starts a comment) and turns them into long
// flags placed ahead of the explicit ones, so explicit flags win.
std::vector<std::string> config_file_args(const std::string& path);

}  // namespace imccd::cli
