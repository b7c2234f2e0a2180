#pragma once

#include <string>
#include <vector>

namespace hulm::cli {

// Runs one CLI command. Exit codes: 0 success, 2 config/validation error,
// 3 data error, 4 numeric or internal failure.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

extern const char* const kToolVersion;

}  // namespace hulm::cli
