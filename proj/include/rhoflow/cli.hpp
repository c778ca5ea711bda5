#pragma once

#include <string>
#include <vector>

namespace rhoflow {

/// Full command-line surface (preprocess | synth | train | analyze |
/// gradcheck). Exit codes: 0 success, 1 usage error, 2 data error,
/// 3 numerical failure.
int run_cli(int argc, const char* const* argv);

/// Convenience overload; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace rhoflow
