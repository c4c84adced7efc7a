#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace daptkit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Parses and runs one subcommand. The one-line JSON summary goes to `out`,
/// diagnostics and usage text to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace daptkit::cli
