#pragma once
#include <iosfwd>
#include <string>
#include <vector>

namespace cvxdistill {

inline constexpr int exit_ok = 0;
inline constexpr int exit_domain_error = 1;
inline constexpr int exit_usage = 2;

// args excludes the program name. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace cvxdistill
