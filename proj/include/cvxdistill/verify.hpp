#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace cvxdistill {

struct OracleCheck
{
    std::string name;
    bool passed = false;
    double value = 0.0;     // measured error or margin
    double tolerance = 0.0;
};

struct OracleReport
{
    std::vector<OracleCheck> checks;

    bool passed() const;
    nlohmann::json to_json() const;
};

// Gradient, prox, cone, enumeration, recovery and global-optimality checks
// on small random instances. `tiny` shrinks instance counts and restarts.
OracleReport run_oracle_suite(std::uint64_t seed, bool tiny);

} // namespace cvxdistill
