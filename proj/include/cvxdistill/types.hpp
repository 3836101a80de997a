#pragma once
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace cvxdistill {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

// Base of every domain error thrown by the library. The CLI maps these to
// exit code 1.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error
{
public:
    using Error::Error;
};

class FormatError : public Error
{
public:
    using Error::Error;
};

inline Matrix gaussian_matrix(Index rows, Index cols, Rng& rng, double stddev = 1.0)
{
    std::normal_distribution<double> normal(0.0, stddev);
    Matrix out(rows, cols);
    // column-major fill order is part of the seeded contract
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) {
            out(i, j) = normal(rng);
        }
    }
    return out;
}

} // namespace cvxdistill
