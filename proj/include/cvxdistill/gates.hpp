#pragma once
#include <cstdint>
#include <optional>
#include <vector>

#include <cvxdistill/types.hpp>

namespace cvxdistill {

// mask[i] is true when row i of X satisfies x_i . g >= 0.
using Pattern = std::vector<bool>;

enum class GateSource
{
    gaussian,
    data_derived,
    exhaustive,
};

// Fixed gate directions (columns of `directions`, d x p) and the activation
// patterns they induce on the data they were built from. Patterns are
// pairwise distinct.
struct GateSet
{
    Matrix directions;
    std::vector<Pattern> patterns;
    GateSource source = GateSource::gaussian;

    Index size() const { return directions.cols(); }
    Index dim() const { return directions.rows(); }
};

Pattern compute_pattern(const Matrix& x, const Vector& gate);

// n x p matrix of 0/1 indicators, column j = pattern of gate j on x.
Matrix gate_masks(const Matrix& x, const Matrix& directions);

// ceil((n/d) * ln n) clamped to [8, 4096].
std::size_t default_gate_count(Index n, Index d);

// Builds a GateSet from candidate directions, dropping zero directions and
// any direction whose pattern repeats an earlier one.
GateSet make_gateset(const Matrix& x, const Matrix& candidates, GateSource source);

GateSet sample_gaussian_gates(const Matrix& x, std::optional<std::size_t> count, std::uint64_t seed);

// Label-free directions from block activations: for each target column, the
// least-squares fit of that column on the rows where it exceeds its minimum,
// then Gaussian directions until `count` candidates have been drawn.
GateSet data_derived_gates(const Matrix& x, const Matrix& targets, std::optional<std::size_t> count,
                           std::uint64_t seed);

struct EnumerationOptions
{
    // Extra random probes after the geometric pass; std::nullopt means 10 * 2^n.
    std::optional<std::size_t> refinement_probes;
    std::uint64_t seed = 0;
};

// Every achievable pattern of X (n <= 16, d <= 4) exactly once, each with a
// witness gate. Patterns are sorted lexicographically.
GateSet enumerate_arrangements(const Matrix& x, const EnumerationOptions& options = {});

// 2 * sum_{k < r} C(n-1, k): the number of regions cut by n central
// hyperplanes in general position in rank r.
std::uint64_t pattern_count_bound(std::uint64_t n, std::uint64_t r);

Index numerical_rank(const Matrix& x);

} // namespace cvxdistill
