#pragma once
#include <cstdint>
#include <vector>

#include <cvxdistill/grelu.hpp>
#include <cvxdistill/solver.hpp>
#include <cvxdistill/types.hpp>

namespace cvxdistill {

/*
 * Second-layer refit with W1 frozen:
 *   (1/(2n)) ||offset + F beta + 1 b0^T - Y||_F^2
 *     + lambda sum_g w_g (alpha ||beta_g||_F + (1 - alpha)/2 ||beta_g||_F^2)
 * where beta_g stacks the rows of beta listed in group g.
 */
struct PolishProblem
{
    Matrix features; // n x m
    Matrix targets;  // n x C
    std::vector<std::vector<Index>> groups;
    double alpha = 0.5;
    double lambda = 0.0;
    Vector group_weights;
    bool fit_intercept = true;
    Matrix offset; // empty or n x C
    Matrix beta_init;
    Vector intercept_init;

    Index samples() const { return features.rows(); }
    Index units() const { return features.cols(); }
    Index outputs() const { return targets.cols(); }

    // Throws unless groups partition [0, m), weights are >= 0 and shapes agree.
    void validate() const;
};

// One group per hidden unit, beta initialized at w2 and the intercept at out_bias.
PolishProblem build_polish_problem(const GReLUStudent& student, const Matrix& x, const Matrix& targets);

struct PolishConfig
{
    int max_iters = 5000;
    double tol_grad_map = 1e-9;
    double tol_rel_obj = 1e-12;
    int stall_window = 100;
    LineSearchConfig line_search;
    std::uint64_t seed = 0;
};

struct PolishResult
{
    Matrix beta;
    Vector intercept;
    SolverTrace trace;
    SolveStatus status = SolveStatus::max_iters;
    double objective = 0.0;
    double initial_objective = 0.0;
    int iterations = 0;
};

double polish_objective(const PolishProblem& problem, const Matrix& beta, const Vector& intercept);

// Closed-form prox of s * lambda * w (alpha ||v|| + (1 - alpha)/2 ||v||^2).
Matrix group_elastic_prox(const Matrix& v, double alpha, double lambda_weight_step);

PolishResult solve_group_elastic(const PolishProblem& problem, const PolishConfig& config = {});

// Drops units whose row of beta has norm <= threshold and installs beta and
// the intercept as the new second layer.
GReLUStudent prune_units(const GReLUStudent& student, const Matrix& beta, const Vector& intercept,
                         double threshold = 1e-10);

struct CompressionReport
{
    double block_sparsity = 0.0;
    double overall_sparsity = 0.0;
};

// block = new/old, overall = (total - old + new)/total.
CompressionReport compression_report(std::uint64_t old_params, std::uint64_t new_params,
                                     std::uint64_t total_model_params);

} // namespace cvxdistill
