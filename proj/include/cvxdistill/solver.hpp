#pragma once
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <cvxdistill/gates.hpp>
#include <cvxdistill/grelu.hpp>
#include <cvxdistill/types.hpp>

namespace cvxdistill {

enum class Loss
{
    squared,  // (1/2n) ||Y_hat - Y||_F^2
    logistic, // (1/n) sum_{i,k} log(1 + exp(-y_ik * yhat_ik)), y > 0 read as +1
};

Loss loss_from_string(const std::string& name);

struct LineSearchConfig
{
    double backtrack_factor = 0.8;
    double growth_factor = 1.25;
};

// How the squared loss is evaluated: through predictions, or through the
// precomputed normal matrix A^T A / n (cheaper when n is much larger than p*d).
enum class OperatorMode
{
    automatic,
    direct,
    normal,
};

struct SolverConfig
{
    Loss loss = Loss::squared;
    double lambda = 0.0;
    int max_iters = 1000;
    double tol_rel_obj = 1e-8;
    double tol_grad_map = 1e-7;
    // Objective stagnation is measured over this many iterations.
    int stall_window = 100;
    LineSearchConfig line_search;
    bool restart = true;
    std::uint64_t seed = 0;
    int power_iters = 20;
    // Solve multi-output problems as independent scalar problems per column.
    bool one_vs_all = true;
    OperatorMode operator_mode = OperatorMode::automatic;

    void validate() const;
};

struct TraceRecord
{
    int iter = 0;
    double objective = 0.0;
    double grad_map_norm = 0.0;
    double step_size = 0.0;
    double elapsed_ms = 0.0;
    std::int64_t nnz_groups = 0;
};

struct SolverTrace
{
    std::vector<TraceRecord> records;

    // One JSON object per line with exactly the TraceRecord fields.
    std::string to_jsonl() const;
};

enum class SolveStatus
{
    converged, // gradient-mapping norm <= tol_grad_map
    stalled,   // relative objective progress <= tol_rel_obj over stall_window
    max_iters,
};

std::string to_string(SolveStatus status);

struct SolveResult
{
    ConvexSolution solution;
    SolverTrace trace;
    SolveStatus status = SolveStatus::max_iters;
    double objective = 0.0;
    // Stationarity ||v - prox(v - s grad f(v))|| / s of the returned iterate.
    double grad_map_norm = 0.0;
    double step_size = 0.0;
    int iterations = 0;
};

// Precomputed gate masks for a fixed design X, with the linear operator
// A(W) = sum_i D_i X W_i and its adjoint.
class GatedDesign
{
public:
    GatedDesign(const Matrix& x, std::shared_ptr<const GateSet> gates);

    const Matrix& x() const { return x_; }
    const Matrix& masks() const { return masks_; }
    const std::shared_ptr<const GateSet>& gates() const { return gates_; }
    Index samples() const { return x_.rows(); }
    Index dim() const { return x_.cols(); }
    Index gate_count() const { return masks_.cols(); }

    // weights: d x p*C  ->  n x C
    Matrix apply(const Matrix& weights, Index outputs) const;
    // residual: n x C  ->  d x p*C
    Matrix adjoint(const Matrix& residual) const;

private:
    Matrix x_;
    Matrix masks_;
    std::shared_ptr<const GateSet> gates_;
};

double smooth_loss(const Matrix& prediction, const Matrix& y, Loss loss);
double group_penalty(const Matrix& weights);

double objective(const ConvexSolution& solution, const Matrix& x, const Matrix& y, const SolverConfig& config);
// Block gradients of the smooth part, laid out like ConvexSolution::weights.
Matrix smooth_gradient(const ConvexSolution& solution, const Matrix& x, const Matrix& y, const SolverConfig& config);

// Column-wise block soft-thresholding: v <- max(0, 1 - threshold/|v|) v.
Matrix prox_group_l2(const Matrix& blocks, double threshold);

// ||v - prox_{lambda s}(v - s grad f(v))|| / s.
double stationarity(const ConvexSolution& solution, const Matrix& x, const Matrix& y, const SolverConfig& config,
                    double step);

SolveResult solve_ista(const Matrix& x, const Matrix& y, std::shared_ptr<const GateSet> gates,
                       const SolverConfig& config, const ConvexSolution* warm_start = nullptr);
SolveResult solve_rfista(const Matrix& x, const Matrix& y, std::shared_ptr<const GateSet> gates,
                         const SolverConfig& config, const ConvexSolution* warm_start = nullptr);

// Smallest lambda for which the zero solution is optimal.
double lambda_max(const Matrix& x, const Matrix& y, const GateSet& gates, Loss loss = Loss::squared);

// Geometric grid from lambda_max down decade_span decades, `count` points.
std::vector<double> lambda_path(double lambda_max, int count = 20, double decade_span = 3.0);

struct PathPoint
{
    double lambda = 0.0;
    SolveResult result;
    double cumulative_ms = 0.0;
};

// Solves the path high to low, each point warm-started from the previous one.
std::vector<PathPoint> solve_path(const Matrix& x, const Matrix& y, std::shared_ptr<const GateSet> gates,
                                  const SolverConfig& config, const std::vector<double>& lambdas);

// ---- verification oracles ------------------------------------------------

struct ConeProgram
{
    std::vector<Pattern> patterns;
    std::vector<Matrix> v_blocks;
    std::vector<Matrix> u_blocks;
};

struct ConeReport
{
    // v blocks first, then u blocks.
    std::vector<bool> block_feasible;
    std::vector<std::size_t> violating;
    double max_violation = 0.0;
    bool feasible = true;
};

// Checks (2 D_i - I) X v_i >= -1e-9 elementwise for every block.
ConeReport cone_feasibility(const ConeProgram& program, const Matrix& x);
ConeProgram cone_program_from_solution(const ConvexSolution& solution);

struct ProbeOptions
{
    int restarts = 50;
    int steps = 3000;
    double learning_rate = 0.02;
    std::uint64_t seed = 0;
    bool include_relu = true;
};

struct ProbeReport
{
    double convex_objective = 0.0;
    double best_nonconvex_objective = 0.0;
    std::vector<double> nonconvex_objectives;
    double margin = 0.0; // best_nonconvex - convex
    bool passed = false;
    SolveStatus convex_status = SolveStatus::max_iters;
};

// Solves the convex program over all patterns and compares it with
// multi-start training of the width-matched regularized two-layer networks.
ProbeReport global_optimality_probe(const Matrix& x, const Vector& y, const GateSet& exhaustive,
                                    const SolverConfig& config, const ProbeOptions& options = {});

} // namespace cvxdistill
