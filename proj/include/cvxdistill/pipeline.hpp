#pragma once
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include <cvxdistill/core_data.hpp>
#include <cvxdistill/gates.hpp>
#include <cvxdistill/grelu.hpp>
#include <cvxdistill/nonconvex.hpp>
#include <cvxdistill/polish.hpp>
#include <cvxdistill/solver.hpp>

namespace cvxdistill {

struct SyntheticTaskConfig
{
    int classes = 10;
    Index dim = 32;
    Index train_per_class = 500;
    Index test_per_class = 100;
    // Standard deviation of the class means around the origin; the noise is N(0, I).
    double mean_scale = 0.35;
};

struct TaskData
{
    Dataset train;
    Dataset test;
};

// Gaussian mixture with seeded class means. Rows are grouped by class.
TaskData make_gaussian_mixture(const SyntheticTaskConfig& config, std::uint64_t seed);

struct DistillConfig
{
    std::optional<std::size_t> gate_count;
    GateSource gate_source = GateSource::gaussian;
    bool standardize = true;
    bool append_one = true;
    int lambda_points = 20;
    double decade_span = 3.0;
    SolverConfig solver;
    double holdout_fraction = 0.1;
    // Path points whose recovered student exceeds this many effective
    // parameters are skipped; the sparsest point is used if all do.
    std::optional<std::size_t> param_budget;
};

struct PathSummary
{
    double lambda = 0.0;
    double holdout_mse = 0.0;
    std::size_t effective_parameters = 0;
    int iterations = 0;
    std::string status;
};

struct DistillResult
{
    GReLUStudent student;
    ConvexSolution solution;
    SolverTrace trace; // trace of the selected path point
    std::vector<PathSummary> path;
    std::size_t selected = 0;
    double wall_ms = 0.0;
};

// Fits a GReLU student to (z, t) without labels: gates, lambda path,
// holdout selection by activation MSE, weight recovery.
DistillResult distill_activations(const ActivationDataset& acts, const DistillConfig& config, std::uint64_t seed);

// Extracts the block's activations from ds.x and distills them. Labels are
// never read.
DistillResult distill_block(const MLPNet& teacher, BlockRange block, const Dataset& ds, const DistillConfig& config,
                            std::uint64_t seed);

using BlockStudent = std::variant<GReLUStudent, MLPNet>;

Index block_input_dim(const BlockStudent& student);
Index block_output_dim(const BlockStudent& student);
Matrix block_forward(const BlockStudent& student, const Matrix& z);

// Teacher logits with layers [first, last] replaced by the student.
Matrix swapped_forward(const MLPNet& teacher, BlockRange block, const BlockStudent& student, const Matrix& x);

// FNV-1a over every weight of the layers outside the block.
std::uint64_t frozen_checksum(const MLPNet& teacher, BlockRange block);

struct SwapResult
{
    double accuracy = 0.0;
    std::uint64_t checksum_before = 0;
    std::uint64_t checksum_after = 0;
};

SwapResult swap_and_evaluate(const MLPNet& teacher, BlockRange block, const BlockStudent& student,
                             const Dataset& test);

struct PolishSettings
{
    bool enabled = false;
    double alpha = 0.5;
    // Fraction of the smallest lambda making every group zero.
    double lambda_fraction = 0.01;
    PolishConfig solver;
};

struct ExperimentConfig
{
    SyntheticTaskConfig task;
    std::optional<TaskData> data; // replaces the synthetic task when set
    SplitSpec split;
    TeacherConfig teacher;
    // Defaults to the layer just before the output layer.
    std::optional<BlockRange> block;
    DistillConfig distill;
    PolishSettings polish;
    bool run_nonconvex = true;
    bool run_prune = true;
    double time_budget_factor = 1.1;
    // Fixed epoch budget for the non-convex student; replaces the time budget.
    std::optional<int> nonconvex_epochs;
    double nonconvex_learning_rate = 1e-3;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    int jobs = 1;

    void validate() const;
};

struct MethodRow
{
    std::string method;
    std::uint64_t seed = 0;
    std::size_t params_effective = 0;
    double block_sparsity = 0.0;
    double overall_sparsity = 0.0;
    double activation_mse = 0.0;
    double end_to_end_accuracy = 0.0;
    double wall_ms = 0.0;
    std::size_t train_rows = 0;
};

struct Aggregate
{
    double mean = 0.0;
    double two_std = 0.0; // 0 with fewer than two seeds
    std::size_t count = 0;
};

struct ExperimentReport
{
    std::vector<MethodRow> rows; // ordered by (seed, method)
    std::map<std::string, std::map<std::string, Aggregate>> aggregate;
    std::optional<std::size_t> samples_per_class;
    std::map<std::uint64_t, std::vector<std::size_t>> class_counts;
    std::size_t block_parameters = 0;
    std::size_t model_parameters = 0;

    nlohmann::json to_json() const;
    const MethodRow& row(const std::string& method, std::uint64_t seed) const;
};

struct TrainedTeacher
{
    TaskData data;
    TeacherResult teacher;
};

TrainedTeacher prepare_teacher(const ExperimentConfig& config, std::uint64_t seed);
BlockRange resolve_block(const ExperimentConfig& config, const MLPNet& teacher);

// Settings sized so a ten-seed comparison finishes in minutes on one core.
ExperimentConfig desk_scale_config();

ExperimentReport compare_methods(const ExperimentConfig& config);
std::vector<ExperimentReport> sample_budget_sweep(const ExperimentConfig& config,
                                                  const std::vector<std::size_t>& budgets);

} // namespace cvxdistill
