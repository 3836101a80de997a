#include <cvxdistill/pipeline.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <future>
#include <numeric>

namespace cvxdistill {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start)
{
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::size_t nonzero_count(const Matrix& m)
{
    return static_cast<std::size_t>((m.array() != 0.0).count());
}

std::size_t effective_parameters(const MLPNet& net)
{
    std::size_t total = 0;
    for (const auto& layer : net.layers) total += nonzero_count(layer.w) + nonzero_count(layer.b);
    return total;
}

std::size_t block_parameter_count(const MLPNet& teacher, BlockRange block)
{
    return sub_network(teacher, block).parameter_count();
}

struct HoldoutSplit
{
    ActivationDataset train;
    ActivationDataset holdout;
};

HoldoutSplit split_holdout(const ActivationDataset& acts, double fraction, std::uint64_t seed)
{
    const Index n = acts.rows();
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_hold = std::clamp<Index>(static_cast<Index>(std::llround(fraction * static_cast<double>(n))), 1, n - 1);
    std::vector<Index> hold(idx.begin(), idx.begin() + n_hold);
    std::vector<Index> train(idx.begin() + n_hold, idx.end());
    std::sort(hold.begin(), hold.end());
    std::sort(train.begin(), train.end());
    return {select_rows(acts, train), select_rows(acts, hold)};
}

MethodRow make_row(const std::string& method, std::uint64_t seed, std::size_t params, std::size_t block_params,
                   std::size_t model_params)
{
    MethodRow row;
    row.method = method;
    row.seed = seed;
    row.params_effective = params;
    const auto report = compression_report(block_params, params, model_params);
    row.block_sparsity = report.block_sparsity;
    row.overall_sparsity = report.overall_sparsity;
    return row;
}

struct SeedOutcome
{
    std::vector<MethodRow> rows;
    std::vector<std::size_t> class_counts;
    std::size_t block_parameters = 0;
    std::size_t model_parameters = 0;
};

SeedOutcome run_seed(const ExperimentConfig& config, const TrainedTeacher& prepared, std::uint64_t seed)
{
    const MLPNet& teacher = prepared.teacher.net;
    const BlockRange block = resolve_block(config, teacher);
    SplitSpec split = config.split;
    split.seed = seed;
    const Dataset train = split.samples_per_class ? subsample_per_class(prepared.data.train, split)
                                                  : prepared.data.train;
    const Dataset& test = prepared.data.test;

    SeedOutcome out;
    out.block_parameters = block_parameter_count(teacher, block);
    out.model_parameters = teacher.parameter_count();
    if (train.labels) {
        out.class_counts.assign(static_cast<std::size_t>(prepared.data.train.num_classes()), 0);
        for (const int label : *train.labels) ++out.class_counts[static_cast<std::size_t>(label)];
    }
    const auto row_for = [&](const std::string& method, std::size_t params) {
        MethodRow row = make_row(method, seed, params, out.block_parameters, out.model_parameters);
        row.train_rows = static_cast<std::size_t>(train.rows());
        return row;
    };

    const ActivationDataset test_acts = extract_block_activations(teacher, test.x, block);
    const auto evaluate = [&](MethodRow& row, const BlockStudent& student) {
        row.activation_mse = activation_mse(block_forward(student, test_acts.z), test_acts.t);
        row.end_to_end_accuracy = swap_and_evaluate(teacher, block, student, test).accuracy;
    };

    {
        MethodRow row = row_for("teacher", out.block_parameters);
        evaluate(row, sub_network(teacher, block));
        out.rows.push_back(row);
    }

    const DistillResult convex = distill_block(teacher, block, train, config.distill, seed);
    {
        MethodRow row = row_for("convex", convex.student.effective_parameters());
        evaluate(row, convex.student);
        row.wall_ms = convex.wall_ms;
        out.rows.push_back(row);
    }

    if (config.polish.enabled && convex.student.width() > 0) {
        const auto start = Clock::now();
        const ActivationDataset acts = extract_block_activations(teacher, train.x, block);
        PolishProblem problem = build_polish_problem(convex.student, acts.z, acts.t);
        problem.alpha = config.polish.alpha;
        const Matrix centered = acts.t.rowwise() - acts.t.colwise().mean();
        const Matrix corr = problem.features.transpose() * centered / static_cast<double>(acts.rows());
        const double alpha = std::max(problem.alpha, 1e-12);
        problem.lambda = config.polish.lambda_fraction * corr.rowwise().norm().maxCoeff() / alpha;
        const PolishResult polished = solve_group_elastic(problem, config.polish.solver);
        const GReLUStudent pruned = prune_units(convex.student, polished.beta, polished.intercept);
        MethodRow row = row_for("convex-polish", pruned.effective_parameters());
        evaluate(row, pruned);
        row.wall_ms = convex.wall_ms + ms_since(start);
        out.rows.push_back(row);
    }

    if (config.run_nonconvex) {
        const ActivationDataset acts = extract_block_activations(teacher, train.x, block);
        StudentTrainConfig sc;
        const std::size_t nnz = nonzero_count(convex.student.w1) + nonzero_count(convex.student.w2);
        sc.hidden_width = match_width_to_nnz(nnz, acts.z.cols(), acts.t.cols());
        sc.learning_rate = config.nonconvex_learning_rate;
        sc.seed = seed;
        if (config.nonconvex_epochs) {
            sc.epochs = config.nonconvex_epochs;
        } else {
            sc.time_budget_ms = config.time_budget_factor * convex.wall_ms;
        }
        const StudentResult relu = train_relu_student(acts, sc);
        MethodRow row = row_for("nonconvex", effective_parameters(relu.net));
        evaluate(row, relu.net);
        row.wall_ms = relu.wall_ms;
        out.rows.push_back(row);
    }

    if (config.run_prune) {
        const double keep = std::clamp(static_cast<double>(convex.student.effective_parameters()) /
                                           static_cast<double>(out.block_parameters),
                                       1e-9, 1.0);
        const MLPNet pruned = magnitude_prune(sub_network(teacher, block), keep);
        MethodRow row = row_for("prune", effective_parameters(pruned));
        evaluate(row, pruned);
        out.rows.push_back(row);
    }
    return out;
}

ExperimentReport assemble(std::vector<SeedOutcome> outcomes, const std::vector<std::uint64_t>& seeds,
                          std::optional<std::size_t> samples_per_class)
{
    ExperimentReport report;
    report.samples_per_class = samples_per_class;
    for (std::size_t s = 0; s < outcomes.size(); ++s) {
        auto& o = outcomes[s];
        report.block_parameters = o.block_parameters;
        report.model_parameters = o.model_parameters;
        report.class_counts[seeds[s]] = o.class_counts;
        for (auto& row : o.rows) report.rows.push_back(std::move(row));
    }
    std::stable_sort(report.rows.begin(), report.rows.end(), [](const MethodRow& a, const MethodRow& b) {
        return std::tie(a.seed, a.method) < std::tie(b.seed, b.method);
    });

    std::map<std::string, std::map<std::string, std::vector<double>>> samples;
    for (const auto& row : report.rows) {
        auto& m = samples[row.method];
        m["params_effective"].push_back(static_cast<double>(row.params_effective));
        m["block_sparsity"].push_back(row.block_sparsity);
        m["overall_sparsity"].push_back(row.overall_sparsity);
        m["activation_mse"].push_back(row.activation_mse);
        m["end_to_end_accuracy"].push_back(row.end_to_end_accuracy);
        m["wall_ms"].push_back(row.wall_ms);
    }
    for (const auto& [method, metrics] : samples) {
        for (const auto& [metric, values] : metrics) {
            Aggregate agg;
            agg.count = values.size();
            agg.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
            if (values.size() >= 2) {
                double ss = 0.0;
                for (const double v : values) ss += (v - agg.mean) * (v - agg.mean);
                agg.two_std = 2.0 * std::sqrt(ss / static_cast<double>(values.size() - 1));
            }
            report.aggregate[method][metric] = agg;
        }
    }
    return report;
}

template <class Fn>
std::vector<SeedOutcome> run_seeds(const std::vector<std::uint64_t>& seeds, int jobs, Fn&& fn)
{
    std::vector<SeedOutcome> out(seeds.size());
    const auto width = static_cast<std::size_t>(std::max(jobs, 1));
    for (std::size_t begin = 0; begin < seeds.size(); begin += width) {
        std::vector<std::future<SeedOutcome>> pending;
        const std::size_t end = std::min(seeds.size(), begin + width);
        for (std::size_t s = begin; s < end; ++s) {
            pending.push_back(std::async(width == 1 ? std::launch::deferred : std::launch::async, fn, s));
        }
        for (std::size_t s = begin; s < end; ++s) out[s] = pending[s - begin].get();
    }
    return out;
}

} // namespace

TaskData make_gaussian_mixture(const SyntheticTaskConfig& config, std::uint64_t seed)
{
    if (config.classes < 2 || config.dim < 1 || config.train_per_class < 1 || config.test_per_class < 1) {
        throw Error("synthetic task needs >= 2 classes and positive sizes");
    }
    Rng rng(seed);
    const Matrix means = gaussian_matrix(config.classes, config.dim, rng, config.mean_scale);
    const auto draw = [&](Index per_class) {
        Dataset ds;
        ds.x.resize(per_class * config.classes, config.dim);
        ds.labels.emplace();
        for (int c = 0; c < config.classes; ++c) {
            const Matrix noise = gaussian_matrix(per_class, config.dim, rng);
            for (Index i = 0; i < per_class; ++i) {
                ds.x.row(c * per_class + i) = means.row(c) + noise.row(i);
                ds.labels->push_back(c);
            }
        }
        return ds;
    };
    TaskData data;
    data.train = draw(config.train_per_class);
    data.test = draw(config.test_per_class);
    return data;
}

DistillResult distill_activations(const ActivationDataset& acts, const DistillConfig& config, std::uint64_t seed)
{
    if (acts.rows() < 2) throw DimensionError("distillation needs at least two activation rows");
    if (acts.z.rows() != acts.t.rows()) throw DimensionError("z and t row counts differ");
    const auto start = Clock::now();
    const HoldoutSplit split = split_holdout(acts, config.holdout_fraction, seed);

    InputTransform transform;
    transform.append_one = config.append_one;
    if (config.standardize) {
        const Standardization st = standardize(split.train.z);
        transform.mean = st.means;
        transform.scale = st.scales;
    }
    const Matrix features = transform.apply(split.train.z);
    const Matrix& targets = split.train.t;

    const std::uint64_t gate_seed = seed ^ 0x5851f42d4c957f2dULL;
    const auto gates = std::make_shared<const GateSet>(
        config.gate_source == GateSource::data_derived
            ? data_derived_gates(features, split.train.t, config.gate_count, gate_seed)
            : sample_gaussian_gates(features, config.gate_count, gate_seed));
    if (gates->size() == 0) throw Error("gate set is empty");

    SolverConfig solver = config.solver;
    solver.loss = Loss::squared;
    solver.seed = seed;
    const double lmax = lambda_max(features, targets, *gates, Loss::squared);
    const std::vector<double> lambdas =
        lmax > 0.0 ? lambda_path(lmax, config.lambda_points, config.decade_span) : std::vector<double>{0.0};
    auto path = solve_path(features, targets, gates, solver, lambdas);

    DistillResult result;
    std::optional<std::size_t> best;
    std::size_t sparsest = 0;
    std::vector<GReLUStudent> students;
    for (std::size_t j = 0; j < path.size(); ++j) {
        GReLUStudent student = recover_weights(path[j].result.solution);
        student.transform = transform;
        PathSummary summary;
        summary.lambda = path[j].lambda;
        summary.holdout_mse = activation_mse(student.forward(split.holdout.z), split.holdout.t);
        summary.effective_parameters = student.effective_parameters();
        summary.iterations = path[j].result.iterations;
        summary.status = to_string(path[j].result.status);
        const bool affordable = !config.param_budget || summary.effective_parameters <= *config.param_budget;
        if (affordable && (!best || summary.holdout_mse < result.path[*best].holdout_mse)) best = j;
        if (j > 0 && summary.effective_parameters < result.path[sparsest].effective_parameters) sparsest = j;
        result.path.push_back(summary);
        students.push_back(std::move(student));
    }
    result.selected = best.value_or(sparsest);
    result.student = std::move(students[result.selected]);
    result.solution = path[result.selected].result.solution;
    result.trace = path[result.selected].result.trace;
    result.wall_ms = ms_since(start);
    return result;
}

DistillResult distill_block(const MLPNet& teacher, BlockRange block, const Dataset& ds, const DistillConfig& config,
                            std::uint64_t seed)
{
    return distill_activations(extract_block_activations(teacher, ds.x, block), config, seed);
}

Index block_input_dim(const BlockStudent& student)
{
    return std::visit([](const auto& s) { return s.input_dim(); }, student);
}

Index block_output_dim(const BlockStudent& student)
{
    return std::visit(
        [](const auto& s) -> Index {
            if constexpr (std::is_same_v<std::decay_t<decltype(s)>, MLPNet>) {
                return s.output_dim();
            } else {
                return s.outputs();
            }
        },
        student);
}

Matrix block_forward(const BlockStudent& student, const Matrix& z)
{
    return std::visit([&](const auto& s) { return s.forward(z); }, student);
}

Matrix swapped_forward(const MLPNet& teacher, BlockRange block, const BlockStudent& student, const Matrix& x)
{
    if (block.first < 0 || block.last >= teacher.depth() || block.first > block.last) {
        throw DimensionError("block out of range");
    }
    const Index in = teacher.layers[static_cast<std::size_t>(block.first)].w.rows();
    const Index out = teacher.layers[static_cast<std::size_t>(block.last)].w.cols();
    if (block_input_dim(student) != in || block_output_dim(student) != out) {
        throw DimensionError("student maps " + std::to_string(block_input_dim(student)) + " -> " +
                             std::to_string(block_output_dim(student)) + " but the block maps " +
                             std::to_string(in) + " -> " + std::to_string(out));
    }
    Matrix h = block.first > 0 ? teacher.forward_range(x, 0, block.first - 1) : x;
    h = block_forward(student, h);
    if (block.last + 1 < teacher.depth()) h = teacher.forward_range(h, block.last + 1, teacher.depth() - 1);
    return h;
}

std::uint64_t frozen_checksum(const MLPNet& teacher, BlockRange block)
{
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    const auto mix = [&](const double* data, Index size) {
        for (Index i = 0; i < size; ++i) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, data + i, sizeof(double));
            for (const unsigned char b : bytes) {
                hash ^= b;
                hash *= 0x100000001b3ULL;
            }
        }
    };
    for (Index l = 0; l < teacher.depth(); ++l) {
        if (l >= block.first && l <= block.last) continue;
        const auto& layer = teacher.layers[static_cast<std::size_t>(l)];
        mix(layer.w.data(), layer.w.size());
        mix(layer.b.data(), layer.b.size());
    }
    return hash;
}

SwapResult swap_and_evaluate(const MLPNet& teacher, BlockRange block, const BlockStudent& student,
                             const Dataset& test)
{
    if (!test.labels) throw Error("swap evaluation needs labeled test data");
    SwapResult result;
    result.checksum_before = frozen_checksum(teacher, block);
    result.accuracy = accuracy(swapped_forward(teacher, block, student, test.x), *test.labels);
    result.checksum_after = frozen_checksum(teacher, block);
    return result;
}

void ExperimentConfig::validate() const
{
    if (!(time_budget_factor >= 1.0)) throw Error("time_budget_factor must be >= 1");
    if (seeds.empty()) throw Error("at least one seed is required");
    if (jobs < 1) throw Error("jobs must be >= 1");
    if (distill.lambda_points < 1) throw Error("lambda_points must be >= 1");
    if (!(distill.holdout_fraction > 0.0 && distill.holdout_fraction < 1.0)) {
        throw Error("holdout_fraction must lie in (0, 1)");
    }
    distill.solver.validate();
}

nlohmann::json ExperimentReport::to_json() const
{
    nlohmann::json j;
    j["loss_scale"] = "1/(2n)";
    j["block_parameters"] = block_parameters;
    j["model_parameters"] = model_parameters;
    j["samples_per_class"] = samples_per_class ? nlohmann::json(*samples_per_class) : nlohmann::json(nullptr);
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"method", r.method},
                             {"seed", r.seed},
                             {"params_effective", r.params_effective},
                             {"block_sparsity", r.block_sparsity},
                             {"overall_sparsity", r.overall_sparsity},
                             {"activation_mse", r.activation_mse},
                             {"end_to_end_accuracy", r.end_to_end_accuracy},
                             {"wall_ms", r.wall_ms},
                             {"train_rows", r.train_rows}});
    }
    for (const auto& [method, metrics] : aggregate) {
        for (const auto& [metric, agg] : metrics) {
            j["aggregate"][method][metric] = {{"mean", agg.mean}, {"two_std", agg.two_std}, {"count", agg.count}};
        }
    }
    for (const auto& [seed, counts] : class_counts) j["class_counts"][std::to_string(seed)] = counts;
    return j;
}

const MethodRow& ExperimentReport::row(const std::string& method, std::uint64_t seed) const
{
    for (const auto& r : rows) {
        if (r.method == method && r.seed == seed) return r;
    }
    throw Error("no row for method '" + method + "' and seed " + std::to_string(seed));
}

TrainedTeacher prepare_teacher(const ExperimentConfig& config, std::uint64_t seed)
{
    TrainedTeacher out;
    out.data = config.data ? *config.data : make_gaussian_mixture(config.task, seed);
    TeacherConfig tc = config.teacher;
    tc.seed = seed;
    out.teacher = train_teacher(out.data.train, tc);
    return out;
}

BlockRange resolve_block(const ExperimentConfig& config, const MLPNet& teacher)
{
    if (config.block) return *config.block;
    if (teacher.depth() < 2) throw DimensionError("teacher needs at least two layers for a default block");
    return {teacher.depth() - 2, teacher.depth() - 2};
}

ExperimentConfig desk_scale_config()
{
    ExperimentConfig cfg;
    cfg.task.mean_scale = 0.5;
    cfg.teacher.hidden_widths = {32, 16};
    cfg.teacher.epochs = 20;
    cfg.distill.gate_count = 20;
    cfg.distill.gate_source = GateSource::data_derived;
    cfg.distill.lambda_points = 4;
    cfg.distill.decade_span = 6.0;
    cfg.distill.solver.max_iters = 100;
    cfg.distill.solver.one_vs_all = false;
    cfg.distill.solver.tol_grad_map = 1e-6;
    cfg.distill.solver.tol_rel_obj = 1e-6;
    cfg.distill.solver.stall_window = 10;
    return cfg;
}

ExperimentReport compare_methods(const ExperimentConfig& config)
{
    config.validate();
    auto outcomes = run_seeds(config.seeds, config.jobs, [&](std::size_t s) {
        const auto seed = config.seeds[s];
        return run_seed(config, prepare_teacher(config, seed), seed);
    });
    return assemble(std::move(outcomes), config.seeds, config.split.samples_per_class);
}

std::vector<ExperimentReport> sample_budget_sweep(const ExperimentConfig& config,
                                                  const std::vector<std::size_t>& budgets)
{
    config.validate();
    if (budgets.empty()) throw Error("sweep needs at least one budget");
    std::vector<TrainedTeacher> teachers;
    for (const auto seed : config.seeds) teachers.push_back(prepare_teacher(config, seed));
    std::vector<ExperimentReport> reports;
    for (const auto budget : budgets) {
        ExperimentConfig cfg = config;
        cfg.split.samples_per_class = budget;
        auto outcomes = run_seeds(cfg.seeds, cfg.jobs, [&](std::size_t s) {
            return run_seed(cfg, teachers[s], cfg.seeds[s]);
        });
        reports.push_back(assemble(std::move(outcomes), cfg.seeds, budget));
    }
    return reports;
}

} // namespace cvxdistill
