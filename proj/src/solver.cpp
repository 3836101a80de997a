#include <cvxdistill/solver.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <json.hpp>

#include <cvxdistill/nonconvex.hpp>

namespace cvxdistill {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start)
{
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Matrix signed_targets(const Matrix& y)
{
    return y.unaryExpr([](double v) { return v > 0.0 ? 1.0 : -1.0; });
}

// Derivative of the smooth loss with respect to the prediction.
Matrix loss_derivative(const Matrix& prediction, const Matrix& y, Loss loss)
{
    const double n = static_cast<double>(prediction.rows());
    if (loss == Loss::squared) return (prediction - y) / n;
    const Matrix ys = signed_targets(y);
    const Matrix margin = ys.cwiseProduct(prediction);
    // -y * sigmoid(-y * p) / n
    return -ys.cwiseProduct(margin.unaryExpr([](double m) { return 1.0 / (1.0 + std::exp(m)); })) / n;
}

std::int64_t nonzero_groups(const Matrix& weights)
{
    std::int64_t count = 0;
    for (Index j = 0; j < weights.cols(); ++j) count += weights.col(j).squaredNorm() > 0.0 ? 1 : 0;
    return count;
}

// Inverse of a power-iteration estimate of the smooth part's Lipschitz constant.
double initial_step(const GatedDesign& design, Loss loss, std::uint64_t seed, int iters)
{
    Rng rng(seed);
    Matrix v = gaussian_matrix(design.dim(), design.gate_count(), rng);
    const double n = static_cast<double>(design.samples());
    double estimate = 0.0;
    for (int it = 0; it < iters; ++it) {
        const double norm = v.norm();
        if (norm == 0.0) break;
        v /= norm;
        v = design.adjoint(design.apply(v, 1)) / n;
        estimate = v.norm();
    }
    if (loss == Loss::logistic) estimate /= 4.0;
    return estimate > 0.0 ? 1.0 / estimate : 1.0;
}

struct CoreResult
{
    Matrix weights;
    SolverTrace trace;
    SolveStatus status = SolveStatus::max_iters;
    double objective = 0.0;
    double grad_map_norm = 0.0;
    double step = 0.0;
    int iterations = 0;
};

// Smooth part through predictions: image(W) = A(W).
class DirectModel
{
public:
    DirectModel(const GatedDesign& design, const Matrix& y, Loss loss) : design_(design), y_(y), loss_(loss) {}

    Matrix image(const Matrix& w) const { return design_.apply(w, y_.cols()); }
    double loss(const Matrix&, const Matrix& image) const { return smooth_loss(image, y_, loss_); }
    Matrix gradient(const Matrix&, const Matrix& image) const
    {
        return design_.adjoint(loss_derivative(image, y_, loss_));
    }
    // f(w + dw) - f(w) - <grad, dw> when it has a closed form.
    std::optional<double> curvature(const Matrix&, const Matrix& image_step) const
    {
        if (loss_ != Loss::squared) return std::nullopt;
        return 0.5 * image_step.squaredNorm() / static_cast<double>(y_.rows());
    }

private:
    const GatedDesign& design_;
    const Matrix& y_;
    Loss loss_;
};

// Blocks of a d x p*C weight matrix restacked as a p*d x C matrix.
Matrix stack_blocks(const Matrix& w, Index gates, Index outputs)
{
    const Index d = w.rows();
    Matrix out(gates * d, outputs);
    for (Index i = 0; i < gates; ++i) out.middleRows(i * d, d) = w.middleCols(i * outputs, outputs);
    return out;
}

Matrix unstack_blocks(const Matrix& s, Index d, Index gates)
{
    const Index outputs = s.cols();
    Matrix out(d, gates * outputs);
    for (Index i = 0; i < gates; ++i) out.middleCols(i * outputs, outputs) = s.middleRows(i * d, d);
    return out;
}

// H = A^T A / n for A = [D_1 X, ..., D_p X].
struct NormalMatrix
{
    Matrix h;
    Matrix a;
};

NormalMatrix normal_matrix(const GatedDesign& design)
{
    const Index d = design.dim();
    const Index p = design.gate_count();
    NormalMatrix out;
    out.a.resize(design.samples(), p * d);
    for (Index i = 0; i < p; ++i) {
        out.a.middleCols(i * d, d) = (design.x().array().colwise() * design.masks().col(i).array()).matrix();
    }
    out.h = Matrix::Zero(p * d, p * d);
    out.h.selfadjointView<Eigen::Lower>().rankUpdate(out.a.transpose(), 1.0 / static_cast<double>(design.samples()));
    out.h.triangularView<Eigen::StrictlyUpper>() = out.h.transpose();
    return out;
}

// Squared loss through the normal matrix: image(W) = H stack(W).
class GramModel
{
public:
    GramModel(const NormalMatrix& normal, const Matrix& y, Index d, Index gates)
        : h_(normal.h), d_(d), gates_(gates),
          b_(normal.a.transpose() * y / static_cast<double>(y.rows())),
          y_sq_(0.5 * y.squaredNorm() / static_cast<double>(y.rows()))
    {
    }

    Matrix image(const Matrix& w) const { return h_ * stack_blocks(w, gates_, b_.cols()); }
    double loss(const Matrix& w, const Matrix& image) const
    {
        const Matrix s = stack_blocks(w, gates_, b_.cols());
        return std::max(0.0, 0.5 * (s.array() * image.array()).sum() - (s.array() * b_.array()).sum() + y_sq_);
    }
    Matrix gradient(const Matrix&, const Matrix& image) const { return unstack_blocks(image - b_, d_, gates_); }
    std::optional<double> curvature(const Matrix& step, const Matrix& image_step) const
    {
        return 0.5 * (stack_blocks(step, gates_, b_.cols()).array() * image_step.array()).sum();
    }

private:
    const Matrix& h_;
    Index d_;
    Index gates_;
    Matrix b_;
    double y_sq_;
};

template <class Model>
class ProxGradient
{
public:
    ProxGradient(const Model& model, const SolverConfig& config) : model_(model), config_(config) {}

    double full(double smooth, const Matrix& w) const { return smooth + config_.lambda * group_penalty(w); }

    CoreResult run(Matrix w, double step, bool accelerated) const
    {
        const auto start = Clock::now();
        const auto& ls = config_.line_search;
        CoreResult out;

        Matrix p = model_.image(w);
        double f = model_.loss(w, p);
        double obj = full(f, w);

        Matrix yv = w;
        Matrix py = p;
        double fy = f;
        double t = 1.0;
        std::vector<double> history;
        double best_obj = obj;
        double min_obj = obj;
        Matrix best_w = w;
        Matrix best_p = p;

        for (int k = 1; k <= config_.max_iters; ++k) {
            const Matrix grad = model_.gradient(yv, py);
            step *= ls.growth_factor;
            Matrix xn;
            Matrix pn;
            double fn = 0.0;
            Matrix diff;
            while (true) {
                xn = prox_group_l2(yv - step * grad, config_.lambda * step);
                pn = model_.image(xn);
                fn = model_.loss(xn, pn);
                diff = xn - yv;
                const double quad = diff.squaredNorm() / (2.0 * step);
                bool accept = false;
                // The closed-form curvature avoids cancellation near the optimum.
                if (const auto curv = model_.curvature(diff, pn - py)) {
                    accept = *curv <= quad * (1.0 + 1e-12);
                } else {
                    const double bound = fy + (grad.array() * diff.array()).sum() + quad;
                    accept = fn <= bound + 1e-14 * std::max(1.0, std::abs(fy));
                }
                if (accept || step < 1e-300) break;
                step *= ls.backtrack_factor;
            }
            const double gm = diff.norm() / step;
            const double obj_new = full(fn, xn);
            const double slack = 1e-14 * std::max(1.0, std::abs(obj));

            if (obj_new <= obj + slack) {
                // Inside the rounding band of the objective, restarts follow
                // the sign of the momentum step instead of function values.
                const bool stale = obj_new > obj && -(diff.array() * (xn - w).array()).sum() > 0.0;
                if (accelerated && !(stale && config_.restart)) {
                    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
                    const double beta = (t - 1.0) / t_next;
                    yv = xn + beta * (xn - w);
                    py = pn + beta * (pn - p);
                    fy = beta == 0.0 ? fn : model_.loss(yv, py);
                    t = t_next;
                } else {
                    t = 1.0;
                    yv = xn;
                    py = pn;
                    fy = fn;
                }
                w = std::move(xn);
                p = std::move(pn);
                f = fn;
                obj = obj_new;
                // Later iterates win ties within the rounding band.
                if (obj <= min_obj + slack) {
                    min_obj = std::min(min_obj, obj);
                    best_obj = obj;
                    best_w = w;
                    best_p = p;
                }
            } else {
                // Objective went up: drop the momentum and restart from w.
                // Without momentum this only happens through rounding.
                if (!accelerated || !config_.restart) step *= ls.backtrack_factor;
                t = 1.0;
                yv = w;
                py = p;
                fy = f;
            }

            out.iterations = k;
            out.trace.records.push_back({k, obj, gm, step, ms_since(start), nonzero_groups(w)});
            history.push_back(obj);

            if (gm <= config_.tol_grad_map && stationarity_at(best_w, best_p, step) <= config_.tol_grad_map) {
                out.status = SolveStatus::converged;
                break;
            }
            if (config_.tol_rel_obj > 0.0 && k > config_.stall_window) {
                const double before = history[static_cast<std::size_t>(k - 1 - config_.stall_window)];
                if (before - obj <= config_.tol_rel_obj * std::max(std::abs(obj), 1e-300)) {
                    out.status = SolveStatus::stalled;
                    break;
                }
            }
        }

        out.objective = best_obj;
        out.step = step;
        out.grad_map_norm = stationarity_at(best_w, best_p, step);
        out.weights = std::move(best_w);
        return out;
    }

    double stationarity_at(const Matrix& w, const Matrix& p, double step) const
    {
        const Matrix z = prox_group_l2(w - step * model_.gradient(w, p), config_.lambda * step);
        return (w - z).norm() / step;
    }

private:
    const Model& model_;
    const SolverConfig& config_;
};

bool prefer_normal_matrix(const GatedDesign& design, const SolverConfig& config)
{
    if (config.loss != Loss::squared) return false;
    const Index width = design.dim() * design.gate_count();
    switch (config.operator_mode) {
    case OperatorMode::direct: return false;
    case OperatorMode::normal: return true;
    case OperatorMode::automatic: return width <= 4096 && design.samples() >= 4 * width;
    }
    return false;
}

CoreResult run_core(const GatedDesign& design, const NormalMatrix* normal, const Matrix& y, const SolverConfig& config,
                    Matrix w0, double step0, bool accelerated)
{
    if (normal) {
        const GramModel model(*normal, y, design.dim(), design.gate_count());
        return ProxGradient<GramModel>(model, config).run(std::move(w0), step0, accelerated);
    }
    const DirectModel model(design, y, config.loss);
    return ProxGradient<DirectModel>(model, config).run(std::move(w0), step0, accelerated);
}

SolveResult solve(const Matrix& x, const Matrix& y, std::shared_ptr<const GateSet> gates, const SolverConfig& config,
                  const ConvexSolution* warm_start, bool accelerated)
{
    config.validate();
    if (!gates || gates->size() == 0) throw Error("solver needs a non-empty gate set");
    if (x.rows() != y.rows()) throw DimensionError("x and y row counts differ");
    if (x.rows() == 0) throw DimensionError("solver needs at least one sample");
    const GatedDesign design(x, gates);
    const Index c = y.cols();
    const Index p = design.gate_count();
    if (warm_start && (warm_start->dim() != x.cols() || warm_start->outputs != c || warm_start->gate_count() != p)) {
        throw DimensionError("warm start does not match the problem shape");
    }
    const double step0 = initial_step(design, config.loss, config.seed, config.power_iters);

    const Matrix zero_pred = Matrix::Zero(y.rows(), c);
    if (config.lambda > 0.0 &&
        design.adjoint(loss_derivative(zero_pred, y, config.loss)).colwise().norm().maxCoeff() <= config.lambda) {
        SolveResult zero;
        zero.solution = ConvexSolution::zeros(gates, c);
        zero.solution.lambda = config.lambda;
        zero.status = SolveStatus::converged;
        zero.objective = smooth_loss(zero_pred, y, config.loss);
        zero.step_size = step0;
        zero.trace.records.push_back({0, zero.objective, 0.0, step0, 0.0, 0});
        return zero;
    }

    std::optional<NormalMatrix> normal;
    if (prefer_normal_matrix(design, config)) normal = normal_matrix(design);
    const NormalMatrix* nm = normal ? &*normal : nullptr;

    SolveResult result;
    result.solution = ConvexSolution::zeros(gates, c);
    result.solution.lambda = config.lambda;

    if (c == 1 || !config.one_vs_all) {
        auto core = run_core(design, nm, y, config,
                             warm_start ? warm_start->weights : Matrix::Zero(x.cols(), p * c), step0, accelerated);
        result.solution.weights = std::move(core.weights);
        result.trace = std::move(core.trace);
        result.status = core.status;
        result.objective = core.objective;
        result.grad_map_norm = core.grad_map_norm;
        result.step_size = core.step;
        result.iterations = core.iterations;
        return result;
    }

    // One-vs-all: the objective separates over output columns.
    SolverConfig column_config = config;
    column_config.tol_grad_map = config.tol_grad_map / std::sqrt(static_cast<double>(c));
    std::vector<CoreResult> parts;
    for (Index k = 0; k < c; ++k) {
        const Matrix yk = y.col(k);
        Matrix w0 = Matrix::Zero(x.cols(), p);
        if (warm_start) w0 = output_slice(*warm_start, k).weights;
        parts.push_back(run_core(design, nm, yk, column_config, std::move(w0), step0, accelerated));
    }

    std::size_t longest = 0;
    double gm_sq = 0.0;
    result.step_size = std::numeric_limits<double>::infinity();
    bool any_max = false;
    bool any_stall = false;
    for (Index k = 0; k < c; ++k) {
        auto& part = parts[static_cast<std::size_t>(k)];
        for (Index i = 0; i < p; ++i) result.solution.weights.col(i * c + k) = part.weights.col(i);
        longest = std::max(longest, part.trace.records.size());
        result.objective += part.objective;
        gm_sq += part.grad_map_norm * part.grad_map_norm;
        result.step_size = std::min(result.step_size, part.step);
        result.iterations = std::max(result.iterations, part.iterations);
        any_max |= part.status == SolveStatus::max_iters;
        any_stall |= part.status == SolveStatus::stalled;
    }
    result.grad_map_norm = std::sqrt(gm_sq);
    result.status = any_max ? SolveStatus::max_iters : any_stall ? SolveStatus::stalled : SolveStatus::converged;

    // Merged trace: iteration j shows every class at min(j, its last iteration);
    // elapsed time adds up because the classes are solved one after another.
    for (std::size_t j = 0; j < longest; ++j) {
        TraceRecord rec;
        rec.iter = static_cast<int>(j + 1);
        rec.step_size = std::numeric_limits<double>::infinity();
        double gm = 0.0;
        for (const auto& part : parts) {
            const auto& recs = part.trace.records;
            if (recs.empty()) continue;
            const auto& r = recs[std::min(j, recs.size() - 1)];
            rec.objective += r.objective;
            gm += r.grad_map_norm * r.grad_map_norm;
            rec.step_size = std::min(rec.step_size, r.step_size);
            rec.elapsed_ms += r.elapsed_ms;
            rec.nnz_groups += r.nnz_groups;
        }
        rec.grad_map_norm = std::sqrt(gm);
        result.trace.records.push_back(rec);
    }
    return result;
}

} // namespace

Loss loss_from_string(const std::string& name)
{
    if (name == "squared") return Loss::squared;
    if (name == "logistic") return Loss::logistic;
    throw Error("unknown loss '" + name + "'");
}

void SolverConfig::validate() const
{
    if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
    if (!(line_search.backtrack_factor > 0.0 && line_search.backtrack_factor < 1.0)) {
        throw Error("backtrack_factor must lie in (0, 1)");
    }
    if (!(line_search.growth_factor >= 1.0)) throw Error("growth_factor must be >= 1");
    if (max_iters < 0 || power_iters < 1 || stall_window < 1) throw Error("invalid iteration limits");
}

std::string SolverTrace::to_jsonl() const
{
    std::string out;
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["iter"] = r.iter;
        j["objective"] = r.objective;
        j["grad_map_norm"] = r.grad_map_norm;
        j["step_size"] = r.step_size;
        j["elapsed_ms"] = r.elapsed_ms;
        j["nnz_groups"] = r.nnz_groups;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::string to_string(SolveStatus status)
{
    switch (status) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::stalled: return "stalled";
    case SolveStatus::max_iters: return "max_iters";
    }
    return "unknown";
}

GatedDesign::GatedDesign(const Matrix& x, std::shared_ptr<const GateSet> gates)
    : x_(x), masks_(gate_masks(x, gates->directions)), gates_(std::move(gates))
{
}

Matrix GatedDesign::apply(const Matrix& weights, Index outputs) const
{
    const Matrix xw = x_ * weights;
    Matrix out = Matrix::Zero(x_.rows(), outputs);
    for (Index i = 0; i < gate_count(); ++i) {
        out += (xw.middleCols(i * outputs, outputs).array().colwise() * masks_.col(i).array()).matrix();
    }
    return out;
}

Matrix GatedDesign::adjoint(const Matrix& residual) const
{
    const Index c = residual.cols();
    Matrix masked(x_.rows(), gate_count() * c);
    for (Index i = 0; i < gate_count(); ++i) {
        masked.middleCols(i * c, c) = (residual.array().colwise() * masks_.col(i).array()).matrix();
    }
    return x_.transpose() * masked;
}

double smooth_loss(const Matrix& prediction, const Matrix& y, Loss loss)
{
    if (prediction.rows() != y.rows() || prediction.cols() != y.cols()) {
        throw DimensionError("prediction and target shapes differ");
    }
    const double n = static_cast<double>(y.rows());
    if (loss == Loss::squared) return 0.5 * (prediction - y).squaredNorm() / n;
    const Matrix margin = signed_targets(y).cwiseProduct(prediction);
    double total = 0.0;
    for (Index j = 0; j < margin.cols(); ++j) {
        for (Index i = 0; i < margin.rows(); ++i) {
            const double m = -margin(i, j);
            total += std::max(m, 0.0) + std::log1p(std::exp(-std::abs(m)));
        }
    }
    return total / n;
}

double group_penalty(const Matrix& weights)
{
    return weights.colwise().norm().sum();
}

double objective(const ConvexSolution& solution, const Matrix& x, const Matrix& y, const SolverConfig& config)
{
    return smooth_loss(grelu_forward(solution, x), y, config.loss) + config.lambda * group_penalty(solution.weights);
}

Matrix smooth_gradient(const ConvexSolution& solution, const Matrix& x, const Matrix& y, const SolverConfig& config)
{
    const GatedDesign design(x, solution.gates);
    return design.adjoint(loss_derivative(design.apply(solution.weights, solution.outputs), y, config.loss));
}

Matrix prox_group_l2(const Matrix& blocks, double threshold)
{
    if (threshold < 0.0) throw Error("prox threshold must be >= 0");
    Matrix out = blocks;
    if (threshold == 0.0) return out;
    for (Index j = 0; j < out.cols(); ++j) {
        const double norm = out.col(j).norm();
        if (norm <= threshold) {
            out.col(j).setZero();
        } else {
            out.col(j) *= 1.0 - threshold / norm;
        }
    }
    return out;
}

double stationarity(const ConvexSolution& solution, const Matrix& x, const Matrix& y, const SolverConfig& config,
                    double step)
{
    const Matrix grad = smooth_gradient(solution, x, y, config);
    const Matrix z = prox_group_l2(solution.weights - step * grad, config.lambda * step);
    return (solution.weights - z).norm() / step;
}

SolveResult solve_ista(const Matrix& x, const Matrix& y, std::shared_ptr<const GateSet> gates,
                       const SolverConfig& config, const ConvexSolution* warm_start)
{
    return solve(x, y, std::move(gates), config, warm_start, false);
}

SolveResult solve_rfista(const Matrix& x, const Matrix& y, std::shared_ptr<const GateSet> gates,
                         const SolverConfig& config, const ConvexSolution* warm_start)
{
    return solve(x, y, std::move(gates), config, warm_start, true);
}

double lambda_max(const Matrix& x, const Matrix& y, const GateSet& gates, Loss loss)
{
    if (x.rows() == 0 || gates.size() == 0) throw Error("lambda_max needs a non-empty problem");
    const GatedDesign design(x, std::make_shared<const GateSet>(gates));
    const Matrix grad = design.adjoint(loss_derivative(Matrix::Zero(y.rows(), y.cols()), y, loss));
    return grad.colwise().norm().maxCoeff();
}

std::vector<double> lambda_path(double lambda_max, int count, double decade_span)
{
    if (count < 1) throw Error("lambda path needs at least one point");
    std::vector<double> out;
    for (int j = 0; j < count; ++j) {
        const double frac = count == 1 ? 0.0 : static_cast<double>(j) / (count - 1);
        out.push_back(lambda_max * std::pow(10.0, -decade_span * frac));
    }
    return out;
}

std::vector<PathPoint> solve_path(const Matrix& x, const Matrix& y, std::shared_ptr<const GateSet> gates,
                                  const SolverConfig& config, const std::vector<double>& lambdas)
{
    std::vector<PathPoint> out;
    double total_ms = 0.0;
    for (const double lambda : lambdas) {
        SolverConfig cfg = config;
        cfg.lambda = lambda;
        const auto start = Clock::now();
        PathPoint point;
        point.lambda = lambda;
        point.result = solve_rfista(x, y, gates, cfg, out.empty() ? nullptr : &out.back().result.solution);
        total_ms += ms_since(start);
        point.cumulative_ms = total_ms;
        out.push_back(std::move(point));
    }
    return out;
}

ConeReport cone_feasibility(const ConeProgram& program, const Matrix& x)
{
    ConeReport report;
    std::vector<const Matrix*> blocks;
    for (const auto& b : program.v_blocks) blocks.push_back(&b);
    for (const auto& b : program.u_blocks) blocks.push_back(&b);
    const std::size_t p = program.patterns.size();
    if (program.v_blocks.size() != p || (!program.u_blocks.empty() && program.u_blocks.size() != p)) {
        throw DimensionError("cone program needs one block per pattern");
    }
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const Pattern& pattern = program.patterns[b % p];
        const Matrix& v = *blocks[b];
        if (v.rows() != x.cols() || static_cast<Index>(pattern.size()) != x.rows()) {
            throw DimensionError("cone block shape does not match data");
        }
        const Matrix xv = x * v;
        double worst = 0.0;
        for (Index i = 0; i < xv.rows(); ++i) {
            const double sign = pattern[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
            for (Index k = 0; k < xv.cols(); ++k) worst = std::max(worst, -sign * xv(i, k));
        }
        const bool ok = worst <= 1e-9;
        report.block_feasible.push_back(ok);
        if (!ok) report.violating.push_back(b);
        report.max_violation = std::max(report.max_violation, worst);
    }
    report.feasible = report.violating.empty();
    return report;
}

ConeProgram cone_program_from_solution(const ConvexSolution& solution)
{
    ConeProgram program;
    program.patterns = solution.gates->patterns;
    for (Index i = 0; i < solution.gate_count(); ++i) program.v_blocks.emplace_back(solution.block(i));
    return program;
}

ProbeReport global_optimality_probe(const Matrix& x, const Vector& y, const GateSet& exhaustive,
                                    const SolverConfig& config, const ProbeOptions& options)
{
    if (x.rows() > 10 || x.cols() > 3) {
        throw DimensionError("global optimality probe is limited to n <= 10, d <= 3");
    }
    if (exhaustive.size() == 0) throw Error("probe needs a non-empty gate set");
    SolverConfig cfg = config;
    cfg.loss = Loss::squared;
    const auto gates = std::make_shared<const GateSet>(exhaustive);
    const Matrix ym = y;
    const SolveResult convex = solve_rfista(x, ym, gates, cfg);

    ProbeReport report;
    report.convex_objective = convex.objective;
    report.convex_status = convex.status;
    report.best_nonconvex_objective = std::numeric_limits<double>::infinity();

    RegularizedFitOptions fit;
    fit.lambda = cfg.lambda;
    fit.steps = options.steps;
    fit.learning_rate = options.learning_rate;
    for (int r = 0; r < options.restarts; ++r) {
        fit.seed = options.seed * 1000003ULL + static_cast<std::uint64_t>(r);
        const double gated = fit_regularized_two_layer(x, y, &exhaustive.directions, exhaustive.size(), fit).objective;
        report.nonconvex_objectives.push_back(gated);
        if (options.include_relu) {
            report.nonconvex_objectives.push_back(
                fit_regularized_two_layer(x, y, nullptr, exhaustive.size(), fit).objective);
        }
    }
    for (double v : report.nonconvex_objectives) {
        report.best_nonconvex_objective = std::min(report.best_nonconvex_objective, v);
    }
    report.margin = report.best_nonconvex_objective - report.convex_objective;
    report.passed = report.margin >= -1e-6;
    return report;
}

} // namespace cvxdistill
