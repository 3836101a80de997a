#include <cvxdistill/polish.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>

namespace cvxdistill {
namespace {

using Clock = std::chrono::steady_clock;

// Smooth variable: beta stacked over the intercept row.
struct Iterate
{
    Matrix beta;
    Vector intercept;
};

class ElasticProblem
{
public:
    explicit ElasticProblem(const PolishProblem& p) : p_(p), n_(static_cast<double>(p.samples())) {}

    Matrix predict(const Iterate& it) const
    {
        Matrix out = p_.features * it.beta;
        if (p_.fit_intercept) out.rowwise() += it.intercept.transpose();
        if (p_.offset.size() > 0) out += p_.offset;
        return out;
    }

    double loss(const Matrix& pred) const { return 0.5 * (pred - p_.targets).squaredNorm() / n_; }

    Iterate gradient(const Matrix& pred) const
    {
        const Matrix r = (pred - p_.targets) / n_;
        Iterate g;
        g.beta = p_.features.transpose() * r;
        g.intercept = p_.fit_intercept ? Vector(r.colwise().sum().transpose()) : Vector::Zero(p_.outputs());
        return g;
    }

    double penalty(const Matrix& beta) const
    {
        double total = 0.0;
        for (std::size_t g = 0; g < p_.groups.size(); ++g) {
            const double norm = group_norm(beta, g);
            total += weight(g) * (p_.alpha * norm + 0.5 * (1.0 - p_.alpha) * norm * norm);
        }
        return p_.lambda * total;
    }

    Iterate prox(const Iterate& v, double step) const
    {
        Iterate out = v;
        for (std::size_t g = 0; g < p_.groups.size(); ++g) {
            const double norm = group_norm(v.beta, g);
            const double kappa = p_.lambda * weight(g) * step;
            const double shrink =
                (norm > 0.0 ? std::max(0.0, 1.0 - p_.alpha * kappa / norm) : 0.0) / (1.0 + (1.0 - p_.alpha) * kappa);
            for (const Index row : p_.groups[g]) out.beta.row(row) = v.beta.row(row) * shrink;
        }
        return out;
    }

    std::int64_t nonzero_groups(const Matrix& beta) const
    {
        std::int64_t count = 0;
        for (std::size_t g = 0; g < p_.groups.size(); ++g) count += group_norm(beta, g) > 0.0 ? 1 : 0;
        return count;
    }

    double curvature_estimate(std::uint64_t seed) const
    {
        Rng rng(seed);
        Vector v = gaussian_matrix(p_.units() + 1, 1, rng);
        double estimate = 0.0;
        for (int it = 0; it < 20; ++it) {
            const double norm = v.norm();
            if (norm == 0.0) break;
            v /= norm;
            const Vector fv = p_.features * v.head(p_.units()) +
                              Vector::Constant(p_.samples(), p_.fit_intercept ? v(p_.units()) : 0.0);
            Vector back(p_.units() + 1);
            back.head(p_.units()) = p_.features.transpose() * fv;
            back(p_.units()) = p_.fit_intercept ? fv.sum() : 0.0;
            v = back / n_;
            estimate = v.norm();
        }
        return estimate;
    }

private:
    double group_norm(const Matrix& beta, std::size_t g) const
    {
        double sq = 0.0;
        for (const Index row : p_.groups[g]) sq += beta.row(row).squaredNorm();
        return std::sqrt(sq);
    }

    double weight(std::size_t g) const
    {
        return p_.group_weights.size() > 0 ? p_.group_weights(static_cast<Index>(g)) : 1.0;
    }

    const PolishProblem& p_;
    double n_;
};

double inner(const Iterate& a, const Iterate& b)
{
    return (a.beta.array() * b.beta.array()).sum() + a.intercept.dot(b.intercept);
}

double squared_norm(const Iterate& a)
{
    return a.beta.squaredNorm() + a.intercept.squaredNorm();
}

Iterate axpy(const Iterate& x, double a, const Iterate& y)
{
    return {x.beta + a * y.beta, x.intercept + a * y.intercept};
}

} // namespace

void PolishProblem::validate() const
{
    const Index m = units();
    if (targets.rows() != samples()) throw DimensionError("features and targets row counts differ");
    if (samples() == 0) throw DimensionError("polish problem has no samples");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
    std::vector<int> seen(static_cast<std::size_t>(m), 0);
    for (const auto& g : groups) {
        for (const Index row : g) {
            if (row < 0 || row >= m) throw Error("group member out of range");
            ++seen[static_cast<std::size_t>(row)];
        }
    }
    if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
        throw Error("groups must partition the hidden units");
    }
    if (group_weights.size() > 0) {
        if (group_weights.size() != static_cast<Index>(groups.size())) throw Error("one weight per group required");
        if ((group_weights.array() < 0.0).any()) throw Error("group weights must be >= 0");
    }
    if (offset.size() > 0 && (offset.rows() != samples() || offset.cols() != outputs())) {
        throw DimensionError("offset shape mismatch");
    }
    if (beta_init.size() > 0 && (beta_init.rows() != m || beta_init.cols() != outputs())) {
        throw DimensionError("beta_init shape mismatch");
    }
    if (intercept_init.size() > 0 && intercept_init.size() != outputs()) {
        throw DimensionError("intercept_init shape mismatch");
    }
}

PolishProblem build_polish_problem(const GReLUStudent& student, const Matrix& x, const Matrix& targets)
{
    if (student.width() == 0) throw Error("cannot polish an empty student");
    if (targets.cols() != student.outputs()) throw DimensionError("targets do not match student outputs");
    PolishProblem p;
    p.features = student.hidden(x);
    p.targets = targets;
    for (Index j = 0; j < student.width(); ++j) p.groups.push_back({j});
    p.beta_init = student.w2;
    p.intercept_init = student.out_bias.size() == student.outputs() ? student.out_bias : Vector::Zero(student.outputs());
    return p;
}

double polish_objective(const PolishProblem& problem, const Matrix& beta, const Vector& intercept)
{
    const ElasticProblem ep(problem);
    const Iterate it{beta, intercept};
    return ep.loss(ep.predict(it)) + ep.penalty(beta);
}

Matrix group_elastic_prox(const Matrix& v, double alpha, double lambda_weight_step)
{
    const double norm = v.norm();
    if (norm == 0.0) return Matrix::Zero(v.rows(), v.cols());
    const double shrink = std::max(0.0, 1.0 - alpha * lambda_weight_step / norm);
    return v * (shrink / (1.0 + (1.0 - alpha) * lambda_weight_step));
}

PolishResult solve_group_elastic(const PolishProblem& problem, const PolishConfig& config)
{
    problem.validate();
    const auto start = Clock::now();
    const ElasticProblem ep(problem);
    const auto& ls = config.line_search;

    const Iterate init{problem.beta_init.size() > 0 ? problem.beta_init
                                                    : Matrix::Zero(problem.units(), problem.outputs()),
                       problem.intercept_init.size() > 0 && problem.fit_intercept ? problem.intercept_init
                                                                                  : Vector::Zero(problem.outputs())};
    Iterate x = init;
    Matrix px = ep.predict(x);
    double obj = ep.loss(px) + ep.penalty(x.beta);

    PolishResult result;
    result.initial_objective = obj;

    const double curvature = ep.curvature_estimate(config.seed);
    double step = curvature > 0.0 ? 1.0 / curvature : 1.0;
    Iterate y = x;
    Matrix py = px;
    double t = 1.0;
    Iterate best = x;
    double best_obj = obj;
    double min_obj = obj;
    std::vector<double> history;
    double gm = 0.0;

    for (int k = 1; k <= config.max_iters; ++k) {
        const Iterate grad = ep.gradient(py);
        step *= ls.growth_factor;
        Iterate xn;
        Matrix pn;
        double fn = 0.0;
        Iterate diff;
        while (true) {
            xn = ep.prox(axpy(y, -step, grad), step);
            pn = ep.predict(xn);
            fn = ep.loss(pn);
            diff = axpy(xn, -1.0, y);
            // Squared loss: f(y + dy) - f(y) - <grad, dy> = |P dy|^2 / 2n exactly.
            const double curv = 0.5 * (pn - py).squaredNorm() / static_cast<double>(problem.samples());
            if (curv <= squared_norm(diff) / (2.0 * step) * (1.0 + 1e-12) || step < 1e-300) break;
            step *= ls.backtrack_factor;
        }
        gm = std::sqrt(squared_norm(diff)) / step;
        const double obj_new = fn + ep.penalty(xn.beta);
        const double slack = 1e-14 * std::max(1.0, std::abs(obj));
        if (obj_new <= obj + slack) {
            // Inside the rounding band, restart on the sign of the momentum step.
            const bool stale = obj_new > obj && -inner(diff, axpy(xn, -1.0, x)) > 0.0;
            const double t_next = stale ? 1.0 : 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            const double beta = stale ? 0.0 : (t - 1.0) / t_next;
            y = axpy(xn, beta, axpy(xn, -1.0, x));
            py = pn + beta * (pn - px);
            t = t_next;
            x = std::move(xn);
            px = std::move(pn);
            obj = obj_new;
            if (obj <= min_obj + slack) {
                min_obj = std::min(min_obj, obj);
                best = x;
                best_obj = obj;
            }
        } else {
            t = 1.0;
            y = x;
            py = px;
        }
        result.iterations = k;
        result.trace.records.push_back(
            {k, obj, gm, step, std::chrono::duration<double, std::milli>(Clock::now() - start).count(),
             ep.nonzero_groups(x.beta)});
        history.push_back(obj);

        if (gm <= config.tol_grad_map) {
            const Iterate gb = ep.gradient(ep.predict(best));
            const Iterate z = ep.prox(axpy(best, -step, gb), step);
            if (std::sqrt(squared_norm(axpy(best, -1.0, z))) / step <= config.tol_grad_map) {
                result.status = SolveStatus::converged;
                break;
            }
        }
        if (config.tol_rel_obj > 0.0 && k > config.stall_window) {
            const double before = history[static_cast<std::size_t>(k - 1 - config.stall_window)];
            if (before - obj <= config.tol_rel_obj * std::max(std::abs(obj), 1e-300)) {
                result.status = SolveStatus::stalled;
                break;
            }
        }
    }
    if (best_obj > result.initial_objective) {
        best = init;
        best_obj = result.initial_objective;
    }
    result.beta = std::move(best.beta);
    result.intercept = std::move(best.intercept);
    result.objective = best_obj;
    return result;
}

GReLUStudent prune_units(const GReLUStudent& student, const Matrix& beta, const Vector& intercept, double threshold)
{
    if (beta.rows() != student.width() || beta.cols() != student.outputs()) {
        throw DimensionError("beta must be width x outputs");
    }
    std::vector<Index> kept;
    for (Index j = 0; j < beta.rows(); ++j) {
        if (beta.row(j).norm() > threshold) kept.push_back(j);
    }
    GReLUStudent out;
    out.transform = student.transform;
    const auto m = static_cast<Index>(kept.size());
    out.gates.resize(student.gates.rows(), m);
    out.w1.resize(student.w1.rows(), m);
    out.w2.resize(m, beta.cols());
    for (Index j = 0; j < m; ++j) {
        const Index src = kept[static_cast<std::size_t>(j)];
        out.gates.col(j) = student.gates.col(src);
        out.w1.col(j) = student.w1.col(src);
        out.w2.row(j) = beta.row(src);
    }
    out.out_bias = intercept.size() == beta.cols() ? intercept : Vector::Zero(beta.cols());
    return out;
}

CompressionReport compression_report(std::uint64_t old_params, std::uint64_t new_params,
                                     std::uint64_t total_model_params)
{
    if (old_params == 0 || total_model_params == 0) throw Error("parameter counts must be positive");
    if (old_params > total_model_params) throw Error("block has more parameters than the model");
    const auto old_d = static_cast<double>(old_params);
    const auto new_d = static_cast<double>(new_params);
    const auto total_d = static_cast<double>(total_model_params);
    return {new_d / old_d, (total_d - old_d + new_d) / total_d};
}

} // namespace cvxdistill
