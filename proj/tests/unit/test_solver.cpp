#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include <cvxdistill/solver.hpp>

#include "helpers.hpp"

using namespace cvxdistill;

namespace {

struct Problem
{
    Matrix x;
    Matrix y;
    std::shared_ptr<const GateSet> gates;
};

Problem random_problem(std::uint64_t seed, Index n = 30, Index d = 4, Index c = 1, std::size_t p = 6)
{
    Rng rng(seed);
    Problem pr;
    pr.x = gaussian_matrix(n, d, rng);
    pr.y = gaussian_matrix(n, c, rng);
    pr.gates = std::make_shared<const GateSet>(sample_gaussian_gates(pr.x, p, seed + 100));
    return pr;
}

// Loop-based evaluator of the convex objective.
double reference_objective(const ConvexSolution& s, const Matrix& x, const Matrix& y, double lambda)
{
    const Index n = x.rows();
    const Index c = s.outputs;
    double loss = 0.0;
    for (Index r = 0; r < n; ++r) {
        for (Index k = 0; k < c; ++k) {
            double pred = 0.0;
            for (Index i = 0; i < s.gate_count(); ++i) {
                if (x.row(r).dot(s.gates->directions.col(i)) < 0.0) continue;
                pred += x.row(r).dot(s.weights.col(i * c + k));
            }
            loss += (pred - y(r, k)) * (pred - y(r, k));
        }
    }
    double penalty = 0.0;
    for (Index j = 0; j < s.weights.cols(); ++j) penalty += s.weights.col(j).norm();
    return loss / (2.0 * n) + lambda * penalty;
}

ConvexSolution random_weights(const std::shared_ptr<const GateSet>& gates, Index c, Rng& rng)
{
    ConvexSolution s = ConvexSolution::zeros(gates, c);
    s.weights = gaussian_matrix(s.weights.rows(), s.weights.cols(), rng);
    return s;
}

} // namespace

TEST_SUITE("solver")
{
    TEST_CASE("objective")
    {
        Problem pr = random_problem(1, 8, 3, 2, 4);
        SolverConfig cfg;
        const ConvexSolution zero = ConvexSolution::zeros(pr.gates, 2);
        CHECK(objective(zero, pr.x, Matrix::Zero(8, 2), cfg) == 0.0);
        CHECK(objective(zero, pr.x, pr.y, cfg) == doctest::Approx(pr.y.squaredNorm() / 16.0));

        Rng rng(2);
        cfg.lambda = 0.3;
        for (int t = 0; t < 10; ++t) {
            const ConvexSolution s = random_weights(pr.gates, 2, rng);
            CHECK(std::abs(objective(s, pr.x, pr.y, cfg) - reference_objective(s, pr.x, pr.y, 0.3)) <= 1e-10);
        }
        CHECK_THROWS_AS(loss_from_string("hinge"), Error);
        CHECK(loss_from_string("logistic") == Loss::logistic);
    }

    TEST_CASE("gradient")
    {
        Problem pr = random_problem(3, 10, 3, 2, 4);
        SolverConfig cfg;
        Rng rng(4);

        const ConvexSolution zero = ConvexSolution::zeros(pr.gates, 2);
        CHECK(smooth_gradient(zero, pr.x, Matrix::Zero(10, 2), cfg).isZero());

        // one all-active gate: ordinary least squares gradient
        const Matrix xp = pr.x.cwiseAbs();
        auto all = std::make_shared<const GateSet>(make_gateset(xp, Matrix::Ones(3, 1), GateSource::gaussian));
        ConvexSolution ls = random_weights(all, 1, rng);
        const Matrix ols = xp.transpose() * (xp * ls.weights - pr.y.col(0)) / 10.0;
        CHECK(testing::max_abs_diff(smooth_gradient(ls, xp, pr.y.col(0), cfg), ols) <= 1e-12);

        for (const Loss loss : {Loss::squared, Loss::logistic}) {
            cfg.loss = loss;
            const ConvexSolution s = random_weights(pr.gates, 2, rng);
            const Matrix g = smooth_gradient(s, pr.x, pr.y, cfg);
            double worst = 0.0;
            for (Index i = 0; i < s.weights.size(); ++i) {
                ConvexSolution plus = s;
                ConvexSolution minus = s;
                plus.weights.data()[i] += 1e-5;
                minus.weights.data()[i] -= 1e-5;
                const double fd = (objective(plus, pr.x, pr.y, cfg) - objective(minus, pr.x, pr.y, cfg)) / 2e-5;
                worst = std::max(worst, std::abs(fd - g.data()[i]) / std::max(1e-8, std::abs(fd)));
            }
            CHECK(worst < 1e-4);
        }
    }

    TEST_CASE("operator modes agree")
    {
        Problem pr = random_problem(5, 40, 3, 2, 5);
        Rng rng(6);
        const ConvexSolution s = random_weights(pr.gates, 2, rng);
        SolverConfig direct;
        direct.lambda = 0.01;
        direct.operator_mode = OperatorMode::direct;
        direct.one_vs_all = false;
        direct.max_iters = 300;
        SolverConfig normal = direct;
        normal.operator_mode = OperatorMode::normal;
        const SolveResult a = solve_rfista(pr.x, pr.y, pr.gates, direct, &s);
        const SolveResult b = solve_rfista(pr.x, pr.y, pr.gates, normal, &s);
        CHECK(std::abs(a.objective - b.objective) <= 1e-9);
        CHECK(testing::max_abs_diff(a.solution.weights, b.solution.weights) <= 1e-6);
    }

    TEST_CASE("prox_group_l2")
    {
        const Matrix out = prox_group_l2(Matrix{{3.0}, {4.0}}, 2.5);
        CHECK(out(0, 0) == doctest::Approx(1.5));
        CHECK(out(1, 0) == doctest::Approx(2.0));
        CHECK(prox_group_l2(Matrix{{3.0}, {4.0}}, 5.0).isZero());
        CHECK(prox_group_l2(Matrix{{3.0}, {4.0}}, 7.0).isZero());
        Rng rng(7);
        const Matrix v = gaussian_matrix(3, 5, rng);
        CHECK(prox_group_l2(v, 0.0) == v);
        for (int t = 0; t < 200; ++t) {
            const Matrix a = gaussian_matrix(3, 5, rng);
            const Matrix b = gaussian_matrix(3, 5, rng);
            CHECK((prox_group_l2(a, 0.7) - prox_group_l2(b, 0.7)).norm() <= (a - b).norm() + 1e-15);
        }
    }

    TEST_CASE("least squares through one all-active gate")
    {
        Rng rng(8);
        const Matrix x = gaussian_matrix(4, 4, rng).cwiseAbs() + Matrix::Identity(4, 4);
        const Matrix y = gaussian_matrix(4, 1, rng);
        auto gates = std::make_shared<const GateSet>(make_gateset(x, Matrix::Ones(4, 1), GateSource::gaussian));
        SolverConfig cfg;
        cfg.max_iters = 200000;
        cfg.tol_grad_map = 1e-12;
        cfg.tol_rel_obj = 0.0;
        const Vector expected = x.fullPivLu().solve(y);
        const SolveResult ista = solve_ista(x, y, gates, cfg);
        const SolveResult fista = solve_rfista(x, y, gates, cfg);
        CHECK((ista.solution.weights.col(0) - expected).cwiseAbs().maxCoeff() <= 1e-6);
        CHECK((fista.solution.weights.col(0) - expected).cwiseAbs().maxCoeff() <= 1e-6);
        CHECK(fista.iterations <= ista.iterations);
    }

    TEST_CASE("ista is monotone")
    {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Problem pr = random_problem(seed, 25, 3, 2, 8);
            SolverConfig cfg;
            cfg.lambda = 0.02;
            cfg.max_iters = 300;
            cfg.one_vs_all = false;
            const SolveResult r = solve_ista(pr.x, pr.y, pr.gates, cfg);
            for (std::size_t k = 1; k < r.trace.records.size(); ++k) {
                REQUIRE(r.trace.records[k].objective <= r.trace.records[k - 1].objective + 1e-12);
            }
        }
    }

    TEST_CASE("lambda_max characterizes the zero solution")
    {
        Problem pr = random_problem(9, 30, 4, 1, 6);
        CHECK(lambda_max(pr.x, Matrix::Zero(30, 1), *pr.gates) == 0.0);

        const double lmax = lambda_max(pr.x, pr.y, *pr.gates);
        const Matrix grad0 = -(GatedDesign(pr.x, pr.gates).adjoint(pr.y)) / 30.0;
        double expected = 0.0;
        for (Index j = 0; j < grad0.cols(); ++j) expected = std::max(expected, grad0.col(j).norm());
        CHECK(lmax == doctest::Approx(expected).epsilon(1e-14));

        SolverConfig cfg;
        cfg.max_iters = 5000;
        for (const bool fista : {false, true}) {
            cfg.lambda = 1.01 * lmax;
            const SolveResult above = fista ? solve_rfista(pr.x, pr.y, pr.gates, cfg) : solve_ista(pr.x, pr.y, pr.gates, cfg);
            CHECK(above.solution.weights.isZero(0.0));
            CHECK(above.iterations <= 2);
            cfg.lambda = 0.99 * lmax;
            const SolveResult below = fista ? solve_rfista(pr.x, pr.y, pr.gates, cfg) : solve_ista(pr.x, pr.y, pr.gates, cfg);
            CHECK_FALSE(below.solution.weights.isZero(0.0));
        }
        cfg.lambda = lmax;
        const SolveResult exact = solve_rfista(pr.x, pr.y, pr.gates, cfg);
        CHECK(exact.solution.weights.isZero(0.0));
        CHECK(exact.status == SolveStatus::converged);
        CHECK(exact.iterations == 0);
        CHECK(exact.objective == doctest::Approx(objective(exact.solution, pr.x, pr.y, cfg)));
    }

    TEST_CASE("lambda path grid")
    {
        const auto path = lambda_path(2.0, 4, 3.0);
        REQUIRE(path.size() == 4);
        CHECK(path.front() == doctest::Approx(2.0));
        CHECK(path.back() == doctest::Approx(2e-3));
        CHECK(path[1] == doctest::Approx(0.2));
        CHECK(lambda_path(1.0).size() == 20);
    }

    TEST_CASE("rfista reaches the stationarity tolerance")
    {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Problem pr = random_problem(seed + 20, 40, 4, 1 + static_cast<Index>(seed % 3), 8);
            SolverConfig cfg;
            cfg.lambda = 0.05 * lambda_max(pr.x, pr.y, *pr.gates);
            cfg.max_iters = 20000;
            cfg.tol_rel_obj = 0.0;
            const SolveResult r = solve_rfista(pr.x, pr.y, pr.gates, cfg);
            REQUIRE(r.status == SolveStatus::converged);
            CHECK(r.grad_map_norm <= 1e-7);
            CHECK(stationarity(r.solution, pr.x, pr.y, cfg, r.step_size) <= 1e-7);
        }
    }

    TEST_CASE("objective is convex along random segments")
    {
        Problem pr = random_problem(30, 20, 3, 2, 5);
        SolverConfig cfg;
        cfg.lambda = 0.1;
        Rng rng(31);
        for (int trial = 0; trial < 20; ++trial) {
            const ConvexSolution a = random_weights(pr.gates, 2, rng);
            const ConvexSolution b = random_weights(pr.gates, 2, rng);
            for (const double t : {0.25, 0.5, 0.75}) {
                ConvexSolution m = a;
                m.weights = t * a.weights + (1.0 - t) * b.weights;
                CHECK(objective(m, pr.x, pr.y, cfg) <=
                      t * objective(a, pr.x, pr.y, cfg) + (1.0 - t) * objective(b, pr.x, pr.y, cfg) + 1e-9);
            }
        }
    }

    TEST_CASE("restart is never worse than ista at equal budget")
    {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Problem pr = random_problem(seed + 40, 50, 5, 1, 10);
            SolverConfig cfg;
            cfg.lambda = 0.01 * lambda_max(pr.x, pr.y, *pr.gates);
            cfg.max_iters = 100;
            cfg.tol_grad_map = 0.0;
            cfg.tol_rel_obj = 0.0;
            const SolveResult ista = solve_ista(pr.x, pr.y, pr.gates, cfg);
            const SolveResult fista = solve_rfista(pr.x, pr.y, pr.gates, cfg);
            CHECK(fista.objective <= ista.objective + 1e-12);
        }
    }

    TEST_CASE("joint solve equals per-column solves")
    {
        Problem pr = random_problem(50, 30, 3, 4, 6);
        SolverConfig cfg;
        cfg.lambda = 0.02;
        cfg.max_iters = 50000;
        cfg.tol_grad_map = 1e-11;
        cfg.tol_rel_obj = 0.0;
        cfg.one_vs_all = false;
        const SolveResult joint = solve_rfista(pr.x, pr.y, pr.gates, cfg);
        for (Index k = 0; k < 4; ++k) {
            const SolveResult col = solve_rfista(pr.x, pr.y.col(k), pr.gates, cfg);
            CHECK(testing::max_abs_diff(output_slice(joint.solution, k).weights, col.solution.weights) <= 1e-8);
        }
        cfg.one_vs_all = true;
        const SolveResult ova = solve_rfista(pr.x, pr.y, pr.gates, cfg);
        CHECK(testing::max_abs_diff(ova.solution.weights, joint.solution.weights) <= 1e-8);
    }

    TEST_CASE("trace bookkeeping")
    {
        Problem pr = random_problem(60, 30, 3, 3, 6);
        SolverConfig cfg;
        cfg.lambda = 0.01;
        cfg.max_iters = 200;
        for (const bool ova : {false, true}) {
            cfg.one_vs_all = ova;
            const SolveResult r = solve_rfista(pr.x, pr.y, pr.gates, cfg);
            REQUIRE_FALSE(r.trace.records.empty());
            double best = r.trace.records.front().objective;
            for (std::size_t k = 1; k < r.trace.records.size(); ++k) {
                CHECK(r.trace.records[k].elapsed_ms >= r.trace.records[k - 1].elapsed_ms);
                best = std::min(best, r.trace.records[k].objective);
            }
            CHECK(r.objective == doctest::Approx(best).epsilon(1e-12));
            CHECK(r.objective == doctest::Approx(objective(r.solution, pr.x, pr.y, cfg)).epsilon(1e-9));
        }

        const SolveResult r = solve_ista(pr.x, pr.y, pr.gates, cfg);
        std::istringstream lines(r.trace.to_jsonl());
        std::string line;
        std::size_t count = 0;
        while (std::getline(lines, line)) {
            const auto j = nlohmann::ordered_json::parse(line);
            std::vector<std::string> keys;
            for (const auto& [key, value] : j.items()) keys.push_back(key);
            CHECK(keys == std::vector<std::string>{"iter", "objective", "grad_map_norm", "step_size", "elapsed_ms",
                                                   "nnz_groups"});
            ++count;
        }
        CHECK(count == r.trace.records.size());
    }

    TEST_CASE("warm-started path is no worse than cold starts")
    {
        Problem pr = random_problem(70, 40, 4, 1, 10);
        SolverConfig cfg;
        cfg.max_iters = 50;
        cfg.tol_grad_map = 0.0;
        cfg.tol_rel_obj = 0.0;
        const auto lambdas = lambda_path(lambda_max(pr.x, pr.y, *pr.gates), 6, 2.0);
        const auto path = solve_path(pr.x, pr.y, pr.gates, cfg, lambdas);
        REQUIRE(path.size() == lambdas.size());
        for (const auto& point : path) {
            SolverConfig cold = cfg;
            cold.lambda = point.lambda;
            CHECK(point.result.objective <= solve_rfista(pr.x, pr.y, pr.gates, cold).objective + 1e-9);
        }
    }

    TEST_CASE("config validation")
    {
        SolverConfig cfg;
        cfg.line_search.backtrack_factor = 1.0;
        CHECK_THROWS_AS(cfg.validate(), Error);
        cfg = {};
        cfg.lambda = -1.0;
        CHECK_THROWS_AS(cfg.validate(), Error);
        cfg = {};
        cfg.line_search.growth_factor = 0.0;
        CHECK_THROWS_AS(cfg.validate(), Error);
    }

    TEST_CASE("cone feasibility")
    {
        const Matrix eye = Matrix::Identity(2, 2);
        ConeProgram prog;
        prog.patterns = {{true, true}, {true, false}};
        prog.v_blocks = {Matrix::Ones(2, 1), Matrix::Ones(2, 1)};
        const ConeReport report = cone_feasibility(prog, eye);
        CHECK(report.block_feasible == std::vector<bool>{true, false});
        CHECK_FALSE(report.feasible);
        CHECK(report.violating == std::vector<std::size_t>{1});
        CHECK(report.max_violation == doctest::Approx(1.0));

        prog.v_blocks = {Matrix::Zero(2, 1), Matrix::Zero(2, 1)};
        CHECK(cone_feasibility(prog, eye).feasible);
    }

    TEST_CASE("probe on a single sample matches the closed form")
    {
        const Matrix x{{0.6, -0.8}};
        const double lambda = 0.2;
        SolverConfig cfg;
        cfg.lambda = lambda;
        cfg.max_iters = 50000;
        cfg.tol_grad_map = 1e-12;
        cfg.tol_rel_obj = 0.0;
        ProbeOptions opts;
        opts.restarts = 5;
        for (const double y : {2.0, -1.5, 0.1}) {
            const double xn = x.norm();
            const double s = std::max(0.0, std::abs(y) - lambda / xn);
            const double expected = 0.5 * (std::abs(y) - s) * (std::abs(y) - s) + lambda * s / xn;
            const ProbeReport r = global_optimality_probe(x, Vector::Constant(1, y), enumerate_arrangements(x), cfg, opts);
            CHECK(r.convex_objective == doctest::Approx(expected).epsilon(1e-9));
            CHECK(r.passed);
        }
    }

    TEST_CASE("probe on a planted realizable target")
    {
        Rng rng(80);
        const Matrix x = gaussian_matrix(6, 2, rng);
        const GateSet all = enumerate_arrangements(x);
        const Vector y = (x * Vector{{1.0, -0.5}}).cwiseMax(0.0) - 0.7 * (x * Vector{{-0.2, 1.0}}).cwiseMax(0.0);
        SolverConfig cfg;
        cfg.lambda = 0.0;
        cfg.max_iters = 100000;
        cfg.tol_grad_map = 1e-12;
        cfg.tol_rel_obj = 0.0;
        ProbeOptions opts;
        opts.restarts = 10;
        opts.steps = 5000;
        const ProbeReport r = global_optimality_probe(x, y, all, cfg, opts);
        CHECK(r.convex_objective <= 1e-10);
        CHECK(r.best_nonconvex_objective <= 1e-3);
        CHECK(r.passed);
    }

    TEST_CASE("probe lower-bounds every restart")
    {
        Rng rng(90);
        const Matrix x = gaussian_matrix(5, 2, rng);
        const Vector y = gaussian_matrix(5, 1, rng);
        SolverConfig cfg;
        cfg.lambda = 0.05;
        cfg.max_iters = 50000;
        cfg.tol_grad_map = 1e-11;
        cfg.tol_rel_obj = 0.0;
        ProbeOptions opts;
        opts.restarts = 10;
        const ProbeReport r = global_optimality_probe(x, y, enumerate_arrangements(x), cfg, opts);
        for (const double v : r.nonconvex_objectives) CHECK(r.convex_objective <= v + 1e-6);
        CHECK_THROWS_AS(global_optimality_probe(gaussian_matrix(11, 2, rng), Vector::Zero(11), GateSet{}, cfg, opts),
                        Error);
    }
}
