#include <cvxdistill/verify.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include <cvxdistill/gates.hpp>
#include <cvxdistill/grelu.hpp>
#include <cvxdistill/solver.hpp>

namespace cvxdistill {
namespace {

OracleCheck gradient_check(Rng& rng)
{
    const Matrix x = gaussian_matrix(7, 3, rng);
    const Matrix y = gaussian_matrix(7, 2, rng);
    auto gates = std::make_shared<const GateSet>(sample_gaussian_gates(x, 5, rng()));
    ConvexSolution sol = ConvexSolution::zeros(gates, 2);
    sol.weights = gaussian_matrix(sol.weights.rows(), sol.weights.cols(), rng);
    SolverConfig cfg;
    const Matrix grad = smooth_gradient(sol, x, y, cfg);
    double worst = 0.0;
    const double h = 1e-5;
    for (Index i = 0; i < sol.weights.size(); ++i) {
        ConvexSolution plus = sol;
        ConvexSolution minus = sol;
        plus.weights.data()[i] += h;
        minus.weights.data()[i] -= h;
        const double fd = (objective(plus, x, y, cfg) - objective(minus, x, y, cfg)) / (2.0 * h);
        const double g = grad.data()[i];
        worst = std::max(worst, std::abs(fd - g) / std::max(1e-8, std::max(std::abs(fd), std::abs(g))));
    }
    return {"gradient_finite_difference", worst < 1e-4, worst, 1e-4};
}

OracleCheck prox_check(Rng& rng)
{
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix a = gaussian_matrix(4, 6, rng);
        const Matrix b = gaussian_matrix(4, 6, rng);
        const double ratio = (prox_group_l2(a, 1.0) - prox_group_l2(b, 1.0)).norm() / (a - b).norm();
        worst = std::max(worst, ratio);
    }
    return {"prox_nonexpansive", worst <= 1.0 + 1e-12, worst, 1.0};
}

OracleCheck cone_check(Rng& rng)
{
    const Matrix x = gaussian_matrix(6, 2, rng);
    const GateSet all = enumerate_arrangements(x);
    ConeProgram prog;
    prog.patterns = all.patterns;
    for (Index i = 0; i < all.size(); ++i) prog.v_blocks.emplace_back(all.directions.col(i));
    const ConeReport report = cone_feasibility(prog, x);
    return {"cone_witness_feasible", report.feasible, report.max_violation, 1e-9};
}

OracleCheck enumeration_check(Rng& rng, int instances, int probes)
{
    double missing = 0.0;
    for (int t = 0; t < instances; ++t) {
        const Index n = 3 + static_cast<Index>(rng() % 6);
        const Index d = 1 + static_cast<Index>(rng() % 3);
        const Matrix x = gaussian_matrix(n, d, rng);
        EnumerationOptions opts;
        opts.refinement_probes = 0;
        const GateSet all = enumerate_arrangements(x, opts);
        const std::set<Pattern> known(all.patterns.begin(), all.patterns.end());
        const Matrix g = gaussian_matrix(d, probes, rng);
        for (Index j = 0; j < g.cols(); ++j) missing += known.count(compute_pattern(x, g.col(j))) ? 0.0 : 1.0;
        if (all.patterns.size() > pattern_count_bound(static_cast<std::uint64_t>(n),
                                                      static_cast<std::uint64_t>(numerical_rank(x)))) {
            missing += 1.0;
        }
    }
    return {"enumeration_superset", missing == 0.0, missing, 0.0};
}

OracleCheck recovery_check(Rng& rng)
{
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        const Matrix x = gaussian_matrix(12, 4, rng);
        auto gates = std::make_shared<const GateSet>(sample_gaussian_gates(x, 6, rng()));
        ConvexSolution sol = ConvexSolution::zeros(gates, 3);
        sol.weights = gaussian_matrix(sol.weights.rows(), sol.weights.cols(), rng);
        worst = std::max(worst, (grelu_forward(sol, x) - recover_weights(sol).forward(x)).cwiseAbs().maxCoeff());
    }
    return {"weight_recovery", worst <= 1e-9, worst, 1e-9};
}

OracleCheck probe_check(Rng& rng, int instances, int restarts)
{
    double worst = std::numeric_limits<double>::infinity();
    for (int t = 0; t < instances; ++t) {
        const Index n = 3 + static_cast<Index>(rng() % 4);
        const Index d = 1 + static_cast<Index>(rng() % 2);
        const Matrix x = gaussian_matrix(n, d, rng);
        const Vector y = gaussian_matrix(n, 1, rng);
        SolverConfig cfg;
        cfg.lambda = 0.05;
        cfg.max_iters = 20000;
        cfg.tol_grad_map = 1e-10;
        cfg.tol_rel_obj = 0.0;
        ProbeOptions opts;
        opts.restarts = restarts;
        opts.steps = 1500;
        opts.seed = rng();
        const ProbeReport report = global_optimality_probe(x, y, enumerate_arrangements(x), cfg, opts);
        worst = std::min(worst, report.margin);
    }
    return {"global_optimality_probe", worst >= -1e-6, worst, -1e-6};
}

} // namespace

bool OracleReport::passed() const
{
    return std::all_of(checks.begin(), checks.end(), [](const OracleCheck& c) { return c.passed; });
}

nlohmann::json OracleReport::to_json() const
{
    nlohmann::json j;
    j["passed"] = passed();
    j["checks"] = nlohmann::json::array();
    for (const auto& c : checks) {
        j["checks"].push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"tolerance", c.tolerance}});
    }
    return j;
}

OracleReport run_oracle_suite(std::uint64_t seed, bool tiny)
{
    Rng rng(seed);
    OracleReport report;
    report.checks.push_back(gradient_check(rng));
    report.checks.push_back(prox_check(rng));
    report.checks.push_back(cone_check(rng));
    report.checks.push_back(enumeration_check(rng, tiny ? 5 : 20, tiny ? 10000 : 100000));
    report.checks.push_back(recovery_check(rng));
    report.checks.push_back(probe_check(rng, tiny ? 2 : 10, tiny ? 5 : 50));
    return report;
}

} // namespace cvxdistill
