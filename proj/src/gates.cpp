#include <cvxdistill/gates.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>

namespace cvxdistill {
namespace {

constexpr double rank_tol = 1e-10;
constexpr double zero_tol = 1e-9;

Matrix select_row_subset(const Matrix& y, const std::vector<Index>& rows)
{
    Matrix out(static_cast<Index>(rows.size()), y.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = y.row(rows[i]);
    return out;
}

// Orthonormal basis (cols x r) of the row space of y.
Matrix row_space_basis(const Matrix& y)
{
    if (y.rows() == 0) return Matrix(y.cols(), 0);
    Eigen::JacobiSVD<Matrix> svd(y, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    Index r = 0;
    const double smax = s.size() ? s(0) : 0.0;
    while (r < s.size() && s(r) > rank_tol * std::max(1.0, smax)) ++r;
    return svd.matrixV().leftCols(r);
}

// Orthonormal basis of {u : a u = 0}.
Matrix null_space_basis(const Matrix& a)
{
    if (a.rows() == 0) return Matrix::Identity(a.cols(), a.cols());
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    Index r = 0;
    const double smax = s.size() ? s(0) : 0.0;
    while (r < s.size() && s(r) > rank_tol * std::max(1.0, smax)) ++r;
    return svd.matrixV().rightCols(a.cols() - r);
}

// Calls fn on every k-subset of {0..n-1}, in lexicographic order.
template <class Fn>
void for_each_subset(Index n, Index k, Fn&& fn)
{
    std::vector<Index> idx(static_cast<std::size_t>(k));
    for (Index i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
    if (k > n) return;
    while (true) {
        fn(idx);
        Index i = k - 1;
        while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) --i;
        if (i < 0) return;
        ++idx[static_cast<std::size_t>(i)];
        for (Index j = i + 1; j < k; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
}

/*
 * One witness direction per full-dimensional cell of the central arrangement
 * {g : y_i . g = 0}, in R^{y.cols()}. Duplicates are allowed.
 *
 * After projecting onto the row space (rank r), every cell of an essential
 * arrangement is a pointed cone, so its closure contains an extreme ray u
 * cut out by r-1 independent rows. The cells around u are the cells of the
 * rows vanishing on u, which is the same problem one dimension down; a small
 * step from u into each of them lands inside a cell of the full arrangement.
 */
std::vector<Vector> cell_witnesses(const Matrix& y)
{
    const Index d = y.cols();
    if (d == 0) return {};

    const double max_norm = y.rows() ? y.rowwise().norm().maxCoeff() : 0.0;
    std::vector<Index> live;
    for (Index i = 0; i < y.rows(); ++i) {
        if (y.row(i).norm() > zero_tol * std::max(1.0, max_norm)) live.push_back(i);
    }
    if (live.empty()) return {Vector::Unit(d, 0)};

    const Matrix yl = select_row_subset(y, live);
    const Matrix basis = row_space_basis(yl);
    const Index r = basis.cols();
    if (r == 1) return {basis.col(0), -basis.col(0)};

    const Matrix yr = yl * basis;
    const Vector row_norms = yr.rowwise().norm();
    std::vector<Vector> out;
    for_each_subset(yr.rows(), r - 1, [&](const std::vector<Index>& subset) {
        const Matrix ns = null_space_basis(select_row_subset(yr, subset));
        if (ns.cols() != 1) return;
        const Vector u = ns.col(0).normalized();
        for (const double sign : {1.0, -1.0}) {
            const Vector us = sign * u;
            const Vector proj = yr * us;
            std::vector<Index> on_ray;
            for (Index i = 0; i < yr.rows(); ++i) {
                if (std::abs(proj(i)) <= zero_tol * row_norms(i)) on_ray.push_back(i);
            }
            Matrix ut(1, r);
            ut.row(0) = us.transpose();
            const Matrix perp = null_space_basis(ut);
            for (const Vector& local : cell_witnesses(select_row_subset(yr, on_ray) * perp)) {
                const Vector delta = (perp * local).normalized();
                double eps = 1.0;
                for (Index i = 0; i < yr.rows(); ++i) {
                    if (std::abs(proj(i)) <= zero_tol * row_norms(i)) continue;
                    const double slope = std::abs(yr.row(i).dot(delta));
                    if (slope > 0.0) eps = std::min(eps, std::abs(proj(i)) / slope);
                }
                out.push_back(basis * (us + 0.5 * eps * delta));
            }
        }
    });
    return out;
}

std::uint32_t encode(const Matrix& x, const Vector& g)
{
    std::uint32_t key = 0;
    const Vector proj = x * g;
    for (Index i = 0; i < proj.size(); ++i) {
        if (proj(i) >= 0.0) key |= (std::uint32_t{1} << i);
    }
    return key;
}

Pattern decode(std::uint32_t key, Index n)
{
    Pattern p(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = (key >> i) & 1u;
    return p;
}

} // namespace

Pattern compute_pattern(const Matrix& x, const Vector& gate)
{
    if (gate.size() != x.cols()) {
        throw DimensionError("gate has length " + std::to_string(gate.size()) + " but data has " +
                             std::to_string(x.cols()) + " columns");
    }
    const Vector proj = x * gate;
    Pattern mask(static_cast<std::size_t>(x.rows()));
    for (Index i = 0; i < proj.size(); ++i) mask[static_cast<std::size_t>(i)] = proj(i) >= 0.0;
    return mask;
}

Matrix gate_masks(const Matrix& x, const Matrix& directions)
{
    if (directions.rows() != x.cols()) {
        throw DimensionError("gate dimension " + std::to_string(directions.rows()) +
                             " does not match data width " + std::to_string(x.cols()));
    }
    return (x * directions).unaryExpr([](double v) { return v >= 0.0 ? 1.0 : 0.0; });
}

std::size_t default_gate_count(Index n, Index d)
{
    const double nn = static_cast<double>(n);
    const double raw = std::ceil(nn / static_cast<double>(std::max<Index>(d, 1)) * std::log(nn));
    return static_cast<std::size_t>(std::clamp(raw, 8.0, 4096.0));
}

GateSet make_gateset(const Matrix& x, const Matrix& candidates, GateSource source)
{
    if (candidates.rows() != x.cols()) {
        throw DimensionError("gate dimension " + std::to_string(candidates.rows()) +
                             " does not match data width " + std::to_string(x.cols()));
    }
    std::set<Pattern> seen;
    std::vector<Index> kept;
    GateSet out;
    out.source = source;
    for (Index j = 0; j < candidates.cols(); ++j) {
        const Vector g = candidates.col(j);
        if (!g.allFinite() || g.squaredNorm() == 0.0) continue;
        auto p = compute_pattern(x, g);
        if (seen.insert(p).second) {
            kept.push_back(j);
            out.patterns.push_back(std::move(p));
        }
    }
    out.directions.resize(candidates.rows(), static_cast<Index>(kept.size()));
    for (std::size_t j = 0; j < kept.size(); ++j) out.directions.col(static_cast<Index>(j)) = candidates.col(kept[j]);
    return out;
}

GateSet sample_gaussian_gates(const Matrix& x, std::optional<std::size_t> count, std::uint64_t seed)
{
    if (x.rows() == 0 || x.cols() == 0) throw DimensionError("cannot sample gates for empty data");
    const auto p = count.value_or(default_gate_count(x.rows(), x.cols()));
    Rng rng(seed);
    return make_gateset(x, gaussian_matrix(x.cols(), static_cast<Index>(p), rng), GateSource::gaussian);
}

GateSet data_derived_gates(const Matrix& x, const Matrix& targets, std::optional<std::size_t> count,
                           std::uint64_t seed)
{
    if (x.rows() == 0 || x.cols() == 0) throw DimensionError("cannot derive gates from empty data");
    if (targets.rows() != x.rows()) throw DimensionError("targets and data row counts differ");
    const auto p = count.value_or(default_gate_count(x.rows(), x.cols()));
    std::vector<Vector> fitted;
    for (Index k = 0; k < targets.cols() && fitted.size() < p; ++k) {
        const double floor = targets.col(k).minCoeff();
        std::vector<Index> active;
        for (Index i = 0; i < x.rows(); ++i) {
            if (targets(i, k) > floor) active.push_back(i);
        }
        if (active.empty()) continue;
        const Matrix xa = select_row_subset(x, active);
        Vector ta(static_cast<Index>(active.size()));
        for (std::size_t i = 0; i < active.size(); ++i) ta(static_cast<Index>(i)) = targets(active[i], k);
        const Vector g = xa.completeOrthogonalDecomposition().solve(ta);
        if (g.allFinite() && g.norm() > 0.0) fitted.push_back(g);
    }
    Rng rng(seed);
    const Matrix random = gaussian_matrix(x.cols(), static_cast<Index>(p - fitted.size()), rng);
    Matrix candidates(x.cols(), static_cast<Index>(p));
    for (std::size_t j = 0; j < fitted.size(); ++j) candidates.col(static_cast<Index>(j)) = fitted[j];
    candidates.rightCols(random.cols()) = random;
    return make_gateset(x, candidates, GateSource::data_derived);
}

GateSet enumerate_arrangements(const Matrix& x, const EnumerationOptions& options)
{
    const Index n = x.rows();
    const Index d = x.cols();
    if (n < 1 || n > 16 || d < 1 || d > 4) {
        throw DimensionError("exhaustive enumeration needs 1 <= n <= 16 and 1 <= d <= 4, got n=" +
                             std::to_string(n) + ", d=" + std::to_string(d));
    }

    std::map<std::uint32_t, Vector> found;
    auto offer = [&](const Vector& g) {
        if (!g.allFinite() || g.norm() == 0.0) return false;
        return found.try_emplace(encode(x, g), g).second;
    };

    // Every face of the arrangement is a cell of the arrangement restricted
    // to some flat {g : x_S g = 0}; |S| < rank(X) covers all nonzero flats.
    const Index r = numerical_rank(x);
    for (Index k = 0; k < std::max<Index>(r, 1); ++k) {
        for_each_subset(n, k, [&](const std::vector<Index>& subset) {
            const Matrix flat = null_space_basis(select_row_subset(x, subset));
            if (flat.cols() == 0) return;
            for (const Vector& local : cell_witnesses(x * flat)) offer(flat * local);
        });
    }

    const std::size_t probes = options.refinement_probes.value_or(std::size_t{10} << n);
    Rng rng(options.seed);
    constexpr Index batch = 4096;
    bool grew = probes > 0;
    while (grew) {
        grew = false;
        for (std::size_t done = 0; done < probes; done += batch) {
            const Index m = static_cast<Index>(std::min<std::size_t>(batch, probes - done));
            const Matrix gates = gaussian_matrix(d, m, rng);
            for (Index j = 0; j < m; ++j) grew |= offer(gates.col(j));
        }
    }

    std::vector<std::pair<Pattern, Vector>> rows;
    for (const auto& [key, g] : found) rows.emplace_back(decode(key, n), g);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    GateSet out;
    out.source = GateSource::exhaustive;
    out.directions.resize(d, static_cast<Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j) {
        out.directions.col(static_cast<Index>(j)) = rows[j].second;
        out.patterns.push_back(rows[j].first);
    }
    return out;
}

std::uint64_t pattern_count_bound(std::uint64_t n, std::uint64_t r)
{
    std::uint64_t total = 0;
    std::uint64_t binom = 1; // C(n-1, k)
    for (std::uint64_t k = 0; k < r && k <= n - 1; ++k) {
        total += binom;
        binom = binom * (n - 1 - k) / (k + 1);
    }
    return 2 * total;
}

Index numerical_rank(const Matrix& x)
{
    return row_space_basis(x).cols();
}

} // namespace cvxdistill
