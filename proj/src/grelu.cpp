#include <cvxdistill/grelu.hpp>

#include <cmath>

namespace cvxdistill {
namespace {

Matrix gated(const Matrix& f, const Matrix& gates, const Matrix& w)
{
    return (f * gates).unaryExpr([](double v) { return v >= 0.0 ? 1.0 : 0.0; }).cwiseProduct(f * w);
}

} // namespace

Matrix InputTransform::apply(const Matrix& x) const
{
    Matrix f = x;
    if (mean.size() > 0) {
        if (mean.size() != x.cols() || scale.size() != x.cols()) {
            throw DimensionError("input transform expects " + std::to_string(mean.size()) + " columns, got " +
                                 std::to_string(x.cols()));
        }
        f = ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
    }
    if (append_one) {
        f.conservativeResize(Eigen::NoChange, f.cols() + 1);
        f.col(f.cols() - 1).setOnes();
    }
    return f;
}

ConvexSolution ConvexSolution::zeros(std::shared_ptr<const GateSet> gates, Index outputs)
{
    ConvexSolution s;
    s.weights = Matrix::Zero(gates->dim(), gates->size() * outputs);
    s.outputs = outputs;
    s.gates = std::move(gates);
    return s;
}

Matrix GReLUStudent::hidden(const Matrix& x) const
{
    const Matrix f = transform.apply(x);
    if (f.cols() != feature_dim()) {
        throw DimensionError("student expects " + std::to_string(input_dim()) + " inputs, got " +
                             std::to_string(x.cols()));
    }
    return gated(f, gates, w1);
}

Matrix GReLUStudent::forward(const Matrix& x) const
{
    Matrix out = hidden(x) * w2;
    if (out_bias.size() == out.cols()) out.rowwise() += out_bias.transpose();
    return out;
}

std::size_t GReLUStudent::effective_parameters() const
{
    const auto nnz = [](const auto& m) {
        return static_cast<std::size_t>((m.array() != 0.0).count());
    };
    return nnz(w1) + nnz(w2) + nnz(out_bias);
}

Matrix grelu_forward(const ConvexSolution& solution, const Matrix& x)
{
    if (!solution.gates) throw Error("convex solution has no gate set");
    if (x.cols() != solution.dim()) {
        throw DimensionError("solution expects " + std::to_string(solution.dim()) + " features, got " +
                             std::to_string(x.cols()));
    }
    const Matrix masks = gate_masks(x, solution.gates->directions);
    const Matrix xw = x * solution.weights;
    const Index c = solution.outputs;
    Matrix out = Matrix::Zero(x.rows(), c);
    for (Index i = 0; i < solution.gate_count(); ++i) {
        out += (xw.middleCols(i * c, c).array().colwise() * masks.col(i).array()).matrix();
    }
    return out;
}

Matrix grelu_forward(const GReLUStudent& student, const Matrix& x)
{
    return student.forward(x);
}

GReLUStudent recover_weights(const ConvexSolution& solution)
{
    if (!solution.gates) throw Error("convex solution has no gate set");
    if (!solution.weights.allFinite()) throw Error("convex solution has non-finite entries");
    const Index d = solution.dim();
    const Index c = solution.outputs;

    std::vector<std::pair<Index, Index>> units; // (gate, class)
    for (Index i = 0; i < solution.gate_count(); ++i) {
        for (Index k = 0; k < c; ++k) {
            if (solution.weights.col(i * c + k).norm() >= block_zero_tol) units.emplace_back(i, k);
        }
    }
    const auto m = static_cast<Index>(units.size());
    GReLUStudent s;
    s.gates.resize(d, m);
    s.w1.resize(d, m);
    s.w2 = Matrix::Zero(m, c);
    s.out_bias = Vector::Zero(c);
    for (Index j = 0; j < m; ++j) {
        const auto [i, k] = units[static_cast<std::size_t>(j)];
        const auto v = solution.weights.col(i * c + k);
        const double root = std::sqrt(v.norm());
        s.gates.col(j) = solution.gates->directions.col(i);
        s.w1.col(j) = v / root;
        s.w2(j, k) = root;
    }
    return s;
}

std::pair<Vector, double> rescale_balanced(const Vector& w1_col, double w2_val)
{
    const double a = w1_col.norm();
    if (a == 0.0 || w2_val == 0.0) throw Error("rescale_balanced needs nonzero weights");
    const double b = std::abs(w2_val);
    return {w1_col * std::sqrt(b / a), std::copysign(std::sqrt(a * b), w2_val)};
}

void balance_units(Matrix& w1, Matrix& w2)
{
    if (w1.cols() != w2.rows()) throw DimensionError("w1 columns must match w2 rows");
    for (Index j = 0; j < w1.cols(); ++j) {
        const double a = w1.col(j).norm();
        const double b = w2.row(j).norm();
        if (a == 0.0 || b == 0.0) continue;
        w1.col(j) *= std::sqrt(b / a);
        w2.row(j) *= std::sqrt(a / b);
    }
}

ConvexSolution assemble_one_vs_all(std::span<const ConvexSolution> per_class)
{
    if (per_class.empty()) throw Error("assemble_one_vs_all needs at least one solution");
    const auto& gates = per_class.front().gates;
    const Index p = per_class.front().gate_count();
    const Index d = per_class.front().dim();
    const auto c = static_cast<Index>(per_class.size());
    for (const auto& s : per_class) {
        if (s.outputs != 1) throw DimensionError("one-vs-all parts must be scalar-output");
        const bool same = s.gates == gates ||
                          (s.gates && gates && s.gates->directions.rows() == gates->directions.rows() &&
                           s.gates->directions.cols() == gates->directions.cols() &&
                           s.gates->directions == gates->directions);
        if (!same) throw Error("one-vs-all parts use different gate sets");
    }
    ConvexSolution out;
    out.gates = gates;
    out.outputs = c;
    out.lambda = per_class.front().lambda;
    out.weights.resize(d, p * c);
    for (Index k = 0; k < c; ++k) {
        for (Index i = 0; i < p; ++i) out.weights.col(i * c + k) = per_class[static_cast<std::size_t>(k)].weights.col(i);
    }
    return out;
}

ConvexSolution output_slice(const ConvexSolution& solution, Index k)
{
    if (k < 0 || k >= solution.outputs) throw DimensionError("output index out of range");
    ConvexSolution out;
    out.gates = solution.gates;
    out.outputs = 1;
    out.lambda = solution.lambda;
    out.weights.resize(solution.dim(), solution.gate_count());
    for (Index i = 0; i < solution.gate_count(); ++i) out.weights.col(i) = solution.weights.col(i * solution.outputs + k);
    return out;
}

LayerSpec to_layer_spec(const GReLUStudent& s)
{
    LayerSpec layer;
    layer.kind = LayerKind::grelu_student;
    layer.in_dim = s.input_dim();
    layer.out_dim = s.outputs();
    layer.meta["width"] = s.width();
    layer.meta["feature_dim"] = s.feature_dim();
    layer.meta["append_one"] = s.transform.append_one ? 1 : 0;
    layer.meta["standardized"] = s.transform.mean.size() > 0 ? 1 : 0;
    layer.blobs["gates"] = flatten(s.gates);
    layer.blobs["w1"] = flatten(s.w1);
    layer.blobs["w2"] = flatten(s.w2);
    layer.blobs["out_bias"] = flatten(s.out_bias);
    if (s.transform.mean.size() > 0) {
        layer.blobs["in_mean"] = flatten(s.transform.mean);
        layer.blobs["in_scale"] = flatten(s.transform.scale);
    }
    return layer;
}

GReLUStudent grelu_from_layer_spec(const LayerSpec& layer)
{
    if (layer.kind != LayerKind::grelu_student) throw FormatError("layer is not a grelu-student");
    const Index m = layer.meta.at("width");
    const Index f = layer.meta.at("feature_dim");
    const Index c = layer.out_dim;
    GReLUStudent s;
    s.transform.append_one = layer.meta.at("append_one") != 0;
    if (layer.meta.at("standardized") != 0) {
        s.transform.mean = unflatten(blob(layer, "in_mean"), layer.in_dim, 1);
        s.transform.scale = unflatten(blob(layer, "in_scale"), layer.in_dim, 1);
    }
    s.gates = unflatten(blob(layer, "gates"), f, m);
    s.w1 = unflatten(blob(layer, "w1"), f, m);
    s.w2 = unflatten(blob(layer, "w2"), m, c);
    s.out_bias = unflatten(blob(layer, "out_bias"), c, 1);
    if (s.input_dim() != layer.in_dim) throw DimensionError("grelu-student input width mismatch");
    return s;
}

// ---- convolution ------------------------------------------------------------

ImageBatch::ImageBatch(Index n, Index c, Index h, Index w)
    : count(n), channels(c), height(h), width(w), data(static_cast<std::size_t>(n * c * h * w), 0.0)
{
}

Matrix ImageBatch::as_rows() const
{
    Matrix out(count, channels * height * width);
    for (Index n = 0; n < count; ++n) {
        for (Index j = 0; j < out.cols(); ++j) out(n, j) = data[static_cast<std::size_t>(n * out.cols() + j)];
    }
    return out;
}

ImageBatch ImageBatch::from_rows(const Matrix& rows, Index c, Index h, Index w)
{
    if (rows.cols() != c * h * w) throw DimensionError("row width does not match image shape");
    ImageBatch out(rows.rows(), c, h, w);
    for (Index n = 0; n < rows.rows(); ++n) {
        for (Index j = 0; j < rows.cols(); ++j) out.data[static_cast<std::size_t>(n * rows.cols() + j)] = rows(n, j);
    }
    return out;
}

Index ConvGeometry::out_size(Index in) const
{
    const Index span = in + 2 * padding - kernel;
    if (kernel < 1 || stride < 1 || padding < 0 || span < 0) {
        throw DimensionError("convolution kernel " + std::to_string(kernel) + " does not fit input size " +
                             std::to_string(in));
    }
    return span / stride + 1;
}

Matrix im2col(const ImageBatch& z, const ConvGeometry& geom)
{
    const Index oh = geom.out_size(z.height);
    const Index ow = geom.out_size(z.width);
    const Index k = geom.kernel;
    Matrix out = Matrix::Zero(z.count * oh * ow, z.channels * k * k);
    for (Index n = 0; n < z.count; ++n) {
        for (Index oy = 0; oy < oh; ++oy) {
            for (Index ox = 0; ox < ow; ++ox) {
                const Index row = (n * oh + oy) * ow + ox;
                for (Index c = 0; c < z.channels; ++c) {
                    for (Index ky = 0; ky < k; ++ky) {
                        const Index iy = oy * geom.stride + ky - geom.padding;
                        if (iy < 0 || iy >= z.height) continue;
                        for (Index kx = 0; kx < k; ++kx) {
                            const Index ix = ox * geom.stride + kx - geom.padding;
                            if (ix < 0 || ix >= z.width) continue;
                            out(row, (c * k + ky) * k + kx) = z.at(n, c, iy, ix);
                        }
                    }
                }
            }
        }
    }
    return out;
}

ImageBatch conv_forward(const Matrix& filters, const ImageBatch& z, const ConvGeometry& geom)
{
    const Index k = geom.kernel;
    if (filters.cols() != z.channels * k * k) {
        throw DimensionError("filter width " + std::to_string(filters.cols()) + " does not match " +
                             std::to_string(z.channels) + " channels with kernel " + std::to_string(k));
    }
    const Index oh = geom.out_size(z.height);
    const Index ow = geom.out_size(z.width);
    ImageBatch out(z.count, filters.rows(), oh, ow);
    for (Index n = 0; n < z.count; ++n) {
        for (Index o = 0; o < filters.rows(); ++o) {
            for (Index oy = 0; oy < oh; ++oy) {
                for (Index ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (Index c = 0; c < z.channels; ++c) {
                        for (Index ky = 0; ky < k; ++ky) {
                            const Index iy = oy * geom.stride + ky - geom.padding;
                            if (iy < 0 || iy >= z.height) continue;
                            for (Index kx = 0; kx < k; ++kx) {
                                const Index ix = ox * geom.stride + kx - geom.padding;
                                if (ix < 0 || ix >= z.width) continue;
                                acc += filters(o, (c * k + ky) * k + kx) * z.at(n, c, iy, ix);
                            }
                        }
                    }
                    out.at(n, o, oy, ox) = acc;
                }
            }
        }
    }
    return out;
}

ImageBatch rows_to_images(const Matrix& rows, Index count, Index oh, Index ow)
{
    if (rows.rows() != count * oh * ow) throw DimensionError("row count does not match output geometry");
    ImageBatch out(count, rows.cols(), oh, ow);
    for (Index n = 0; n < count; ++n) {
        for (Index oy = 0; oy < oh; ++oy) {
            for (Index ox = 0; ox < ow; ++ox) {
                const Index row = (n * oh + oy) * ow + ox;
                for (Index c = 0; c < rows.cols(); ++c) out.at(n, c, oy, ox) = rows(row, c);
            }
        }
    }
    return out;
}

ImageBatch conv_forward_im2col(const Matrix& filters, const ImageBatch& z, const ConvGeometry& geom)
{
    const Matrix patches = im2col(z, geom);
    if (filters.cols() != patches.cols()) throw DimensionError("filter width does not match patch size");
    return rows_to_images(patches * filters.transpose(), z.count, geom.out_size(z.height), geom.out_size(z.width));
}

ImageBatch MaskedConvStudent::forward(const ImageBatch& z) const
{
    if (z.channels != in_channels) {
        throw DimensionError("masked conv student expects " + std::to_string(in_channels) + " channels, got " +
                             std::to_string(z.channels));
    }
    if (mask_filters.rows() != main_filters.rows() || mix_filters.cols() != main_filters.rows()) {
        throw DimensionError("mask, main and mix filter banks disagree on filter count");
    }
    const Matrix patches = im2col(z, geometry);
    const Matrix h = gated(patches, mask_filters.transpose(), main_filters.transpose());
    return rows_to_images(h * mix_filters.transpose(), z.count, geometry.out_size(z.height),
                          geometry.out_size(z.width));
}

std::size_t MaskedConvStudent::parameter_count() const
{
    return static_cast<std::size_t>(main_filters.size() + mix_filters.size());
}

std::size_t masked_conv_parameter_count(Index in_channels, Index out_channels, Index filters, Index kernel)
{
    return static_cast<std::size_t>(filters * in_channels * kernel * kernel + out_channels * filters);
}

std::size_t relu_conv_parameter_count(Index in_channels, Index out_channels, Index filters, Index kernel)
{
    return static_cast<std::size_t>(filters * in_channels * kernel * kernel + out_channels * filters * kernel * kernel);
}

MaskedConvStudent masked_conv_random(Index in_channels, Index in_height, Index in_width, Index out_channels,
                                     Index filters, const ConvGeometry& geom, std::uint64_t seed)
{
    Rng rng(seed);
    const Index patch = in_channels * geom.kernel * geom.kernel;
    MaskedConvStudent s;
    s.geometry = geom;
    s.in_channels = in_channels;
    s.in_height = in_height;
    s.in_width = in_width;
    s.mask_filters = gaussian_matrix(filters, patch, rng);
    s.main_filters = gaussian_matrix(filters, patch, rng, 1.0 / std::sqrt(static_cast<double>(patch)));
    s.mix_filters = gaussian_matrix(out_channels, filters, rng, 1.0 / std::sqrt(static_cast<double>(filters)));
    return s;
}

MaskedConvStudent masked_conv_from_solution(const ConvexSolution& solution, const ConvGeometry& geom,
                                            Index in_channels, Index in_height, Index in_width)
{
    if (solution.dim() != in_channels * geom.kernel * geom.kernel) {
        throw DimensionError("solution dimension does not match the patch size");
    }
    const GReLUStudent unit = recover_weights(solution);
    MaskedConvStudent s;
    s.geometry = geom;
    s.in_channels = in_channels;
    s.in_height = in_height;
    s.in_width = in_width;
    s.mask_filters = unit.gates.transpose();
    s.main_filters = unit.w1.transpose();
    s.mix_filters = unit.w2.transpose();
    return s;
}

LayerSpec to_layer_spec(const MaskedConvStudent& s)
{
    LayerSpec layer;
    layer.kind = LayerKind::masked_conv_student;
    layer.in_dim = s.in_channels * s.in_height * s.in_width;
    layer.out_dim = s.out_channels() * s.geometry.out_size(s.in_height) * s.geometry.out_size(s.in_width);
    layer.meta = {{"kernel", s.geometry.kernel},   {"stride", s.geometry.stride},
                  {"padding", s.geometry.padding}, {"in_channels", s.in_channels},
                  {"in_height", s.in_height},      {"in_width", s.in_width},
                  {"filters", s.filters()},        {"out_channels", s.out_channels()}};
    layer.blobs["mask_filters"] = flatten(s.mask_filters);
    layer.blobs["main_filters"] = flatten(s.main_filters);
    layer.blobs["mix_filters"] = flatten(s.mix_filters);
    return layer;
}

MaskedConvStudent masked_conv_from_layer_spec(const LayerSpec& layer)
{
    if (layer.kind != LayerKind::masked_conv_student) throw FormatError("layer is not a masked-conv-student");
    MaskedConvStudent s;
    s.geometry = {layer.meta.at("kernel"), layer.meta.at("stride"), layer.meta.at("padding")};
    s.in_channels = layer.meta.at("in_channels");
    s.in_height = layer.meta.at("in_height");
    s.in_width = layer.meta.at("in_width");
    const Index f = layer.meta.at("filters");
    const Index patch = s.in_channels * s.geometry.kernel * s.geometry.kernel;
    s.mask_filters = unflatten(blob(layer, "mask_filters"), f, patch);
    s.main_filters = unflatten(blob(layer, "main_filters"), f, patch);
    s.mix_filters = unflatten(blob(layer, "mix_filters"), layer.meta.at("out_channels"), f);
    return s;
}

} // namespace cvxdistill
