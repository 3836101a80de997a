#pragma once
#include <cstdint>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include <cvxdistill/gates.hpp>
#include <cvxdistill/model_spec.hpp>
#include <cvxdistill/types.hpp>

namespace cvxdistill {

// Maps raw block inputs to the solver's feature space: optional
// standardization, then an optional trailing column of ones.
struct InputTransform
{
    Vector mean;
    Vector scale;
    bool append_one = false;

    Matrix apply(const Matrix& x) const;
    Index feature_dim(Index input_dim) const { return input_dim + (append_one ? 1 : 0); }
};

/*
 * Convex GReLU parameters. For gate i and output k the block v_i^k is
 * column i*C + k of `weights` (d x p*C), so the prediction is
 *   Y_hat(:, k) = sum_i D_i X v_i^k,   D_i = diag(1(X g_i >= 0)).
 */
struct ConvexSolution
{
    std::shared_ptr<const GateSet> gates;
    Matrix weights;
    Index outputs = 1;
    double lambda = 0.0;

    Index dim() const { return weights.rows(); }
    Index gate_count() const { return gates ? gates->size() : 0; }
    auto block(Index gate) const { return weights.middleCols(gate * outputs, outputs); }
    auto block(Index gate) { return weights.middleCols(gate * outputs, outputs); }

    static ConvexSolution zeros(std::shared_ptr<const GateSet> gates, Index outputs);
};

/*
 * Factored two-layer GReLU network. Hidden unit j is gated by column j of
 * `gates` and computes 1(f . g_j >= 0) * (f . w1_j) on transformed inputs f;
 * the output is H * w2 + out_bias.
 */
struct GReLUStudent
{
    InputTransform transform;
    Matrix gates;
    Matrix w1;
    Matrix w2;
    Vector out_bias;

    Index width() const { return w1.cols(); }
    Index outputs() const { return w2.cols(); }
    Index feature_dim() const { return w1.rows(); }
    Index input_dim() const { return feature_dim() - (transform.append_one ? 1 : 0); }

    // Gated hidden activations H (n x m) of raw inputs x.
    Matrix hidden(const Matrix& x) const;
    Matrix forward(const Matrix& x) const;

    // Nonzero entries of w1, w2 and out_bias. Gates carry no trainable
    // parameters and are not counted.
    std::size_t effective_parameters() const;
};

Matrix grelu_forward(const ConvexSolution& solution, const Matrix& x);
Matrix grelu_forward(const GReLUStudent& student, const Matrix& x);

// Blocks with norm below this are treated as exact zeros.
inline constexpr double block_zero_tol = 1e-10;

// One hidden unit per nonzero block v_i^k: w1 = v / sqrt(|v|), w2 = sqrt(|v|) e_k.
GReLUStudent recover_weights(const ConvexSolution& solution);

// (w1 * sqrt(|w2| / |w1|), sign(w2) * sqrt(|w1| |w2|)); leaves w1 * w2 unchanged.
std::pair<Vector, double> rescale_balanced(const Vector& w1_col, double w2_val);

// Vector-output version applied unit by unit: column j of w1 and row j of w2
// are rescaled by positive factors so that their norms match.
void balance_units(Matrix& w1, Matrix& w2);

// Stacks C scalar-output solutions sharing one gate set into a C-output one.
ConvexSolution assemble_one_vs_all(std::span<const ConvexSolution> per_class);

// Column k of a multi-output solution as a scalar-output solution.
ConvexSolution output_slice(const ConvexSolution& solution, Index k);

LayerSpec to_layer_spec(const GReLUStudent& student);
GReLUStudent grelu_from_layer_spec(const LayerSpec& layer);

// ---- convolutional student ------------------------------------------------

// NCHW batch of images stored contiguously.
struct ImageBatch
{
    Index count = 0;
    Index channels = 0;
    Index height = 0;
    Index width = 0;
    std::vector<double> data;

    ImageBatch() = default;
    ImageBatch(Index n, Index c, Index h, Index w);

    double& at(Index n, Index c, Index h, Index w) { return data[offset(n, c, h, w)]; }
    double at(Index n, Index c, Index h, Index w) const { return data[offset(n, c, h, w)]; }

    // One row per image, (c, h, w) flattened.
    Matrix as_rows() const;
    static ImageBatch from_rows(const Matrix& rows, Index c, Index h, Index w);

private:
    std::size_t offset(Index n, Index c, Index h, Index w) const
    {
        return static_cast<std::size_t>(((n * channels + c) * height + h) * width + w);
    }
};

struct ConvGeometry
{
    Index kernel = 1;
    Index stride = 1;
    Index padding = 0;

    Index out_size(Index in) const;
};

// Patch matrix: row (n, oy, ox) in row-major order, column (c, ky, kx).
Matrix im2col(const ImageBatch& z, const ConvGeometry& geom);

// Direct convolution; filters is out_channels x (c * k * k) in im2col order.
ImageBatch conv_forward(const Matrix& filters, const ImageBatch& z, const ConvGeometry& geom);

// Same result through im2col and a matrix product.
ImageBatch conv_forward_im2col(const Matrix& filters, const ImageBatch& z, const ConvGeometry& geom);

// Inverse reshape of a (n * oh * ow) x channels matrix into an image batch.
ImageBatch rows_to_images(const Matrix& rows, Index count, Index oh, Index ow);

/*
 * out = mix_1x1( main(z) .* 1(mask(z) >= 0) ), where mask and main share the
 * same geometry and filter count. Mask filters are frozen.
 */
struct MaskedConvStudent
{
    ConvGeometry geometry;
    Index in_channels = 0;
    Index in_height = 0;
    Index in_width = 0;
    Matrix mask_filters;
    Matrix main_filters;
    Matrix mix_filters; // out_channels x filters

    Index filters() const { return main_filters.rows(); }
    Index out_channels() const { return mix_filters.rows(); }

    ImageBatch forward(const ImageBatch& z) const;
    // main + mix weights; mask filters are excluded.
    std::size_t parameter_count() const;
};

std::size_t masked_conv_parameter_count(Index in_channels, Index out_channels, Index filters, Index kernel);
// CNN2(ReLU(CNN1(z))) with both convolutions k x k and `filters` hidden channels.
std::size_t relu_conv_parameter_count(Index in_channels, Index out_channels, Index filters, Index kernel);

MaskedConvStudent masked_conv_random(Index in_channels, Index in_height, Index in_width, Index out_channels,
                                     Index filters, const ConvGeometry& geom, std::uint64_t seed);

// Student whose mask filters are the solution's gates, solved on im2col rows.
MaskedConvStudent masked_conv_from_solution(const ConvexSolution& solution, const ConvGeometry& geom,
                                            Index in_channels, Index in_height, Index in_width);

LayerSpec to_layer_spec(const MaskedConvStudent& student);
MaskedConvStudent masked_conv_from_layer_spec(const LayerSpec& layer);

} // namespace cvxdistill
