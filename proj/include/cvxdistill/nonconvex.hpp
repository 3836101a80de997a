#pragma once
#include <cstdint>
#include <optional>
#include <vector>

#include <cvxdistill/core_data.hpp>
#include <cvxdistill/model_spec.hpp>
#include <cvxdistill/types.hpp>

namespace cvxdistill {

struct DenseLayer
{
    Matrix w; // in x out
    Vector b;

    bool operator==(const DenseLayer&) const = default;
};

/*
 * Dense network with ReLU between layers. The last layer is linear unless
 * relu_output is set.
 */
struct MLPNet
{
    std::vector<DenseLayer> layers;
    bool relu_output = false;

    Index depth() const { return static_cast<Index>(layers.size()); }
    Index input_dim() const { return layers.front().w.rows(); }
    Index output_dim() const { return layers.back().w.cols(); }
    bool applies_relu(Index layer) const { return layer + 1 < depth() || relu_output; }

    void validate() const;
    Matrix forward(const Matrix& x) const;
    // Layers [first, last], taking the input of `first` to the output of `last`.
    Matrix forward_range(const Matrix& x, Index first, Index last) const;

    std::size_t parameter_count() const;
    std::size_t nonzero_weights() const;
    bool operator==(const MLPNet&) const = default;
};

MLPNet he_initialized(Index input_dim, const std::vector<Index>& widths, std::uint64_t seed);

struct ForwardCache
{
    std::vector<Matrix> inputs;      // input of each layer
    std::vector<Matrix> pre_activation;
};

struct NetGradients
{
    std::vector<Matrix> w;
    std::vector<Vector> b;
};

Matrix forward_cached(const MLPNet& net, const Matrix& x, ForwardCache& cache);
// Backpropagates dL/d(output) through the cached forward pass.
NetGradients backward(const MLPNet& net, const ForwardCache& cache, const Matrix& d_output);

// Mean softmax cross-entropy; writes dL/dlogits when `grad` is non-null.
double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* grad = nullptr);
// (1/(2n)) ||pred - target||_F^2.
double half_mse(const Matrix& pred, const Matrix& target, Matrix* grad = nullptr);
// Mean over all entries of (pred - target)^2.
double activation_mse(const Matrix& pred, const Matrix& target);
double accuracy(const Matrix& logits, const std::vector<int>& labels);
std::vector<int> argmax_rows(const Matrix& scores);

struct AdamConfig
{
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct ParamRef
{
    double* value;
    const double* grad;
    std::size_t size;
};

class Adam
{
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    // One optimizer step; the parameter list must keep the same order and
    // sizes across calls.
    void step(const std::vector<ParamRef>& params);
    std::int64_t steps() const { return steps_; }

private:
    AdamConfig config_;
    std::int64_t steps_ = 0;
    std::vector<Vector> first_;
    std::vector<Vector> second_;
};

std::vector<ParamRef> param_refs(MLPNet& net, const NetGradients& grads);

struct TeacherConfig
{
    std::vector<Index> hidden_widths{64, 32};
    int epochs = 30;
    double learning_rate = 1e-3;
    Index batch_size = 64;
    std::uint64_t seed = 0;
};

struct TeacherResult
{
    MLPNet net;
    double train_accuracy = 0.0;
    double train_loss = 0.0;
};

TeacherResult train_teacher(const Dataset& ds, const TeacherConfig& config);

// Layers [first, last] of a network, treated as one block.
struct BlockRange
{
    Index first = 0;
    Index last = 0;
};

// z enters layer `first`, t leaves layer `last` (after its ReLU, if any).
ActivationDataset extract_block_activations(const MLPNet& net, const Matrix& x, BlockRange block);
ActivationDataset extract_block_activations(const MLPNet& net, const Matrix& x, Index block_index);

MLPNet sub_network(const MLPNet& net, BlockRange block);

struct StudentTrainConfig
{
    Index hidden_width = 16;
    std::optional<double> time_budget_ms;
    std::optional<int> epochs;
    double learning_rate = 1e-3;
    Index batch_size = 64;
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;
};

struct StudentTracePoint
{
    int epoch = 0;
    double elapsed_ms = 0.0;
    double validation_mse = 0.0;
    double best_validation_mse = 0.0;
};

struct StudentResult
{
    MLPNet net;
    double best_validation_mse = 0.0;
    std::vector<StudentTracePoint> trace;
    double wall_ms = 0.0;
    std::int64_t steps = 0;
};

// Two-layer ReLU student fit to t by squared activation matching. Inputs are
// standardized during training and the scaling is folded back into layer 0.
StudentResult train_relu_student(const ActivationDataset& acts, const StudentTrainConfig& config);

// Largest h >= 1 with d*h + h*C <= nnz.
Index match_width_to_nnz(std::size_t nnz, Index input_dim, Index outputs);

// Zeroes all but the ceil(keep_fraction * total) largest-magnitude weights,
// ranked across every layer. Biases are kept.
MLPNet magnitude_prune(const MLPNet& net, double keep_fraction);

struct RegularizedFitOptions
{
    double lambda = 0.0;
    int steps = 3000;
    double learning_rate = 0.02;
    std::uint64_t seed = 0;
};

struct RegularizedFit
{
    Matrix w1;
    Vector w2;
    double objective = 0.0;
};

/*
 * Full-batch Adam on the bias-free two-layer network
 *   (1/(2n)) ||sum_j a_j(x) (x w1_j) w2_j - y||^2 + (lambda/2)(||W1||_F^2 + ||w2||^2)
 * where a_j is 1(x g_j >= 0) for fixed gates, or 1(x w1_j >= 0) (plain ReLU)
 * when gates is null. Returns the best objective seen.
 */
RegularizedFit fit_regularized_two_layer(const Matrix& x, const Vector& y, const Matrix* gates, Index width,
                                         const RegularizedFitOptions& options);

double regularized_objective(const Matrix& x, const Vector& y, const Matrix* gates, const Matrix& w1,
                             const Vector& w2, double lambda);

ModelSpec to_model_spec(const MLPNet& net);
MLPNet mlp_from_model_spec(const ModelSpec& model);

} // namespace cvxdistill
