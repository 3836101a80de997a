#include <cvxdistill/nonconvex.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace cvxdistill {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start)
{
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Matrix relu(const Matrix& m)
{
    return m.cwiseMax(0.0);
}

Matrix step_mask(const Matrix& m)
{
    return m.unaryExpr([](double v) { return v >= 0.0 ? 1.0 : 0.0; });
}

std::vector<Index> shuffled_indices(Index n, Rng& rng)
{
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

Matrix gather_rows(const Matrix& m, const std::vector<Index>& idx, std::size_t begin, std::size_t end)
{
    Matrix out(static_cast<Index>(end - begin), m.cols());
    for (std::size_t i = begin; i < end; ++i) out.row(static_cast<Index>(i - begin)) = m.row(idx[i]);
    return out;
}

} // namespace

void MLPNet::validate() const
{
    if (layers.empty()) throw DimensionError("network has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        if (layer.b.size() != layer.w.cols()) throw DimensionError("bias width mismatch in layer " + std::to_string(l));
        if (l > 0 && layers[l - 1].w.cols() != layer.w.rows()) {
            throw DimensionError("layer " + std::to_string(l) + " does not chain");
        }
        if (!layer.w.allFinite() || !layer.b.allFinite()) throw Error("non-finite weights in layer " + std::to_string(l));
    }
}

Matrix MLPNet::forward(const Matrix& x) const
{
    return forward_range(x, 0, depth() - 1);
}

Matrix MLPNet::forward_range(const Matrix& x, Index first, Index last) const
{
    if (first < 0 || last >= depth() || first > last) throw DimensionError("layer range out of bounds");
    if (x.cols() != layers[static_cast<std::size_t>(first)].w.rows()) {
        throw DimensionError("layer " + std::to_string(first) + " expects " +
                             std::to_string(layers[static_cast<std::size_t>(first)].w.rows()) + " inputs, got " +
                             std::to_string(x.cols()));
    }
    Matrix h = x;
    for (Index l = first; l <= last; ++l) {
        const auto& layer = layers[static_cast<std::size_t>(l)];
        Matrix pre = h * layer.w;
        pre.rowwise() += layer.b.transpose();
        h = applies_relu(l) ? relu(pre) : pre;
    }
    return h;
}

std::size_t MLPNet::parameter_count() const
{
    std::size_t total = 0;
    for (const auto& layer : layers) total += static_cast<std::size_t>(layer.w.size() + layer.b.size());
    return total;
}

std::size_t MLPNet::nonzero_weights() const
{
    std::size_t total = 0;
    for (const auto& layer : layers) total += static_cast<std::size_t>((layer.w.array() != 0.0).count());
    return total;
}

MLPNet he_initialized(Index input_dim, const std::vector<Index>& widths, std::uint64_t seed)
{
    Rng rng(seed);
    MLPNet net;
    Index in = input_dim;
    for (const Index out : widths) {
        DenseLayer layer;
        layer.w = gaussian_matrix(in, out, rng, std::sqrt(2.0 / static_cast<double>(in)));
        layer.b = Vector::Zero(out);
        net.layers.push_back(std::move(layer));
        in = out;
    }
    net.validate();
    return net;
}

Matrix forward_cached(const MLPNet& net, const Matrix& x, ForwardCache& cache)
{
    cache.inputs.clear();
    cache.pre_activation.clear();
    Matrix h = x;
    for (Index l = 0; l < net.depth(); ++l) {
        const auto& layer = net.layers[static_cast<std::size_t>(l)];
        cache.inputs.push_back(h);
        Matrix pre = h * layer.w;
        pre.rowwise() += layer.b.transpose();
        h = net.applies_relu(l) ? relu(pre) : pre;
        cache.pre_activation.push_back(std::move(pre));
    }
    return h;
}

NetGradients backward(const MLPNet& net, const ForwardCache& cache, const Matrix& d_output)
{
    NetGradients g;
    g.w.resize(net.layers.size());
    g.b.resize(net.layers.size());
    Matrix delta = d_output;
    for (Index l = net.depth() - 1; l >= 0; --l) {
        const auto ul = static_cast<std::size_t>(l);
        if (net.applies_relu(l)) {
            delta = delta.cwiseProduct(cache.pre_activation[ul].unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
        }
        g.w[ul] = cache.inputs[ul].transpose() * delta;
        g.b[ul] = delta.colwise().sum().transpose();
        if (l > 0) delta = delta * net.layers[ul].w.transpose();
    }
    return g;
}

double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* grad)
{
    const Index n = logits.rows();
    if (static_cast<Index>(labels.size()) != n) throw DimensionError("label count does not match logits");
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    if (grad) grad->resize(n, logits.cols());
    for (Index i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= logits.cols()) throw DimensionError("label out of range");
        const double top = logits.row(i).maxCoeff();
        const Eigen::RowVectorXd e = (logits.row(i).array() - top).exp();
        const double z = e.sum();
        loss += std::log(z) - (logits(i, label) - top);
        if (grad) {
            grad->row(i) = e / z * inv_n;
            (*grad)(i, label) -= inv_n;
        }
    }
    return loss * inv_n;
}

double half_mse(const Matrix& pred, const Matrix& target, Matrix* grad)
{
    const double n = static_cast<double>(pred.rows());
    const Matrix r = pred - target;
    if (grad) *grad = r / n;
    return 0.5 * r.squaredNorm() / n;
}

double activation_mse(const Matrix& pred, const Matrix& target)
{
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw DimensionError("activation shapes differ");
    }
    if (pred.size() == 0) return 0.0;
    return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

std::vector<int> argmax_rows(const Matrix& scores)
{
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Index i = 0; i < scores.rows(); ++i) {
        Index best = 0;
        scores.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const Matrix& logits, const std::vector<int>& labels)
{
    if (static_cast<Index>(labels.size()) != logits.rows()) throw DimensionError("label count does not match logits");
    if (labels.empty()) return 0.0;
    const auto pred = argmax_rows(logits);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

void Adam::step(const std::vector<ParamRef>& params)
{
    if (first_.empty()) {
        for (const auto& p : params) {
            first_.push_back(Vector::Zero(static_cast<Index>(p.size)));
            second_.push_back(Vector::Zero(static_cast<Index>(p.size)));
        }
    }
    if (first_.size() != params.size()) throw Error("adam parameter list changed between steps");
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t s = 0; s < params.size(); ++s) {
        const auto& p = params[s];
        Eigen::Map<Vector> value(p.value, static_cast<Index>(p.size));
        const Eigen::Map<const Vector> grad(p.grad, static_cast<Index>(p.size));
        first_[s] = config_.beta1 * first_[s] + (1.0 - config_.beta1) * grad;
        second_[s] = config_.beta2 * second_[s] + (1.0 - config_.beta2) * grad.cwiseAbs2();
        value.array() -= config_.learning_rate * (first_[s].array() / c1) /
                         ((second_[s].array() / c2).sqrt() + config_.epsilon);
    }
}

std::vector<ParamRef> param_refs(MLPNet& net, const NetGradients& grads)
{
    std::vector<ParamRef> out;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto& layer = net.layers[l];
        out.push_back({layer.w.data(), grads.w[l].data(), static_cast<std::size_t>(layer.w.size())});
        out.push_back({layer.b.data(), grads.b[l].data(), static_cast<std::size_t>(layer.b.size())});
    }
    return out;
}

TeacherResult train_teacher(const Dataset& ds, const TeacherConfig& config)
{
    if (!ds.labels) throw Error("teacher training needs labels");
    if (ds.rows() == 0) throw DimensionError("empty training set");
    const auto& labels = *ds.labels;
    std::vector<Index> widths = config.hidden_widths;
    widths.push_back(ds.num_classes());
    TeacherResult result;
    result.net = he_initialized(ds.cols(), widths, config.seed);

    Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    Adam adam({config.learning_rate});
    const auto batch = static_cast<std::size_t>(std::max<Index>(config.batch_size, 1));
    ForwardCache cache;
    std::int64_t iteration = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_indices(ds.rows(), rng);
        for (std::size_t begin = 0; begin < order.size(); begin += batch) {
            const std::size_t end = std::min(order.size(), begin + batch);
            const Matrix xb = gather_rows(ds.x, order, begin, end);
            std::vector<int> yb;
            for (std::size_t i = begin; i < end; ++i) yb.push_back(labels[static_cast<std::size_t>(order[i])]);
            Matrix grad;
            const double loss = softmax_cross_entropy(forward_cached(result.net, xb, cache), yb, &grad);
            ++iteration;
            if (!std::isfinite(loss)) {
                throw Error("teacher training diverged at iteration " + std::to_string(iteration));
            }
            const NetGradients g = backward(result.net, cache, grad);
            adam.step(param_refs(result.net, g));
        }
    }
    const Matrix logits = result.net.forward(ds.x);
    result.train_loss = softmax_cross_entropy(logits, labels);
    result.train_accuracy = accuracy(logits, labels);
    return result;
}

ActivationDataset extract_block_activations(const MLPNet& net, const Matrix& x, BlockRange block)
{
    if (block.first < 0 || block.last >= net.depth() || block.first > block.last) {
        throw DimensionError("block [" + std::to_string(block.first) + ", " + std::to_string(block.last) +
                             "] out of range for depth " + std::to_string(net.depth()));
    }
    ActivationDataset acts;
    acts.z = block.first == 0 ? x : net.forward_range(x, 0, block.first - 1);
    acts.t = net.forward_range(acts.z, block.first, block.last);
    return acts;
}

ActivationDataset extract_block_activations(const MLPNet& net, const Matrix& x, Index block_index)
{
    return extract_block_activations(net, x, BlockRange{block_index, block_index});
}

MLPNet sub_network(const MLPNet& net, BlockRange block)
{
    if (block.first < 0 || block.last >= net.depth() || block.first > block.last) {
        throw DimensionError("block out of range");
    }
    MLPNet out;
    out.layers.assign(net.layers.begin() + block.first, net.layers.begin() + block.last + 1);
    out.relu_output = net.applies_relu(block.last);
    return out;
}

StudentResult train_relu_student(const ActivationDataset& acts, const StudentTrainConfig& config)
{
    if (config.hidden_width < 1) throw Error("hidden width must be >= 1");
    if (acts.rows() < 2) throw DimensionError("student training needs at least two rows");
    const auto start = Clock::now();

    Rng rng(config.seed);
    const auto order = shuffled_indices(acts.rows(), rng);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(order.size()))), 1,
        order.size() - 1);
    const std::vector<Index> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    const std::vector<Index> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    const Standardization st = standardize(acts.z);
    const Matrix z_train = gather_rows(st.x, train_idx, 0, train_idx.size());
    const Matrix t_train = gather_rows(acts.t, train_idx, 0, train_idx.size());
    const Matrix z_val = gather_rows(st.x, val_idx, 0, val_idx.size());
    const Matrix t_val = gather_rows(acts.t, val_idx, 0, val_idx.size());

    MLPNet net = he_initialized(acts.z.cols(), {config.hidden_width, acts.t.cols()}, config.seed + 1);
    StudentResult result;
    MLPNet best = net;
    result.best_validation_mse = activation_mse(net.forward(z_val), t_val);
    result.trace.push_back({0, ms_since(start), result.best_validation_mse, result.best_validation_mse});

    Adam adam({config.learning_rate});
    const auto batch = static_cast<std::size_t>(std::max<Index>(config.batch_size, 1));
    const int max_epochs = config.epochs.value_or(std::numeric_limits<int>::max());
    const bool timed = config.time_budget_ms.has_value();
    if (!timed && !config.epochs) throw Error("student training needs a time budget or an epoch count");
    ForwardCache cache;
    bool out_of_time = timed && ms_since(start) >= *config.time_budget_ms;
    for (int epoch = 1; epoch <= max_epochs && !out_of_time; ++epoch) {
        std::vector<Index> perm(train_idx.size());
        std::iota(perm.begin(), perm.end(), Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t begin = 0; begin < perm.size(); begin += batch) {
            if (timed && ms_since(start) >= *config.time_budget_ms) {
                out_of_time = true;
                break;
            }
            const std::size_t end = std::min(perm.size(), begin + batch);
            const Matrix zb = gather_rows(z_train, perm, begin, end);
            const Matrix tb = gather_rows(t_train, perm, begin, end);
            Matrix grad;
            half_mse(forward_cached(net, zb, cache), tb, &grad);
            adam.step(param_refs(net, backward(net, cache, grad)));
            ++result.steps;
        }
        const double val = activation_mse(net.forward(z_val), t_val);
        if (val < result.best_validation_mse) {
            result.best_validation_mse = val;
            best = net;
        }
        result.trace.push_back({epoch, ms_since(start), val, result.best_validation_mse});
    }

    // Fold the standardization into the first layer.
    auto& first = best.layers.front();
    const Vector inv_scale = st.scales.cwiseInverse();
    first.b -= first.w.transpose() * st.means.cwiseProduct(inv_scale);
    first.w = inv_scale.asDiagonal() * first.w;
    result.net = std::move(best);
    result.wall_ms = ms_since(start);
    return result;
}

Index match_width_to_nnz(std::size_t nnz, Index input_dim, Index outputs)
{
    const auto per_unit = static_cast<std::size_t>(input_dim + outputs);
    if (per_unit == 0) throw DimensionError("width matching needs positive dimensions");
    return std::max<Index>(1, static_cast<Index>(nnz / per_unit));
}

MLPNet magnitude_prune(const MLPNet& net, double keep_fraction)
{
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw Error("keep_fraction must lie in (0, 1]");
    struct Entry
    {
        std::size_t layer;
        Index index;
        double magnitude;
    };
    std::vector<Entry> entries;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& w = net.layers[l].w;
        for (Index i = 0; i < w.size(); ++i) entries.push_back({l, i, std::abs(w.data()[i])});
    }
    const auto keep = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(entries.size())));
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.magnitude > b.magnitude; });
    MLPNet out = net;
    for (std::size_t e = std::min(keep, entries.size()); e < entries.size(); ++e) {
        out.layers[entries[e].layer].w.data()[entries[e].index] = 0.0;
    }
    return out;
}

double regularized_objective(const Matrix& x, const Vector& y, const Matrix* gates, const Matrix& w1,
                             const Vector& w2, double lambda)
{
    const Matrix pre = x * w1;
    const Matrix act = (gates ? step_mask(x * *gates) : step_mask(pre)).cwiseProduct(pre);
    const Vector r = act * w2 - y;
    return 0.5 * r.squaredNorm() / static_cast<double>(x.rows()) +
           0.5 * lambda * (w1.squaredNorm() + w2.squaredNorm());
}

RegularizedFit fit_regularized_two_layer(const Matrix& x, const Vector& y, const Matrix* gates, Index width,
                                         const RegularizedFitOptions& options)
{
    if (width < 1) throw Error("width must be >= 1");
    if (gates && (gates->rows() != x.cols() || gates->cols() != width)) {
        throw DimensionError("gate matrix must be d x width");
    }
    Rng rng(options.seed);
    const double n = static_cast<double>(x.rows());
    Matrix w1 = gaussian_matrix(x.cols(), width, rng, 1.0 / std::sqrt(static_cast<double>(x.cols())));
    Vector w2 = gaussian_matrix(width, 1, rng, 1.0 / std::sqrt(static_cast<double>(width)));
    const Matrix fixed_mask = gates ? step_mask(x * *gates) : Matrix();

    RegularizedFit best{w1, w2, regularized_objective(x, y, gates, w1, w2, options.lambda)};
    Adam adam({options.learning_rate});
    Matrix g1;
    Vector g2;
    for (int s = 0; s < options.steps; ++s) {
        const Matrix pre = x * w1;
        const Matrix mask = gates ? fixed_mask : step_mask(pre);
        const Matrix act = mask.cwiseProduct(pre);
        const Vector r = act * w2 - y;
        const double obj = 0.5 * r.squaredNorm() / n + 0.5 * options.lambda * (w1.squaredNorm() + w2.squaredNorm());
        if (obj < best.objective) best = {w1, w2, obj};
        g2 = act.transpose() * r / n + options.lambda * w2;
        g1 = x.transpose() * (mask.array().colwise() * (r.array() / n)).matrix() * w2.asDiagonal();
        g1 += options.lambda * w1;
        adam.step({{w1.data(), g1.data(), static_cast<std::size_t>(w1.size())},
                   {w2.data(), g2.data(), static_cast<std::size_t>(w2.size())}});
    }
    const double last = regularized_objective(x, y, gates, w1, w2, options.lambda);
    if (last < best.objective) best = {w1, w2, last};
    return best;
}

ModelSpec to_model_spec(const MLPNet& net)
{
    net.validate();
    ModelSpec model;
    for (Index l = 0; l < net.depth(); ++l) {
        const auto& layer = net.layers[static_cast<std::size_t>(l)];
        LayerSpec dense;
        dense.kind = LayerKind::dense;
        dense.in_dim = layer.w.rows();
        dense.out_dim = layer.w.cols();
        dense.blobs["weight"] = flatten(layer.w);
        dense.blobs["bias"] = flatten(layer.b);
        model.layers.push_back(std::move(dense));
        if (net.applies_relu(l)) {
            LayerSpec act;
            act.kind = LayerKind::relu;
            act.in_dim = act.out_dim = layer.w.cols();
            model.layers.push_back(std::move(act));
        }
    }
    return model;
}

MLPNet mlp_from_model_spec(const ModelSpec& model)
{
    model.validate();
    MLPNet net;
    bool last_relu = false;
    for (const auto& layer : model.layers) {
        if (layer.kind == LayerKind::dense) {
            if (!net.layers.empty() && !last_relu) throw FormatError("dense layers must be separated by relu");
            DenseLayer dense;
            dense.w = unflatten(blob(layer, "weight"), layer.in_dim, layer.out_dim);
            dense.b = unflatten(blob(layer, "bias"), layer.out_dim, 1);
            net.layers.push_back(std::move(dense));
            last_relu = false;
        } else if (layer.kind == LayerKind::relu) {
            if (net.layers.empty() || last_relu) throw FormatError("relu must follow a dense layer");
            last_relu = true;
        } else {
            throw FormatError("layer kind '" + std::string(to_string(layer.kind)) + "' is not part of an MLP");
        }
    }
    net.relu_output = last_relu;
    net.validate();
    return net;
}

} // namespace cvxdistill
