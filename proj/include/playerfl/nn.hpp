#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace playerfl {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

enum class Activation { relu, tanh, identity };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

/// Affine map followed by an elementwise activation: a = act(x W + b).
struct DenseLayer {
    Matrix weights;  // in x out
    std::vector<double> bias;
    Activation activation = Activation::identity;

    std::size_t in_dim() const noexcept { return weights.rows(); }
    std::size_t out_dim() const noexcept { return weights.cols(); }
    std::size_t param_count() const noexcept { return weights.size() + bias.size(); }

    bool operator==(const DenseLayer&) const = default;
};

struct Network {
    std::vector<DenseLayer> layers;

    std::size_t layer_count() const noexcept { return layers.size(); }
    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }
    std::size_t param_count() const;
    std::vector<std::size_t> layer_param_counts() const;

    bool operator==(const Network&) const = default;
};

struct LayerGradient {
    Matrix weights;
    std::vector<double> bias;

    /// Weights row-major, then bias; same order as get_layer_params.
    std::vector<double> flat() const;
};

/// Per-layer gradients, shape-congruent with the Network they came from.
struct GradientSet {
    std::vector<LayerGradient> layers;

    static GradientSet zeros_like(const Network& net);
};

struct LossKind {
    enum class Type { cross_entropy, focal };

    Type type = Type::cross_entropy;
    double gamma = 0.0;

    static LossKind cross_entropy() { return {Type::cross_entropy, 0.0}; }
    static LossKind focal(double gamma = 2.0);
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

/// First/second moments per layer, flattened in get_layer_params order.
/// Bias correction uses the per-layer count so a layer that was frozen for a
/// while starts its own correction from scratch.
struct AdamWState {
    AdamWConfig config;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::vector<std::uint64_t> layer_steps;
    std::uint64_t step = 0;

    static AdamWState for_network(const Network& net, AdamWConfig config = {});
};

/// He-style uniform init in [-sqrt(6/in), sqrt(6/in)], zero biases.
/// `sizes` lists the layer widths including the input, so sizes.size() - 1
/// layers are built, one activation each.
Network init_network(std::span<const std::size_t> sizes, std::span<const Activation> activations,
                     std::uint64_t seed);

struct ForwardPass {
    std::vector<Matrix> pre_activations;
    std::vector<Matrix> activations;  // post-activation output of every layer

    const Matrix& logits() const { return activations.back(); }
};

ForwardPass forward(const Network& net, const Matrix& batch);

/// Mean loss over the batch. Labels index columns of `logits`.
double loss(const Matrix& logits, std::span<const int> labels, LossKind kind);

struct LossAndGradient {
    double loss = 0.0;
    GradientSet gradients;
};

LossAndGradient loss_and_gradient(const Network& net, const Matrix& batch,
                                  std::span<const int> labels, LossKind kind);

GradientSet backward(const Network& net, const Matrix& batch, std::span<const int> labels,
                     LossKind kind);

/// One AdamW step with decoupled weight decay. Layers whose `trainable` flag is
/// false are left untouched (moments included); an empty span trains all.
void adamw_step(Network& net, const GradientSet& grads, AdamWState& state, double lr,
                const std::vector<bool>& trainable = {});

std::vector<double> get_layer_params(const Network& net, std::size_t k);
void set_layer_params(Network& net, std::size_t k, std::span<const double> params);

std::vector<int> predict(const Network& net, const Matrix& batch);

}  // namespace playerfl
