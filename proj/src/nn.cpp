#include "playerfl/nn.hpp"

#include <algorithm>
#include <cmath>

#include "playerfl/errors.hpp"
#include "playerfl/random.hpp"

namespace playerfl {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) {
        throw ShapeError("matrix values length " + std::to_string(values_.size()) +
                         " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
        values_.insert(values_.end(), r.begin(), r.end());
    }
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    if (name == "identity" || name == "linear") return Activation::identity;
    throw InvalidSpecError("unknown activation '" + name + "'");
}

std::size_t Network::param_count() const {
    std::size_t total = 0;
    for (const auto& layer : layers) total += layer.param_count();
    return total;
}

std::vector<std::size_t> Network::layer_param_counts() const {
    std::vector<std::size_t> counts;
    counts.reserve(layers.size());
    for (const auto& layer : layers) counts.push_back(layer.param_count());
    return counts;
}

std::vector<double> LayerGradient::flat() const {
    std::vector<double> out(weights.values().begin(), weights.values().end());
    out.insert(out.end(), bias.begin(), bias.end());
    return out;
}

GradientSet GradientSet::zeros_like(const Network& net) {
    GradientSet g;
    g.layers.reserve(net.layer_count());
    for (const auto& layer : net.layers) {
        g.layers.push_back({Matrix(layer.in_dim(), layer.out_dim()),
                            std::vector<double>(layer.out_dim(), 0.0)});
    }
    return g;
}

LossKind LossKind::focal(double gamma) {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        throw InvalidSpecError("focal gamma must be finite and >= 0");
    }
    return {Type::focal, gamma};
}

AdamWState AdamWState::for_network(const Network& net, AdamWConfig config) {
    AdamWState state;
    state.config = config;
    for (const auto& layer : net.layers) {
        state.m.emplace_back(layer.param_count(), 0.0);
        state.v.emplace_back(layer.param_count(), 0.0);
        state.layer_steps.push_back(0);
    }
    return state;
}

Network init_network(std::span<const std::size_t> sizes, std::span<const Activation> activations,
                     std::uint64_t seed) {
    if (sizes.size() < 2) throw InvalidSpecError("network needs at least two layer sizes");
    if (activations.size() != sizes.size() - 1) {
        throw InvalidSpecError("expected " + std::to_string(sizes.size() - 1) +
                               " activations, got " + std::to_string(activations.size()));
    }
    for (std::size_t s : sizes) {
        if (s == 0) throw InvalidSpecError("layer size 0 is not allowed");
    }

    Rng rng(seed);
    Network net;
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
        const std::size_t in = sizes[k];
        const std::size_t out = sizes[k + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(in));
        DenseLayer layer{Matrix(in, out), std::vector<double>(out, 0.0), activations[k]};
        for (double& w : layer.weights.values()) w = rng.uniform(-bound, bound);
        net.layers.push_back(std::move(layer));
    }
    return net;
}

namespace {

double activate(Activation a, double z) {
    switch (a) {
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::tanh: return std::tanh(z);
        case Activation::identity: return z;
    }
    return z;
}

// d act / d z, expressed through the pre-activation z and the output a.
double activation_slope(Activation a, double z, double out) {
    switch (a) {
        case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: return 1.0 - out * out;
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

void check_labels(const Matrix& logits, std::span<const int> labels) {
    if (labels.size() != logits.rows()) {
        throw ShapeError("label count " + std::to_string(labels.size()) + " != batch rows " +
                         std::to_string(logits.rows()));
    }
    const auto classes = static_cast<int>(logits.cols());
    for (int y : labels) {
        if (y < 0 || y >= classes) {
            throw InvalidLabelError("label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(classes) + ")");
        }
    }
}

double log_sum_exp(std::span<const double> z) {
    const double peak = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - peak);
    return peak + std::log(sum);
}

// Per-sample loss; writes d loss / d logits into `dlogits` when non-empty.
double sample_loss(std::span<const double> z, int y, LossKind kind, std::span<double> dlogits) {
    const double lse = log_sum_exp(z);
    const double log_pt = z[y] - lse;
    const double pt = std::exp(log_pt);

    double value = 0.0;
    double coef = -1.0;  // d loss / d log p_t times -1 for cross-entropy
    if (kind.type == LossKind::Type::cross_entropy || kind.gamma == 0.0) {
        value = -log_pt;
    } else {
        const double one_minus = -std::expm1(log_pt);
        const double modulator = std::pow(one_minus, kind.gamma);
        value = -modulator * log_pt;
        // dL/dz_j = [g (1-p)^(g-1) p log p - (1-p)^g] (delta_jy - p_j)
        const double curvature =
            one_minus > 0.0 ? kind.gamma * std::pow(one_minus, kind.gamma - 1.0) * pt * log_pt : 0.0;
        coef = curvature - modulator;
    }
    if (!dlogits.empty()) {
        for (std::size_t j = 0; j < z.size(); ++j) {
            const double pj = std::exp(z[j] - lse);
            const double delta = static_cast<int>(j) == y ? 1.0 : 0.0;
            dlogits[j] = coef * (delta - pj);
        }
    }
    return value;
}

}  // namespace

ForwardPass forward(const Network& net, const Matrix& batch) {
    if (net.layers.empty()) throw ShapeError("forward on an empty network");
    if (batch.cols() != net.in_dim()) {
        throw ShapeError("batch has " + std::to_string(batch.cols()) + " columns, network expects " +
                         std::to_string(net.in_dim()));
    }
    ForwardPass pass;
    pass.pre_activations.reserve(net.layer_count());
    pass.activations.reserve(net.layer_count());
    const Matrix* input = &batch;
    for (const auto& layer : net.layers) {
        const std::size_t rows = input->rows();
        const std::size_t in = layer.in_dim();
        const std::size_t out = layer.out_dim();
        Matrix z(rows, out);
        for (std::size_t r = 0; r < rows; ++r) {
            auto zr = z.row(r);
            std::copy(layer.bias.begin(), layer.bias.end(), zr.begin());
            const auto xr = input->row(r);
            for (std::size_t i = 0; i < in; ++i) {
                const double x = xr[i];
                if (x == 0.0) continue;
                const auto wi = layer.weights.row(i);
                for (std::size_t j = 0; j < out; ++j) zr[j] += x * wi[j];
            }
        }
        Matrix a(rows, out);
        auto zv = z.values();
        auto av = a.values();
        for (std::size_t i = 0; i < zv.size(); ++i) av[i] = activate(layer.activation, zv[i]);
        pass.pre_activations.push_back(std::move(z));
        pass.activations.push_back(std::move(a));
        input = &pass.activations.back();
    }
    return pass;
}

double loss(const Matrix& logits, std::span<const int> labels, LossKind kind) {
    check_labels(logits, labels);
    if (logits.rows() == 0) throw ShapeError("loss on an empty batch");
    double total = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        total += sample_loss(logits.row(r), labels[r], kind, {});
    }
    return total / static_cast<double>(logits.rows());
}

LossAndGradient loss_and_gradient(const Network& net, const Matrix& batch,
                                  std::span<const int> labels, LossKind kind) {
    const ForwardPass pass = forward(net, batch);
    const Matrix& logits = pass.logits();
    check_labels(logits, labels);
    const std::size_t rows = batch.rows();
    if (rows == 0) throw ShapeError("backward on an empty batch");
    const double scale = 1.0 / static_cast<double>(rows);

    LossAndGradient result;
    Matrix delta(rows, logits.cols());
    for (std::size_t r = 0; r < rows; ++r) {
        result.loss += sample_loss(logits.row(r), labels[r], kind, delta.row(r));
        for (double& d : delta.row(r)) d *= scale;
    }
    result.loss *= scale;

    const std::size_t depth = net.layer_count();
    result.gradients.layers.resize(depth);
    for (std::size_t k = depth; k-- > 0;) {
        const DenseLayer& layer = net.layers[k];
        // delta currently holds d loss / d activation_k; fold in the activation slope.
        auto dv = delta.values();
        const auto zv = pass.pre_activations[k].values();
        const auto av = pass.activations[k].values();
        if (layer.activation != Activation::identity) {
            for (std::size_t i = 0; i < dv.size(); ++i) {
                dv[i] *= activation_slope(layer.activation, zv[i], av[i]);
            }
        }

        const Matrix& input = k == 0 ? batch : pass.activations[k - 1];
        const std::size_t in = layer.in_dim();
        const std::size_t out = layer.out_dim();
        LayerGradient grad{Matrix(in, out), std::vector<double>(out, 0.0)};
        for (std::size_t r = 0; r < rows; ++r) {
            const auto xr = input.row(r);
            const auto dr = delta.row(r);
            for (std::size_t j = 0; j < out; ++j) grad.bias[j] += dr[j];
            for (std::size_t i = 0; i < in; ++i) {
                const double x = xr[i];
                if (x == 0.0) continue;
                auto gi = grad.weights.row(i);
                for (std::size_t j = 0; j < out; ++j) gi[j] += x * dr[j];
            }
        }

        if (k > 0) {
            Matrix upstream(rows, in);
            for (std::size_t r = 0; r < rows; ++r) {
                const auto dr = delta.row(r);
                auto ur = upstream.row(r);
                for (std::size_t i = 0; i < in; ++i) {
                    const auto wi = layer.weights.row(i);
                    double acc = 0.0;
                    for (std::size_t j = 0; j < out; ++j) acc += wi[j] * dr[j];
                    ur[i] = acc;
                }
            }
            delta = std::move(upstream);
        }
        result.gradients.layers[k] = std::move(grad);
    }
    return result;
}

GradientSet backward(const Network& net, const Matrix& batch, std::span<const int> labels,
                     LossKind kind) {
    return loss_and_gradient(net, batch, labels, kind).gradients;
}

void adamw_step(Network& net, const GradientSet& grads, AdamWState& state, double lr,
                const std::vector<bool>& trainable) {
    const std::size_t depth = net.layer_count();
    if (grads.layers.size() != depth || state.m.size() != depth || state.v.size() != depth ||
        state.layer_steps.size() != depth) {
        throw ShapeError("gradient/optimizer state layer count does not match network");
    }
    if (!trainable.empty() && trainable.size() != depth) {
        throw ShapeError("trainable mask length does not match network");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidSpecError("learning rate must be finite and >= 0");

    for (std::size_t k = 0; k < depth; ++k) {
        if (!trainable.empty() && !trainable[k]) continue;
        const auto& g = grads.layers[k];
        if (g.weights.rows() != net.layers[k].in_dim() || g.weights.cols() != net.layers[k].out_dim() ||
            g.bias.size() != net.layers[k].out_dim()) {
            throw ShapeError("gradient shape mismatch at layer " + std::to_string(k));
        }
        for (double x : g.weights.values()) {
            if (!std::isfinite(x)) throw NumericError("non-finite gradient at layer " + std::to_string(k));
        }
        for (double x : g.bias) {
            if (!std::isfinite(x)) throw NumericError("non-finite gradient at layer " + std::to_string(k));
        }
    }

    const AdamWConfig& cfg = state.config;
    ++state.step;
    const double decay = 1.0 - lr * cfg.weight_decay;

    for (std::size_t k = 0; k < depth; ++k) {
        if (!trainable.empty() && !trainable[k]) continue;
        const double t = static_cast<double>(++state.layer_steps[k]);
        const double correction1 = 1.0 - std::pow(cfg.beta1, t);
        const double correction2 = 1.0 - std::pow(cfg.beta2, t);
        DenseLayer& layer = net.layers[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        auto update = [&](double& theta, double g, std::size_t idx) {
            theta *= decay;
            m[idx] = cfg.beta1 * m[idx] + (1.0 - cfg.beta1) * g;
            v[idx] = cfg.beta2 * v[idx] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = m[idx] / correction1;
            const double v_hat = v[idx] / correction2;
            theta -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        };
        auto wv = layer.weights.values();
        const auto gw = grads.layers[k].weights.values();
        for (std::size_t i = 0; i < wv.size(); ++i) update(wv[i], gw[i], i);
        const std::size_t offset = wv.size();
        for (std::size_t j = 0; j < layer.bias.size(); ++j) {
            update(layer.bias[j], grads.layers[k].bias[j], offset + j);
        }
    }
}

std::vector<double> get_layer_params(const Network& net, std::size_t k) {
    if (k >= net.layer_count()) {
        throw IndexError("layer index " + std::to_string(k) + " out of range for " +
                         std::to_string(net.layer_count()) + " layers");
    }
    const DenseLayer& layer = net.layers[k];
    std::vector<double> out(layer.weights.values().begin(), layer.weights.values().end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
    return out;
}

void set_layer_params(Network& net, std::size_t k, std::span<const double> params) {
    if (k >= net.layer_count()) {
        throw IndexError("layer index " + std::to_string(k) + " out of range for " +
                         std::to_string(net.layer_count()) + " layers");
    }
    DenseLayer& layer = net.layers[k];
    if (params.size() != layer.param_count()) {
        throw ShapeError("layer " + std::to_string(k) + " expects " +
                         std::to_string(layer.param_count()) + " parameters, got " +
                         std::to_string(params.size()));
    }
    auto wv = layer.weights.values();
    std::copy(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(wv.size()), wv.begin());
    std::copy(params.begin() + static_cast<std::ptrdiff_t>(wv.size()), params.end(), layer.bias.begin());
}

std::vector<int> predict(const Network& net, const Matrix& batch) {
    const ForwardPass pass = forward(net, batch);
    const Matrix& logits = pass.logits();
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

}  // namespace playerfl
