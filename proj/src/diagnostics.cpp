#include "playerfl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "playerfl/errors.hpp"
#include "playerfl/random.hpp"

namespace playerfl {

double layer_importance(std::span<const double> params, std::span<const double> grads) {
    if (params.size() != grads.size()) {
        throw ShapeError("importance: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
    }
    if (params.empty()) throw ShapeError("importance of an empty parameter group");
    double sum = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double term = params[i] * grads[i];
        sum += term * term;
    }
    return sum / static_cast<double>(params.size());
}

BatchSnapshot snapshot(const Network& net, const GradientSet& grads) {
    if (grads.layers.size() != net.layer_count()) throw ShapeError("snapshot: layer count mismatch");
    BatchSnapshot snap;
    snap.reserve(net.layer_count());
    for (std::size_t k = 0; k < net.layer_count(); ++k) {
        snap.push_back({get_layer_params(net, k), grads.layers[k].flat()});
    }
    return snap;
}

SensitivityProfile profile_from_importance(std::vector<double> mean_importance, std::size_t batch_count) {
    SensitivityProfile profile;
    profile.cumulative.resize(mean_importance.size());
    double running = 0.0;
    for (std::size_t k = 0; k < mean_importance.size(); ++k) {
        running += mean_importance[k];
        profile.cumulative[k] = running;
    }
    profile.mean_importance = std::move(mean_importance);
    profile.batch_count = batch_count;
    return profile;
}

SensitivityProfile federation_sensitivity(std::span<const BatchSnapshot> batches, SensitivityMode mode) {
    if (batches.empty()) throw ShapeError("federation sensitivity needs at least one batch");
    const std::size_t layers = batches.front().size();
    for (const auto& b : batches) {
        if (b.size() != layers) throw ShapeError("snapshots disagree on layer count");
    }
    if (mode == SensitivityMode::last_batch) batches = batches.last(1);

    std::vector<double> importance(layers, 0.0);
    for (const auto& batch : batches) {
        for (std::size_t k = 0; k < layers; ++k) {
            importance[k] += layer_importance(batch[k].params, batch[k].grads);
        }
    }
    for (double& v : importance) v /= static_cast<double>(batches.size());
    return profile_from_importance(std::move(importance), batches.size());
}

double gradient_variance(std::span<const double> grads) {
    if (grads.empty()) throw ShapeError("variance of an empty gradient");
    const auto n = static_cast<double>(grads.size());
    double mean = 0.0;
    for (double g : grads) mean += g;
    mean /= n;
    double sum = 0.0;
    for (double g : grads) sum += (g - mean) * (g - mean);
    return sum / n;
}

namespace {

void check_trace_args(std::span<const double> theta, double step) {
    if (theta.empty()) throw ShapeError("trace of an empty parameter group");
    if (!(step > 0.0) || !std::isfinite(step)) throw InvalidSpecError("finite-difference step must be > 0");
}

std::vector<double> checked_gradient(const GradientFn& gradient, std::span<const double> at, std::size_t n) {
    std::vector<double> g = gradient(at);
    if (g.size() != n) throw ShapeError("gradient function returned the wrong length");
    for (double x : g) {
        if (!std::isfinite(x)) throw NumericError("non-finite gradient in Hessian probe; try a smaller step");
    }
    return g;
}

}  // namespace

double default_trace_step(std::span<const double> theta) {
    double peak = 0.0;
    for (double x : theta) peak = std::max(peak, std::abs(x));
    return 1e-4 * (1.0 + peak);
}

double hutchinson_trace(const GradientFn& gradient, std::span<const double> theta, std::size_t probes,
                        double step, std::uint64_t seed) {
    check_trace_args(theta, step);
    if (probes < 1) throw InvalidSpecError("Hutchinson needs at least one probe");
    const std::size_t n = theta.size();
    std::vector<double> v(n);
    std::vector<double> plus(n);
    std::vector<double> minus(n);
    double total = 0.0;
    for (std::size_t i = 0; i < probes; ++i) {
        Rng rng(derive_seed(seed, i));
        for (std::size_t j = 0; j < n; ++j) {
            v[j] = rng.rademacher();
            plus[j] = theta[j] + step * v[j];
            minus[j] = theta[j] - step * v[j];
        }
        const auto g_plus = checked_gradient(gradient, plus, n);
        const auto g_minus = checked_gradient(gradient, minus, n);
        double quad = 0.0;
        for (std::size_t j = 0; j < n; ++j) quad += v[j] * (g_plus[j] - g_minus[j]);
        total += quad / (2.0 * step);
    }
    const double estimate = total / static_cast<double>(probes);
    if (!std::isfinite(estimate)) throw NumericError("non-finite Hutchinson estimate; try a smaller step");
    return estimate;
}

double exact_trace(const GradientFn& gradient, std::span<const double> theta, double step) {
    check_trace_args(theta, step);
    const std::size_t n = theta.size();
    if (n > kExactTraceMaxParams) {
        throw CapacityError("exact Hessian trace limited to " + std::to_string(kExactTraceMaxParams) +
                            " parameters, layer has " + std::to_string(n));
    }
    std::vector<double> point(theta.begin(), theta.end());
    double trace = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        point[j] = theta[j] + step;
        const double up = checked_gradient(gradient, point, n)[j];
        point[j] = theta[j] - step;
        const double down = checked_gradient(gradient, point, n)[j];
        point[j] = theta[j];
        trace += (up - down) / (2.0 * step);
    }
    return trace;
}

GradientFn layer_gradient_fn(const Network& net, const Matrix& batch, std::span<const int> labels,
                             LossKind kind, std::size_t layer) {
    if (layer >= net.layer_count()) throw IndexError("layer " + std::to_string(layer) + " out of range");
    std::vector<int> owned_labels(labels.begin(), labels.end());
    Network work = net;
    return [work = std::move(work), batch, owned_labels = std::move(owned_labels), kind,
            layer](std::span<const double> params) mutable {
        set_layer_params(work, layer, params);
        return backward(work, batch, owned_labels, kind).layers[layer].flat();
    };
}

double hessian_trace_hutchinson(const Network& net, const Matrix& batch, std::span<const int> labels,
                                LossKind kind, std::size_t layer, std::size_t probes,
                                std::optional<double> step, std::uint64_t seed) {
    const auto theta = get_layer_params(net, layer);
    return hutchinson_trace(layer_gradient_fn(net, batch, labels, kind, layer), theta, probes,
                            step.value_or(default_trace_step(theta)), seed);
}

double hessian_trace_exact(const Network& net, const Matrix& batch, std::span<const int> labels,
                           LossKind kind, std::size_t layer, std::optional<double> step) {
    const auto theta = get_layer_params(net, layer);
    if (theta.size() > kExactTraceMaxParams) {
        throw CapacityError("exact Hessian trace limited to " + std::to_string(kExactTraceMaxParams) +
                            " parameters, layer has " + std::to_string(theta.size()));
    }
    return exact_trace(layer_gradient_fn(net, batch, labels, kind, layer), theta,
                       step.value_or(default_trace_step(theta)));
}

namespace {

Matrix centered(const Matrix& m) {
    Matrix out = m;
    const auto n = static_cast<double>(m.rows());
    for (std::size_t c = 0; c < m.cols(); ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < m.rows(); ++r) mean += m(r, c);
        mean /= n;
        for (std::size_t r = 0; r < m.rows(); ++r) out(r, c) -= mean;
    }
    return out;
}

// ||A^T B||_F^2 for A [n x p], B [n x q].
double cross_frobenius_sq(const Matrix& a, const Matrix& b) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.cols(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double dot = 0.0;
            for (std::size_t r = 0; r < a.rows(); ++r) dot += a(r, i) * b(r, j);
            total += dot * dot;
        }
    }
    return total;
}

}  // namespace

double linear_cka(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) {
        throw ShapeError("CKA inputs have " + std::to_string(x.rows()) + " and " + std::to_string(y.rows()) +
                         " rows");
    }
    if (x.rows() < 2) throw ShapeError("CKA needs at least two samples");
    if (x.cols() == 0 || y.cols() == 0) throw ShapeError("CKA input without columns");
    const Matrix xc = centered(x);
    const Matrix yc = centered(y);
    const double xx = std::sqrt(cross_frobenius_sq(xc, xc));
    const double yy = std::sqrt(cross_frobenius_sq(yc, yc));
    if (xx == 0.0 || yy == 0.0) throw UndefinedSimilarityError("CKA undefined for zero-variance representations");
    return cross_frobenius_sq(yc, xc) / (xx * yy);
}

}  // namespace playerfl
