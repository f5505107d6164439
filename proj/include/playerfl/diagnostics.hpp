#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "playerfl/nn.hpp"

namespace playerfl {

/// Mean squared first-order importance of a parameter group:
/// (1/n) * sum_p (theta_p * grad_p)^2.
double layer_importance(std::span<const double> params, std::span<const double> grads);

struct LayerSnapshot {
    std::vector<double> params;
    std::vector<double> grads;
};

/// Weights and the gradient evaluated at them, one entry per layer, for one batch.
using BatchSnapshot = std::vector<LayerSnapshot>;

BatchSnapshot snapshot(const Network& net, const GradientSet& grads);

struct SensitivityProfile {
    std::vector<double> cumulative;       // F[l] = sum_{k <= l} importance[k]
    std::vector<double> mean_importance;  // per layer, averaged over batches
    std::size_t batch_count = 0;

    std::size_t layer_count() const noexcept { return cumulative.size(); }
};

enum class SensitivityMode {
    epoch_mean,  // average the per-batch importances over every batch
    last_batch,  // use only the final batch
};

SensitivityProfile federation_sensitivity(std::span<const BatchSnapshot> batches,
                                          SensitivityMode mode = SensitivityMode::epoch_mean);

/// Builds a profile from already-averaged per-layer importances.
SensitivityProfile profile_from_importance(std::vector<double> mean_importance, std::size_t batch_count);

/// Population variance of the entries (divide by n).
double gradient_variance(std::span<const double> grads);

/// Gradient of a scalar loss with respect to a flat parameter vector.
using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

/// Hutchinson estimate of tr(H): mean over Rademacher probes v of v . (H v),
/// with H v from central differences of `gradient`. Probe i draws from
/// substream i of `seed`.
double hutchinson_trace(const GradientFn& gradient, std::span<const double> theta, std::size_t probes,
                        double step, std::uint64_t seed);

/// Sum of diagonal Hessian entries by per-coordinate central differences.
double exact_trace(const GradientFn& gradient, std::span<const double> theta, double step);

inline constexpr std::size_t kExactTraceMaxParams = 5000;
inline constexpr std::size_t kDefaultHutchinsonProbes = 32;

/// h = 1e-4 * (1 + max |theta|)
double default_trace_step(std::span<const double> theta);

/// Gradient of the batch loss with respect to layer `k` only, other layers held fixed.
GradientFn layer_gradient_fn(const Network& net, const Matrix& batch, std::span<const int> labels,
                             LossKind kind, std::size_t layer);

double hessian_trace_hutchinson(const Network& net, const Matrix& batch, std::span<const int> labels,
                                LossKind kind, std::size_t layer, std::size_t probes,
                                std::optional<double> step, std::uint64_t seed);

double hessian_trace_exact(const Network& net, const Matrix& batch, std::span<const int> labels,
                           LossKind kind, std::size_t layer, std::optional<double> step);

/// Linear CKA on column-centred inputs:
/// ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F).
double linear_cka(const Matrix& x, const Matrix& y);

}  // namespace playerfl
