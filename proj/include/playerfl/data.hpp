#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "playerfl/nn.hpp"

namespace playerfl {

struct LabeledDataset {
    Matrix features;  // N x d
    std::vector<int> labels;
    std::size_t class_count = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return features.cols(); }
    bool empty() const noexcept { return labels.empty(); }

    /// Rows at `indices`, in that order.
    LabeledDataset subset(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> class_counts() const;
};

struct SyntheticSpec {
    std::size_t classes = 5;
    std::size_t dim = 20;
    std::size_t samples_per_class = 500;
    double class_separation = 3.0;
    double noise = 1.0;
};

/// Gaussian clusters: class means sit at `class_separation` along random unit
/// directions; samples are mean + noise * N(0, I). Rows are shuffled.
LabeledDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

using SplitFractions = std::array<double, 3>;  // train, val, test
inline constexpr SplitFractions kDefaultFractions{0.8, 0.1, 0.1};

struct ClientData {
    LabeledDataset train;
    LabeledDataset val;
    LabeledDataset test;
    std::vector<std::size_t> source_indices;  // rows of the source dataset held by this client

    std::size_t sample_count() const noexcept { return source_indices.size(); }
};

struct ClientPartition {
    std::vector<ClientData> clients;
    std::vector<double> weights;  // n_c / sum n, n_c = train size

    std::size_t client_count() const noexcept { return clients.size(); }
};

struct PartitionOptions {
    SplitFractions fractions = kDefaultFractions;
    // Clients below this many samples take samples one at a time from the
    // currently largest client.
    std::size_t min_client_samples = 1;
};

/// Per-class Dirichlet(alpha) label skew. For each class the shuffled class
/// rows are cut at floor(cumsum(p) * n_class) across clients.
std::vector<std::vector<std::size_t>> dirichlet_label_assignment(const LabeledDataset& data,
                                                                 std::size_t clients, double alpha,
                                                                 std::uint64_t seed,
                                                                 std::size_t min_client_samples = 1);

ClientPartition dirichlet_label_partition(const LabeledDataset& data, std::size_t clients,
                                          double alpha, std::uint64_t seed,
                                          const PartitionOptions& options = {});

/// Builds a partition from explicit per-client row sets (e.g. a natural
/// split). Each client's rows are split with `fractions`; val/test may come out
/// empty for tiny clients but train never does.
ClientPartition make_partition(const LabeledDataset& data,
                               std::vector<std::vector<std::size_t>> assignment,
                               const SplitFractions& fractions, std::uint64_t seed);

struct SplitSizes {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

SplitSizes split_sizes(std::size_t n, const SplitFractions& fractions);

struct TrainValTest {
    LabeledDataset train;
    LabeledDataset val;
    LabeledDataset test;
};

TrainValTest split_train_val_test(const LabeledDataset& data, const SplitFractions& fractions,
                                  std::uint64_t seed);

/// Shuffled consecutive batches; the last one may be short.
std::vector<LabeledDataset> minibatches(const LabeledDataset& data, std::size_t batch_size,
                                        std::uint64_t seed);

enum class Normalization { none, zscore };

struct ZScoreStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // 0 is stored as-is; apply_zscore divides by 1 instead
};

ZScoreStats compute_zscore_stats(const LabeledDataset& data);
void apply_zscore(LabeledDataset& data, const ZScoreStats& stats);

struct CsvOptions {
    std::vector<std::string> feature_columns;  // empty: every column except the label
    std::string label_column;
    Normalization normalization = Normalization::none;
    std::optional<ZScoreStats> stats;               // computed from the file when absent
    std::optional<std::vector<std::string>> label_names;  // fixed vocabulary; unknown labels throw
};

struct CsvDataset {
    LabeledDataset data;
    std::vector<std::string> label_names;
    std::size_t dropped_rows = 0;  // rows with a missing value
    std::optional<ZScoreStats> stats;
};

/// Reads a header-first, comma-separated file. Labels that are all
/// non-negative integers map to themselves; other labels map to their index in
/// the sorted set of distinct values.
CsvDataset load_csv(const std::filesystem::path& path, const CsvOptions& options);

}  // namespace playerfl
