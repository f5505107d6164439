#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "playerfl/data.hpp"
#include "playerfl/nn.hpp"

namespace playerfl {

enum class Direction { higher_better, lower_better };

/// Unweighted mean of per-class F1 over all `classes`. A class whose
/// precision or recall is undefined (zero denominator) scores 0.
double macro_f1(std::span<const int> predictions, std::span<const int> labels, std::size_t classes);

double accuracy(std::span<const int> predictions, std::span<const int> labels);

struct ModelMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;

    bool operator==(const ModelMetrics&) const = default;
};

ModelMetrics evaluate_model(const Network& net, const LabeledDataset& data, LossKind kind);

/// Population variance of per-client performance.
double fairness_variance(std::span<const double> per_client);

/// Percentage of clients whose score strictly beats both their local-only
/// score and their FedAvg score.
double incentivization_rate(std::span<const double> personalized, std::span<const double> local,
                            std::span<const double> global, Direction direction);

/// Mid-ranks with 1 = best; tied scores share the mean of their positions.
std::vector<double> mid_ranks(std::span<const double> scores, Direction direction);

struct FriedmanResult {
    double statistic = 0.0;
    double p_value = 1.0;
    std::vector<double> mean_ranks;
};

/// Friedman test over a [blocks x algorithms] score table, chi-square
/// approximation with k - 1 degrees of freedom.
FriedmanResult friedman_test(const std::vector<std::vector<double>>& scores, Direction direction);

/// Upper tail of the chi-square distribution.
double chi_square_sf(double x, double dof);

enum class Metric { macro_f1, accuracy, test_loss };

std::string to_string(Metric m);
Direction direction_of(Metric m);
double metric_value(const ModelMetrics& m, Metric metric);

struct RunResult {
    std::string algorithm;
    std::string dataset;
    std::uint64_t seed = 0;
    std::vector<ModelMetrics> clients;  // P_c
    std::vector<ModelMetrics> local_reference;   // S_c
    std::vector<ModelMetrics> fedavg_reference;  // G_c

    double mean(Metric metric) const;
    std::vector<double> per_client(Metric metric) const;
};

enum class RankBlocks {
    dataset,       // average each cell over seeds, rank per dataset
    dataset_seed,  // rank every (dataset, seed) pair separately
};

struct RankTable {
    std::vector<std::string> blocks;
    std::vector<std::string> algorithms;
    std::vector<std::vector<double>> scores;  // [block][algorithm]
    std::vector<std::vector<double>> ranks;   // [block][algorithm]
    std::vector<double> mean_ranks;
};

/// Builds the rank table over the given algorithm order. Every block must
/// hold a result for every algorithm.
RankTable mean_ranks(std::span<const RunResult> results, Metric metric,
                     const std::vector<std::string>& algorithms, RankBlocks blocks = RankBlocks::dataset);

}  // namespace playerfl
