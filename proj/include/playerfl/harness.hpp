#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "playerfl/data.hpp"
#include "playerfl/evaluation.hpp"
#include "playerfl/nn.hpp"
#include "playerfl/protocol.hpp"

namespace playerfl {

struct SyntheticSource {
    SyntheticSpec spec;
    std::uint64_t seed = 0;  // fixes the dataset; run seeds only change partition and init
};

struct CsvSource {
    std::filesystem::path path;
    CsvOptions options;
};

struct DatasetConfig {
    std::string name = "synthetic";
    std::variant<SyntheticSource, CsvSource> source = SyntheticSource{};
    std::size_t clients = 5;
    double alpha = 0.5;
    PartitionOptions partition{kDefaultFractions, 10};
};

struct ModelConfig {
    std::vector<std::size_t> hidden{64, 32, 16};
    std::vector<Activation> activations;  // one per hidden layer; the output layer is always identity
};

struct CurveConfig {
    std::size_t probes = kDefaultHutchinsonProbes;
    std::size_t samples = 256;  // rows per client used for gradient, trace and CKA curves
};

struct AlgorithmEntry {
    std::string label;  // unique within the experiment; defaults to the algorithm name
    AlgorithmConfig config;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::vector<DatasetConfig> datasets{DatasetConfig{}};
    ModelConfig model;
    AlgorithmConfig training;  // shared defaults; each entry starts from these
    std::vector<AlgorithmEntry> algorithms;
    std::vector<std::uint64_t> seeds{0};
    std::filesystem::path output_dir = "results";
    std::size_t threads = 1;
    CurveConfig curves;
};

/// Reads a YAML experiment description. Unknown keys and invalid values raise
/// ConfigError naming the key and its line; relative CSV paths resolve against
/// the file's directory.
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {});

/// Throws ConfigError (line 0) on an inconsistent config.
void validate(const ExperimentConfig& config);

enum class Selection { best_val, last_round };

struct ClientResult {
    std::size_t client = 0;
    std::size_t train_samples = 0;
    std::size_t best_round = 0;
    ModelMetrics best;  // test metrics of the lowest-validation-loss model
    ModelMetrics last;  // test metrics after the final round
};

struct AlgorithmRun {
    std::string algorithm;  // entry label
    std::string dataset;
    std::uint64_t seed = 0;
    std::vector<ClientResult> clients;
    std::optional<std::size_t> transition;
    std::vector<double> sensitivity;  // summed profile behind the split, when one was computed
    std::vector<RoundRecord> records;

    std::map<Metric, double> fairness;                        // best-val selection
    // Absent for the Local and FedAvg references themselves and whenever either
    // reference is not configured.
    std::map<Metric, std::optional<double>> incentivization;
};

struct SeedStats {
    double mean = 0.0;
    double median = 0.0;
    double min = 0.0;
    double max = 0.0;
};

SeedStats seed_stats(std::vector<double> values);

struct AggregateRow {
    std::string algorithm;
    std::string dataset;
    Metric metric = Metric::macro_f1;
    Selection selection = Selection::best_val;
    SeedStats stats;
};

struct LayerCurve {
    std::string dataset;
    std::uint64_t seed = 0;
    std::string stage;  // first_epoch, local_final, fedavg_final
    std::size_t layer = 0;  // 1-based
    std::size_t params = 0;
    double gradient_variance = 0.0;
    double gradient_variance_per_param = 0.0;
    double hessian_trace = 0.0;
    double hessian_trace_per_param = 0.0;
    double cka_mean = 0.0;  // NaN when every client pair had a constant representation
    double sensitivity = 0.0;
    double sensitivity_pct_of_first = 0.0;
};

struct ResultBundle {
    std::string name;
    std::vector<std::string> algorithms;
    std::vector<std::string> datasets;
    std::vector<std::uint64_t> seeds;

    std::vector<AlgorithmRun> runs;  // dataset-major, then seed, then algorithm order
    std::vector<AggregateRow> aggregates;
    std::map<Metric, RankTable> ranks;
    std::map<Metric, std::optional<FriedmanResult>> friedman;  // absent with fewer than 2 blocks or algorithms
    std::vector<LayerCurve> curves;

    std::vector<RunResult> run_results(Selection selection) const;
};

struct RunOptions {
    bool results = true;
    bool curves = false;  // trains Local and FedAvg itself when they are not configured
};

ResultBundle run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Writes results.csv, rounds.csv and summary.json into `dir`.
void emit_results(const ResultBundle& bundle, const std::filesystem::path& dir);

/// Writes layer_curves.csv into `dir`.
void emit_layer_curves(const ResultBundle& bundle, const std::filesystem::path& dir);

struct ResultRow {
    std::string algorithm;
    std::string dataset;
    std::uint64_t seed = 0;
    std::size_t client = 0;
    std::size_t train_samples = 0;
    std::size_t best_round = 0;
    ModelMetrics best;
    ModelMetrics last;

    bool operator==(const ResultRow&) const = default;
};

std::vector<ResultRow> result_rows(const ResultBundle& bundle);
std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);

/// Fixed 17-significant-digit rendering used by every emitted file.
std::string format_number(double value);

}  // namespace playerfl
