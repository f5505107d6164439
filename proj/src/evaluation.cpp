#include "playerfl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>

#include <boost/math/special_functions/gamma.hpp>

#include "playerfl/errors.hpp"

namespace playerfl {

namespace {

void check_pair(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) {
        throw ShapeError("predictions and labels differ in length");
    }
    if (labels.empty()) throw InvalidSpecError("metric over an empty set");
}

}  // namespace

double macro_f1(std::span<const int> predictions, std::span<const int> labels, std::size_t classes) {
    check_pair(predictions, labels);
    if (classes == 0) throw InvalidSpecError("macro-F1 needs at least one class");
    std::vector<double> true_pos(classes, 0.0);
    std::vector<double> predicted(classes, 0.0);
    std::vector<double> actual(classes, 0.0);
    const auto k = static_cast<int>(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int p = predictions[i];
        const int y = labels[i];
        if (p < 0 || p >= k || y < 0 || y >= k) throw InvalidLabelError("class index outside [0, classes)");
        predicted[p] += 1.0;
        actual[y] += 1.0;
        if (p == y) true_pos[y] += 1.0;
    }
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        const double precision = predicted[c] > 0.0 ? true_pos[c] / predicted[c] : 0.0;
        const double recall = actual[c] > 0.0 ? true_pos[c] / actual[c] : 0.0;
        if (precision + recall > 0.0) total += 2.0 * precision * recall / (precision + recall);
    }
    return total / static_cast<double>(classes);
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    check_pair(predictions, labels);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

ModelMetrics evaluate_model(const Network& net, const LabeledDataset& data, LossKind kind) {
    if (data.empty()) throw InvalidSpecError("evaluation on an empty dataset");
    const ForwardPass pass = forward(net, data.features);
    const Matrix& logits = pass.logits();
    std::vector<int> predictions(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        predictions[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return {loss(logits, data.labels, kind), accuracy(predictions, data.labels),
            macro_f1(predictions, data.labels, logits.cols())};
}

double fairness_variance(std::span<const double> per_client) {
    if (per_client.size() < 2) throw InvalidSpecError("fairness needs at least two clients");
    const auto n = static_cast<double>(per_client.size());
    const double mean = std::accumulate(per_client.begin(), per_client.end(), 0.0) / n;
    double sum = 0.0;
    for (double p : per_client) sum += (p - mean) * (p - mean);
    return sum / n;
}

double incentivization_rate(std::span<const double> personalized, std::span<const double> local,
                            std::span<const double> global, Direction direction) {
    if (personalized.size() != local.size() || personalized.size() != global.size()) {
        throw ShapeError("incentivization inputs differ in length");
    }
    if (personalized.empty()) throw InvalidSpecError("incentivization over zero clients");
    std::size_t winners = 0;
    for (std::size_t c = 0; c < personalized.size(); ++c) {
        const bool wins = direction == Direction::higher_better
                              ? personalized[c] > std::max(local[c], global[c])
                              : personalized[c] < std::min(local[c], global[c]);
        winners += wins ? 1 : 0;
    }
    return 100.0 * static_cast<double>(winners) / static_cast<double>(personalized.size());
}

std::vector<double> mid_ranks(std::span<const double> scores, Direction direction) {
    const std::size_t k = scores.size();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return direction == Direction::higher_better ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    std::vector<double> ranks(k);
    for (std::size_t i = 0; i < k;) {
        std::size_t j = i;
        while (j + 1 < k && scores[order[j + 1]] == scores[order[i]]) ++j;
        // positions i..j (0-based) share rank mean(i+1 .. j+1)
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = rank;
        i = j + 1;
    }
    return ranks;
}

double chi_square_sf(double x, double dof) {
    if (!(dof > 0.0)) throw InvalidSpecError("chi-square needs positive degrees of freedom");
    if (x <= 0.0) return 1.0;
    return boost::math::gamma_q(0.5 * dof, 0.5 * x);
}

FriedmanResult friedman_test(const std::vector<std::vector<double>>& scores, Direction direction) {
    const std::size_t n = scores.size();
    if (n < 2) throw InvalidSpecError("Friedman test needs at least two blocks");
    const std::size_t k = scores.front().size();
    if (k < 2) throw InvalidSpecError("Friedman test needs at least two algorithms");

    std::vector<double> rank_sums(k, 0.0);
    for (const auto& row : scores) {
        if (row.size() != k) throw ShapeError("ragged Friedman score table");
        const auto ranks = mid_ranks(row, direction);
        for (std::size_t j = 0; j < k; ++j) rank_sums[j] += ranks[j];
    }
    const auto nd = static_cast<double>(n);
    const auto kd = static_cast<double>(k);
    double sum_sq = 0.0;
    for (double r : rank_sums) sum_sq += r * r;
    // 12 / (N k (k+1)) * sum R_j^2 - 3 N (k+1), written around the null expectation.
    const double centre = nd * nd * kd * (kd + 1.0) * (kd + 1.0) / 4.0;
    const double statistic = std::max(0.0, 12.0 / (nd * kd * (kd + 1.0)) * (sum_sq - centre));

    FriedmanResult result;
    result.statistic = statistic;
    result.p_value = chi_square_sf(statistic, kd - 1.0);
    for (double r : rank_sums) result.mean_ranks.push_back(r / nd);
    return result;
}

std::string to_string(Metric m) {
    switch (m) {
        case Metric::macro_f1: return "macro_f1";
        case Metric::accuracy: return "accuracy";
        case Metric::test_loss: return "test_loss";
    }
    return "macro_f1";
}

Direction direction_of(Metric m) {
    return m == Metric::test_loss ? Direction::lower_better : Direction::higher_better;
}

double metric_value(const ModelMetrics& m, Metric metric) {
    switch (metric) {
        case Metric::macro_f1: return m.macro_f1;
        case Metric::accuracy: return m.accuracy;
        case Metric::test_loss: return m.loss;
    }
    return m.macro_f1;
}

double RunResult::mean(Metric metric) const {
    if (clients.empty()) throw IncompleteResultsError("run " + algorithm + " has no client metrics");
    double total = 0.0;
    for (const auto& c : clients) total += metric_value(c, metric);
    return total / static_cast<double>(clients.size());
}

std::vector<double> RunResult::per_client(Metric metric) const {
    std::vector<double> out;
    out.reserve(clients.size());
    for (const auto& c : clients) out.push_back(metric_value(c, metric));
    return out;
}

RankTable mean_ranks(std::span<const RunResult> results, Metric metric,
                     const std::vector<std::string>& algorithms, RankBlocks blocks) {
    if (algorithms.empty()) throw InvalidSpecError("rank table without algorithms");
    const std::size_t k = algorithms.size();
    std::map<std::string, std::size_t> column;
    for (std::size_t j = 0; j < k; ++j) column.emplace(algorithms[j], j);

    // block label -> per-algorithm (sum, count); std::map keeps block order deterministic.
    std::map<std::string, std::vector<std::pair<double, std::size_t>>> cells;
    for (const auto& r : results) {
        const auto col = column.find(r.algorithm);
        if (col == column.end()) continue;
        const std::string label =
            blocks == RankBlocks::dataset ? r.dataset : r.dataset + "/seed" + std::to_string(r.seed);
        auto& row = cells.try_emplace(label, k, std::pair<double, std::size_t>{0.0, 0}).first->second;
        row[col->second].first += r.mean(metric);
        row[col->second].second += 1;
    }
    if (cells.empty()) throw IncompleteResultsError("no results for the requested algorithms");

    RankTable table;
    table.algorithms = algorithms;
    table.mean_ranks.assign(k, 0.0);
    const Direction direction = direction_of(metric);
    for (const auto& [label, row] : cells) {
        std::vector<double> scores(k);
        for (std::size_t j = 0; j < k; ++j) {
            if (row[j].second == 0) {
                throw IncompleteResultsError("missing result for algorithm '" + algorithms[j] + "' in block '" +
                                             label + "'");
            }
            scores[j] = row[j].first / static_cast<double>(row[j].second);
        }
        auto ranks = mid_ranks(scores, direction);
        for (std::size_t j = 0; j < k; ++j) table.mean_ranks[j] += ranks[j];
        table.blocks.push_back(label);
        table.scores.push_back(std::move(scores));
        table.ranks.push_back(std::move(ranks));
    }
    for (double& r : table.mean_ranks) r /= static_cast<double>(table.blocks.size());
    return table;
}

}  // namespace playerfl
