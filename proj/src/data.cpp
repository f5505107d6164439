#include "playerfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "playerfl/errors.hpp"
#include "playerfl/random.hpp"

namespace playerfl {

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
    LabeledDataset out;
    out.class_count = class_count;
    out.features = Matrix(indices.size(), dim());
    out.labels.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t src = indices[r];
        if (src >= size()) throw IndexError("row " + std::to_string(src) + " out of range");
        const auto from = features.row(src);
        std::copy(from.begin(), from.end(), out.features.row(r).begin());
        out.labels.push_back(labels[src]);
    }
    return out;
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
    std::vector<std::size_t> counts(class_count, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
}

LabeledDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.classes < 2) throw InvalidSpecError("synthetic data needs at least 2 classes");
    if (spec.dim < 1) throw InvalidSpecError("synthetic data needs dim >= 1");
    if (spec.samples_per_class < 1) throw InvalidSpecError("samples_per_class must be >= 1");
    if (!(spec.noise > 0.0)) throw InvalidSpecError("noise must be > 0");
    if (!(spec.class_separation >= 0.0)) throw InvalidSpecError("class_separation must be >= 0");

    Rng rng(derive_seed(seed, 1));
    Matrix means(spec.classes, spec.dim);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        auto mu = means.row(c);
        double norm = 0.0;
        do {
            norm = 0.0;
            for (double& x : mu) {
                x = rng.normal();
                norm += x * x;
            }
            norm = std::sqrt(norm);
        } while (norm == 0.0);
        for (double& x : mu) x *= spec.class_separation / norm;
    }

    const std::size_t n = spec.classes * spec.samples_per_class;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span(order));

    LabeledDataset data;
    data.class_count = spec.classes;
    data.features = Matrix(n, spec.dim);
    data.labels.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i / spec.samples_per_class;
        const std::size_t row = order[i];
        data.labels[row] = static_cast<int>(c);
        auto x = data.features.row(row);
        const auto mu = means.row(c);
        for (std::size_t j = 0; j < spec.dim; ++j) x[j] = mu[j] + spec.noise * rng.normal();
    }
    return data;
}

std::vector<std::vector<std::size_t>> dirichlet_label_assignment(const LabeledDataset& data,
                                                                 std::size_t clients, double alpha,
                                                                 std::uint64_t seed,
                                                                 std::size_t min_client_samples) {
    if (clients < 2) throw InvalidSpecError("Dirichlet partition needs at least 2 clients");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InvalidSpecError("alpha must be finite and > 0");
    if (clients > data.size()) {
        throw InvalidSpecError(std::to_string(clients) + " clients for " + std::to_string(data.size()) +
                               " samples");
    }
    min_client_samples = std::max<std::size_t>(min_client_samples, 1);
    if (clients * min_client_samples > data.size()) {
        throw InvalidSpecError("not enough samples to give every client " +
                               std::to_string(min_client_samples));
    }

    std::vector<std::vector<std::size_t>> by_class(data.class_count);
    for (std::size_t i = 0; i < data.size(); ++i) {
        by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
    }

    Rng rng(derive_seed(seed, 2));
    std::vector<std::vector<std::size_t>> assignment(clients);
    std::vector<double> proportions(clients);
    for (auto& rows : by_class) {
        rng.shuffle(std::span(rows));
        double total = 0.0;
        for (double& p : proportions) {
            p = rng.gamma(alpha);
            total += p;
        }
        if (total > 0.0) {
            for (double& p : proportions) p /= total;
        } else {
            // Every draw underflowed: the alpha -> 0 limit puts the class on one client.
            std::fill(proportions.begin(), proportions.end(), 0.0);
            proportions[rng.below(clients)] = 1.0;
        }
        const auto n = static_cast<double>(rows.size());
        double cumulative = 0.0;
        std::size_t start = 0;
        for (std::size_t c = 0; c < clients; ++c) {
            cumulative += proportions[c];
            std::size_t end = c + 1 == clients ? rows.size()
                                               : std::min(rows.size(), static_cast<std::size_t>(cumulative * n));
            end = std::max(end, start);
            assignment[c].insert(assignment[c].end(), rows.begin() + static_cast<std::ptrdiff_t>(start),
                                 rows.begin() + static_cast<std::ptrdiff_t>(end));
            start = end;
        }
    }

    for (;;) {
        auto smallest = std::min_element(assignment.begin(), assignment.end(),
                                         [](const auto& a, const auto& b) { return a.size() < b.size(); });
        if (smallest->size() >= min_client_samples) break;
        auto largest = std::max_element(assignment.begin(), assignment.end(),
                                         [](const auto& a, const auto& b) { return a.size() < b.size(); });
        smallest->push_back(largest->back());
        largest->pop_back();
    }
    return assignment;
}

ClientPartition dirichlet_label_partition(const LabeledDataset& data, std::size_t clients,
                                          double alpha, std::uint64_t seed,
                                          const PartitionOptions& options) {
    auto assignment = dirichlet_label_assignment(data, clients, alpha, seed, options.min_client_samples);
    return make_partition(data, std::move(assignment), options.fractions, derive_seed(seed, 3));
}

namespace {

void check_fractions(const SplitFractions& f) {
    for (double x : f) {
        if (!(x > 0.0)) throw InvalidSpecError("split fractions must be positive");
    }
    if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw InvalidSpecError("split fractions must sum to 1");
}

}  // namespace

SplitSizes split_sizes(std::size_t n, const SplitFractions& fractions) {
    check_fractions(fractions);
    SplitSizes s;
    s.val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
    s.test = static_cast<std::size_t>(std::llround(fractions[2] * static_cast<double>(n)));
    // Train keeps at least one row whenever n > 0.
    while (n > 0 && s.val + s.test >= n) {
        if (s.test >= s.val && s.test > 0) {
            --s.test;
        } else {
            --s.val;
        }
    }
    s.train = n - s.val - s.test;
    return s;
}

ClientPartition make_partition(const LabeledDataset& data,
                               std::vector<std::vector<std::size_t>> assignment,
                               const SplitFractions& fractions, std::uint64_t seed) {
    ClientPartition partition;
    std::vector<bool> seen(data.size(), false);
    for (std::size_t c = 0; c < assignment.size(); ++c) {
        auto& rows = assignment[c];
        if (rows.empty()) throw InvalidSpecError("client " + std::to_string(c) + " holds no samples");
        for (std::size_t r : rows) {
            if (r >= data.size() || seen[r]) {
                throw InvalidSpecError("row " + std::to_string(r) + " assigned twice or out of range");
            }
            seen[r] = true;
        }
        std::vector<std::size_t> order = rows;
        Rng rng(derive_seed(seed, c));
        rng.shuffle(std::span(order));
        const SplitSizes sizes = split_sizes(order.size(), fractions);
        const std::span<const std::size_t> all(order);
        ClientData client;
        client.train = data.subset(all.subspan(0, sizes.train));
        client.val = data.subset(all.subspan(sizes.train, sizes.val));
        client.test = data.subset(all.subspan(sizes.train + sizes.val, sizes.test));
        client.source_indices = std::move(rows);
        partition.clients.push_back(std::move(client));
    }

    double total = 0.0;
    for (const auto& c : partition.clients) total += static_cast<double>(c.train.size());
    for (const auto& c : partition.clients) {
        partition.weights.push_back(static_cast<double>(c.train.size()) / total);
    }
    return partition;
}

TrainValTest split_train_val_test(const LabeledDataset& data, const SplitFractions& fractions,
                                  std::uint64_t seed) {
    const SplitSizes sizes = split_sizes(data.size(), fractions);
    if (sizes.train == 0 || sizes.val == 0 || sizes.test == 0) {
        throw InvalidSpecError("split of " + std::to_string(data.size()) + " rows leaves an empty part");
    }
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span(order));
    const std::span<const std::size_t> all(order);
    return {data.subset(all.subspan(0, sizes.train)), data.subset(all.subspan(sizes.train, sizes.val)),
            data.subset(all.subspan(sizes.train + sizes.val))};
}

std::vector<LabeledDataset> minibatches(const LabeledDataset& data, std::size_t batch_size,
                                        std::uint64_t seed) {
    if (batch_size < 1) throw InvalidSpecError("batch size must be >= 1");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span(order));
    std::vector<LabeledDataset> batches;
    const std::span<const std::size_t> all(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        batches.push_back(data.subset(all.subspan(start, std::min(batch_size, order.size() - start))));
    }
    return batches;
}

ZScoreStats compute_zscore_stats(const LabeledDataset& data) {
    const std::size_t d = data.dim();
    ZScoreStats stats{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    if (data.empty()) return stats;
    const auto n = static_cast<double>(data.size());
    for (std::size_t r = 0; r < data.size(); ++r) {
        const auto x = data.features.row(r);
        for (std::size_t j = 0; j < d; ++j) stats.mean[j] += x[j];
    }
    for (double& m : stats.mean) m /= n;
    for (std::size_t r = 0; r < data.size(); ++r) {
        const auto x = data.features.row(r);
        for (std::size_t j = 0; j < d; ++j) {
            const double dev = x[j] - stats.mean[j];
            stats.stddev[j] += dev * dev;
        }
    }
    for (double& s : stats.stddev) s = std::sqrt(s / n);
    return stats;
}

void apply_zscore(LabeledDataset& data, const ZScoreStats& stats) {
    const std::size_t d = data.dim();
    if (stats.mean.size() != d || stats.stddev.size() != d) throw ShapeError("z-score stats dimension mismatch");
    for (std::size_t r = 0; r < data.size(); ++r) {
        auto x = data.features.row(r);
        for (std::size_t j = 0; j < d; ++j) {
            const double scale = stats.stddev[j] > 0.0 ? stats.stddev[j] : 1.0;
            x[j] = (x[j] - stats.mean[j]) / scale;
        }
    }
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (line.empty()) fields.emplace_back();
    return fields;
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

bool parse_double(const std::string& text, double& out) {
    if (text.empty()) return false;
    std::size_t used = 0;
    try {
        out = std::stod(text, &used);
    } catch (const std::exception&) {
        return false;
    }
    return used == text.size() && std::isfinite(out);
}

bool is_index_label(const std::string& s) {
    return !s.empty() && s.size() < 10 && std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
}

}  // namespace

CsvDataset load_csv(const std::filesystem::path& path, const CsvOptions& options) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw ParseError(1, "missing header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    std::vector<std::string> header = split_fields(line);
    for (auto& h : header) h = trim(h);

    auto column_of = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ParseError(1, "no column named '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t label_col = column_of(options.label_column);
    std::vector<std::size_t> feature_cols;
    if (options.feature_columns.empty()) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i != label_col) feature_cols.push_back(i);
        }
    } else {
        for (const auto& name : options.feature_columns) feature_cols.push_back(column_of(name));
    }
    if (feature_cols.empty()) throw ParseError(1, "no feature columns");

    CsvDataset result;
    std::vector<double> values;
    std::vector<std::string> raw_labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != header.size()) {
            throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, got " +
                                          std::to_string(fields.size()));
        }
        const std::string label = trim(fields[label_col]);
        bool missing = label.empty();
        for (std::size_t c : feature_cols) missing = missing || trim(fields[c]).empty();
        if (missing) {
            ++result.dropped_rows;
            continue;
        }
        for (std::size_t c : feature_cols) {
            double x = 0.0;
            if (!parse_double(trim(fields[c]), x)) {
                throw ParseError(line_no, "column '" + header[c] + "' is not a number: '" + fields[c] + "'");
            }
            values.push_back(x);
        }
        raw_labels.push_back(label);
    }
    if (raw_labels.empty()) throw InvalidSpecError(path.string() + " holds no complete rows");

    std::vector<std::string> names;
    std::unordered_map<std::string, int> index;
    if (options.label_names) {
        names = *options.label_names;
        for (std::size_t i = 0; i < names.size(); ++i) index.emplace(names[i], static_cast<int>(i));
    } else if (std::all_of(raw_labels.begin(), raw_labels.end(), is_index_label)) {
        int top = 0;
        for (const auto& l : raw_labels) top = std::max(top, std::stoi(l));
        for (int i = 0; i <= top; ++i) {
            names.push_back(std::to_string(i));
            index.emplace(names.back(), i);
        }
        for (const auto& l : raw_labels) index.emplace(l, std::stoi(l));  // "01" style spellings
    } else {
        const std::set<std::string> distinct(raw_labels.begin(), raw_labels.end());
        names.assign(distinct.begin(), distinct.end());
        for (std::size_t i = 0; i < names.size(); ++i) index.emplace(names[i], static_cast<int>(i));
    }

    LabeledDataset& data = result.data;
    data.class_count = names.size();
    data.features = Matrix(raw_labels.size(), feature_cols.size(), std::move(values));
    data.labels.reserve(raw_labels.size());
    for (const auto& l : raw_labels) {
        const auto it = index.find(l);
        if (it == index.end()) throw InvalidLabelError("unknown label '" + l + "'");
        data.labels.push_back(it->second);
    }
    result.label_names = std::move(names);

    if (options.normalization == Normalization::zscore) {
        result.stats = options.stats ? *options.stats : compute_zscore_stats(data);
        apply_zscore(data, *result.stats);
    }
    return result;
}

}  // namespace playerfl
