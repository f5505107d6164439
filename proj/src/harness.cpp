#include "playerfl/harness.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <set>
#include <sstream>
#include <string_view>

#include <yaml-cpp/yaml.h>

#include "json.hpp"
#include "playerfl/diagnostics.hpp"
#include "playerfl/errors.hpp"
#include "playerfl/random.hpp"

namespace playerfl {

namespace {

// ---------------------------------------------------------------- config ---

std::size_t line_of(const YAML::Node& node) {
    const YAML::Mark mark = node.Mark();
    return mark.line >= 0 ? static_cast<std::size_t>(mark.line) + 1 : 0;
}

// A YAML mapping at a dotted key path. Lookups never insert.
struct Section {
    YAML::Node node;
    std::string path;

    std::string key(std::string_view k) const { return path.empty() ? std::string(k) : path + "." + std::string(k); }

    void allow(std::initializer_list<std::string_view> keys) const {
        if (!node.IsMap()) throw ConfigError(path, line_of(node), "expected a mapping");
        for (const auto& kv : node) {
            const std::string k = kv.first.Scalar();
            if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
                throw ConfigError(key(k), line_of(kv.first), "unknown key");
            }
        }
    }

    YAML::Node get(std::string_view k) const { return node[std::string(k)]; }
    bool has(std::string_view k) const { return static_cast<bool>(get(k)); }
    Section child(std::string_view k) const { return {get(k), key(k)}; }
};

const std::string& scalar_text(const YAML::Node& node, const std::string& key) {
    if (!node.IsScalar()) throw ConfigError(key, line_of(node), "expected a single value");
    return node.Scalar();
}

double to_double(const YAML::Node& node, const std::string& key) {
    const std::string& text = scalar_text(node, key);
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) {
        throw ConfigError(key, line_of(node), "expected a finite number, got '" + text + "'");
    }
    return v;
}

std::uint64_t to_u64(const YAML::Node& node, const std::string& key) {
    const std::string& text = scalar_text(node, key);
    const bool digits = !text.empty() && std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (!digits) throw ConfigError(key, line_of(node), "expected a non-negative integer, got '" + text + "'");
    errno = 0;
    const unsigned long long v = std::strtoull(text.c_str(), nullptr, 10);
    if (errno == ERANGE) throw ConfigError(key, line_of(node), "integer out of range");
    return v;
}

std::size_t to_size(const YAML::Node& node, const std::string& key, std::size_t min = 0) {
    const std::uint64_t v = to_u64(node, key);
    if (v < min) throw ConfigError(key, line_of(node), "must be >= " + std::to_string(min));
    return static_cast<std::size_t>(v);
}

std::vector<YAML::Node> to_list(const YAML::Node& node, const std::string& key) {
    if (!node.IsSequence()) throw ConfigError(key, line_of(node), "expected a list");
    return {node.begin(), node.end()};
}

std::string item_key(const std::string& key, std::size_t i) { return key + "[" + std::to_string(i) + "]"; }

// Names end up in CSV cells and file-system-safe labels, so keep them plain.
std::string to_name(const YAML::Node& node, const std::string& key) {
    std::string text = scalar_text(node, key);
    const bool ok = !text.empty() && std::all_of(text.begin(), text.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
    if (!ok) throw ConfigError(key, line_of(node), "names may use letters, digits, '_', '-' and '.' only");
    return text;
}

template <typename Fn>
auto convert(const YAML::Node& node, const std::string& key, Fn&& fn) {
    try {
        return fn(scalar_text(node, key));
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(key, line_of(node), e.what());
    }
}

SensitivityMode parse_mode(const std::string& text) {
    if (text == "epoch_mean") return SensitivityMode::epoch_mean;
    if (text == "last_batch") return SensitivityMode::last_batch;
    throw InvalidSpecError("expected epoch_mean or last_batch, got '" + text + "'");
}

SensitivityAggregation parse_weighting(const std::string& text) {
    if (text == "unweighted") return SensitivityAggregation::unweighted;
    if (text == "sample_weighted") return SensitivityAggregation::sample_weighted;
    throw InvalidSpecError("expected unweighted or sample_weighted, got '" + text + "'");
}

double positive_alpha(const YAML::Node& node, const std::string& key) {
    const double alpha = to_double(node, key);
    if (!(alpha > 0.0)) throw ConfigError(key, line_of(node), "alpha must be > 0");
    return alpha;
}

SplitFractions to_fractions(const YAML::Node& node, const std::string& key) {
    const auto items = to_list(node, key);
    if (items.size() != 3) throw ConfigError(key, line_of(node), "expected [train, val, test]");
    SplitFractions f{};
    for (std::size_t i = 0; i < 3; ++i) f[i] = to_double(items[i], item_key(key, i));
    return f;
}

void read_partition(const Section& s, DatasetConfig& d) {
    if (s.has("clients")) d.clients = to_size(s.get("clients"), s.key("clients"), 1);
    if (s.has("alpha")) d.alpha = positive_alpha(s.get("alpha"), s.key("alpha"));
    if (s.has("fractions")) d.partition.fractions = to_fractions(s.get("fractions"), s.key("fractions"));
    if (s.has("min_client_samples")) {
        d.partition.min_client_samples = to_size(s.get("min_client_samples"), s.key("min_client_samples"), 1);
    }
}

DatasetConfig read_dataset(const Section& s, const DatasetConfig& defaults, const std::filesystem::path& base_dir) {
    s.allow({"name", "synthetic", "csv", "clients", "alpha", "fractions", "min_client_samples"});
    DatasetConfig d = defaults;
    if (s.has("name")) d.name = to_name(s.get("name"), s.key("name"));
    read_partition(s, d);
    if (s.has("synthetic") && s.has("csv")) {
        throw ConfigError(s.key("csv"), line_of(s.get("csv")), "a dataset is either synthetic or csv, not both");
    }
    if (s.has("csv")) {
        const Section c = s.child("csv");
        c.allow({"path", "label", "features", "normalization", "labels"});
        if (!c.has("path")) throw ConfigError(c.key("path"), line_of(c.node), "required");
        if (!c.has("label")) throw ConfigError(c.key("label"), line_of(c.node), "required");
        CsvSource src;
        src.path = scalar_text(c.get("path"), c.key("path"));
        if (src.path.is_relative() && !base_dir.empty()) src.path = base_dir / src.path;
        src.options.label_column = scalar_text(c.get("label"), c.key("label"));
        if (c.has("features")) {
            const auto items = to_list(c.get("features"), c.key("features"));
            for (std::size_t i = 0; i < items.size(); ++i) {
                src.options.feature_columns.push_back(scalar_text(items[i], item_key(c.key("features"), i)));
            }
        }
        if (c.has("normalization")) {
            src.options.normalization = convert(c.get("normalization"), c.key("normalization"), [](const std::string& t) {
                if (t == "none") return Normalization::none;
                if (t == "zscore") return Normalization::zscore;
                throw InvalidSpecError("expected none or zscore, got '" + t + "'");
            });
        }
        if (c.has("labels")) {
            std::vector<std::string> names;
            const auto items = to_list(c.get("labels"), c.key("labels"));
            for (std::size_t i = 0; i < items.size(); ++i) {
                names.push_back(scalar_text(items[i], item_key(c.key("labels"), i)));
            }
            src.options.label_names = std::move(names);
        }
        d.source = std::move(src);
    } else {
        SyntheticSource src;
        if (s.has("synthetic")) {
            const Section y = s.child("synthetic");
            y.allow({"classes", "dim", "samples_per_class", "separation", "noise", "seed"});
            if (y.has("classes")) src.spec.classes = to_size(y.get("classes"), y.key("classes"), 2);
            if (y.has("dim")) src.spec.dim = to_size(y.get("dim"), y.key("dim"), 1);
            if (y.has("samples_per_class")) {
                src.spec.samples_per_class = to_size(y.get("samples_per_class"), y.key("samples_per_class"), 1);
            }
            if (y.has("separation")) src.spec.class_separation = to_double(y.get("separation"), y.key("separation"));
            if (y.has("noise")) src.spec.noise = to_double(y.get("noise"), y.key("noise"));
            if (y.has("seed")) src.seed = to_u64(y.get("seed"), y.key("seed"));
        }
        d.source = src;
    }
    return d;
}

void read_training(const Section& s, AlgorithmConfig& t) {
    s.allow({"rounds", "local_epochs", "learning_rate", "batch_size", "loss", "focal_gamma", "weight_decay",
             "beta1", "beta2", "epsilon", "threshold", "fedprox_mu", "finetune_epochs", "sensitivity_mode",
             "sensitivity_weighting"});
    if (s.has("rounds")) t.rounds = to_size(s.get("rounds"), s.key("rounds"), 1);
    if (s.has("local_epochs")) t.local_epochs = to_size(s.get("local_epochs"), s.key("local_epochs"), 1);
    if (s.has("learning_rate")) t.learning_rate = to_double(s.get("learning_rate"), s.key("learning_rate"));
    if (s.has("batch_size")) t.batch_size = to_size(s.get("batch_size"), s.key("batch_size"), 1);
    double gamma = 2.0;
    if (s.has("focal_gamma")) gamma = to_double(s.get("focal_gamma"), s.key("focal_gamma"));
    if (s.has("loss")) {
        t.loss = convert(s.get("loss"), s.key("loss"), [&](const std::string& text) {
            if (text == "cross_entropy") return LossKind::cross_entropy();
            if (text == "focal") return LossKind::focal(gamma);
            throw InvalidSpecError("expected cross_entropy or focal, got '" + text + "'");
        });
    } else if (s.has("focal_gamma")) {
        throw ConfigError(s.key("focal_gamma"), line_of(s.get("focal_gamma")), "only meaningful with loss: focal");
    }
    if (s.has("weight_decay")) t.adamw.weight_decay = to_double(s.get("weight_decay"), s.key("weight_decay"));
    if (s.has("beta1")) t.adamw.beta1 = to_double(s.get("beta1"), s.key("beta1"));
    if (s.has("beta2")) t.adamw.beta2 = to_double(s.get("beta2"), s.key("beta2"));
    if (s.has("epsilon")) t.adamw.epsilon = to_double(s.get("epsilon"), s.key("epsilon"));
    if (s.has("threshold")) t.threshold = to_double(s.get("threshold"), s.key("threshold"));
    if (s.has("fedprox_mu")) t.fedprox_mu = to_double(s.get("fedprox_mu"), s.key("fedprox_mu"));
    if (s.has("finetune_epochs")) {
        t.local_adaptation_epochs = t.fedbabu_finetune_epochs = to_size(s.get("finetune_epochs"), s.key("finetune_epochs"));
    }
    if (s.has("sensitivity_mode")) {
        t.sensitivity_mode = convert(s.get("sensitivity_mode"), s.key("sensitivity_mode"), parse_mode);
    }
    if (s.has("sensitivity_weighting")) {
        t.sensitivity_aggregation = convert(s.get("sensitivity_weighting"), s.key("sensitivity_weighting"), parse_weighting);
    }
}

AlgorithmEntry read_algorithm(const YAML::Node& node, const std::string& key, const AlgorithmConfig& training) {
    AlgorithmEntry e;
    e.config = training;
    if (node.IsScalar()) {
        e.config.kind = convert(node, key, parse_algorithm);
        e.label = node.Scalar();
        return e;
    }
    const Section s{node, key};
    s.allow({"name", "label", "rounds", "local_epochs", "learning_rate", "batch_size", "mu", "threshold",
             "finetune_epochs", "split_seed", "sensitivity_mode", "sensitivity_weighting", "transition"});
    if (!s.has("name")) throw ConfigError(s.key("name"), line_of(node), "required");
    e.config.kind = convert(s.get("name"), s.key("name"), parse_algorithm);
    e.label = s.has("label") ? to_name(s.get("label"), s.key("label")) : s.get("name").Scalar();
    AlgorithmConfig& c = e.config;
    if (s.has("rounds")) c.rounds = to_size(s.get("rounds"), s.key("rounds"), 1);
    if (s.has("local_epochs")) c.local_epochs = to_size(s.get("local_epochs"), s.key("local_epochs"), 1);
    if (s.has("learning_rate")) c.learning_rate = to_double(s.get("learning_rate"), s.key("learning_rate"));
    if (s.has("batch_size")) c.batch_size = to_size(s.get("batch_size"), s.key("batch_size"), 1);
    if (s.has("mu")) c.fedprox_mu = to_double(s.get("mu"), s.key("mu"));
    if (s.has("threshold")) c.threshold = to_double(s.get("threshold"), s.key("threshold"));
    if (s.has("finetune_epochs")) {
        c.local_adaptation_epochs = c.fedbabu_finetune_epochs = to_size(s.get("finetune_epochs"), s.key("finetune_epochs"));
    }
    if (s.has("split_seed")) c.random_split_seed = to_u64(s.get("split_seed"), s.key("split_seed"));
    if (s.has("sensitivity_mode")) c.sensitivity_mode = convert(s.get("sensitivity_mode"), s.key("sensitivity_mode"), parse_mode);
    if (s.has("sensitivity_weighting")) {
        c.sensitivity_aggregation = convert(s.get("sensitivity_weighting"), s.key("sensitivity_weighting"), parse_weighting);
    }
    if (s.has("transition")) {
        if (c.kind != AlgorithmKind::player_fl) {
            throw ConfigError(s.key("transition"), line_of(s.get("transition")), "only player_fl takes a forced transition");
        }
        c.forced_transition = to_size(s.get("transition"), s.key("transition"));
    }
    return e;
}

ExperimentConfig read_config(const YAML::Node& root, const std::filesystem::path& base_dir) {
    ExperimentConfig cfg;
    const Section top{!root || root.IsNull() ? YAML::Node(YAML::NodeType::Map) : root, ""};
    top.allow({"name", "seeds", "output", "threads", "clients", "alpha", "fractions", "min_client_samples",
               "datasets", "model", "training", "algorithms", "curves"});
    if (top.has("name")) cfg.name = to_name(top.get("name"), "name");
    if (top.has("seeds")) {
        cfg.seeds.clear();
        const auto items = to_list(top.get("seeds"), "seeds");
        if (items.empty()) throw ConfigError("seeds", line_of(top.get("seeds")), "at least one seed is required");
        for (std::size_t i = 0; i < items.size(); ++i) cfg.seeds.push_back(to_u64(items[i], item_key("seeds", i)));
    }
    if (top.has("output")) cfg.output_dir = scalar_text(top.get("output"), "output");
    if (top.has("threads")) cfg.threads = to_size(top.get("threads"), "threads", 1);

    DatasetConfig defaults;
    read_partition(top, defaults);
    if (top.has("datasets")) {
        cfg.datasets.clear();
        const auto items = to_list(top.get("datasets"), "datasets");
        if (items.empty()) throw ConfigError("datasets", line_of(top.get("datasets")), "at least one dataset is required");
        for (std::size_t i = 0; i < items.size(); ++i) {
            cfg.datasets.push_back(read_dataset({items[i], item_key("datasets", i)}, defaults, base_dir));
        }
    } else {
        cfg.datasets = {defaults};
    }

    if (top.has("model")) {
        const Section m = top.child("model");
        m.allow({"hidden", "activation", "activations"});
        if (m.has("hidden")) {
            cfg.model.hidden.clear();
            const auto items = to_list(m.get("hidden"), m.key("hidden"));
            for (std::size_t i = 0; i < items.size(); ++i) {
                cfg.model.hidden.push_back(to_size(items[i], item_key(m.key("hidden"), i), 1));
            }
        }
        if (m.has("activation") && m.has("activations")) {
            throw ConfigError(m.key("activations"), line_of(m.get("activations")), "give activation or activations, not both");
        }
        if (m.has("activation")) {
            const Activation a = convert(m.get("activation"), m.key("activation"), parse_activation);
            cfg.model.activations.assign(cfg.model.hidden.size(), a);
        }
        if (m.has("activations")) {
            const auto items = to_list(m.get("activations"), m.key("activations"));
            for (std::size_t i = 0; i < items.size(); ++i) {
                cfg.model.activations.push_back(convert(items[i], item_key(m.key("activations"), i), parse_activation));
            }
            if (cfg.model.activations.size() != cfg.model.hidden.size()) {
                throw ConfigError(m.key("activations"), line_of(m.get("activations")), "one activation per hidden layer");
            }
        }
    }

    if (top.has("training")) read_training(top.child("training"), cfg.training);

    if (top.has("algorithms")) {
        const auto items = to_list(top.get("algorithms"), "algorithms");
        for (std::size_t i = 0; i < items.size(); ++i) {
            cfg.algorithms.push_back(read_algorithm(items[i], item_key("algorithms", i), cfg.training));
        }
    } else {
        for (AlgorithmKind kind : all_algorithms()) {
            AlgorithmEntry e{to_string(kind), cfg.training};
            e.config.kind = kind;
            cfg.algorithms.push_back(std::move(e));
        }
    }

    if (top.has("curves")) {
        const Section c = top.child("curves");
        c.allow({"probes", "samples"});
        if (c.has("probes")) cfg.curves.probes = to_size(c.get("probes"), c.key("probes"), 1);
        if (c.has("samples")) cfg.curves.samples = to_size(c.get("samples"), c.key("samples"), 2);
    }
    return cfg;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        const std::size_t line = e.mark.line >= 0 ? static_cast<std::size_t>(e.mark.line) + 1 : 0;
        throw ConfigError("", line, e.msg);
    }
    ExperimentConfig cfg = read_config(root, base_dir);
    validate(cfg);
    return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("", 0, "cannot open config file '" + path.string() + "'");
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config_text(text.str(), path.parent_path());
}

void validate(const ExperimentConfig& config) {
    if (config.seeds.empty()) throw ConfigError("seeds", 0, "at least one seed is required");
    if (config.datasets.empty()) throw ConfigError("datasets", 0, "at least one dataset is required");
    if (config.algorithms.empty()) throw ConfigError("algorithms", 0, "at least one algorithm is required");
    if (config.threads < 1) throw ConfigError("threads", 0, "must be >= 1");
    if (config.curves.probes < 1) throw ConfigError("curves.probes", 0, "must be >= 1");
    if (config.curves.samples < 2) throw ConfigError("curves.samples", 0, "must be >= 2");

    std::set<std::string> names;
    for (const auto& d : config.datasets) {
        if (!names.insert(d.name).second) throw ConfigError("datasets", 0, "duplicate dataset name '" + d.name + "'");
        if (!(d.alpha > 0.0)) throw ConfigError("alpha", 0, "alpha must be > 0");
        if (d.clients < 1) throw ConfigError("clients", 0, "must be >= 1");
        const auto& f = d.partition.fractions;
        for (double x : f) {
            if (!(x >= 0.0)) throw ConfigError("fractions", 0, "fractions must be >= 0");
        }
        if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw ConfigError("fractions", 0, "fractions must sum to 1");
        if (!(f[0] > 0.0 && f[1] > 0.0 && f[2] > 0.0)) {
            throw ConfigError("fractions", 0, "train, validation and test all need a positive share");
        }
    }

    const auto& m = config.model;
    if (!m.activations.empty() && m.activations.size() != m.hidden.size()) {
        throw ConfigError("model.activations", 0, "one activation per hidden layer");
    }
    for (std::size_t h : m.hidden) {
        if (h < 1) throw ConfigError("model.hidden", 0, "layer widths must be >= 1");
    }
    const std::size_t depth = m.hidden.size() + 1;

    std::set<std::string> labels;
    for (const auto& e : config.algorithms) {
        if (!labels.insert(e.label).second) {
            throw ConfigError("algorithms", 0, "duplicate algorithm label '" + e.label + "'; give entries distinct labels");
        }
        try {
            validate(e.config);
        } catch (const InvalidSpecError& err) {
            throw ConfigError("algorithms." + e.label, 0, err.what());
        }
        const auto kind = e.config.kind;
        if ((kind == AlgorithmKind::fedbabu || kind == AlgorithmKind::player_fl_random) && depth < 2) {
            throw ConfigError("algorithms." + e.label, 0, "needs at least one hidden layer");
        }
        if (e.config.forced_transition && *e.config.forced_transition > depth) {
            throw ConfigError("algorithms." + e.label + ".transition", 0, "beyond the last layer");
        }
    }
}

// ------------------------------------------------------------ experiment ---

SeedStats seed_stats(std::vector<double> values) {
    if (values.empty()) throw IncompleteResultsError("no values to summarise");
    std::sort(values.begin(), values.end());
    SeedStats s;
    double total = 0.0;
    for (double v : values) total += v;
    s.mean = total / static_cast<double>(values.size());
    const std::size_t n = values.size();
    s.median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
    s.min = values.front();
    s.max = values.back();
    return s;
}

std::vector<RunResult> ResultBundle::run_results(Selection selection) const {
    std::vector<RunResult> out;
    out.reserve(runs.size());
    for (const auto& run : runs) {
        RunResult r;
        r.algorithm = run.algorithm;
        r.dataset = run.dataset;
        r.seed = run.seed;
        for (const auto& c : run.clients) r.clients.push_back(selection == Selection::best_val ? c.best : c.last);
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

constexpr std::array<Metric, 3> kMetrics{Metric::macro_f1, Metric::accuracy, Metric::test_loss};

LabeledDataset load_dataset(const DatasetConfig& d) {
    if (const auto* syn = std::get_if<SyntheticSource>(&d.source)) return generate_synthetic(syn->spec, syn->seed);
    const auto& csv = std::get<CsvSource>(d.source);
    return load_csv(csv.path, csv.options).data;
}

struct SeedContext {
    ClientPartition partition;
    Network init;
    std::uint64_t run_seed = 0;
    std::uint64_t curve_seed = 0;
};

SeedContext prepare(const ExperimentConfig& config, const DatasetConfig& d, std::size_t dataset_index,
                    const LabeledDataset& data, std::uint64_t seed) {
    SeedContext ctx;
    const std::uint64_t partition_seed = derive_seed(seed, 1, dataset_index);
    if (d.clients == 1) {
        std::vector<std::size_t> all(data.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        ctx.partition = make_partition(data, {all}, d.partition.fractions, partition_seed);
    } else {
        ctx.partition = dirichlet_label_partition(data, d.clients, d.alpha, partition_seed, d.partition);
    }
    std::vector<std::size_t> sizes{data.dim()};
    sizes.insert(sizes.end(), config.model.hidden.begin(), config.model.hidden.end());
    sizes.push_back(data.class_count);
    std::vector<Activation> acts = config.model.activations;
    if (acts.empty()) acts.assign(config.model.hidden.size(), Activation::relu);
    acts.push_back(Activation::identity);
    ctx.init = init_network(sizes, acts, derive_seed(seed, 2, dataset_index));
    ctx.run_seed = derive_seed(seed, 3, dataset_index);
    ctx.curve_seed = derive_seed(seed, 4, dataset_index);
    return ctx;
}

std::vector<ClientState> make_clients(const SeedContext& ctx, const AlgorithmConfig& cfg) {
    std::vector<ClientState> clients;
    for (std::size_t c = 0; c < ctx.partition.client_count(); ++c) {
        clients.push_back(make_client(c, ctx.partition.clients[c], ctx.init, cfg.adamw, ctx.run_seed));
    }
    return clients;
}

RunOutput run_entry(const AlgorithmEntry& entry, const SeedContext& ctx, std::size_t threads,
                    const std::string& dataset, std::uint64_t seed) {
    AlgorithmConfig cfg = entry.config;
    cfg.threads = threads;
    try {
        return run_algorithm(cfg, make_clients(ctx, cfg), ctx.run_seed);
    } catch (const RunFailure& f) {
        throw RunFailure(entry.label, dataset, seed, f.round(), f.cause());
    } catch (const Error& e) {
        throw RunFailure(entry.label, dataset, seed, 0, e.what());
    }
}

AlgorithmRun score(const AlgorithmEntry& entry, const RunOutput& out, const SeedContext& ctx,
                   const std::string& dataset, std::uint64_t seed) {
    AlgorithmRun run;
    run.algorithm = entry.label;
    run.dataset = dataset;
    run.seed = seed;
    try {
        for (std::size_t c = 0; c < ctx.partition.client_count(); ++c) {
            const ClientData& data = ctx.partition.clients[c];
            ClientResult r;
            r.client = c;
            r.train_samples = data.train.size();
            r.best_round = out.best_round[c];
            r.best = evaluate_model(out.best_nets[c], data.test, entry.config.loss);
            r.last = evaluate_model(out.final_nets[c], data.test, entry.config.loss);
            run.clients.push_back(r);
        }
    } catch (const Error& e) {
        throw RunFailure(entry.label, dataset, seed, entry.config.rounds, std::string("scoring: ") + e.what());
    }
    if (out.plan) {
        run.transition = out.plan->transition;
        run.sensitivity = out.plan->aggregated_sensitivity;
    }
    run.records = out.records;
    return run;
}

std::vector<double> per_client(const AlgorithmRun& run, Metric metric) {
    std::vector<double> out;
    for (const auto& c : run.clients) out.push_back(metric_value(c.best, metric));
    return out;
}

// ---------------------------------------------------------------- curves ---

LabeledDataset head_rows(const LabeledDataset& data, std::size_t limit) {
    std::vector<std::size_t> idx(std::min(limit, data.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return data.subset(idx);
}

LabeledDataset pooled_probe(const ClientPartition& partition, std::size_t limit) {
    LabeledDataset pooled;
    std::vector<double> values;
    std::size_t dim = 0;
    for (const auto& c : partition.clients) {
        dim = c.test.dim();
        for (std::size_t r = 0; r < c.test.size() && pooled.labels.size() < limit; ++r) {
            const auto row = c.test.features.row(r);
            values.insert(values.end(), row.begin(), row.end());
            pooled.labels.push_back(c.test.labels[r]);
        }
    }
    pooled.features = Matrix(pooled.labels.size(), dim, std::move(values));
    return pooled;
}

struct StageInput {
    std::string name;
    std::vector<Network> nets;                             // one per client
    std::optional<std::vector<SensitivityProfile>> profiles;  // recorded during training, if any
};

std::vector<LayerCurve> stage_curves(const StageInput& stage, std::size_t stage_index, const SeedContext& ctx,
                                     const ExperimentConfig& config, LossKind loss, const std::string& dataset,
                                     std::uint64_t seed) {
    const std::size_t depth = ctx.init.layer_count();
    const std::size_t clients = stage.nets.size();
    const auto counts = ctx.init.layer_param_counts();
    std::vector<LayerCurve> rows(depth);
    std::vector<double> importance(depth, 0.0);

    for (std::size_t c = 0; c < clients; ++c) {
        const Network& net = stage.nets[c];
        const LabeledDataset sample = head_rows(ctx.partition.clients[c].train, config.curves.samples);
        const auto step = loss_and_gradient(net, sample.features, sample.labels, loss);
        for (std::size_t k = 0; k < depth; ++k) {
            const auto g = step.gradients.layers[k].flat();
            rows[k].gradient_variance += gradient_variance(g) / static_cast<double>(clients);
            const double trace = hessian_trace_hutchinson(net, sample.features, sample.labels, loss, k,
                                                          config.curves.probes, std::nullopt,
                                                          derive_seed(ctx.curve_seed, stage_index, c, k));
            rows[k].hessian_trace += trace / static_cast<double>(clients);
            if (!stage.profiles) importance[k] += layer_importance(get_layer_params(net, k), g) / static_cast<double>(clients);
        }
    }

    std::vector<double> sensitivity(depth, 0.0);
    if (stage.profiles) {
        for (const auto& p : *stage.profiles) {
            for (std::size_t k = 0; k < depth; ++k) sensitivity[k] += p.cumulative[k] / static_cast<double>(clients);
        }
    } else {
        sensitivity = profile_from_importance(importance, 1).cumulative;
    }

    const LabeledDataset probe = pooled_probe(ctx.partition, config.curves.samples);
    std::vector<ForwardPass> passes;
    if (probe.size() >= 2) {
        for (const auto& net : stage.nets) passes.push_back(forward(net, probe.features));
    }

    for (std::size_t k = 0; k < depth; ++k) {
        LayerCurve& row = rows[k];
        row.dataset = dataset;
        row.seed = seed;
        row.stage = stage.name;
        row.layer = k + 1;
        row.params = counts[k];
        const auto n = static_cast<double>(counts[k]);
        row.gradient_variance_per_param = row.gradient_variance / n;
        row.hessian_trace_per_param = row.hessian_trace / n;
        row.sensitivity = sensitivity[k];
        row.sensitivity_pct_of_first =
            sensitivity[0] > 0.0 ? 100.0 * sensitivity[k] / sensitivity[0] : std::numeric_limits<double>::quiet_NaN();

        double total = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < passes.size(); ++a) {
            for (std::size_t b = a + 1; b < passes.size(); ++b) {
                try {
                    total += linear_cka(passes[a].activations[k], passes[b].activations[k]);
                    ++pairs;
                } catch (const UndefinedSimilarityError&) {
                    // a dead or constant layer says nothing about similarity
                }
            }
        }
        row.cka_mean = pairs > 0 ? total / static_cast<double>(pairs) : std::numeric_limits<double>::quiet_NaN();
    }
    // layer 1 is the base by definition; skip the rounding of 100 * x / x
    if (sensitivity[0] > 0.0) rows[0].sensitivity_pct_of_first = 100.0;
    return rows;
}

const AlgorithmEntry* find_kind(const ExperimentConfig& config, AlgorithmKind kind) {
    for (const auto& e : config.algorithms) {
        if (e.config.kind == kind) return &e;
    }
    return nullptr;
}

}  // namespace

ResultBundle run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    validate(config);
    ResultBundle bundle;
    bundle.name = config.name;
    for (const auto& e : config.algorithms) bundle.algorithms.push_back(e.label);
    for (const auto& d : config.datasets) bundle.datasets.push_back(d.name);
    bundle.seeds = config.seeds;

    const AlgorithmEntry* local_entry = find_kind(config, AlgorithmKind::local);
    const AlgorithmEntry* fedavg_entry = find_kind(config, AlgorithmKind::fedavg);

    for (std::size_t d = 0; d < config.datasets.size(); ++d) {
        const DatasetConfig& ds = config.datasets[d];
        LabeledDataset data;
        try {
            data = load_dataset(ds);
        } catch (const IoError&) {
            throw;
        } catch (const Error& e) {
            throw Error("dataset '" + ds.name + "': " + e.what());
        }

        for (std::uint64_t seed : config.seeds) {
            const SeedContext ctx = prepare(config, ds, d, data, seed);

            // References first: every algorithm is scored against Local and
            // FedAvg runs sharing its initial model and partition.
            std::vector<std::optional<RunOutput>> outputs(config.algorithms.size());
            std::vector<std::size_t> order;
            for (const AlgorithmEntry* ref : {local_entry, fedavg_entry}) {
                if (ref) order.push_back(static_cast<std::size_t>(ref - config.algorithms.data()));
            }
            for (std::size_t i = 0; i < config.algorithms.size(); ++i) {
                if (std::find(order.begin(), order.end(), i) == order.end()) order.push_back(i);
            }
            if (options.results) {
                for (std::size_t i : order) {
                    outputs[i] = run_entry(config.algorithms[i], ctx, config.threads, ds.name, seed);
                }
            }

            if (options.results) {
                std::vector<AlgorithmRun> runs;
                for (std::size_t i = 0; i < config.algorithms.size(); ++i) {
                    runs.push_back(score(config.algorithms[i], *outputs[i], ctx, ds.name, seed));
                }
                const AlgorithmRun* local_run =
                    local_entry ? &runs[static_cast<std::size_t>(local_entry - config.algorithms.data())] : nullptr;
                const AlgorithmRun* fedavg_run =
                    fedavg_entry ? &runs[static_cast<std::size_t>(fedavg_entry - config.algorithms.data())] : nullptr;
                for (auto& run : runs) {
                    // the references are not scored against themselves
                    const bool reference = &run == local_run || &run == fedavg_run;
                    for (Metric metric : kMetrics) {
                        const auto p = per_client(run, metric);
                        if (p.size() >= 2) run.fairness[metric] = fairness_variance(p);
                        if (local_run && fedavg_run && !reference) {
                            run.incentivization[metric] = incentivization_rate(
                                p, per_client(*local_run, metric), per_client(*fedavg_run, metric), direction_of(metric));
                        } else {
                            run.incentivization[metric] = std::nullopt;
                        }
                    }
                }
                for (auto& run : runs) bundle.runs.push_back(std::move(run));
            }

            if (options.curves) {
                AlgorithmConfig base = config.training;
                LossKind loss = base.loss;
                std::vector<StageInput> stages;

                StageInput first{"first_epoch", {}, std::vector<SensitivityProfile>{}};
                auto clients = make_clients(ctx, base);
                UpdateOptions opts;
                opts.epochs = 1;
                opts.learning_rate = base.learning_rate;
                opts.batch_size = base.batch_size;
                opts.loss = loss;
                for (auto& c : clients) {
                    client_update(c, {}, opts);
                    first.profiles->push_back(calculate_fed_sensitivity(c, base.sensitivity_mode));
                    first.nets.push_back(c.net);
                }
                stages.push_back(std::move(first));

                const std::pair<const AlgorithmEntry*, AlgorithmKind> finals[] = {
                    {local_entry, AlgorithmKind::local}, {fedavg_entry, AlgorithmKind::fedavg}};
                for (const auto& [entry, kind] : finals) {
                    RunOutput out;
                    if (entry && outputs[static_cast<std::size_t>(entry - config.algorithms.data())]) {
                        out = *outputs[static_cast<std::size_t>(entry - config.algorithms.data())];
                    } else {
                        AlgorithmEntry made{to_string(kind), base};
                        made.config.kind = kind;
                        out = run_entry(entry ? *entry : made, ctx, config.threads, ds.name, seed);
                    }
                    stages.push_back({to_string(kind) + "_final", std::move(out.final_nets), std::nullopt});
                }
                for (std::size_t s = 0; s < stages.size(); ++s) {
                    auto rows = stage_curves(stages[s], s, ctx, config, loss, ds.name, seed);
                    bundle.curves.insert(bundle.curves.end(), rows.begin(), rows.end());
                }
            }
        }
    }

    if (!options.results) return bundle;

    const auto best = bundle.run_results(Selection::best_val);
    const auto last = bundle.run_results(Selection::last_round);
    for (const auto& ds : bundle.datasets) {
        for (const auto& alg : bundle.algorithms) {
            for (Metric metric : kMetrics) {
                for (Selection sel : {Selection::best_val, Selection::last_round}) {
                    const auto& source = sel == Selection::best_val ? best : last;
                    std::vector<double> values;
                    for (const auto& r : source) {
                        if (r.algorithm == alg && r.dataset == ds) values.push_back(r.mean(metric));
                    }
                    if (values.empty()) {
                        throw IncompleteResultsError("no results for algorithm '" + alg + "' on dataset '" + ds + "'");
                    }
                    bundle.aggregates.push_back({alg, ds, metric, sel, seed_stats(std::move(values))});
                }
            }
        }
    }

    for (Metric metric : kMetrics) {
        RankTable table = mean_ranks(best, metric, bundle.algorithms, RankBlocks::dataset_seed);
        if (table.blocks.size() >= 2 && bundle.algorithms.size() >= 2) {
            bundle.friedman[metric] = friedman_test(table.scores, direction_of(metric));
        } else {
            bundle.friedman[metric] = std::nullopt;
        }
        bundle.ranks.emplace(metric, std::move(table));
    }
    return bundle;
}

// ---------------------------------------------------------------- output ---

std::string format_number(double value) {
    if (std::isnan(value)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

namespace {

std::ofstream open_output(const std::filesystem::path& dir, const std::string& file) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / file).string() + "'");
    return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

const char* to_string(Selection s) { return s == Selection::best_val ? "best_val" : "last_round"; }

constexpr std::string_view kResultsHeader =
    "algorithm,dataset,seed,client,train_samples,best_round,test_loss,test_accuracy,test_macro_f1,"
    "last_test_loss,last_test_accuracy,last_test_macro_f1";

}  // namespace

std::vector<ResultRow> result_rows(const ResultBundle& bundle) {
    std::vector<ResultRow> rows;
    for (const auto& run : bundle.runs) {
        for (const auto& c : run.clients) {
            rows.push_back({run.algorithm, run.dataset, run.seed, c.client, c.train_samples, c.best_round, c.best, c.last});
        }
    }
    return rows;
}

void emit_results(const ResultBundle& bundle, const std::filesystem::path& dir) {
    {
        auto out = open_output(dir, "results.csv");
        out << kResultsHeader << '\n';
        for (const auto& r : result_rows(bundle)) {
            out << r.algorithm << ',' << r.dataset << ',' << r.seed << ',' << r.client << ',' << r.train_samples << ','
                << r.best_round << ',' << format_number(r.best.loss) << ',' << format_number(r.best.accuracy) << ','
                << format_number(r.best.macro_f1) << ',' << format_number(r.last.loss) << ','
                << format_number(r.last.accuracy) << ',' << format_number(r.last.macro_f1) << '\n';
        }
        finish(out, dir / "results.csv");
    }
    {
        auto out = open_output(dir, "rounds.csv");
        out << "algorithm,dataset,seed,round,client,train_loss,val_loss,val_accuracy,val_macro_f1,params_sent\n";
        for (const auto& run : bundle.runs) {
            for (const auto& r : run.records) {
                out << run.algorithm << ',' << run.dataset << ',' << run.seed << ',' << r.round << ',' << r.client << ','
                    << format_number(r.train_loss) << ',' << format_number(r.val_loss) << ','
                    << format_number(r.val_accuracy) << ',' << format_number(r.val_macro_f1) << ',' << r.params_sent
                    << '\n';
            }
        }
        finish(out, dir / "rounds.csv");
    }

    using json = nlohmann::ordered_json;
    json summary;
    summary["name"] = bundle.name;
    summary["algorithms"] = bundle.algorithms;
    summary["datasets"] = bundle.datasets;
    summary["seeds"] = bundle.seeds;
    summary["model_selection"] = "best_val";

    json aggregates = json::array();
    for (const auto& a : bundle.aggregates) {
        aggregates.push_back({{"algorithm", a.algorithm},
                              {"dataset", a.dataset},
                              {"metric", to_string(a.metric)},
                              {"selection", to_string(a.selection)},
                              {"mean", a.stats.mean},
                              {"median", a.stats.median},
                              {"min", a.stats.min},
                              {"max", a.stats.max}});
    }
    summary["aggregates"] = std::move(aggregates);

    json ranks = json::object();
    json friedman = json::object();
    for (const auto& [metric, table] : bundle.ranks) {
        json mean = json::object();
        for (std::size_t j = 0; j < table.algorithms.size(); ++j) mean[table.algorithms[j]] = table.mean_ranks[j];
        ranks[to_string(metric)] = {{"blocks", table.blocks}, {"mean_ranks", mean}, {"ranks", table.ranks}};
        const auto& f = bundle.friedman.at(metric);
        friedman[to_string(metric)] = f ? json{{"statistic", f->statistic}, {"p_value", f->p_value},
                                               {"blocks", table.blocks.size()}, {"algorithms", table.algorithms.size()}}
                                        : json(nullptr);
    }
    summary["ranks"] = std::move(ranks);
    summary["friedman"] = std::move(friedman);

    json fairness = json::array();
    json incentives = json::array();
    json splits = json::array();
    for (const auto& run : bundle.runs) {
        json f{{"algorithm", run.algorithm}, {"dataset", run.dataset}, {"seed", run.seed}};
        for (const auto& [metric, v] : run.fairness) f[to_string(metric)] = v;
        fairness.push_back(std::move(f));

        json inc{{"algorithm", run.algorithm}, {"dataset", run.dataset}, {"seed", run.seed}};
        bool any = false;
        for (const auto& [metric, v] : run.incentivization) {
            if (v) {
                inc[to_string(metric)] = *v;
                any = true;
            }
        }
        if (any) incentives.push_back(std::move(inc));

        if (run.transition) {
            splits.push_back({{"algorithm", run.algorithm},
                              {"dataset", run.dataset},
                              {"seed", run.seed},
                              {"transition", *run.transition},
                              {"sensitivity", run.sensitivity}});
        }
    }
    summary["fairness"] = std::move(fairness);
    // Undefined without both reference algorithms: left out rather than zero.
    if (!incentives.empty()) summary["incentivization"] = std::move(incentives);
    summary["splits"] = std::move(splits);

    auto out = open_output(dir, "summary.json");
    out << summary.dump(2) << '\n';
    finish(out, dir / "summary.json");
}

void emit_layer_curves(const ResultBundle& bundle, const std::filesystem::path& dir) {
    auto out = open_output(dir, "layer_curves.csv");
    out << "dataset,seed,stage,layer,params,gradient_variance,gradient_variance_per_param,hessian_trace,"
           "hessian_trace_per_param,cka_mean,sensitivity,sensitivity_pct_of_first\n";
    for (const auto& c : bundle.curves) {
        out << c.dataset << ',' << c.seed << ',' << c.stage << ',' << c.layer << ',' << c.params << ','
            << format_number(c.gradient_variance) << ',' << format_number(c.gradient_variance_per_param) << ','
            << format_number(c.hessian_trace) << ',' << format_number(c.hessian_trace_per_param) << ','
            << format_number(c.cka_mean) << ',' << format_number(c.sensitivity) << ','
            << format_number(c.sensitivity_pct_of_first) << '\n';
    }
    finish(out, dir / "layer_curves.csv");
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double read_double(const std::string& cell, std::size_t line) {
    if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end != cell.c_str() + cell.size()) throw ParseError(line, "not a number: '" + cell + "'");
    return v;
}

std::uint64_t read_u64(const std::string& cell, std::size_t line) {
    const bool digits = !cell.empty() && std::all_of(cell.begin(), cell.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (!digits) throw ParseError(line, "not a non-negative integer: '" + cell + "'");
    return std::strtoull(cell.c_str(), nullptr, 10);
}

}  // namespace

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != kResultsHeader) throw ParseError(1, "unexpected results header");
    std::vector<ResultRow> rows;
    std::size_t number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        const auto cells = split_commas(line);
        if (cells.size() != 12) throw ParseError(number, "expected 12 columns, found " + std::to_string(cells.size()));
        ResultRow r;
        r.algorithm = cells[0];
        r.dataset = cells[1];
        r.seed = read_u64(cells[2], number);
        r.client = read_u64(cells[3], number);
        r.train_samples = read_u64(cells[4], number);
        r.best_round = read_u64(cells[5], number);
        r.best = {read_double(cells[6], number), read_double(cells[7], number), read_double(cells[8], number)};
        r.last = {read_double(cells[9], number), read_double(cells[10], number), read_double(cells[11], number)};
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace playerfl
