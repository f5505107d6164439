#include "playerfl/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

#include "playerfl/errors.hpp"
#include "playerfl/random.hpp"

namespace playerfl {

namespace {

struct AlgorithmName {
    AlgorithmKind kind;
    const char* name;
};

constexpr AlgorithmName kAlgorithmNames[] = {
    {AlgorithmKind::local, "local"},
    {AlgorithmKind::fedavg, "fedavg"},
    {AlgorithmKind::fedprox, "fedprox"},
    {AlgorithmKind::local_adaptation, "local_adaptation"},
    {AlgorithmKind::fedbabu, "fedbabu"},
    {AlgorithmKind::player_fl, "player_fl"},
    {AlgorithmKind::player_fl_random, "player_fl_random"},
};

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is owned by
// exactly one worker, so results do not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::min(std::max<std::size_t>(threads, 1), n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> workers;
    workers.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        workers.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += threads) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace

std::string to_string(AlgorithmKind kind) {
    for (const auto& entry : kAlgorithmNames) {
        if (entry.kind == kind) return entry.name;
    }
    return "unknown";
}

AlgorithmKind parse_algorithm(const std::string& name) {
    for (const auto& entry : kAlgorithmNames) {
        if (name == entry.name) return entry.kind;
    }
    throw InvalidSpecError("unsupported algorithm '" + name + "'");
}

const std::vector<AlgorithmKind>& all_algorithms() {
    static const std::vector<AlgorithmKind> kinds = [] {
        std::vector<AlgorithmKind> out;
        for (const auto& entry : kAlgorithmNames) out.push_back(entry.kind);
        return out;
    }();
    return kinds;
}

void validate(const AlgorithmConfig& config) {
    if (config.rounds < 1) throw InvalidSpecError("rounds must be >= 1");
    if (config.local_epochs < 1) throw InvalidSpecError("local_epochs must be >= 1");
    if (config.batch_size < 1) throw InvalidSpecError("batch_size must be >= 1");
    if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
        throw InvalidSpecError("learning_rate must be finite and >= 0");
    }
    if (!(config.fedprox_mu >= 0.0)) throw InvalidSpecError("fedprox_mu must be >= 0");
    if (!(config.threshold > 1.0)) throw InvalidSpecError("threshold must be > 1");
}

ClientState make_client(std::size_t id, ClientData data, const Network& init, AdamWConfig adamw,
                        std::uint64_t run_seed) {
    if (data.train.empty()) throw ProtocolError("client " + std::to_string(id) + " has no training data");
    ClientState state;
    state.id = id;
    state.data = std::move(data);
    state.net = init;
    state.optimizer = AdamWState::for_network(init, adamw);
    state.seed = derive_seed(run_seed, 0xC11E47, id);
    return state;
}

LayerParams layer_prefix(const Network& net, std::size_t count) {
    if (count > net.layer_count()) throw ProtocolError("prefix longer than the network");
    LayerParams out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) out.push_back(get_layer_params(net, k));
    return out;
}

void load_layer_prefix(Network& net, const LayerParams& params) {
    if (params.size() > net.layer_count()) {
        throw ProtocolError("incoming parameters cover " + std::to_string(params.size()) + " layers, model has " +
                            std::to_string(net.layer_count()));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].size() != net.layers[k].param_count()) {
            throw ProtocolError("incoming layer " + std::to_string(k) + " has " + std::to_string(params[k].size()) +
                                " parameters, expected " + std::to_string(net.layers[k].param_count()));
        }
    }
    for (std::size_t k = 0; k < params.size(); ++k) set_layer_params(net, k, params[k]);
}

double client_update(ClientState& state, const LayerParams& incoming, const UpdateOptions& options) {
    load_layer_prefix(state.net, incoming);
    const std::size_t depth = state.net.layer_count();
    if (!options.trainable.empty() && options.trainable.size() != depth) {
        throw ProtocolError("trainable mask does not match the model");
    }
    if (options.proximal && options.proximal->anchor.layer_count() != depth) {
        throw ProtocolError("proximal anchor does not match the model");
    }
    const bool proximal = options.proximal && options.proximal->mu > 0.0;

    double epoch_loss = 0.0;
    for (std::size_t e = 0; e < options.epochs; ++e) {
        const bool record = state.epochs_completed == 0;
        const auto batches =
            minibatches(state.data.train, options.batch_size, derive_seed(state.seed, state.epochs_completed));
        double total = 0.0;
        for (const auto& batch : batches) {
            auto step = loss_and_gradient(state.net, batch.features, batch.labels, options.loss);
            total += step.loss * static_cast<double>(batch.size());
            if (record) state.first_epoch.push_back(snapshot(state.net, step.gradients));
            if (proximal) {
                const double mu = options.proximal->mu;
                for (std::size_t k = 0; k < depth; ++k) {
                    const auto& w = state.net.layers[k];
                    const auto& a = options.proximal->anchor.layers[k];
                    auto gw = step.gradients.layers[k].weights.values();
                    const auto wv = w.weights.values();
                    const auto av = a.weights.values();
                    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += mu * (wv[i] - av[i]);
                    auto& gb = step.gradients.layers[k].bias;
                    for (std::size_t j = 0; j < gb.size(); ++j) gb[j] += mu * (w.bias[j] - a.bias[j]);
                }
            }
            adamw_step(state.net, step.gradients, state.optimizer, options.learning_rate, options.trainable);
        }
        epoch_loss = total / static_cast<double>(state.data.train.size());
        ++state.epochs_completed;
    }
    return epoch_loss;
}

std::vector<double> server_aggregate(std::span<const std::vector<double>> params, std::span<const double> weights) {
    if (params.empty()) throw ProtocolError("aggregation over zero clients");
    if (params.size() != weights.size()) throw ProtocolError("one weight per client required");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ProtocolError("client weights must be >= 0");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ProtocolError("client weights sum to " + std::to_string(total) + ", not 1");
    const std::size_t n = params.front().size();
    std::vector<double> out(n, 0.0);
    for (std::size_t c = 0; c < params.size(); ++c) {
        if (params[c].size() != n) throw ProtocolError("client parameter vectors differ in length");
        for (std::size_t i = 0; i < n; ++i) out[i] += weights[c] * params[c][i];
    }
    return out;
}

LayerParams aggregate_layers(std::span<const LayerParams> client_params, std::span<const double> weights) {
    if (client_params.empty()) throw ProtocolError("aggregation over zero clients");
    const std::size_t layers = client_params.front().size();
    LayerParams out(layers);
    std::vector<std::vector<double>> column(client_params.size());
    for (std::size_t k = 0; k < layers; ++k) {
        for (std::size_t c = 0; c < client_params.size(); ++c) {
            if (client_params[c].size() != layers) throw ProtocolError("clients sent different layer counts");
            column[c] = client_params[c][k];
        }
        out[k] = server_aggregate(column, weights);
    }
    return out;
}

SensitivityProfile calculate_fed_sensitivity(const ClientState& state, SensitivityMode mode) {
    if (state.first_epoch.empty()) {
        throw ProtocolError("client " + std::to_string(state.id) + " has not completed its first epoch");
    }
    return federation_sensitivity(state.first_epoch, mode);
}

FederationPlan layer_split(std::span<const SensitivityProfile> profiles, double threshold,
                           std::span<const double> weights) {
    if (profiles.empty()) throw ShapeError("layer split needs at least one profile");
    if (!(threshold > 1.0)) throw InvalidSpecError("threshold must be > 1");
    if (!weights.empty() && weights.size() != profiles.size()) throw ShapeError("one weight per profile required");
    const std::size_t layers = profiles.front().layer_count();
    if (layers == 0) throw ShapeError("empty sensitivity profile");

    std::vector<double> total(layers, 0.0);
    for (std::size_t c = 0; c < profiles.size(); ++c) {
        if (profiles[c].layer_count() != layers) throw ShapeError("sensitivity profiles differ in length");
        const double w = weights.empty() ? 1.0 : weights[c];
        for (std::size_t k = 0; k < layers; ++k) total[k] += w * profiles[c].cumulative[k];
    }

    FederationPlan plan;
    plan.threshold = threshold;
    plan.transition = layers;
    for (std::size_t p = 1; p < layers; ++p) {
        const double lower = total[p - 1];
        const double upper = total[p];
        double ratio = 1.0;
        if (lower > 0.0) {
            ratio = upper / lower;
        } else if (upper > 0.0) {
            ratio = std::numeric_limits<double>::infinity();
        }
        if (ratio > threshold) {
            plan.transition = p;
            break;
        }
    }
    plan.aggregated_sensitivity = std::move(total);
    return plan;
}

namespace {

struct Runner {
    const AlgorithmConfig& config;
    std::vector<ClientState>& clients;
    std::vector<double> weights;
    RunOutput out;
    std::vector<double> best_loss;

    UpdateOptions base_options(std::size_t epochs) const {
        UpdateOptions opts;
        opts.epochs = epochs;
        opts.learning_rate = config.learning_rate;
        opts.batch_size = config.batch_size;
        opts.loss = config.loss;
        return opts;
    }

    std::vector<double> train_all(const UpdateOptions& opts, bool proximal) {
        std::vector<double> losses(clients.size());
        parallel_for(clients.size(), config.threads, [&](std::size_t c) {
            UpdateOptions local = opts;
            if (proximal) local.proximal = ProximalTerm{config.fedprox_mu, clients[c].net};
            losses[c] = client_update(clients[c], {}, local);
        });
        return losses;
    }

    std::size_t federate(std::size_t prefix) {
        if (prefix == 0) return 0;
        std::vector<LayerParams> sent;
        sent.reserve(clients.size());
        for (const auto& c : clients) sent.push_back(layer_prefix(c.net, prefix));
        const LayerParams global = aggregate_layers(sent, weights);
        for (auto& c : clients) load_layer_prefix(c.net, global);
        std::size_t count = 0;
        for (const auto& layer : global) count += layer.size();
        return count;
    }

    void record(std::size_t round, const std::vector<double>& train_losses, std::size_t params_sent) {
        for (std::size_t c = 0; c < clients.size(); ++c) {
            RoundRecord rec;
            rec.round = round;
            rec.client = clients[c].id;
            rec.train_loss = train_losses[c];
            rec.params_sent = params_sent;
            const auto& val = clients[c].data.val;
            if (val.empty()) {
                rec.val_loss = rec.val_accuracy = rec.val_macro_f1 = std::numeric_limits<double>::quiet_NaN();
            } else {
                const ModelMetrics m = evaluate_model(clients[c].net, val, config.loss);
                rec.val_loss = m.loss;
                rec.val_accuracy = m.accuracy;
                rec.val_macro_f1 = m.macro_f1;
            }
            const bool first = out.best_round[c] == 0;
            if (first || rec.val_loss < best_loss[c]) {
                best_loss[c] = rec.val_loss;
                out.best_round[c] = round;
                out.best_nets[c] = clients[c].net;
            }
            out.records.push_back(rec);
        }
    }
};

}  // namespace

RunOutput run_algorithm(const AlgorithmConfig& config, std::vector<ClientState> clients, std::uint64_t seed) {
    validate(config);
    if (clients.empty()) throw ProtocolError("no clients");
    const Network& reference = clients.front().net;
    const std::size_t depth = reference.layer_count();
    if (depth == 0) throw ProtocolError("empty model");
    if (reference.layers.back().activation != Activation::identity) {
        throw ProtocolError("final layer must emit logits (identity activation)");
    }
    for (const auto& c : clients) {
        if (!(c.net == reference)) throw ProtocolError("clients must start from the same model");
        if (c.sample_count() == 0) throw ProtocolError("client " + std::to_string(c.id) + " has no training data");
    }
    const AlgorithmKind kind = config.kind;
    if ((kind == AlgorithmKind::fedbabu || kind == AlgorithmKind::player_fl_random) && depth < 2) {
        throw ProtocolError(to_string(kind) + " needs at least two layers");
    }
    if (config.forced_transition && *config.forced_transition > depth) {
        throw ProtocolError("forced transition beyond the last layer");
    }

    Runner run{config, clients, {}, {}, {}};
    double total = 0.0;
    for (const auto& c : clients) total += static_cast<double>(c.sample_count());
    for (const auto& c : clients) run.weights.push_back(static_cast<double>(c.sample_count()) / total);
    run.out.best_nets.resize(clients.size());
    run.out.best_round.assign(clients.size(), 0);
    run.best_loss.assign(clients.size(), 0.0);

    std::size_t prefix = 0;
    std::vector<bool> trainable;
    switch (kind) {
        case AlgorithmKind::local: prefix = 0; break;
        case AlgorithmKind::fedavg:
        case AlgorithmKind::fedprox:
        case AlgorithmKind::local_adaptation: prefix = depth; break;
        case AlgorithmKind::fedbabu:
            prefix = depth - 1;
            trainable.assign(depth, true);
            trainable.back() = false;
            break;
        case AlgorithmKind::player_fl: prefix = 0; break;  // decided after the first epoch
        case AlgorithmKind::player_fl_random: {
            Rng rng(derive_seed(seed, 0x5A17, config.random_split_seed));
            prefix = 1 + static_cast<std::size_t>(rng.below(depth - 1));
            run.out.plan = FederationPlan{prefix, config.threshold, {}};
            break;
        }
    }

    UpdateOptions opts = run.base_options(config.local_epochs);
    opts.trainable = trainable;
    const bool proximal = kind == AlgorithmKind::fedprox && config.fedprox_mu > 0.0;

    // Training errors carry the round they surfaced in.
    const auto in_round = [&](std::size_t round, auto&& body) {
        try {
            body();
        } catch (const Error& e) {
            throw RunFailure(to_string(kind), "", seed, round, e.what());
        }
    };

    for (std::size_t r = 1; r <= config.rounds; ++r) in_round(r, [&] {
        const auto losses = run.train_all(opts, proximal);
        if (r == 1 && kind == AlgorithmKind::player_fl) {
            for (const auto& c : clients) {
                run.out.client_profiles.push_back(calculate_fed_sensitivity(c, config.sensitivity_mode));
            }
            run.out.sensitivity_passes = 1;
            const std::span<const double> split_weights =
                config.sensitivity_aggregation == SensitivityAggregation::sample_weighted
                    ? std::span<const double>(run.weights)
                    : std::span<const double>();
            FederationPlan plan = layer_split(run.out.client_profiles, config.threshold, split_weights);
            run.out.split_calls = 1;
            if (config.forced_transition) plan.transition = *config.forced_transition;
            prefix = plan.transition;
            run.out.plan = std::move(plan);
        }
        const std::size_t sent = run.federate(prefix);
        run.record(r, losses, sent);
    });

    std::size_t finetune = 0;
    UpdateOptions tune = run.base_options(1);
    if (kind == AlgorithmKind::local_adaptation) {
        finetune = config.local_adaptation_epochs;
    } else if (kind == AlgorithmKind::fedbabu) {
        finetune = config.fedbabu_finetune_epochs;
        tune.trainable.assign(depth, false);
        tune.trainable.back() = true;
    }
    for (std::size_t f = 1; f <= finetune; ++f) in_round(config.rounds + f, [&] {
        const auto losses = run.train_all(tune, false);
        run.record(config.rounds + f, losses, 0);
    });

    for (auto& c : clients) run.out.final_nets.push_back(c.net);
    return std::move(run.out);
}

}  // namespace playerfl
