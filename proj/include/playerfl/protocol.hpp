#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "playerfl/data.hpp"
#include "playerfl/diagnostics.hpp"
#include "playerfl/evaluation.hpp"
#include "playerfl/nn.hpp"

namespace playerfl {

enum class AlgorithmKind { local, fedavg, fedprox, local_adaptation, fedbabu, player_fl, player_fl_random };

std::string to_string(AlgorithmKind kind);
AlgorithmKind parse_algorithm(const std::string& name);
const std::vector<AlgorithmKind>& all_algorithms();

/// Layers [0, transition) are federated, the rest stay local.
struct FederationPlan {
    std::size_t transition = 0;
    double threshold = 10.0;
    std::vector<double> aggregated_sensitivity;  // empty when the plan was not derived from sensitivity

    bool federates(std::size_t layer) const noexcept { return layer < transition; }
};

enum class SensitivityAggregation { unweighted, sample_weighted };

struct AlgorithmConfig {
    AlgorithmKind kind = AlgorithmKind::fedavg;
    std::size_t rounds = 20;
    std::size_t local_epochs = 1;
    double learning_rate = 5e-3;
    std::size_t batch_size = 32;
    LossKind loss = LossKind::cross_entropy();
    AdamWConfig adamw;

    double fedprox_mu = 0.01;
    double threshold = 10.0;
    std::size_t local_adaptation_epochs = 5;
    std::size_t fedbabu_finetune_epochs = 5;
    std::uint64_t random_split_seed = 0;  // player_fl_random draws p from this and the run seed

    SensitivityMode sensitivity_mode = SensitivityMode::epoch_mean;
    SensitivityAggregation sensitivity_aggregation = SensitivityAggregation::unweighted;
    std::optional<std::size_t> forced_transition;  // player_fl only; overrides the split

    std::size_t threads = 1;  // clients trained concurrently within a round
};

void validate(const AlgorithmConfig& config);

struct ClientState {
    std::size_t id = 0;
    ClientData data;
    Network net;
    AdamWState optimizer;
    std::uint64_t seed = 0;  // minibatch order for epoch e comes from derive_seed(seed, e)
    std::size_t epochs_completed = 0;
    std::vector<BatchSnapshot> first_epoch;  // (weights, gradient) per batch of epoch 0

    std::size_t sample_count() const noexcept { return data.train.size(); }
};

ClientState make_client(std::size_t id, ClientData data, const Network& init, AdamWConfig adamw,
                        std::uint64_t run_seed);

/// One list of flat parameter vectors per layer, covering layers [0, size()).
using LayerParams = std::vector<std::vector<double>>;

LayerParams layer_prefix(const Network& net, std::size_t count);
void load_layer_prefix(Network& net, const LayerParams& params);

struct ProximalTerm {
    double mu = 0.0;
    Network anchor;
};

struct UpdateOptions {
    std::size_t epochs = 1;
    double learning_rate = 5e-3;
    std::size_t batch_size = 32;
    LossKind loss = LossKind::cross_entropy();
    std::optional<ProximalTerm> proximal;
    std::vector<bool> trainable;  // empty: every layer trains
};

/// Loads `incoming` into the leading layers, then runs `epochs` of AdamW over
/// the client's train batches. With a proximal term the loss gains
/// (mu/2) ||theta - anchor||^2. Returns the mean data loss of the last epoch.
double client_update(ClientState& state, const LayerParams& incoming, const UpdateOptions& options);

/// Weighted sum in the given (client-id) order.
std::vector<double> server_aggregate(std::span<const std::vector<double>> params, std::span<const double> weights);

LayerParams aggregate_layers(std::span<const LayerParams> client_params, std::span<const double> weights);

SensitivityProfile calculate_fed_sensitivity(const ClientState& state,
                                             SensitivityMode mode = SensitivityMode::epoch_mean);

/// Sums the client profiles (weighted when `weights` is non-empty) and picks
/// the first 1-based p with F[p+1] / F[p] > threshold; p = L when none does.
FederationPlan layer_split(std::span<const SensitivityProfile> profiles, double threshold,
                           std::span<const double> weights = {});

struct RoundRecord {
    std::size_t round = 0;  // 1-based; fine-tuning epochs continue past `rounds`
    std::size_t client = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double val_macro_f1 = 0.0;
    std::size_t params_sent = 0;
};

struct RunOutput {
    std::vector<Network> final_nets;
    std::vector<Network> best_nets;  // lowest validation loss over all recorded rounds
    std::vector<std::size_t> best_round;
    std::vector<RoundRecord> records;
    std::optional<FederationPlan> plan;
    std::vector<SensitivityProfile> client_profiles;
    std::size_t sensitivity_passes = 0;  // run-level sensitivity computations
    std::size_t split_calls = 0;
};

/// Runs one algorithm. Every client must start from the same network.
RunOutput run_algorithm(const AlgorithmConfig& config, std::vector<ClientState> clients, std::uint64_t seed);

}  // namespace playerfl
