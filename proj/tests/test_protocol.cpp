#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "playerfl/data.hpp"
#include "playerfl/errors.hpp"
#include "playerfl/protocol.hpp"
#include "playerfl/random.hpp"

using namespace playerfl;

namespace {

struct Setup {
    ClientPartition partition;
    Network init;
};

Setup make_setup(std::uint64_t seed, std::size_t clients = 3, double alpha = 0.5,
                 std::vector<std::size_t> sizes = {6, 8, 6, 3}) {
    SyntheticSpec spec;
    spec.classes = sizes.back();
    spec.dim = sizes.front();
    spec.samples_per_class = 40;
    const LabeledDataset data = generate_synthetic(spec, seed);
    PartitionOptions opts;
    opts.min_client_samples = 12;
    Setup s;
    s.partition = dirichlet_label_partition(data, clients, alpha, seed + 1, opts);
    std::vector<Activation> acts(sizes.size() - 1, Activation::relu);
    acts.back() = Activation::identity;
    s.init = init_network(sizes, acts, seed + 2);
    return s;
}

std::vector<ClientState> make_clients(const Setup& s, std::uint64_t run_seed) {
    std::vector<ClientState> out;
    for (std::size_t c = 0; c < s.partition.client_count(); ++c) {
        out.push_back(make_client(c, s.partition.clients[c], s.init, AdamWConfig{}, run_seed));
    }
    return out;
}

AlgorithmConfig config_for(AlgorithmKind kind, std::size_t rounds = 4) {
    AlgorithmConfig cfg;
    cfg.kind = kind;
    cfg.rounds = rounds;
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-2;
    return cfg;
}

double max_abs_diff(const Network& a, const Network& b) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.layer_count(); ++k) {
        const auto pa = get_layer_params(a, k);
        const auto pb = get_layer_params(b, k);
        for (std::size_t i = 0; i < pa.size(); ++i) worst = std::max(worst, std::abs(pa[i] - pb[i]));
    }
    return worst;
}

double max_abs_diff(const std::vector<Network>& a, const std::vector<Network>& b) {
    double worst = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) worst = std::max(worst, max_abs_diff(a[c], b[c]));
    return worst;
}

}  // namespace

TEST_CASE("algorithm names round-trip") {
    for (AlgorithmKind k : all_algorithms()) CHECK(parse_algorithm(to_string(k)) == k);
    CHECK_THROWS_AS(parse_algorithm("scaffold"), InvalidSpecError);
}

TEST_CASE("client_update with zero learning rate leaves the model unchanged") {
    const Setup s = make_setup(3);
    auto clients = make_clients(s, 1);
    UpdateOptions opts;
    opts.learning_rate = 0.0;
    opts.epochs = 2;
    client_update(clients[0], {}, opts);
    CHECK(clients[0].net == s.init);
    CHECK(clients[0].epochs_completed == 2);
}

TEST_CASE("client_update matches a hand-written AdamW loop") {
    const Setup s = make_setup(4);
    auto clients = make_clients(s, 9);
    ClientState& state = clients[1];

    Network net = s.init;
    AdamWState opt = AdamWState::for_network(net, AdamWConfig{});
    double last = 0.0;
    for (std::size_t e = 0; e < 3; ++e) {
        double total = 0.0;
        for (const auto& b : minibatches(state.data.train, 8, derive_seed(state.seed, e))) {
            const auto step = loss_and_gradient(net, b.features, b.labels, LossKind::cross_entropy());
            total += step.loss * static_cast<double>(b.size());
            adamw_step(net, step.gradients, opt, 0.02);
        }
        last = total / static_cast<double>(state.data.train.size());
    }

    UpdateOptions opts;
    opts.epochs = 3;
    opts.batch_size = 8;
    opts.learning_rate = 0.02;
    opts.proximal = ProximalTerm{0.0, s.init};  // mu = 0 is plain training
    const double got = client_update(state, {}, opts);
    CHECK(state.net == net);
    CHECK(got == doctest::Approx(last).epsilon(1e-12));
}

TEST_CASE("a very stiff proximal term pins the model to its anchor") {
    const Setup s = make_setup(5);
    auto clients = make_clients(s, 2);
    UpdateOptions opts;
    opts.epochs = 3;
    opts.learning_rate = 1e-3;
    opts.proximal = ProximalTerm{1e6, s.init};
    client_update(clients[0], {}, opts);
    // Adam's step is bounded by lr, but the proximal pull flips the sign as
    // soon as the model drifts, so it can never get far.
    CHECK(max_abs_diff(clients[0].net, s.init) <= 1e-3);

    auto free_clients = make_clients(s, 2);
    opts.proximal.reset();
    client_update(free_clients[0], {}, opts);
    CHECK(max_abs_diff(free_clients[0].net, s.init) > max_abs_diff(clients[0].net, s.init));
}

TEST_CASE("client_update rejects mismatched incoming parameters") {
    const Setup s = make_setup(6);
    auto clients = make_clients(s, 1);
    LayerParams wrong{std::vector<double>(3, 0.0)};
    CHECK_THROWS_AS(client_update(clients[0], wrong, {}), ProtocolError);
    LayerParams too_many(5);
    CHECK_THROWS_AS(client_update(clients[0], too_many, {}), ProtocolError);
}

TEST_CASE("server aggregation examples") {
    const std::vector<std::vector<double>> p{{1.0, 2.0}, {3.0, 4.0}};
    const std::vector<double> half{0.5, 0.5};
    CHECK(server_aggregate(p, half) == std::vector<double>{2.0, 3.0});

    const std::vector<std::vector<double>> same{{0.3, -1.2}, {0.3, -1.2}, {0.3, -1.2}};
    const std::vector<double> w3{0.2, 0.3, 0.5};
    const auto agg = server_aggregate(same, w3);
    CHECK(agg[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(agg[1] == doctest::Approx(-1.2).epsilon(1e-15));

    const std::vector<std::vector<double>> single{{0.0}, {4.0}};
    const std::vector<double> skew{0.75, 0.25};
    CHECK(server_aggregate(single, skew) == std::vector<double>{1.0});

    const std::vector<double> bad{0.5, 0.6};
    CHECK_THROWS_AS(server_aggregate(p, bad), ProtocolError);
    const std::vector<double> one{1.0};
    CHECK_THROWS_AS(server_aggregate(p, one), ProtocolError);
}

TEST_CASE("calculate_fed_sensitivity needs a completed first epoch") {
    const Setup s = make_setup(7);
    auto clients = make_clients(s, 1);
    CHECK_THROWS_AS(calculate_fed_sensitivity(clients[0]), ProtocolError);
}

TEST_CASE("calculate_fed_sensitivity matches a replay of the first epoch") {
    const Setup s = make_setup(8);
    auto clients = make_clients(s, 3);
    ClientState& state = clients[2];

    // Replay: importance of every layer at the weights each gradient was taken at.
    Network net = s.init;
    AdamWState opt = AdamWState::for_network(net, AdamWConfig{});
    const std::size_t depth = net.layer_count();
    std::vector<double> sum(depth, 0.0);
    std::vector<double> last(depth, 0.0);
    std::size_t batches = 0;
    for (const auto& b : minibatches(state.data.train, 16, derive_seed(state.seed, 0))) {
        const auto step = loss_and_gradient(net, b.features, b.labels, LossKind::cross_entropy());
        for (std::size_t k = 0; k < depth; ++k) {
            const auto theta = get_layer_params(net, k);
            const auto g = step.gradients.layers[k].flat();
            double acc = 0.0;
            for (std::size_t i = 0; i < theta.size(); ++i) acc += (theta[i] * g[i]) * (theta[i] * g[i]);
            last[k] = acc / static_cast<double>(theta.size());
            sum[k] += last[k];
        }
        adamw_step(net, step.gradients, opt, 0.01);
        ++batches;
    }

    UpdateOptions opts;
    opts.batch_size = 16;
    opts.learning_rate = 0.01;
    client_update(state, {}, opts);
    const SensitivityProfile mean = calculate_fed_sensitivity(state);
    const SensitivityProfile tail = calculate_fed_sensitivity(state, SensitivityMode::last_batch);
    REQUIRE(mean.layer_count() == depth);
    CHECK(mean.batch_count == batches);
    double run_mean = 0.0, run_last = 0.0;
    for (std::size_t k = 0; k < depth; ++k) {
        run_mean += sum[k] / static_cast<double>(batches);
        run_last += last[k];
        CHECK(std::abs(mean.cumulative[k] - run_mean) <= 1e-12 * std::max(1.0, run_mean));
        CHECK(std::abs(tail.cumulative[k] - run_last) <= 1e-12 * std::max(1.0, run_last));
    }

    // later epochs do not touch the recorded profile
    client_update(state, {}, opts);
    CHECK(calculate_fed_sensitivity(state).cumulative == mean.cumulative);
}

TEST_CASE("sensitivity of a single-layer model and of a zero-gradient model") {
    Network net = init_network(std::vector<std::size_t>{2, 2}, std::vector<Activation>{Activation::identity}, 4);
    ClientData data;
    data.train.features = Matrix{{1.0, 0.0}, {0.0, 1.0}};
    data.train.labels = {0, 1};
    data.train.class_count = 2;
    data.source_indices = {0, 1};
    ClientState single = make_client(0, data, net, AdamWConfig{}, 1);
    client_update(single, {}, UpdateOptions{});
    const auto p = calculate_fed_sensitivity(single);
    CHECK(p.layer_count() == 1);
    CHECK(p.cumulative[0] > 0.0);

    // zero weights and zero bias: theta * grad vanishes everywhere
    Network zero = net;
    for (double& w : zero.layers[0].weights.values()) w = 0.0;
    ClientState still = make_client(0, data, zero, AdamWConfig{}, 1);
    UpdateOptions frozen;
    frozen.learning_rate = 0.0;
    client_update(still, {}, frozen);
    CHECK(calculate_fed_sensitivity(still).cumulative == std::vector<double>{0.0});
}

TEST_CASE("layer_split examples") {
    const std::vector<SensitivityProfile> jump{profile_from_importance({1.0, 0.1, 48.9, 5.0}, 1)};
    REQUIRE(jump[0].cumulative[1] == doctest::Approx(1.1));
    CHECK(layer_split(jump, 10.0).transition == 2);
    CHECK(layer_split(jump, 50.0).transition == 4);

    const std::vector<SensitivityProfile> flat{profile_from_importance({1.0, 0.0, 0.0, 0.0}, 1)};
    CHECK(layer_split(flat, 10.0).transition == 4);

    // profiles add before the ratio is taken
    const std::vector<SensitivityProfile> two{profile_from_importance({1.0, 0.0, 30.0}, 1),
                                              profile_from_importance({1.0, 0.0, 0.0}, 1)};
    CHECK(layer_split(two, 10.0).transition == 2);
    CHECK(layer_split(two, 20.0).transition == 3);
    const std::vector<double> weights{0.1, 0.9};
    CHECK(layer_split(two, 10.0, weights).transition == 3);  // 1 -> 1 + 3 = 4

    const std::vector<SensitivityProfile> zero_head{profile_from_importance({0.0, 2.0}, 1)};
    CHECK(layer_split(zero_head, 10.0).transition == 1);

    const std::vector<SensitivityProfile> ragged{profile_from_importance({1.0, 2.0}, 1),
                                                 profile_from_importance({1.0}, 1)};
    CHECK_THROWS_AS(layer_split(ragged, 10.0), ShapeError);
    CHECK_THROWS_AS(layer_split(std::span<const SensitivityProfile>{}, 10.0), ShapeError);
}

TEST_CASE("player_fl with the split forced to L reproduces FedAvg") {
    const Setup s = make_setup(10);
    auto fedavg = run_algorithm(config_for(AlgorithmKind::fedavg), make_clients(s, 5), 5);
    auto cfg = config_for(AlgorithmKind::player_fl);
    cfg.forced_transition = s.init.layer_count();
    auto player = run_algorithm(cfg, make_clients(s, 5), 5);
    CHECK(max_abs_diff(fedavg.final_nets, player.final_nets) <= 1e-12);
    REQUIRE(fedavg.records.size() == player.records.size());
    for (std::size_t i = 0; i < fedavg.records.size(); ++i) {
        CHECK(fedavg.records[i].val_loss == doctest::Approx(player.records[i].val_loss).epsilon(1e-12));
    }
}

TEST_CASE("player_fl with the split forced to 0 reproduces Local") {
    const Setup s = make_setup(11);
    auto local = run_algorithm(config_for(AlgorithmKind::local), make_clients(s, 6), 6);
    auto cfg = config_for(AlgorithmKind::player_fl);
    cfg.forced_transition = 0;
    auto player = run_algorithm(cfg, make_clients(s, 6), 6);
    CHECK(max_abs_diff(local.final_nets, player.final_nets) <= 1e-12);
    for (const auto& r : player.records) CHECK(r.params_sent == 0);
}

TEST_CASE("FedProx with mu = 0 reproduces FedAvg") {
    const Setup s = make_setup(12);
    auto fedavg = run_algorithm(config_for(AlgorithmKind::fedavg), make_clients(s, 7), 7);
    auto cfg = config_for(AlgorithmKind::fedprox);
    cfg.fedprox_mu = 0.0;
    auto prox = run_algorithm(cfg, make_clients(s, 7), 7);
    CHECK(max_abs_diff(fedavg.final_nets, prox.final_nets) <= 1e-12);

    cfg.fedprox_mu = 0.5;
    auto stiff = run_algorithm(cfg, make_clients(s, 7), 7);
    CHECK(max_abs_diff(fedavg.final_nets, stiff.final_nets) > 0.0);
}

TEST_CASE("FedAvg over one client is Local training") {
    Setup s = make_setup(13);
    std::vector<std::size_t> everything;
    for (const auto& c : s.partition.clients) {
        everything.insert(everything.end(), c.source_indices.begin(), c.source_indices.end());
    }
    SyntheticSpec spec;
    spec.classes = 3;
    spec.dim = 6;
    spec.samples_per_class = 40;
    s.partition = make_partition(generate_synthetic(spec, 13), {everything}, kDefaultFractions, 14);
    REQUIRE(s.partition.weights == std::vector<double>{1.0});
    auto a = run_algorithm(config_for(AlgorithmKind::fedavg), make_clients(s, 8), 8);
    auto b = run_algorithm(config_for(AlgorithmKind::local), make_clients(s, 8), 8);
    CHECK(max_abs_diff(a.final_nets, b.final_nets) <= 1e-12);
}

TEST_CASE("federated layers are identical across clients, local layers are not") {
    const Setup s = make_setup(14);
    auto cfg = config_for(AlgorithmKind::player_fl);
    cfg.forced_transition = 2;
    const RunOutput out = run_algorithm(cfg, make_clients(s, 9), 9);
    for (std::size_t c = 1; c < out.final_nets.size(); ++c) {
        for (std::size_t k = 0; k < 2; ++k) {
            CHECK(get_layer_params(out.final_nets[c], k) == get_layer_params(out.final_nets[0], k));
        }
        CHECK(get_layer_params(out.final_nets[c], 2) != get_layer_params(out.final_nets[0], 2));
    }
}

TEST_CASE("params_sent counts the federated prefix per round") {
    const Setup s = make_setup(15);
    const auto counts = s.init.layer_param_counts();  // {56, 54, 21}
    auto cfg = config_for(AlgorithmKind::player_fl);
    cfg.forced_transition = 2;
    const RunOutput player = run_algorithm(cfg, make_clients(s, 1), 1);
    for (const auto& r : player.records) CHECK(r.params_sent == counts[0] + counts[1]);

    const RunOutput fedavg = run_algorithm(config_for(AlgorithmKind::fedavg), make_clients(s, 1), 1);
    for (const auto& r : fedavg.records) CHECK(r.params_sent == counts[0] + counts[1] + counts[2]);

    const RunOutput babu = run_algorithm(config_for(AlgorithmKind::fedbabu), make_clients(s, 1), 1);
    for (const auto& r : babu.records) {
        CHECK(r.params_sent == (r.round <= 4 ? counts[0] + counts[1] : 0));
    }
}

TEST_CASE("player_fl computes sensitivity and the split exactly once") {
    const Setup s = make_setup(16);
    const RunOutput out = run_algorithm(config_for(AlgorithmKind::player_fl, 6), make_clients(s, 2), 2);
    CHECK(out.sensitivity_passes == 1);
    CHECK(out.split_calls == 1);
    REQUIRE(out.plan);
    CHECK(out.plan->transition >= 1);
    CHECK(out.plan->transition <= s.init.layer_count());
    CHECK(out.client_profiles.size() == 3);

    const RunOutput fedavg = run_algorithm(config_for(AlgorithmKind::fedavg), make_clients(s, 2), 2);
    CHECK(fedavg.sensitivity_passes == 0);
    CHECK_FALSE(fedavg.plan);
}

TEST_CASE("FedBABU never moves the head during federation") {
    const Setup s = make_setup(17);
    auto cfg = config_for(AlgorithmKind::fedbabu);
    cfg.fedbabu_finetune_epochs = 0;
    const RunOutput out = run_algorithm(cfg, make_clients(s, 3), 3);
    const std::size_t head = s.init.layer_count() - 1;
    for (const auto& net : out.final_nets) {
        CHECK(get_layer_params(net, head) == get_layer_params(s.init, head));
        CHECK(get_layer_params(net, 0) == get_layer_params(out.final_nets[0], 0));
    }
    cfg.fedbabu_finetune_epochs = 2;
    const RunOutput tuned = run_algorithm(cfg, make_clients(s, 3), 3);
    CHECK(get_layer_params(tuned.final_nets[0], head) != get_layer_params(s.init, head));
    CHECK(get_layer_params(tuned.final_nets[0], 0) == get_layer_params(out.final_nets[0], 0));
    CHECK(tuned.records.size() == 3 * (4 + 2));
}

TEST_CASE("PLayer-FL-Random draws a split strictly inside the network") {
    const Setup s = make_setup(18);
    std::vector<std::size_t> seen;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto cfg = config_for(AlgorithmKind::player_fl_random, 1);
        cfg.random_split_seed = seed;
        const RunOutput out = run_algorithm(cfg, make_clients(s, 4), 4);
        REQUIRE(out.plan);
        CHECK(out.plan->transition >= 1);
        CHECK(out.plan->transition <= 2);
        seen.push_back(out.plan->transition);
    }
    CHECK(std::count(seen.begin(), seen.end(), 1) > 0);
    CHECK(std::count(seen.begin(), seen.end(), 2) > 0);
}

TEST_CASE("runs are reproducible for a seed and independent of thread count") {
    const Setup s = make_setup(19);
    for (AlgorithmKind kind : all_algorithms()) {
        auto cfg = config_for(kind, 3);
        const RunOutput a = run_algorithm(cfg, make_clients(s, 11), 11);
        cfg.threads = 3;
        const RunOutput b = run_algorithm(cfg, make_clients(s, 11), 11);
        CHECK(a.final_nets == b.final_nets);
        CHECK(a.best_round == b.best_round);
        const RunOutput c = run_algorithm(config_for(kind, 3), make_clients(s, 12), 12);
        if (kind != AlgorithmKind::player_fl_random) CHECK_FALSE(a.final_nets == c.final_nets);
    }
}

TEST_CASE("best_nets track the lowest validation loss") {
    const Setup s = make_setup(20);
    const RunOutput out = run_algorithm(config_for(AlgorithmKind::local, 6), make_clients(s, 1), 1);
    for (std::size_t c = 0; c < out.best_nets.size(); ++c) {
        double best = 1e300;
        std::size_t round = 0;
        for (const auto& r : out.records) {
            if (r.client == c && r.val_loss < best) {
                best = r.val_loss;
                round = r.round;
            }
        }
        CHECK(out.best_round[c] == round);
        CHECK(evaluate_model(out.best_nets[c], s.partition.clients[c].val, LossKind::cross_entropy()).loss ==
              doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("run_algorithm input validation") {
    const Setup s = make_setup(21);
    auto clients = make_clients(s, 1);
    clients[1].net.layers[0].bias[0] = 1.0;
    CHECK_THROWS_AS(run_algorithm(config_for(AlgorithmKind::fedavg), clients, 1), ProtocolError);

    auto cfg = config_for(AlgorithmKind::fedavg);
    cfg.threshold = 1.0;
    CHECK_THROWS_AS(run_algorithm(cfg, make_clients(s, 1), 1), InvalidSpecError);
    cfg = config_for(AlgorithmKind::player_fl);
    cfg.forced_transition = 9;
    CHECK_THROWS_AS(run_algorithm(cfg, make_clients(s, 1), 1), ProtocolError);

    const Setup shallow = make_setup(22, 2, 0.5, {6, 3});
    CHECK_THROWS_AS(run_algorithm(config_for(AlgorithmKind::fedbabu), make_clients(shallow, 1), 1), ProtocolError);
    CHECK_NOTHROW(run_algorithm(config_for(AlgorithmKind::fedavg, 1), make_clients(shallow, 1), 1));
}

TEST_CASE("a failure during training reports its round") {
    const Setup s = make_setup(23);
    auto clients = make_clients(s, 1);
    clients[2].data.train.features(0, 0) = std::nan("");
    try {
        run_algorithm(config_for(AlgorithmKind::fedprox), clients, 1);
        FAIL("expected a RunFailure");
    } catch (const RunFailure& e) {
        CHECK(e.algorithm() == "fedprox");
        CHECK(e.round() == 1);
        CHECK(e.seed() == 1);
    }
}
