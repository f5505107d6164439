#include "doctest.h"

#include <cmath>
#include <vector>

#include "playerfl/errors.hpp"
#include "playerfl/evaluation.hpp"
#include "playerfl/random.hpp"

using namespace playerfl;

namespace {

// Counting definition of a mid-rank: 1 + strictly better + half the ties.
std::vector<double> counted_ranks(const std::vector<double>& s, Direction d) {
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        double r = 1.0;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (j == i) continue;
            const bool better = d == Direction::higher_better ? s[j] > s[i] : s[j] < s[i];
            if (better) r += 1.0;
            else if (s[j] == s[i]) r += 0.5;
        }
        out[i] = r;
    }
    return out;
}

RunResult run(const std::string& alg, const std::string& ds, std::uint64_t seed, double f1) {
    RunResult r;
    r.algorithm = alg;
    r.dataset = ds;
    r.seed = seed;
    r.clients = {{0.5, f1, f1}, {0.5, f1, f1}};
    return r;
}

}  // namespace

TEST_CASE("macro-F1 worked examples") {
    const std::vector<int> y{0, 1, 2, 0, 1, 2};
    CHECK(macro_f1(y, y, 3) == doctest::Approx(1.0));

    const std::vector<int> labels{0, 0, 1};
    const std::vector<int> preds{0, 1, 1};
    CHECK(macro_f1(preds, labels, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    const std::vector<int> balanced{0, 0, 1, 1};
    const std::vector<int> all_zero{0, 0, 0, 0};
    CHECK(macro_f1(all_zero, balanced, 2) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("macro-F1 counts absent classes as zero and validates input") {
    const std::vector<int> y{0, 1};
    // class 2 never appears or is predicted, yet it is part of the mean
    CHECK(macro_f1(y, y, 3) == doctest::Approx(2.0 / 3.0));
    const std::vector<int> short_preds{0};
    CHECK_THROWS_AS(macro_f1(short_preds, y, 2), ShapeError);
    const std::vector<int> bad{0, 5};
    CHECK_THROWS_AS(macro_f1(bad, y, 2), InvalidLabelError);
}

TEST_CASE("macro-F1 equals accuracy on a symmetric confusion matrix") {
    // 3 balanced classes, each with 8 hits and one miss into each other class
    std::vector<int> labels, preds;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 8; ++i) { labels.push_back(c); preds.push_back(c); }
        labels.push_back(c); preds.push_back((c + 1) % 3);
        labels.push_back(c); preds.push_back((c + 2) % 3);
    }
    CHECK(accuracy(preds, labels) == doctest::Approx(0.8));
    CHECK(macro_f1(preds, labels, 3) == doctest::Approx(accuracy(preds, labels)).epsilon(1e-12));
}

TEST_CASE("fairness is the population variance") {
    const std::vector<double> p{0.5, 0.7};
    CHECK(fairness_variance(p) == doctest::Approx(0.01).epsilon(1e-12));
    const std::vector<double> same{0.3, 0.3, 0.3};
    CHECK(fairness_variance(same) == 0.0);

    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(2 + rng.below(8));
        for (double& x : v) x = rng.uniform();
        std::vector<double> shifted = v;
        const double shift = rng.uniform(-3.0, 3.0);
        for (double& x : shifted) x += shift;
        CHECK(fairness_variance(shifted) == doctest::Approx(fairness_variance(v)).epsilon(1e-9));
    }
    const std::vector<double> one{0.5};
    CHECK_THROWS_AS(fairness_variance(one), InvalidSpecError);
}

TEST_CASE("incentivization rate examples") {
    const std::vector<double> p{0.9, 0.5}, s{0.8, 0.6}, g{0.7, 0.55};
    CHECK(incentivization_rate(p, s, g, Direction::higher_better) == doctest::Approx(50.0));
    CHECK(incentivization_rate(s, s, g, Direction::higher_better) == 0.0);
    const std::vector<double> top{0.99, 0.99};
    CHECK(incentivization_rate(top, s, g, Direction::higher_better) == 100.0);
    const std::vector<double> shorter{0.1};
    CHECK_THROWS_AS(incentivization_rate(shorter, s, g, Direction::higher_better), ShapeError);
}

TEST_CASE("incentivization is unchanged by negating scores and flipping direction") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t c = 1 + rng.below(6);
        std::vector<double> p(c), s(c), g(c), np(c), ns(c), ng(c);
        for (std::size_t i = 0; i < c; ++i) {
            // coarse grid so ties occur
            p[i] = static_cast<double>(rng.below(4));
            s[i] = static_cast<double>(rng.below(4));
            g[i] = static_cast<double>(rng.below(4));
            np[i] = -p[i];
            ns[i] = -s[i];
            ng[i] = -g[i];
        }
        CHECK(incentivization_rate(p, s, g, Direction::higher_better) ==
              incentivization_rate(np, ns, ng, Direction::lower_better));
    }
}

TEST_CASE("mid-rank examples") {
    const std::vector<double> a{3, 1, 2};
    CHECK(mid_ranks(a, Direction::higher_better) == std::vector<double>{1, 3, 2});
    CHECK(mid_ranks(a, Direction::lower_better) == std::vector<double>{3, 1, 2});
    const std::vector<double> tie{0.8, 0.8, 0.5};
    CHECK(mid_ranks(tie, Direction::higher_better) == std::vector<double>{1.5, 1.5, 3});
}

TEST_CASE("mid-ranks agree with the counting definition and sum to k(k+1)/2") {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(1 + rng.below(8));
        for (double& x : s) x = static_cast<double>(rng.below(5));
        for (Direction d : {Direction::higher_better, Direction::lower_better}) {
            const auto r = mid_ranks(s, d);
            CHECK(r == counted_ranks(s, d));
            double sum = 0.0;
            for (double x : r) sum += x;
            const double k = static_cast<double>(s.size());
            CHECK(sum == doctest::Approx(k * (k + 1) / 2));
        }
    }
}

TEST_CASE("Friedman statistic matches frozen reference values") {
    struct Case {
        std::vector<std::vector<double>> table;
        double statistic;
        double p_value;
    };
    // Reference values from an independent implementation (scipy friedmanchisquare
    // for tie-free tables, the uncorrected formula for the tied one).
    const std::vector<Case> cases{
        {{{0.9, 0.5, 0.7}, {0.8, 0.6, 0.4}, {0.95, 0.3, 0.5}, {0.7, 0.65, 0.6}}, 6.0, 0.04978706836786395},
        {{{3, 1, 2}, {1, 3, 2}, {3, 2, 1}, {2, 1, 3}}, 0.5, 0.7788007830714049},
        {{{0.61, 0.72, 0.55, 0.80},
          {0.40, 0.45, 0.52, 0.38},
          {0.90, 0.85, 0.88, 0.91},
          {0.33, 0.31, 0.37, 0.36},
          {0.70, 0.75, 0.72, 0.69}},
         0.5999999999999943,
         0.8964323733419127},
        {{{1.2, 3.4, 2.2, 0.5, 4.1},
          {2.0, 1.1, 3.3, 4.4, 0.2},
          {5, 4, 3, 2, 1},
          {0.3, 0.9, 0.1, 0.7, 0.5},
          {9, 8, 7, 6, 5.5},
          {1.5, 2.5, 3.5, 0.25, 4.5}},
         2.0,
         0.7357588823428847},
        {{{10, 20, 30, 40}, {12, 22, 35, 41}, {40, 30, 20, 10}, {5, 6, 8, 7}, {9, 1, 2, 3}, {4, 3, 2, 1}, {7, 9, 8, 6}},
         0.2571428571428527,
         0.9678763529932377},
        {{{1, 1, 2}, {3, 2, 2}, {0.5, 0.1, 0.9}, {4, 4, 4}}, 1.625, 0.4437473100810798},
    };
    for (const auto& c : cases) {
        for (Direction d : {Direction::higher_better, Direction::lower_better}) {
            const FriedmanResult r = friedman_test(c.table, d);
            CHECK(r.statistic == doctest::Approx(c.statistic).epsilon(1e-9));
            CHECK(r.p_value == doctest::Approx(c.p_value).epsilon(1e-9));
        }
    }
}

TEST_CASE("Friedman on fully tied blocks") {
    const std::vector<std::vector<double>> ties{{0.5, 0.5, 0.5}, {0.2, 0.2, 0.2}};
    const FriedmanResult r = friedman_test(ties, Direction::higher_better);
    CHECK(r.statistic == 0.0);
    CHECK(r.p_value == 1.0);
    CHECK(r.mean_ranks == std::vector<double>{2, 2, 2});
}

TEST_CASE("Friedman is invariant under strictly increasing transforms") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(6), k = 2 + rng.below(5);
        std::vector<std::vector<double>> t(n, std::vector<double>(k)), u = t;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                t[i][j] = rng.uniform(0.01, 1.0);
                u[i][j] = std::exp(3.0 * t[i][j]) + std::log(t[i][j]);
            }
        }
        const auto a = friedman_test(t, Direction::higher_better);
        const auto b = friedman_test(u, Direction::higher_better);
        CHECK(a.statistic == doctest::Approx(b.statistic).epsilon(1e-12));
        CHECK(a.mean_ranks == b.mean_ranks);
    }
}

TEST_CASE("Friedman input validation") {
    CHECK_THROWS_AS(friedman_test({{1, 2}}, Direction::higher_better), InvalidSpecError);
    CHECK_THROWS_AS(friedman_test({{1}, {2}}, Direction::higher_better), InvalidSpecError);
    CHECK_THROWS_AS(friedman_test({{1, 2}, {1, 2, 3}}, Direction::higher_better), ShapeError);
}

TEST_CASE("chi-square tail for even degrees of freedom") {
    // with dof = 2 the tail is exp(-x/2)
    for (double x : {0.1, 1.0, 4.0, 12.0}) CHECK(chi_square_sf(x, 2.0) == doctest::Approx(std::exp(-x / 2)));
    // dof = 4: exp(-x/2)(1 + x/2)
    for (double x : {0.5, 3.0, 9.0}) {
        CHECK(chi_square_sf(x, 4.0) == doctest::Approx(std::exp(-x / 2) * (1 + x / 2)));
    }
}

TEST_CASE("rank table over algorithms and blocks") {
    std::vector<RunResult> results{
        run("a", "d1", 1, 0.3), run("b", "d1", 1, 0.1), run("c", "d1", 1, 0.2),
        run("a", "d2", 1, 0.1), run("b", "d2", 1, 0.3), run("c", "d2", 1, 0.2),
    };
    const std::vector<std::string> algs{"a", "b", "c"};
    const RankTable first = mean_ranks(std::span<const RunResult>(results.data(), 3), Metric::macro_f1, algs);
    CHECK(first.mean_ranks == std::vector<double>{1, 3, 2});

    const RankTable both = mean_ranks(results, Metric::macro_f1, algs);
    CHECK(both.blocks == std::vector<std::string>{"d1", "d2"});
    CHECK(both.mean_ranks == std::vector<double>{2, 2, 2});

    // test loss ranks lower-is-better
    const RankTable loss = mean_ranks(std::span<const RunResult>(results.data(), 3), Metric::test_loss, algs);
    CHECK(loss.mean_ranks == std::vector<double>{2, 2, 2});

    const std::vector<std::string> pair{"a", "b"};
    const RankTable opposite = mean_ranks(results, Metric::macro_f1, pair);
    CHECK(opposite.mean_ranks == std::vector<double>{1.5, 1.5});

    results.pop_back();
    CHECK_THROWS_AS(mean_ranks(results, Metric::macro_f1, algs), IncompleteResultsError);
}

TEST_CASE("rank table blocks by dataset and seed") {
    const std::vector<RunResult> results{
        run("a", "d", 1, 0.9), run("b", "d", 1, 0.1),
        run("a", "d", 2, 0.2), run("b", "d", 2, 0.3),
    };
    const std::vector<std::string> algs{"a", "b"};
    const RankTable pooled = mean_ranks(results, Metric::macro_f1, algs, RankBlocks::dataset);
    CHECK(pooled.blocks.size() == 1);
    CHECK(pooled.mean_ranks == std::vector<double>{1, 2});
    const RankTable split = mean_ranks(results, Metric::macro_f1, algs, RankBlocks::dataset_seed);
    CHECK(split.blocks == std::vector<std::string>{"d/seed1", "d/seed2"});
    CHECK(split.mean_ranks == std::vector<double>{1.5, 1.5});
}
