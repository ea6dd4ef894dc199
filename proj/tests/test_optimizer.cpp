#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "roadq/errors.hpp"
#include "roadq/model.hpp"
#include "roadq/optimizer.hpp"
#include "roadq/traveltime.hpp"
#include "test_support.hpp"

#include <cmath>
#include <set>

using namespace roadq;

namespace {

struct Fig2 {
  Topology topo;
  SolverConfig cfg;

  Fig2()
      : topo(Topology::from_file(support::data_file("fig2.topo"))) {
    enumerate_paths(topo);
    cfg = SolverConfig::defaults_for(topo);
  }
};

// Replays the accepted trace moves on top of the initial splits, asserting
// per-flow probability conservation after every accepted move, and returns
// the final split vector.
SplitVector replay_accepted_moves(const Topology& topo, SplitVector splits,
                                  const std::vector<TraceRow>& trace, double phi0) {
  double phi = phi0;
  for (const TraceRow& row : trace) {
    CHECK(row.phi == doctest::Approx(phi).epsilon(1e-12));
    if (!row.accepted) {
      phi /= 2.0;
      continue;
    }
    int k = topo.flow_index(row.k_star);
    REQUIRE(k >= 0);
    int w_star = -1, w_prime = -1;
    for (int w : topo.flow_paths[size_t(k)]) {
      if (topo.paths[size_t(w)].id == row.w_star) w_star = w;
      if (topo.paths[size_t(w)].id == row.w_prime) w_prime = w;
    }
    REQUIRE(w_star >= 0);
    REQUIRE(w_prime >= 0);
    double shift = std::min(phi, splits[size_t(w_star)]);
    splits[size_t(w_star)] -= shift;
    splits[size_t(w_prime)] += shift;
    double sum = 0.0;
    for (int w : topo.flow_paths[size_t(k)]) sum += splits[size_t(w)];
    for (int w : topo.flow_paths[size_t(k)]) splits[size_t(w)] /= sum;
    sum = 0.0;
    for (int w : topo.flow_paths[size_t(k)]) sum += splits[size_t(w)];
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  return splits;
}

}  // namespace

TEST_CASE("critical queues follow the slack-collision predicate") {
  Fig2 f;
  std::vector<double> lambda = compute_arrival_rates(f.topo, {1.0, 0.5, 0.5});
  // Slacks at the uniform split: q1=2, q2=2, q3=1.5, q4=1, q5=1.
  CHECK(critical_queues(f.topo, lambda, 0.1) == std::set<std::string>{"q5"});
  CHECK(critical_queues(f.topo, lambda, 0.6) == std::set<std::string>{"q3", "q5"});
  CHECK(critical_queues(f.topo, lambda, 1.0) == std::set<std::string>{"q2", "q3", "q5"});

  SUBCASE("single-queue paths contribute no witness") {
    Topology topo = Topology::from_string(R"({
      "queues": [{"id": "q0", "mu_max": 3.0, "service": "M"}],
      "edges": [],
      "flows": [
        {"id": "fa", "ingress": "q0", "egress": "q0", "rate": 1.0, "omega": 1.0},
        {"id": "fb", "ingress": "q0", "egress": "q0", "rate": 1.0, "omega": 1.0}
      ]
    })");
    enumerate_paths(topo);
    std::vector<double> lam = compute_arrival_rates(topo, initial_splits(topo));
    CHECK(critical_queues(topo, lam, 10.0).empty());
  }
}

TEST_CASE("improvement predicate evaluates candidate shifts without side effects") {
  Fig2 f;
  Evaluator eval(f.topo, Engine::AllMarkovian, f.cfg);
  int k = f.topo.flow_index("f2");
  int w_early = f.topo.flow_paths[size_t(k)][0];
  int w_late = f.topo.flow_paths[size_t(k)][1];

  SplitVector splits = {1.0, 0.1, 0.9};
  SplitVector copy = splits;
  // Shifting 0.2 from the late to the early path: 0.14462 -> 0.078444.
  CHECK(does_improve(eval, splits, k, w_late, w_early, 0.2));
  // The opposite shift empties the early path and makes things worse.
  CHECK_FALSE(does_improve(eval, splits, k, w_early, w_late, 0.2));
  // A move onto itself never improves.
  CHECK_FALSE(does_improve(eval, splits, k, w_late, w_late, 0.2));
  CHECK(splits == copy);
}

TEST_CASE("optimizer reaches the hand-verified resting point on the reference topology") {
  Fig2 f;
  for (WPrimeRule rule : {WPrimeRule::LiteralPseudocode, WPrimeRule::MaxMinSlack}) {
    CAPTURE(wprime_rule_name(rule));
    Evaluator eval(f.topo, Engine::AllMarkovian, f.cfg);
    BHConfig bh;
    bh.wprime_rule = rule;
    BHResult res = bh_optimize(eval, initial_splits(f.topo), bh);

    CHECK(res.termination == "phi_min");
    CHECK(res.policy.objective_value == doctest::Approx(0.045894688919227869).epsilon(1e-9));
    int w_late = f.topo.flow_paths[1][1];
    CHECK(res.policy.splits[size_t(w_late)] == doctest::Approx(0.3).epsilon(1e-9));
    CHECK(res.policy.splits[0] == doctest::Approx(1.0));

    // Exactly one accepted move (0.5 -> 0.3), then rejections halve phi out.
    int accepted = 0;
    for (const TraceRow& row : res.trace) accepted += row.accepted ? 1 : 0;
    CHECK(accepted == 1);
    REQUIRE_FALSE(res.trace.empty());
    CHECK(res.trace.front().accepted);
    CHECK(res.trace.front().k_star == "f2");
    CHECK(res.trace.front().w_star == "f2:q2-q4-q5");
    CHECK(res.trace.front().w_prime == "f2:q2-q3-q5");
    CHECK(res.trace.front().objective_before ==
          doctest::Approx(0.051782038371617372).epsilon(1e-9));

    // Replay conservation after every accepted move; endpoints must agree.
    SplitVector replayed =
        replay_accepted_moves(f.topo, initial_splits(f.topo), res.trace, bh.phi0);
    for (size_t w = 0; w < replayed.size(); ++w)
      CHECK(replayed[w] == doctest::Approx(res.policy.splits[w]).epsilon(1e-12));

    // Service rates are pinned at their maxima.
    for (size_t q = 0; q < f.topo.queues.size(); ++q)
      CHECK(res.policy.service_rates[q] == doctest::Approx(f.topo.queues[q].mu_max));
  }
}

TEST_CASE("optimizer is deterministic and respects iteration caps") {
  Fig2 f;
  Evaluator eval(f.topo, Engine::AllMarkovian, f.cfg);
  BHConfig bh;
  BHResult a = bh_optimize(eval, initial_splits(f.topo), bh);
  BHResult b = bh_optimize(eval, initial_splits(f.topo), bh);
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].objective_after == b.trace[i].objective_after);
    CHECK(a.trace[i].accepted == b.trace[i].accepted);
  }
  CHECK(a.policy.splits == b.policy.splits);

  bh.max_iterations = 3;
  BHResult capped = bh_optimize(eval, initial_splits(f.topo), bh);
  CHECK(capped.trace.size() <= 3);
  CHECK(capped.termination == "max_iterations");
}

TEST_CASE("optimizer config validation and degenerate flows") {
  Fig2 f;
  Evaluator eval(f.topo, Engine::AllMarkovian, f.cfg);
  BHConfig bad;
  bad.phi0 = 0.0;
  CHECK_THROWS_AS(bad.validate(), ParseError);
  bad = BHConfig{};
  bad.phi_min = 0.5;  // above phi0
  CHECK_THROWS_AS(bad.validate(), ParseError);

  SUBCASE("single-path topology terminates immediately") {
    Topology topo = Topology::from_file(support::data_file("single_path.topo"));
    enumerate_paths(topo);
    SolverConfig cfg = SolverConfig::defaults_for(topo);
    Evaluator single(topo, Engine::AllMarkovian, cfg);
    BHResult res = bh_optimize(single, initial_splits(topo), BHConfig{});
    CHECK(res.termination == "no_degrees_of_freedom");
    CHECK(res.trace.empty());
    CHECK(res.policy.splits == SplitVector{1.0});
  }
  SUBCASE("unstable initial splits are rejected") {
    std::mt19937_64 rng(5);
    Topology topo = support::random_fork_topology(rng, 2, false, false);
    topo.queues[size_t(topo.queue_index("in"))].mu = topo.flows[0].rate * 0.99;
    SolverConfig cfg = SolverConfig::defaults_for(topo);
    Evaluator ev(topo, Engine::AllMarkovian, cfg);
    CHECK_THROWS_AS(bh_optimize(ev, initial_splits(topo), BHConfig{}), InstabilityError);
  }
}

TEST_CASE("grid search matches the independently computed minimum") {
  Fig2 f;
  Evaluator eval(f.topo, Engine::AllMarkovian, f.cfg);
  Policy best = grid_search(eval, 0.005);
  CHECK(best.objective_value == doctest::Approx(0.045761662909900027).epsilon(1e-9));
  int w_late = f.topo.flow_paths[1][1];
  CHECK(best.splits[size_t(w_late)] == doctest::Approx(0.325).epsilon(1e-9));

  SUBCASE("the optimizer lands within the documented gap of the grid optimum") {
    BHResult res = bh_optimize(eval, initial_splits(f.topo), BHConfig{});
    CHECK(res.policy.objective_value <= best.objective_value + 1e-3);
  }
  SUBCASE("bad resolutions are rejected") {
    CHECK_THROWS_AS(grid_search(eval, 0.0), ParseError);
    CHECK_THROWS_AS(grid_search(eval, 1.5), ParseError);
  }
  SUBCASE("too many degrees of freedom are refused") {
    std::mt19937_64 rng(11);
    Topology topo = support::random_fork_topology(rng, 6, false, false);
    SolverConfig cfg = SolverConfig::defaults_for(topo);
    Evaluator ev(topo, Engine::AllMarkovian, cfg);
    CHECK_THROWS_AS(grid_search(ev, 0.25), InfeasibilityError);
  }
}

TEST_CASE("alpha reconstruction recovers exact transition probabilities") {
  Fig2 f;

  SUBCASE("interior split is exactly determined") {
    SplitVector splits = {1.0, 0.6, 0.4};
    AlphaReconstruction rec = reconstruct_alphas(f.topo, splits);
    CHECK(rec.unknowns == 2);
    CHECK(rec.rank == 2);
    CHECK(rec.free_edges.empty());
    CHECK(rec.reproduction_error <= 1e-12);
    CHECK(rec.alphas.at({"q2", "q3"}) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(rec.alphas.at({"q2", "q4"}) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(rec.alphas.at({"q1", "q3"}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rec.alphas.at({"q3", "q5"}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rec.alphas.at({"q4", "q5"}) == doctest::Approx(1.0).epsilon(1e-12));

    SplitVector round_trip = splits_from_alphas(f.topo, rec.alphas);
    for (size_t w = 0; w < splits.size(); ++w)
      CHECK(round_trip[w] == doctest::Approx(splits[w]).epsilon(1e-12));
  }
  SUBCASE("zero-probability paths zero their branch edges") {
    SplitVector splits = {1.0, 1.0, 0.0};
    AlphaReconstruction rec = reconstruct_alphas(f.topo, splits);
    CHECK(rec.alphas.at({"q2", "q4"}) == doctest::Approx(0.0));
    CHECK(rec.alphas.at({"q2", "q3"}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rec.reproduction_error <= 1e-12);
  }
  SUBCASE("random feasible splits round-trip within 1e-9") {
    std::mt19937_64 rng(17);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      double p = support::urand(rng);
      AlphaReconstruction rec = reconstruct_alphas(f.topo, {1.0, p, 1.0 - p});
      worst = std::max(worst, rec.reproduction_error);
    }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("underdetermined reconstruction reports free directions") {
  // Two junctions in series: s -> (a|b) -> m -> (c|d) -> t gives four paths
  // whose probabilities constrain only products of the two junction choices.
  Topology topo = Topology::from_string(R"({
    "queues": [
      {"id": "s", "mu_max": 10.0, "service": "M"},
      {"id": "a", "mu_max": 10.0, "service": "M"},
      {"id": "b", "mu_max": 10.0, "service": "M"},
      {"id": "m", "mu_max": 10.0, "service": "M"},
      {"id": "c", "mu_max": 10.0, "service": "M"},
      {"id": "d", "mu_max": 10.0, "service": "M"},
      {"id": "t", "mu_max": 10.0, "service": "M"}
    ],
    "edges": [
      {"from": "s", "to": "a"}, {"from": "s", "to": "b"},
      {"from": "a", "to": "m"}, {"from": "b", "to": "m"},
      {"from": "m", "to": "c"}, {"from": "m", "to": "d"},
      {"from": "c", "to": "t"}, {"from": "d", "to": "t"}
    ],
    "flows": [{"id": "f", "ingress": "s", "egress": "t", "rate": 1.0, "omega": 5.0}]
  })");
  enumerate_paths(topo);
  REQUIRE(topo.paths.size() == 4);

  SUBCASE("factorizable splits stay consistent despite the free direction") {
    // p(x,y) = P(branch x) * P(branch y): signatures are ordered
    // s-a-m-c-t, s-a-m-d-t, s-b-m-c-t, s-b-m-d-t.
    SplitVector splits = {0.3 * 0.6, 0.3 * 0.4, 0.7 * 0.6, 0.7 * 0.4};
    AlphaReconstruction rec = reconstruct_alphas(topo, splits);
    CHECK(rec.unknowns == 4);
    CHECK(rec.rank == 3);
    CHECK(rec.free_edges.size() == 1);
    CHECK(rec.reproduction_error <= 1e-9);
    SplitVector round_trip = splits_from_alphas(topo, rec.alphas);
    for (size_t w = 0; w < splits.size(); ++w)
      CHECK(round_trip[w] == doctest::Approx(splits[w]).epsilon(1e-9));
  }
  SUBCASE("non-factorizable splits are flagged by the reproduction error") {
    SplitVector splits = {0.3, 0.2, 0.2, 0.3};
    AlphaReconstruction rec = reconstruct_alphas(topo, splits);
    CHECK(rec.rank == 3);
    CHECK(rec.reproduction_error > 1e-6);  // no product form reproduces these
  }
}

TEST_CASE("optimizer invariants hold on randomized topologies") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 8; ++trial) {
    CAPTURE(trial);
    int branches = 2 + int(rng() % 2);
    bool second = (rng() % 2) == 0;
    Topology topo = support::random_fork_topology(rng, branches, second, false, 0.85);
    SolverConfig cfg = SolverConfig::defaults_for(topo);
    Evaluator eval(topo, Engine::Declared, cfg);
    BHConfig bh;
    bh.max_iterations = 400;
    BHResult res = bh_optimize(eval, initial_splits(topo), bh);

    CHECK((res.termination == "phi_min" || res.termination == "max_iterations" ||
           res.termination == "no_degrees_of_freedom"));
    CHECK(res.trace.size() <= 400);

    double initial_obj = eval.objective(initial_splits(topo));
    CHECK(res.policy.objective_value <= initial_obj + 1e-12);

    double last_accepted = std::numeric_limits<double>::infinity();
    for (const TraceRow& row : res.trace) {
      if (!row.accepted) continue;
      CHECK(row.objective_after < row.objective_before - 1e-12);
      CHECK(row.objective_after < last_accepted);
      last_accepted = row.objective_after;
    }

    for (size_t k = 0; k < topo.flows.size(); ++k) {
      double sum = 0.0;
      for (int w : topo.flow_paths[k]) {
        double p = res.policy.splits[size_t(w)];
        CHECK(p >= -1e-15);
        CHECK(p <= 1.0 + 1e-15);
        sum += p;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }

    SplitVector replayed = replay_accepted_moves(topo, initial_splits(topo), res.trace, bh.phi0);
    for (size_t w = 0; w < replayed.size(); ++w)
      CHECK(replayed[w] == doctest::Approx(res.policy.splits[w]).epsilon(1e-10));

    // Reconstruction on the final policy stays consistent with its splits.
    SplitVector round_trip = splits_from_alphas(topo, res.reconstruction.alphas);
    for (size_t w = 0; w < round_trip.size(); ++w)
      CHECK(round_trip[w] == doctest::Approx(res.policy.splits[w]).epsilon(1e-9));
  }
}
