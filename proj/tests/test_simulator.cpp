#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "roadq/errors.hpp"
#include "roadq/model.hpp"
#include "roadq/simulator.hpp"
#include "roadq/traveltime.hpp"
#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace roadq;

namespace {

void check_little(const Topology& topo, const SimResult& res, double tol = 0.03) {
  for (size_t q = 0; q < topo.queues.size(); ++q) {
    const QueueStats& st = res.queue_stats[q];
    if (st.arrivals == 0) continue;
    double occupancy = st.mean_occupancy(res.end_time);
    double rhs = double(st.arrivals) / res.end_time * st.mean_sojourn();
    INFO("queue ", topo.queues[q].id);
    CHECK(std::abs(occupancy - rhs) / std::max(occupancy, 1e-12) <= tol);
  }
}

}  // namespace

TEST_CASE("single markovian queue reproduces textbook statistics") {
  Topology topo = Topology::from_file(support::data_file("single_queue.topo"));
  enumerate_paths(topo);
  SimConfig cfg;
  cfg.n_vehicles = 100000;
  cfg.seed = 1;
  SimResult res = simulate(topo, {1.0}, Engine::AllMarkovian, cfg);

  REQUIRE(res.path_samples[0].size() >= 80000);
  double mean = 0.0;
  for (double s : res.path_samples[0]) mean += s;
  mean /= double(res.path_samples[0].size());
  CHECK(std::abs(mean - 1.0) <= 0.02);  // 1/(mu - lambda) = 1

  CHECK(std::abs(res.queue_stats[0].utilization(res.end_time) - 0.5) <= 0.02);
  check_little(topo, res);

  SolverConfig scfg = SolverConfig::defaults_for(topo);
  Evaluator eval(topo, Engine::AllMarkovian, scfg);
  double ks = ks_distance(res.path_samples[0], *eval.path_dist(0, {1.0}));
  CHECK(ks <= 0.02);

  double exact = std::exp(-5.0);  // P(Exp(1) > 5)
  CHECK(std::abs(res.empirical_delta_flow[0] - exact) <= 0.005);
}

TEST_CASE("single deterministic-service queue matches the waiting-time series") {
  Topology topo = Topology::from_file(support::data_file("single_queue.topo"));
  enumerate_paths(topo);
  SimConfig cfg;
  cfg.n_vehicles = 100000;
  cfg.seed = 2;
  SimResult res = simulate(topo, {1.0}, Engine::AllDeterministic, cfg);

  SolverConfig scfg = SolverConfig::defaults_for(topo);
  Evaluator eval(topo, Engine::AllDeterministic, scfg);
  double ks = ks_distance(res.path_samples[0], *eval.path_dist(0, {1.0}));
  CHECK(ks <= 0.02);

  double mean = 0.0;
  for (double s : res.path_samples[0]) mean += s;
  mean /= double(res.path_samples[0].size());
  CHECK(std::abs(mean - md1_mean_sojourn(1.0, 2.0)) / md1_mean_sojourn(1.0, 2.0) <= 0.03);
  // No sojourn can beat the deterministic service time.
  double lo = *std::min_element(res.path_samples[0].begin(), res.path_samples[0].end());
  CHECK(lo >= 0.5 - 1e-12);
  check_little(topo, res);
}

TEST_CASE("network simulation honors splits, warmup, and Little's law") {
  Topology topo = Topology::from_file(support::data_file("fig2.topo"));
  enumerate_paths(topo);
  SplitVector splits = {1.0, 0.6, 0.4};
  SimConfig cfg;
  cfg.n_vehicles = 50000;
  cfg.seed = 3;
  SimResult res = simulate(topo, splits, Engine::AllMarkovian, cfg);

  // Retention: n - floor(n * warmup) per flow.
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    CHECK(res.retained_per_flow[k] == 50000 - 5000);
    CHECK(res.flow_samples[k].size() == size_t(res.retained_per_flow[k]));
  }

  // Path shares within 3 sigma of the assigned probabilities.
  std::vector<std::int64_t> counts(topo.paths.size(), 0);
  std::vector<std::int64_t> flow_counts(topo.flows.size(), 0);
  for (const VehicleRecord& r : res.vehicles) {
    ++counts[size_t(r.path_index)];
    ++flow_counts[size_t(r.flow_index)];
  }
  for (size_t w = 0; w < topo.paths.size(); ++w) {
    double p = splits[w];
    double n = double(flow_counts[size_t(topo.paths[w].flow_index)]);
    double share = double(counts[w]) / n;
    CHECK(std::abs(share - p) <= 3.0 * std::sqrt(p * (1.0 - p) / n) + 1e-12);
  }

  check_little(topo, res);

  // Empirical exceedance within the documented band of the analytical value.
  SolverConfig scfg = SolverConfig::defaults_for(topo);
  Evaluator eval(topo, Engine::AllMarkovian, scfg);
  FlowEvaluation ana = eval.evaluate(splits);
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    INFO("flow ", topo.flows[k].id);
    CHECK(std::abs(res.empirical_delta_flow[k] - ana.delta_flows[k]) <= 0.02);
  }

  // Vehicle records are complete and ordered by entry.
  REQUIRE(res.vehicles.size() == 100000);
  for (size_t i = 1; i < res.vehicles.size(); ++i) {
    CHECK(res.vehicles[i].entry_time >= res.vehicles[i - 1].entry_time);
    CHECK(res.vehicles[i].vehicle_id == std::int64_t(i));
  }
  for (const VehicleRecord& r : res.vehicles) CHECK(r.exit_time > r.entry_time);
}

TEST_CASE("degenerate split sends every vehicle down one path") {
  Topology topo = Topology::from_file(support::data_file("fig2.topo"));
  enumerate_paths(topo);
  SimConfig cfg;
  cfg.n_vehicles = 5000;
  cfg.seed = 4;
  SimResult res = simulate(topo, {1.0, 1.0, 0.0}, Engine::AllMarkovian, cfg);
  CHECK(res.path_samples[size_t(topo.flow_paths[1][1])].empty());
  CHECK(std::isnan(res.empirical_delta_path[size_t(topo.flow_paths[1][1])]));
  CHECK(res.path_samples[size_t(topo.flow_paths[1][0])].size() > 0);
}

TEST_CASE("occupancy cap aborts diverging systems with a named queue") {
  Topology topo = Topology::from_string(R"({
    "queues": [{"id": "jam", "mu_max": 0.8, "service": "M"}],
    "edges": [],
    "flows": [{"id": "f", "ingress": "jam", "egress": "jam", "rate": 1.0, "omega": 1.0}]
  })");
  enumerate_paths(topo);
  SimConfig cfg;
  cfg.n_vehicles = 20000;
  cfg.seed = 5;
  cfg.occupancy_cap = 500;
  try {
    simulate(topo, {1.0}, Engine::AllMarkovian, cfg);
    FAIL("expected InstabilityError");
  } catch (const InstabilityError& e) {
    CHECK(std::string(e.what()).find("jam") != std::string::npos);
  }
}

TEST_CASE("simulation is reproducible per seed and sensitive to it") {
  Topology topo = Topology::from_file(support::data_file("fig2.topo"));
  enumerate_paths(topo);
  SimConfig cfg;
  cfg.n_vehicles = 3000;
  cfg.seed = 6;
  SimResult a = simulate(topo, {1.0, 0.5, 0.5}, Engine::AllMarkovian, cfg);
  SimResult b = simulate(topo, {1.0, 0.5, 0.5}, Engine::AllMarkovian, cfg);
  REQUIRE(a.vehicles.size() == b.vehicles.size());
  for (size_t i = 0; i < a.vehicles.size(); ++i) {
    CHECK(a.vehicles[i].entry_time == b.vehicles[i].entry_time);
    CHECK(a.vehicles[i].exit_time == b.vehicles[i].exit_time);
    CHECK(a.vehicles[i].path_index == b.vehicles[i].path_index);
  }
  cfg.seed = 7;
  SimResult c = simulate(topo, {1.0, 0.5, 0.5}, Engine::AllMarkovian, cfg);
  bool differs = false;
  for (size_t i = 0; i < std::min(a.vehicles.size(), c.vehicles.size()); ++i) {
    if (a.vehicles[i].exit_time != c.vehicles[i].exit_time) {
      differs = true;
      break;
    }
  }
  CHECK(differs);
}

TEST_CASE("warmup discards the earliest-exiting fraction") {
  Topology topo = Topology::from_file(support::data_file("single_queue.topo"));
  enumerate_paths(topo);
  SimConfig cfg;
  cfg.n_vehicles = 10000;
  cfg.seed = 8;
  cfg.warmup_fraction = 0.0;
  SimResult all = simulate(topo, {1.0}, Engine::AllMarkovian, cfg);
  CHECK(all.retained_per_flow[0] == 10000);

  cfg.warmup_fraction = 0.2;
  SimResult trimmed = simulate(topo, {1.0}, Engine::AllMarkovian, cfg);
  CHECK(trimmed.retained_per_flow[0] == 8000);
  CHECK(trimmed.vehicles.size() == 10000);  // records keep every vehicle

  // Same seed, so the two runs produce identical vehicles. The retained
  // sojourns must be exactly the full set minus the 2000 earliest exits.
  std::vector<VehicleRecord> by_exit = all.vehicles;
  std::sort(by_exit.begin(), by_exit.end(),
            [](const VehicleRecord& a, const VehicleRecord& b) {
              if (a.exit_time != b.exit_time) return a.exit_time < b.exit_time;
              return a.vehicle_id < b.vehicle_id;
            });
  std::vector<double> expected;
  for (size_t i = 2000; i < by_exit.size(); ++i)
    expected.push_back(by_exit[i].exit_time - by_exit[i].entry_time);
  std::vector<double> got = trimmed.flow_samples[0];
  std::sort(expected.begin(), expected.end());
  std::sort(got.begin(), got.end());
  REQUIRE(got.size() == expected.size());
  CHECK(got == expected);

  cfg.warmup_fraction = 0.6;
  CHECK_THROWS_AS(cfg.validate(), ParseError);
}

TEST_CASE("batch arrivals preserve throughput accounting") {
  Topology topo = Topology::from_file(support::data_file("single_queue.topo"));
  enumerate_paths(topo);
  SimConfig cfg;
  cfg.n_vehicles = 40000;
  cfg.seed = 9;
  cfg.batch.kind = BatchConfig::Kind::Geometric;
  cfg.batch.mean = 2.0;
  SimResult res = simulate(topo, {1.0}, Engine::AllMarkovian, cfg);
  CHECK(res.queue_stats[0].arrivals == 40000);
  // Little's law is distribution-free and must survive batching.
  check_little(topo, res);
  // Utilization still approaches lambda/mu = 0.5.
  CHECK(std::abs(res.queue_stats[0].utilization(res.end_time) - 0.5) <= 0.03);

  cfg.batch.kind = BatchConfig::Kind::Constant;
  cfg.batch.mean = 3.0;
  SimResult constant = simulate(topo, {1.0}, Engine::AllMarkovian, cfg);
  CHECK(constant.queue_stats[0].arrivals == 40000);
  check_little(topo, constant);

  cfg.batch.mean = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ParseError);
}

TEST_CASE("ks distance against exact and banded references") {
  SolverConfig cfg;
  cfg.step = 0.0025;
  cfg.horizon = 40.0;

  SUBCASE("inverse-CDF lattice samples sit at the discretization floor") {
    // Exp(1) samples placed exactly at quantiles (i+1/2)/n.
    std::vector<double> samples;
    int n = 2000;
    for (int i = 0; i < n; ++i)
      samples.push_back(-std::log(1.0 - (double(i) + 0.5) / double(n)));
    TravelTimeDistribution d =
        TravelTimeDistribution::closed_form({{1.0, 0, -1.0}}, 1.0);
    CHECK(ks_distance(samples, d) <= 1.0 / double(n));
  }
  SUBCASE("ties are handled as a single jump") {
    std::vector<double> samples(1500, 1.0);
    TravelTimeDistribution d =
        TravelTimeDistribution::closed_form({{1.0, 0, -1.0}}, 1.0);
    double expected = 1.0 - std::exp(-1.0);  // F(1) vs the full jump at 1
    CHECK(ks_distance(samples, d) == doctest::Approx(expected).epsilon(1e-9));
  }
  SUBCASE("too few samples are rejected") {
    std::vector<double> samples(999, 1.0);
    TravelTimeDistribution d =
        TravelTimeDistribution::closed_form({{1.0, 0, -1.0}}, 1.0);
    CHECK_THROWS_AS(ks_distance(samples, d), ParseError);
  }
  SUBCASE("banded comparison against a convolution grid") {
    // Reference: two-queue Markovian path with slack rates 2 and 1.
    std::vector<QueuePoint> path = {{1.0, 3.0, ServiceModel::Markovian},
                                    {2.0, 3.0, ServiceModel::Markovian}};
    TravelTimeDistribution grid = path_distribution_gridded(path, cfg);
    REQUIRE_FALSE(grid.has_exact_cdf());
    std::mt19937_64 rng(42);
    std::vector<double> samples;
    for (int i = 0; i < 5000; ++i) {
      double u1 = support::urand(rng), u2 = support::urand(rng);
      samples.push_back(-std::log(u1) / 2.0 - std::log(u2) / 1.0);
    }
    double ks = ks_distance(samples, grid);
    CHECK(ks <= 0.03);  // ~0.01 statistical noise at n=5000
  }
}
