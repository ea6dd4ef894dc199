#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "roadq/model.hpp"
#include "roadq/traveltime.hpp"

namespace roadq {

// Vehicles per arrival epoch. Constant 1 reproduces plain Poisson arrivals;
// geometric batches are exploratory (no analytical counterpart).
struct BatchConfig {
  enum class Kind { Constant, Geometric };
  Kind kind = Kind::Constant;
  double mean = 1.0;  // batch size for Constant (rounded), mean for Geometric
};

struct SimConfig {
  std::int64_t n_vehicles = 100000;  // per flow
  std::uint64_t seed = 1;
  double warmup_fraction = 0.1;      // earliest-exiting fraction discarded per flow
  double occupancy_cap = 1e6;        // abort when any queue's backlog exceeds this
  BatchConfig batch;

  void validate() const;  // throws ParseError
};

struct QueueStats {
  std::int64_t arrivals = 0;
  double busy_time = 0.0;
  double occupancy_integral = 0.0;  // integral of backlog over [0, end_time]
  double sojourn_sum = 0.0;         // summed (departure - arrival) over visits

  double utilization(double end_time) const { return end_time > 0 ? busy_time / end_time : 0.0; }
  double mean_occupancy(double end_time) const {
    return end_time > 0 ? occupancy_integral / end_time : 0.0;
  }
  double mean_sojourn() const { return arrivals > 0 ? sojourn_sum / double(arrivals) : 0.0; }
};

struct VehicleRecord {
  std::int64_t vehicle_id = 0;
  int flow_index = -1;
  int path_index = -1;  // into Topology::paths
  double entry_time = 0.0;
  double exit_time = 0.0;
};

struct SimResult {
  std::vector<VehicleRecord> vehicles;  // ordered by vehicle_id (= entry order)

  // Travel-time samples retained after warmup.
  std::vector<std::vector<double>> path_samples;  // aligned with Topology::paths
  std::vector<std::vector<double>> flow_samples;  // aligned with Topology::flows

  // Fraction of retained samples exceeding the owning flow's omega.
  // NaN for paths with no retained samples.
  std::vector<double> empirical_delta_path;
  std::vector<double> empirical_delta_flow;

  std::vector<QueueStats> queue_stats;  // aligned with Topology::queues
  double end_time = 0.0;                // time of the last departure
  std::vector<std::int64_t> retained_per_flow;
};

// Event-driven run: per-flow Poisson arrivals, full path drawn per vehicle at
// entry, FIFO single-server queues with exponential or constant service. All
// randomness is pre-drawn per vehicle, so results are bit-identical for a
// given (topology, splits, engine, config) regardless of event interleaving.
// Throws InstabilityError when a queue's backlog exceeds config.occupancy_cap.
SimResult simulate(const Topology& topo, const SplitVector& splits, Engine engine,
                   const SimConfig& config);

// Two-sided Kolmogorov-Smirnov statistic between an empirical sample and a
// reference distribution, tie-aware. Uses the reference's exact evaluator
// when it carries one; plain gridded references are compared against the band
// of CDF values one grid cell wide (interpolation slack, see README).
// Requires at least 1000 samples.
double ks_distance(std::vector<double> samples, const TravelTimeDistribution& ref);

}  // namespace roadq
