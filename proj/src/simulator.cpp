#include "roadq/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <queue>
#include <random>
#include <sstream>

namespace roadq {

void SimConfig::validate() const {
  if (n_vehicles < 1) throw ParseError("n_vehicles must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 0.5))
    throw ParseError("warmup_fraction must lie in [0, 0.5]");
  if (!(occupancy_cap >= 1.0)) throw ParseError("occupancy_cap must be at least 1");
  if (!(batch.mean >= 1.0)) throw ParseError("batch mean must be at least 1");
}

namespace {

// Uniform in [0, 1) with 53 random bits; paired with -log1p(-u) this gives a
// platform-stable exponential draw (std::exponential_distribution is not
// specified bit-for-bit across library implementations).
double uniform01(std::mt19937_64& rng) {
  return double(rng() >> 11) * 0x1.0p-53;
}

double exponential(std::mt19937_64& rng, double rate) {
  return -std::log1p(-uniform01(rng)) / rate;
}

ServiceModel resolve_service(const Topology& topo, Engine engine, int queue_index) {
  switch (engine) {
    case Engine::AllMarkovian: return ServiceModel::Markovian;
    case Engine::AllDeterministic: return ServiceModel::Deterministic;
    default: return topo.queues[size_t(queue_index)].service;
  }
}

struct Vehicle {
  double entry = 0.0;
  int flow = -1;
  std::int64_t seq = 0;  // draw order within the flow
  int path = -1;
  std::vector<double> services;  // one per queue on the path
  double queue_entry = 0.0;      // entry time into the current queue
  double exit = 0.0;
};

struct Event {
  double time = 0.0;
  std::int64_t order = 0;  // FEL insertion sequence, breaks time ties
  bool departure = false;
  std::int64_t vehicle = -1;
  int queue = -1;
  int leg = -1;
};

struct EventAfter {
  bool operator()(const Event& a, const Event& b) const {
    if (a.time != b.time) return a.time > b.time;
    return a.order > b.order;
  }
};

struct QueueState {
  std::deque<std::pair<std::int64_t, int>> occupants;  // (vehicle, leg); front is in service
  double last_update = 0.0;
};

}  // namespace

SimResult simulate(const Topology& topo, const SplitVector& splits, Engine engine,
                   const SimConfig& config) {
  config.validate();
  if (!topo.paths_enumerated()) throw ParseError("paths not enumerated yet");
  if (splits.size() != topo.paths.size()) throw ParseError("split vector size mismatch");
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    double sum = 0.0;
    for (int w : topo.flow_paths[k]) sum += splits[size_t(w)];
    if (std::abs(sum - 1.0) > 1e-9)
      throw ParseError("flow '" + topo.flows[k].id + "': split probabilities must sum to 1");
  }

  // ---- pre-draw every random quantity, flow by flow, vehicle by vehicle ----
  std::mt19937_64 rng(config.seed);
  std::vector<Vehicle> vehicles;
  vehicles.reserve(size_t(config.n_vehicles) * topo.flows.size());

  for (size_t k = 0; k < topo.flows.size(); ++k) {
    const Flow& flow = topo.flows[k];
    const std::vector<int>& wp = topo.flow_paths[k];

    // With batches of mean size m, epochs arrive at rate Lambda/m so the
    // vehicle rate stays Lambda.
    double mean_batch = config.batch.mean;
    double epoch_rate = flow.rate / mean_batch;

    double t = 0.0;
    std::int64_t produced = 0;
    while (produced < config.n_vehicles) {
      t += exponential(rng, epoch_rate);
      std::int64_t batch = 1;
      if (config.batch.kind == BatchConfig::Kind::Constant) {
        batch = std::max<std::int64_t>(1, std::llround(mean_batch));
      } else {
        double u = uniform01(rng);
        batch = (mean_batch <= 1.0)
                    ? 1
                    : 1 + std::int64_t(std::log1p(-u) / std::log1p(-1.0 / mean_batch));
      }
      batch = std::min(batch, config.n_vehicles - produced);
      for (std::int64_t b = 0; b < batch; ++b) {
        Vehicle v;
        v.entry = t;
        v.flow = int(k);
        v.seq = produced++;
        double u = uniform01(rng);
        double cum = 0.0;
        v.path = wp.back();
        for (int w : wp) {
          cum += splits[size_t(w)];
          if (u < cum) {
            v.path = w;
            break;
          }
        }
        const std::vector<int>& qs = topo.paths[size_t(v.path)].queues;
        v.services.reserve(qs.size());
        for (int q : qs) {
          double mu = topo.queues[size_t(q)].mu;
          v.services.push_back(resolve_service(topo, engine, q) == ServiceModel::Markovian
                                   ? exponential(rng, mu)
                                   : 1.0 / mu);
        }
        vehicles.push_back(std::move(v));
      }
    }
  }

  std::stable_sort(vehicles.begin(), vehicles.end(), [](const Vehicle& a, const Vehicle& b) {
    if (a.entry != b.entry) return a.entry < b.entry;
    if (a.flow != b.flow) return a.flow < b.flow;
    return a.seq < b.seq;
  });

  // ---- event loop ----
  SimResult res;
  res.queue_stats.assign(topo.queues.size(), QueueStats{});
  std::vector<QueueState> state(topo.queues.size());

  std::priority_queue<Event, std::vector<Event>, EventAfter> fel;
  std::int64_t order = 0;
  for (size_t v = 0; v < vehicles.size(); ++v) {
    Event e;
    e.time = vehicles[v].entry;
    e.order = order++;
    e.departure = false;
    e.vehicle = std::int64_t(v);
    e.queue = topo.paths[size_t(vehicles[v].path)].queues[0];
    e.leg = 0;
    fel.push(e);
  }

  double now = 0.0;
  auto advance = [&](int q, double t) {
    QueueState& st = state[size_t(q)];
    double dt = t - st.last_update;
    if (dt > 0.0) {
      double n = double(st.occupants.size());
      res.queue_stats[size_t(q)].occupancy_integral += n * dt;
      if (n > 0.0) res.queue_stats[size_t(q)].busy_time += dt;
      st.last_update = t;
    } else {
      st.last_update = std::max(st.last_update, t);
    }
  };

  auto start_service = [&](int q, double t) {
    auto [vi, leg] = state[size_t(q)].occupants.front();
    Event e;
    e.time = t + vehicles[size_t(vi)].services[size_t(leg)];
    e.order = order++;
    e.departure = true;
    e.vehicle = vi;
    e.queue = q;
    e.leg = leg;
    fel.push(e);
  };

  auto arrive = [&](std::int64_t vi, int q, int leg, double t) {
    advance(q, t);
    QueueState& st = state[size_t(q)];
    res.queue_stats[size_t(q)].arrivals += 1;
    vehicles[size_t(vi)].queue_entry = t;
    st.occupants.push_back({vi, leg});
    if (double(st.occupants.size()) > config.occupancy_cap) {
      std::ostringstream msg;
      msg << "queue '" << topo.queues[size_t(q)].id << "' backlog exceeded the occupancy cap ("
          << config.occupancy_cap << " vehicles); the operating point appears unstable";
      throw InstabilityError(msg.str());
    }
    if (st.occupants.size() == 1) start_service(q, t);
  };

  while (!fel.empty()) {
    Event e = fel.top();
    fel.pop();
    now = e.time;
    if (!e.departure) {
      arrive(e.vehicle, e.queue, e.leg, now);
      continue;
    }
    advance(e.queue, now);
    QueueState& st = state[size_t(e.queue)];
    auto [vi, leg] = st.occupants.front();
    st.occupants.pop_front();
    Vehicle& veh = vehicles[size_t(vi)];
    res.queue_stats[size_t(e.queue)].sojourn_sum += now - veh.queue_entry;
    if (!st.occupants.empty()) start_service(e.queue, now);

    const std::vector<int>& qs = topo.paths[size_t(veh.path)].queues;
    if (size_t(leg) + 1 < qs.size()) {
      arrive(vi, qs[size_t(leg) + 1], leg + 1, now);
    } else {
      veh.exit = now;
    }
  }
  res.end_time = now;
  for (size_t q = 0; q < topo.queues.size(); ++q) advance(int(q), res.end_time);

  // ---- records and post-warmup samples ----
  res.vehicles.reserve(vehicles.size());
  for (size_t v = 0; v < vehicles.size(); ++v) {
    VehicleRecord r;
    r.vehicle_id = std::int64_t(v);
    r.flow_index = vehicles[v].flow;
    r.path_index = vehicles[v].path;
    r.entry_time = vehicles[v].entry;
    r.exit_time = vehicles[v].exit;
    res.vehicles.push_back(r);
  }

  res.path_samples.assign(topo.paths.size(), {});
  res.flow_samples.assign(topo.flows.size(), {});
  res.retained_per_flow.assign(topo.flows.size(), 0);

  for (size_t k = 0; k < topo.flows.size(); ++k) {
    std::vector<const VehicleRecord*> exited;
    for (const VehicleRecord& r : res.vehicles) {
      if (r.flow_index == int(k)) exited.push_back(&r);
    }
    std::sort(exited.begin(), exited.end(), [](const VehicleRecord* a, const VehicleRecord* b) {
      if (a->exit_time != b->exit_time) return a->exit_time < b->exit_time;
      return a->vehicle_id < b->vehicle_id;
    });
    size_t drop = size_t(double(exited.size()) * config.warmup_fraction);
    for (size_t i = drop; i < exited.size(); ++i) {
      double tt = exited[i]->exit_time - exited[i]->entry_time;
      res.flow_samples[k].push_back(tt);
      res.path_samples[size_t(exited[i]->path_index)].push_back(tt);
    }
    res.retained_per_flow[k] = std::int64_t(exited.size() - drop);
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  res.empirical_delta_path.assign(topo.paths.size(), nan);
  res.empirical_delta_flow.assign(topo.flows.size(), nan);
  for (size_t w = 0; w < topo.paths.size(); ++w) {
    const std::vector<double>& s = res.path_samples[w];
    if (s.empty()) continue;
    double omega = topo.flows[size_t(topo.paths[w].flow_index)].omega;
    std::int64_t exceed = 0;
    for (double tt : s) {
      if (tt > omega) ++exceed;
    }
    res.empirical_delta_path[w] = double(exceed) / double(s.size());
  }
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    const std::vector<double>& s = res.flow_samples[k];
    if (s.empty()) continue;
    std::int64_t exceed = 0;
    for (double tt : s) {
      if (tt > topo.flows[k].omega) ++exceed;
    }
    res.empirical_delta_flow[k] = double(exceed) / double(s.size());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Kolmogorov-Smirnov distance
// ---------------------------------------------------------------------------

double ks_distance(std::vector<double> samples, const TravelTimeDistribution& ref) {
  if (samples.size() < 1000)
    throw ParseError("KS distance needs at least 1000 samples, got " +
                     std::to_string(samples.size()));
  std::sort(samples.begin(), samples.end());
  const double n = double(samples.size());

  const bool exact = ref.kind() == TravelTimeDistribution::Kind::ClosedForm || ref.has_exact_cdf();
  auto ref_cdf = [&](double t) {
    t = std::max(0.0, t);
    if (ref.kind() == TravelTimeDistribution::Kind::ClosedForm) return ref.cdf(t);
    if (ref.has_exact_cdf()) return ref.exact_cdf(t);
    return ref.cdf(std::min(t, ref.horizon()));
  };

  double d = 0.0;
  size_t i = 0;
  while (i < samples.size()) {
    size_t j = i;
    while (j < samples.size() && samples[j] == samples[i]) ++j;
    double pre = double(i) / n;
    double post = double(j) / n;
    double x = samples[i];
    if (exact) {
      double f = ref_cdf(x);
      // The reference may carry an atom exactly at x (deterministic service
      // puts mass 1-rho on the no-wait sojourn); just below x the supremum
      // compares the empirical CDF against the left limit, not the jump.
      double f_left =
          ref_cdf(std::nextafter(x, -std::numeric_limits<double>::infinity()));
      d = std::max({d, f_left - pre, post - f});
    } else {
      // Plain grids carry linear-interpolation slack: credit the empirical
      // CDF with the best value inside a one-cell band around x.
      double lo = ref_cdf(x - ref.step());
      double hi = ref_cdf(x + ref.step());
      d = std::max({d, lo - pre, post - hi, 0.0});
    }
    i = j;
  }
  return d;
}

}  // namespace roadq
