#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "roadq/model.hpp"

namespace roadq {

// Which service model to use when evaluating distributions: the one declared
// per queue in the topology, or a uniform override.
enum class Engine { Declared, AllMarkovian, AllDeterministic };

Engine engine_from_string(const std::string& name);  // "declared" | "mm1" | "md1"
const char* engine_name(Engine engine);

// Numerical parameters for gridded distributions.
struct SolverConfig {
  double step = 0.0;        // grid resolution (time units)
  double horizon = 0.0;     // truncation time T_max
  double tail_tol = 1e-4;   // max probability mass allowed beyond the horizon
  int md1_series_terms = 200;

  // step = min_k omega/2000, horizon = 10 * max_k omega, defaults elsewhere.
  static SolverConfig defaults_for(const Topology& topo);
  // step > 0, horizon >= 4 * max omega, tail_tol in (0, 0.01]. Throws ParseError.
  void validate_for(const Topology& topo) const;
};

// Travel-time distribution of a queue or a path: either an exact closed form
// (complement expressed as a sum of A * t^n * exp(tau*t) terms) or a uniform
// CDF grid.
class TravelTimeDistribution {
 public:
  enum class Kind { ClosedForm, Gridded };

  struct Term {
    double A = 0.0;
    int n = 0;        // nonnegative integer power of t
    double tau = 0.0; // decay rate in the exponent, < 0
  };

  static TravelTimeDistribution closed_form(std::vector<Term> terms, double mean);
  // `cdf` holds samples F(j*step), j = 0..J. Throws InfeasibilityError when
  // the final sample is below 1 - tail_tol (horizon too short).
  static TravelTimeDistribution gridded(std::vector<double> cdf, double step, double tail_tol,
                                        std::function<double(double)> exact_cdf = nullptr);

  Kind kind() const { return kind_; }
  double cdf(double t) const;         // gridded kind interpolates linearly
  double complement(double t) const;  // 1 - F(t), evaluated directly for closed forms
  double mean() const { return mean_; }
  double horizon() const { return horizon_; }  // +inf for closed forms
  double step() const { return step_; }        // 0 for closed forms

  const std::vector<Term>& terms() const { return terms_; }
  const std::vector<double>& grid() const { return grid_; }

  // Exact point evaluator carried by single-queue gridded distributions;
  // used where interpolation slack would be dishonest (goodness-of-fit).
  bool has_exact_cdf() const { return static_cast<bool>(exact_); }
  double exact_cdf(double t) const { return exact_(t); }

 private:
  Kind kind_ = Kind::ClosedForm;
  std::vector<Term> terms_;
  std::vector<double> grid_;
  double step_ = 0.0;
  double horizon_ = std::numeric_limits<double>::infinity();
  double mean_ = 0.0;
  std::function<double(double)> exact_;
};

// Exceedance probability P(T > t_hat). For gridded distributions t_hat must
// not exceed the horizon; the error says to enlarge it.
double delta_path(const TravelTimeDistribution& dist, double t_hat);

// ---- scalar oracles for single queues ----

// Sojourn CDF of a Markovian queue: 1 - exp(-(mu-lambda) t).
double mm1_sojourn_cdf(double lambda, double mu, double t);
double mm1_mean_sojourn(double lambda, double mu);

// Exact waiting-time CDF of a deterministic-service queue with Poisson
// arrivals (finite alternating series, log-domain terms, Kahan summation).
double md1_wait_cdf(double lambda, double mu, double t, int max_terms = 200);
// Sojourn = waiting + constant service 1/mu.
double md1_sojourn_cdf(double lambda, double mu, double t, int max_terms = 200);
// Pollaczek-Khinchine mean sojourn: D + lambda D^2 / (2 (1-rho)), D = 1/mu.
double md1_mean_sojourn(double lambda, double mu);

// Complement terms of a sum of independent exponentials with the given rates.
// Repeated rates are grouped (relative gap < 1e-8) and handled exactly via
// partial fractions with polynomial factors. Returns an empty vector when the
// construction fails its own validation (caller falls back to the grid).
std::vector<TravelTimeDistribution::Term> hypoexp_complement_terms(std::vector<double> rates);

// Operating point of one queue.
struct QueuePoint {
  double lambda = 0.0;
  double mu = 0.0;
  ServiceModel service = ServiceModel::Markovian;
};

// Steady-state sojourn-time distribution of one queue.
// Markovian -> exact exponential closed form; deterministic -> gridded exact CDF.
// Throws InstabilityError when lambda >= mu.
TravelTimeDistribution sojourn_distribution(const QueuePoint& q, const SolverConfig& cfg);

// Distribution of the sum of independent per-queue sojourn times.
// All-Markovian paths get the exact closed form; any deterministic member (or
// a failed closed-form construction) triggers gridded convolution.
TravelTimeDistribution path_distribution(const std::vector<QueuePoint>& queues,
                                         const SolverConfig& cfg);

// The convolution pathway unconditionally (even where a closed form exists);
// exposed so closed form and grid can be cross-validated against each other.
TravelTimeDistribution path_distribution_gridded(const std::vector<QueuePoint>& queues,
                                                 const SolverConfig& cfg);

// Per-path and per-flow exceedance values at one operating point.
struct FlowEvaluation {
  std::vector<double> delta_paths;  // delta_w(omega of the owning flow), aligned with paths
  std::vector<double> delta_flows;  // sum of p_w * delta_w per flow
  double objective = 0.0;           // max over flows
};

// Evaluates travel-time distributions and the min-max objective for a fixed
// topology/engine/config, caching per-queue grids and per-path distributions
// across split vectors (keyed by exact operating-point bits).
class Evaluator {
 public:
  Evaluator(const Topology& topo, Engine engine, SolverConfig cfg);

  const Topology& topology() const { return *topo_; }
  Engine engine() const { return engine_; }
  const SolverConfig& config() const { return cfg_; }
  ServiceModel service_of(int queue_index) const;

  std::vector<double> rates(const SplitVector& splits) const;
  bool stable(const SplitVector& splits) const;

  // Throws InstabilityError when any queue on the path is at/over capacity.
  std::shared_ptr<const TravelTimeDistribution> path_dist(int path_index,
                                                          const SplitVector& splits);
  FlowEvaluation evaluate(const SplitVector& splits);
  double objective(const SplitVector& splits);

 private:
  using Key = std::vector<std::uint64_t>;
  Key path_key(int path_index, const std::vector<double>& lambda) const;

  const Topology* topo_;
  Engine engine_;
  SolverConfig cfg_;
  std::map<Key, std::shared_ptr<const TravelTimeDistribution>> path_cache_;
};

}  // namespace roadq
