#pragma once

#include <set>
#include <string>
#include <vector>

#include "roadq/model.hpp"
#include "roadq/traveltime.hpp"

namespace roadq {

// Which path receives the shifted traffic: the printed formula picks the path
// minimizing the maximum slack; the textual "least-loaded" reading picks the
// path maximizing the minimum slack.
enum class WPrimeRule { LiteralPseudocode, MaxMinSlack };

WPrimeRule wprime_rule_from_string(const std::string& name);  // "literal" | "maxmin"
const char* wprime_rule_name(WPrimeRule rule);

struct BHConfig {
  double phi0 = 0.2;
  double phi_min = 1e-3;
  int max_iterations = 10000;
  WPrimeRule wprime_rule = WPrimeRule::LiteralPseudocode;
  double improve_tol = 1e-12;  // "improves" means decreases by more than this

  void validate() const;  // requires 0 < phi_min < phi0 < 1; throws ParseError
};

struct TraceRow {
  int iteration = 0;
  double phi = 0.0;
  std::string k_star;   // flow id
  std::string w_star;   // path id traffic is removed from
  std::string w_prime;  // path id traffic is added to
  double objective_before = 0.0;
  double objective_after = 0.0;  // equals objective_before when rejected
  bool accepted = false;
};

struct AlphaReconstruction {
  EdgeAlphaMap alphas;
  int unknowns = 0;  // free branch edges entering the least-squares solve
  int rank = 0;      // numerical rank of that system
  std::vector<EdgeKey> free_edges;  // one representative edge per null direction
  double reproduction_error = 0.0;  // max |p_w - product of alphas along w|
};

// The complete decision vector at one operating point.
struct Policy {
  SplitVector splits;                // aligned with Topology::paths
  std::vector<double> service_rates; // aligned with Topology::queues
  EdgeAlphaMap alphas;
  double objective_value = 0.0;
};

struct BHResult {
  Policy policy;
  AlphaReconstruction reconstruction;
  std::vector<TraceRow> trace;
  // "phi_min" | "max_iterations" | "no_degrees_of_freedom"
  std::string termination;
};

// Queues whose slack would fall to (or below) the minimum slack of some other
// queue on a path containing them, were a phi fraction of another co-located
// path's flow added. The two paths must be distinct objects; a single-queue
// path offers no witness queue and contributes no candidates.
std::set<std::string> critical_queues(const Topology& topo,
                                      const std::vector<double>& lambda, double phi);

// True iff shifting phi' = min(phi, splits[w_star]) of the flow's probability
// from w_star to w_prime keeps every queue stable and strictly decreases the
// objective by more than `tol`. Side-effect-free.
bool does_improve(Evaluator& eval, const SplitVector& splits, int k_star, int w_star,
                  int w_prime, double phi, double tol = 1e-12);

// Iterative traffic shifting: repeatedly move a shrinking fraction phi of the
// worst flow's probability from its worst path to its least-loaded path,
// keeping only strictly improving moves. Throws InstabilityError when the
// initial splits are infeasible.
BHResult bh_optimize(Evaluator& eval, SplitVector initial, const BHConfig& cfg);

// Exhaustive baseline: evaluates the objective on a uniform simplex grid per
// flow (resolution = grid spacing) and returns the minimizing policy.
// Supports at most 3 total degrees of freedom; throws InfeasibilityError
// beyond that or when every grid point is unstable.
Policy grid_search(Evaluator& eval, double resolution);

// Recover edge transition probabilities from path-split probabilities by
// solving the log-linearized product system in the least-squares sense.
// Pass-through edges (the only used out-edge of their queue) are pinned to 1,
// fixed-alpha edges are constants, and zero-probability paths contribute a
// zero on their first otherwise-unused branch edge instead of an equation.
AlphaReconstruction reconstruct_alphas(const Topology& topo, const SplitVector& splits);

// Forward evaluation: per-path probability as the product of alphas along the
// path's edges (edges absent from the map count as 0).
SplitVector splits_from_alphas(const Topology& topo, const EdgeAlphaMap& alphas);

}  // namespace roadq
