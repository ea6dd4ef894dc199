#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "roadq/errors.hpp"

namespace roadq {

enum class ServiceModel { Markovian, Deterministic };

// A single road segment modeled as a FIFO single-server queue.
struct RoadQueue {
  std::string id;
  double mu_max = 0.0;  // maximum service rate (vehicles per time unit)
  ServiceModel service = ServiceModel::Markovian;
  double mu = 0.0;  // operating service rate, 0 < mu <= mu_max; defaults to mu_max
};

// Directed link between two queues; alpha_fixed pins its transition
// probability instead of leaving it to reconstruction.
struct EdgeDef {
  std::string from;
  std::string to;
  std::optional<double> alpha_fixed;
};

// A stream of vehicles entering at one queue and leaving at another.
struct Flow {
  std::string id;
  std::string ingress;
  std::string egress;
  double rate = 0.0;   // arrival rate of the flow (vehicles per time unit)
  double omega = 0.0;  // target travel time (time units)
};

// An ordered queue sequence from a flow's ingress to its egress. Paths of
// distinct flows are distinct objects even when the sequences coincide.
struct PathDef {
  std::string id;         // "<flow_id>:<signature>", globally unique
  std::string signature;  // queue ids joined with '-'
  int flow_index = -1;
  std::vector<int> queues;  // indices into Topology::queues
};

// Join queue ids with '-' into the path signature used in files and CSVs.
std::string path_signature(const std::vector<std::string>& queue_ids);

class Topology {
 public:
  std::vector<RoadQueue> queues;
  std::vector<EdgeDef> edges;
  std::vector<Flow> flows;

  // Split probabilities declared in the input file, keyed by flow id then
  // path signature. Applied (and validated) by enumerate_paths().
  std::map<std::string, std::map<std::string, double>> declared_splits;

  // Populated by enumerate_paths(). `paths` is ordered by flow (file order),
  // then lexicographically by signature within each flow.
  std::vector<PathDef> paths;
  std::vector<std::vector<int>> flow_paths;  // per flow: indices into `paths`
  std::vector<double> initial_p;             // aligned with `paths`

  static Topology from_file(const std::string& path);
  static Topology from_string(const std::string& json_text);

  bool paths_enumerated() const { return enumerated_; }
  int queue_index(const std::string& id) const;  // -1 when absent
  int flow_index(const std::string& id) const;   // -1 when absent
  int path_index(int flow_index, const std::string& signature) const;  // -1 when absent

  // Out-neighbors of a queue, sorted by target queue id.
  const std::vector<int>& successors(int queue_index) const;
  std::optional<double> fixed_alpha(int from_queue, int to_queue) const;

  friend void enumerate_paths(Topology&);

 private:
  void build_indexes();  // called by the loaders

  std::map<std::string, int> queue_idx_;
  std::map<std::string, int> flow_idx_;
  std::vector<std::vector<int>> successors_;                // per queue
  std::map<std::pair<int, int>, double> fixed_alpha_;       // (from,to) -> value
  bool enumerated_ = false;
};

// Enumerate every simple ingress->egress path of every flow, verify that the
// subgraph reachable from any ingress is acyclic, and set initial split
// probabilities (declared ones when present, uniform otherwise).
// Throws ParseError on a cycle or bad declared splits, InfeasibilityError
// when a flow has no path.
void enumerate_paths(Topology& topo);

// One probability per path, aligned with Topology::paths; sums to 1 per flow.
using SplitVector = std::vector<double>;

SplitVector initial_splits(const Topology& topo);

// Per-queue total arrival rate: each flow contributes its rate times the
// probability of every one of its paths containing the queue.
std::vector<double> compute_arrival_rates(const Topology& topo, const SplitVector& splits);

bool is_stable(const Topology& topo, const std::vector<double>& lambda);
// Throws InstabilityError naming the first queue with lambda >= mu.
void require_stable(const Topology& topo, const std::vector<double>& lambda);

using EdgeKey = std::pair<std::string, std::string>;
using EdgeAlphaMap = std::map<EdgeKey, double>;

// Self-consistency diagnostic: per queue, |predicted inflow - arrival rate|,
// where predicted inflow is external entries plus each upstream queue's
// stationary throughput (minus traffic that leaves the network there) routed
// along the edge transition probabilities. Edges absent from `alphas` carry
// nothing.
std::map<std::string, double> check_flow_conservation(const Topology& topo,
                                                      const SplitVector& splits,
                                                      const EdgeAlphaMap& alphas);

// Same, with the transition probabilities reconstructed from the splits.
// (Defined alongside the reconstruction solver.)
std::map<std::string, double> check_flow_conservation(const Topology& topo,
                                                      const SplitVector& splits);

}  // namespace roadq
