#include "roadq/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace roadq {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw ParseError(msg); }

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) fail(context + ": unknown key '" + it.key() + "'");
  }
}

const json& require_field(const json& obj, const char* key, const std::string& context) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(context + ": missing field '" + std::string(key) + "'");
  return *it;
}

std::string get_string(const json& obj, const char* key, const std::string& context) {
  const json& v = require_field(obj, key, context);
  if (!v.is_string()) fail(context + ": field '" + std::string(key) + "' must be a string");
  return v.get<std::string>();
}

double get_number(const json& obj, const char* key, const std::string& context) {
  const json& v = require_field(obj, key, context);
  if (!v.is_number()) fail(context + ": field '" + std::string(key) + "' must be a number");
  return v.get<double>();
}

void check_id_charset(const std::string& id, const std::string& context) {
  if (id.empty()) fail(context + ": empty id");
  if (id.find_first_of("-:,\n\r \t") != std::string::npos)
    fail(context + ": id '" + id + "' must not contain '-', ':', ',', or whitespace");
}

}  // namespace

std::string path_signature(const std::vector<std::string>& queue_ids) {
  std::string sig;
  for (size_t i = 0; i < queue_ids.size(); ++i) {
    if (i) sig += '-';
    sig += queue_ids[i];
  }
  return sig;
}

Topology Topology::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open topology file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_string(buf.str());
}

Topology Topology::from_string(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(std::string("topology is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) fail("topology document must be a JSON object");
  reject_unknown_keys(doc, {"queues", "edges", "flows", "initial_splits"}, "topology");

  Topology topo;

  if (doc.contains("queues")) {
    const json& arr = doc["queues"];
    if (!arr.is_array()) fail("topology: 'queues' must be an array");
    for (const json& q : arr) {
      if (!q.is_object()) fail("topology: queue entries must be objects");
      reject_unknown_keys(q, {"id", "mu_max", "service"}, "queue");
      RoadQueue rq;
      rq.id = get_string(q, "id", "queue");
      check_id_charset(rq.id, "queue");
      rq.mu_max = get_number(q, "mu_max", "queue '" + rq.id + "'");
      if (!(rq.mu_max > 0.0)) fail("queue '" + rq.id + "': nonpositive rate mu_max");
      std::string service = get_string(q, "service", "queue '" + rq.id + "'");
      if (service == "M") {
        rq.service = ServiceModel::Markovian;
      } else if (service == "D") {
        rq.service = ServiceModel::Deterministic;
      } else {
        fail("queue '" + rq.id + "': service must be \"M\" or \"D\"");
      }
      rq.mu = rq.mu_max;
      topo.queues.push_back(std::move(rq));
    }
  }

  std::set<std::string> queue_ids;
  for (const RoadQueue& q : topo.queues) {
    if (!queue_ids.insert(q.id).second) fail("duplicate queue id '" + q.id + "'");
  }

  if (doc.contains("edges")) {
    const json& arr = doc["edges"];
    if (!arr.is_array()) fail("topology: 'edges' must be an array");
    for (const json& e : arr) {
      if (!e.is_object()) fail("topology: edge entries must be objects");
      reject_unknown_keys(e, {"from", "to", "alpha_fixed"}, "edge");
      EdgeDef ed;
      ed.from = get_string(e, "from", "edge");
      ed.to = get_string(e, "to", "edge");
      const std::string context = "edge " + ed.from + "->" + ed.to;
      if (!queue_ids.count(ed.from)) fail(context + ": dangling reference '" + ed.from + "'");
      if (!queue_ids.count(ed.to)) fail(context + ": dangling reference '" + ed.to + "'");
      if (e.contains("alpha_fixed")) {
        const json& a = e["alpha_fixed"];
        if (!a.is_number()) fail(context + ": alpha_fixed must be a number");
        double v = a.get<double>();
        if (!(v >= 0.0 && v <= 1.0)) fail(context + ": alpha_fixed must be in [0, 1]");
        ed.alpha_fixed = v;
      }
      topo.edges.push_back(std::move(ed));
    }
  }

  std::set<std::pair<std::string, std::string>> edge_keys;
  for (const EdgeDef& e : topo.edges) {
    if (!edge_keys.insert({e.from, e.to}).second)
      fail("duplicate edge " + e.from + "->" + e.to);
  }

  if (doc.contains("flows")) {
    const json& arr = doc["flows"];
    if (!arr.is_array()) fail("topology: 'flows' must be an array");
    for (const json& f : arr) {
      if (!f.is_object()) fail("topology: flow entries must be objects");
      reject_unknown_keys(f, {"id", "ingress", "egress", "rate", "omega"}, "flow");
      Flow fl;
      fl.id = get_string(f, "id", "flow");
      check_id_charset(fl.id, "flow");
      const std::string context = "flow '" + fl.id + "'";
      fl.ingress = get_string(f, "ingress", context);
      fl.egress = get_string(f, "egress", context);
      if (!queue_ids.count(fl.ingress)) fail(context + ": dangling reference '" + fl.ingress + "'");
      if (!queue_ids.count(fl.egress)) fail(context + ": dangling reference '" + fl.egress + "'");
      fl.rate = get_number(f, "rate", context);
      if (!(fl.rate > 0.0)) fail(context + ": nonpositive rate");
      fl.omega = get_number(f, "omega", context);
      if (!(fl.omega > 0.0)) fail(context + ": nonpositive target travel time omega");
      topo.flows.push_back(std::move(fl));
    }
  }

  std::set<std::string> flow_ids;
  for (const Flow& f : topo.flows) {
    if (!flow_ids.insert(f.id).second) fail("duplicate flow id '" + f.id + "'");
  }

  if (doc.contains("initial_splits")) {
    const json& obj = doc["initial_splits"];
    if (!obj.is_object()) fail("topology: 'initial_splits' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (!flow_ids.count(it.key()))
        fail("initial_splits: dangling reference to flow '" + it.key() + "'");
      if (!it.value().is_object())
        fail("initial_splits['" + it.key() + "'] must map path signatures to numbers");
      std::map<std::string, double> entry;
      for (auto jt = it.value().begin(); jt != it.value().end(); ++jt) {
        if (!jt.value().is_number())
          fail("initial_splits['" + it.key() + "']['" + jt.key() + "'] must be a number");
        double p = jt.value().get<double>();
        if (!(p >= 0.0 && p <= 1.0))
          fail("initial_splits['" + it.key() + "']['" + jt.key() + "'] must be in [0, 1]");
        entry[jt.key()] = p;
      }
      topo.declared_splits[it.key()] = std::move(entry);
    }
  }

  topo.build_indexes();
  return topo;
}

void Topology::build_indexes() {
  queue_idx_.clear();
  flow_idx_.clear();
  for (size_t i = 0; i < queues.size(); ++i) queue_idx_[queues[i].id] = int(i);
  for (size_t i = 0; i < flows.size(); ++i) flow_idx_[flows[i].id] = int(i);

  successors_.assign(queues.size(), {});
  fixed_alpha_.clear();
  for (const EdgeDef& e : edges) {
    int from = queue_index(e.from);
    int to = queue_index(e.to);
    successors_[from].push_back(to);
    if (e.alpha_fixed) fixed_alpha_[{from, to}] = *e.alpha_fixed;
  }
  for (auto& succ : successors_) {
    std::sort(succ.begin(), succ.end(),
              [this](int a, int b) { return queues[a].id < queues[b].id; });
  }
}

int Topology::queue_index(const std::string& id) const {
  auto it = queue_idx_.find(id);
  return it == queue_idx_.end() ? -1 : it->second;
}

int Topology::flow_index(const std::string& id) const {
  auto it = flow_idx_.find(id);
  return it == flow_idx_.end() ? -1 : it->second;
}

int Topology::path_index(int flow_index, const std::string& signature) const {
  if (flow_index < 0 || flow_index >= int(flow_paths.size())) return -1;
  for (int p : flow_paths[flow_index]) {
    if (paths[p].signature == signature) return p;
  }
  return -1;
}

const std::vector<int>& Topology::successors(int queue_index) const {
  return successors_.at(size_t(queue_index));
}

std::optional<double> Topology::fixed_alpha(int from_queue, int to_queue) const {
  auto it = fixed_alpha_.find({from_queue, to_queue});
  if (it == fixed_alpha_.end()) return std::nullopt;
  return it->second;
}

namespace {

constexpr size_t kMaxPaths = 10000;

// Depth-first cycle check over the subgraph reachable from the given roots.
void check_acyclic_from(const Topology& topo, const std::vector<int>& roots) {
  enum class Color { White, Gray, Black };
  std::vector<Color> color(topo.queues.size(), Color::White);
  std::function<void(int)> visit = [&](int u) {
    color[size_t(u)] = Color::Gray;
    for (int v : topo.successors(u)) {
      if (color[size_t(v)] == Color::Gray)
        throw ParseError("cycle detected in the flow-reachable subgraph (through queue '" +
                         topo.queues[size_t(v)].id + "')");
      if (color[size_t(v)] == Color::White) visit(v);
    }
    color[size_t(u)] = Color::Black;
  };
  for (int r : roots) {
    if (color[size_t(r)] == Color::White) visit(r);
  }
}

}  // namespace

void enumerate_paths(Topology& topo) {
  std::vector<int> roots;
  for (const Flow& f : topo.flows) roots.push_back(topo.queue_index(f.ingress));
  check_acyclic_from(topo, roots);

  topo.paths.clear();
  topo.flow_paths.assign(topo.flows.size(), {});
  topo.initial_p.clear();

  for (size_t k = 0; k < topo.flows.size(); ++k) {
    const Flow& flow = topo.flows[k];
    int ingress = topo.queue_index(flow.ingress);
    int egress = topo.queue_index(flow.egress);

    std::vector<std::vector<int>> found;
    std::vector<int> stack;
    std::vector<char> on_stack(topo.queues.size(), 0);
    std::function<void(int)> dfs = [&](int u) {
      stack.push_back(u);
      on_stack[size_t(u)] = 1;
      if (u == egress) {
        found.push_back(stack);
        if (found.size() + topo.paths.size() > kMaxPaths)
          throw InfeasibilityError("path explosion: more than " + std::to_string(kMaxPaths) +
                                   " paths");
      } else {
        for (int v : topo.successors(u)) {
          if (!on_stack[size_t(v)]) dfs(v);
        }
      }
      on_stack[size_t(u)] = 0;
      stack.pop_back();
    };
    dfs(ingress);

    if (found.empty())
      throw InfeasibilityError("flow '" + flow.id + "': no path from '" + flow.ingress +
                               "' to '" + flow.egress + "'");

    // Sorted successors make the enumeration order lexicographic by signature.
    for (const std::vector<int>& qs : found) {
      PathDef p;
      p.flow_index = int(k);
      p.queues = qs;
      std::vector<std::string> ids;
      ids.reserve(qs.size());
      for (int q : qs) ids.push_back(topo.queues[size_t(q)].id);
      p.signature = path_signature(ids);
      p.id = flow.id + ":" + p.signature;
      topo.flow_paths[k].push_back(int(topo.paths.size()));
      topo.paths.push_back(std::move(p));
    }
  }

  // Initial split probabilities: declared when present, uniform otherwise.
  topo.initial_p.assign(topo.paths.size(), 0.0);
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    const Flow& flow = topo.flows[k];
    const std::vector<int>& idx = topo.flow_paths[k];
    auto declared = topo.declared_splits.find(flow.id);
    if (declared == topo.declared_splits.end()) {
      for (int p : idx) topo.initial_p[size_t(p)] = 1.0 / double(idx.size());
      continue;
    }
    std::set<std::string> known;
    for (int p : idx) known.insert(topo.paths[size_t(p)].signature);
    for (const auto& [sig, v] : declared->second) {
      if (!known.count(sig))
        throw ParseError("initial_splits['" + flow.id + "']: unknown path signature '" + sig +
                         "'");
    }
    double sum = 0.0;
    for (const auto& [sig, v] : declared->second) sum += v;
    if (std::abs(sum - 1.0) > 1e-9)
      throw ParseError("initial_splits['" + flow.id + "']: probabilities sum to " +
                       std::to_string(sum) + ", expected 1");
    for (int p : idx) {
      auto it = declared->second.find(topo.paths[size_t(p)].signature);
      topo.initial_p[size_t(p)] = it == declared->second.end() ? 0.0 : it->second / sum;
    }
  }

  topo.enumerated_ = true;
}

SplitVector initial_splits(const Topology& topo) {
  if (!topo.paths_enumerated()) throw ParseError("paths not enumerated yet");
  return topo.initial_p;
}

std::vector<double> compute_arrival_rates(const Topology& topo, const SplitVector& splits) {
  if (splits.size() != topo.paths.size())
    throw ParseError("split vector size does not match path count");
  std::vector<double> lambda(topo.queues.size(), 0.0);
  for (size_t w = 0; w < topo.paths.size(); ++w) {
    const PathDef& path = topo.paths[w];
    double contribution = topo.flows[size_t(path.flow_index)].rate * splits[w];
    if (contribution == 0.0) continue;
    for (int q : path.queues) lambda[size_t(q)] += contribution;
  }
  return lambda;
}

bool is_stable(const Topology& topo, const std::vector<double>& lambda) {
  for (size_t i = 0; i < topo.queues.size(); ++i) {
    if (lambda[i] >= topo.queues[i].mu) return false;
  }
  return true;
}

void require_stable(const Topology& topo, const std::vector<double>& lambda) {
  for (size_t i = 0; i < topo.queues.size(); ++i) {
    if (lambda[i] >= topo.queues[i].mu) {
      std::ostringstream msg;
      msg << "queue '" << topo.queues[i].id << "' unstable: arrival rate " << lambda[i]
          << " >= service rate " << topo.queues[i].mu;
      throw InstabilityError(msg.str());
    }
  }
}

std::map<std::string, double> check_flow_conservation(const Topology& topo,
                                                      const SplitVector& splits,
                                                      const EdgeAlphaMap& alphas) {
  std::vector<double> lambda = compute_arrival_rates(topo, splits);

  // Traffic leaving the network at each queue (each flow fully exits at its
  // egress; stable queues forward everything else).
  std::vector<double> exits(topo.queues.size(), 0.0);
  std::vector<double> predicted(topo.queues.size(), 0.0);
  for (const Flow& f : topo.flows) {
    exits[size_t(topo.queue_index(f.egress))] += f.rate;
    predicted[size_t(topo.queue_index(f.ingress))] += f.rate;
  }
  for (const EdgeDef& e : topo.edges) {
    auto it = alphas.find({e.from, e.to});
    if (it == alphas.end()) continue;
    size_t h = size_t(topo.queue_index(e.from));
    predicted[size_t(topo.queue_index(e.to))] += it->second * (lambda[h] - exits[h]);
  }

  std::map<std::string, double> residuals;
  for (size_t i = 0; i < topo.queues.size(); ++i) {
    residuals[topo.queues[i].id] = std::abs(predicted[i] - lambda[i]);
  }
  return residuals;
}

}  // namespace roadq
