// Command-line front end: load a queue-network topology, optimize path splits,
// sweep, evaluate CDFs, simulate, and self-validate. All numeric output is
// full-precision CSV/JSON so downstream plotting needs no re-rounding.

#include <CLI11.hpp>
#include <json.hpp>

#include "roadq/csv.hpp"
#include "roadq/model.hpp"
#include "roadq/optimizer.hpp"
#include "roadq/simulator.hpp"
#include "roadq/traveltime.hpp"
#include "roadq/version.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string input;
  std::string out_dir = ".";
  std::string engine = "declared";
  std::vector<std::string> engines;  // sweep only
  std::string policy_file;

  double step = 0.0;
  double horizon = 0.0;
  double tail_tol = 0.0;
  int md1_terms = 0;
  bool has_step = false, has_horizon = false, has_tail = false, has_terms = false;

  double phi0 = 0.2;
  double phi_min = 1e-3;
  int max_iterations = 10000;
  std::string wprime_rule = "literal";

  std::string sweep_flow;
  std::string sweep_path;
  double sweep_from = 0.0;
  double sweep_to = 1.0;
  int sweep_points = 21;

  std::int64_t n_vehicles = 100000;
  std::uint64_t seed = 1;
  double warmup = 0.1;
  double occupancy_cap = 1e6;
  std::string batch_kind = "constant";
  double batch_mean = 1.0;
};

std::string iso_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

roadq::Topology load_topology(const std::string& path) {
  roadq::Topology topo = roadq::Topology::from_file(path);
  roadq::enumerate_paths(topo);
  return topo;
}

roadq::SolverConfig resolve_solver(const roadq::Topology& topo, const Options& o) {
  roadq::SolverConfig cfg = roadq::SolverConfig::defaults_for(topo);
  if (o.has_step) cfg.step = o.step;
  if (o.has_horizon) cfg.horizon = o.horizon;
  if (o.has_tail) cfg.tail_tol = o.tail_tol;
  if (o.has_terms) cfg.md1_series_terms = o.md1_terms;
  cfg.validate_for(topo);
  return cfg;
}

json solver_json(const roadq::SolverConfig& cfg) {
  return json{{"step", cfg.step},
              {"horizon", cfg.horizon},
              {"tail_tol", cfg.tail_tol},
              {"md1_series_terms", cfg.md1_series_terms}};
}

void write_manifest(const Options& o, const std::string& command, const json& configs,
                    const std::vector<std::string>& outputs) {
  json m;
  m["version"] = roadq::kVersion;
  m["generated_at"] = iso_timestamp();
  m["command"] = command;
  m["input"] = o.input;
  m["out_dir"] = o.out_dir;
  m["configs"] = configs;
  json outs = json::array();
  for (const std::string& f : outputs) outs.push_back(f);
  outs.push_back("manifest.json");
  m["outputs"] = outs;
  std::ofstream f(fs::path(o.out_dir) / "manifest.json");
  if (!f) throw roadq::ParseError("cannot write manifest.json in " + o.out_dir);
  f << m.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Policy files: {"initial_splits": {flow: {signature: p}}, "alphas":
// {"from-to": a}, "service_rates": {queue: mu}, "objective_value": x}.
// Reloadable as an initial condition; service_rates are applied to the
// topology, splits override the file-declared initial point.
// ---------------------------------------------------------------------------

json policy_to_json(const roadq::Topology& topo, const roadq::Policy& pol) {
  json splits = json::object();
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    json per = json::object();
    for (int w : topo.flow_paths[k])
      per[topo.paths[size_t(w)].signature] = pol.splits[size_t(w)];
    splits[topo.flows[k].id] = per;
  }
  json alphas = json::object();
  for (const auto& [edge, v] : pol.alphas) alphas[edge.first + "-" + edge.second] = v;
  json rates = json::object();
  for (size_t i = 0; i < topo.queues.size(); ++i)
    rates[topo.queues[i].id] = pol.service_rates[i];
  return json{{"initial_splits", splits},
              {"alphas", alphas},
              {"service_rates", rates},
              {"objective_value", pol.objective_value}};
}

roadq::SplitVector apply_policy_file(roadq::Topology& topo, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw roadq::ParseError("cannot open policy file: " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw roadq::ParseError("policy file '" + path + "': " + e.what());
  }
  if (!doc.is_object()) throw roadq::ParseError("policy file must hold a JSON object");
  static const std::set<std::string> allowed = {"initial_splits", "alphas", "service_rates",
                                                "objective_value"};
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!allowed.count(it.key()))
      throw roadq::ParseError("policy file: unknown key '" + it.key() + "'");
  }

  if (doc.contains("service_rates")) {
    const json& rates = doc["service_rates"];
    if (!rates.is_object()) throw roadq::ParseError("policy file: service_rates must be an object");
    for (auto it = rates.begin(); it != rates.end(); ++it) {
      int qi = topo.queue_index(it.key());
      if (qi < 0) throw roadq::ParseError("policy file: unknown queue '" + it.key() + "'");
      if (!it.value().is_number())
        throw roadq::ParseError("policy file: service rate of '" + it.key() + "' must be a number");
      double mu = it.value().get<double>();
      double mu_max = topo.queues[size_t(qi)].mu_max;
      if (!(mu > 0.0) || mu > mu_max * (1.0 + 1e-12))
        throw roadq::ParseError("policy file: service rate of '" + it.key() +
                                "' must lie in (0, mu_max]");
      topo.queues[size_t(qi)].mu = std::min(mu, mu_max);
    }
  }

  roadq::SplitVector splits = topo.initial_p;
  if (doc.contains("initial_splits")) {
    const json& flows = doc["initial_splits"];
    if (!flows.is_object())
      throw roadq::ParseError("policy file: initial_splits must be an object");
    for (auto fit = flows.begin(); fit != flows.end(); ++fit) {
      int k = topo.flow_index(fit.key());
      if (k < 0) throw roadq::ParseError("policy file: unknown flow '" + fit.key() + "'");
      if (!fit.value().is_object())
        throw roadq::ParseError("policy file: splits of flow '" + fit.key() +
                                "' must be an object");
      for (int w : topo.flow_paths[size_t(k)]) splits[size_t(w)] = 0.0;
      double sum = 0.0;
      for (auto sit = fit.value().begin(); sit != fit.value().end(); ++sit) {
        int w = topo.path_index(k, sit.key());
        if (w < 0)
          throw roadq::ParseError("policy file: flow '" + fit.key() + "' has no path '" +
                                  sit.key() + "'");
        if (!sit.value().is_number())
          throw roadq::ParseError("policy file: split of path '" + sit.key() +
                                  "' must be a number");
        double p = sit.value().get<double>();
        if (!(p >= 0.0 && p <= 1.0))
          throw roadq::ParseError("policy file: split of path '" + sit.key() +
                                  "' must lie in [0, 1]");
        splits[size_t(w)] = p;
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw roadq::ParseError("policy file: splits of flow '" + fit.key() + "' sum to " +
                                std::to_string(sum) + ", expected 1");
      for (int w : topo.flow_paths[size_t(k)]) splits[size_t(w)] /= sum;
    }
  }
  if (doc.contains("alphas") && !doc["alphas"].is_object())
    throw roadq::ParseError("policy file: alphas must be an object");
  if (doc.contains("objective_value") && !doc["objective_value"].is_number())
    throw roadq::ParseError("policy file: objective_value must be a number");
  return splits;
}

void print_flow_deltas(const roadq::Topology& topo, const roadq::FlowEvaluation& ev) {
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    std::cout << "flow " << topo.flows[k].id << ": delta " << roadq::fmt17(ev.delta_flows[k])
              << " (omega " << topo.flows[k].omega << ")\n";
  }
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

int cmd_optimize(Options& o) {
  roadq::Topology topo = load_topology(o.input);
  roadq::SplitVector splits0 =
      o.policy_file.empty() ? roadq::initial_splits(topo) : apply_policy_file(topo, o.policy_file);
  roadq::SolverConfig cfg = resolve_solver(topo, o);
  roadq::Evaluator eval(topo, roadq::engine_from_string(o.engine), cfg);

  roadq::BHConfig bh;
  bh.phi0 = o.phi0;
  bh.phi_min = o.phi_min;
  bh.max_iterations = o.max_iterations;
  bh.wprime_rule = roadq::wprime_rule_from_string(o.wprime_rule);
  bh.validate();

  roadq::BHResult res = roadq::bh_optimize(eval, splits0, bh);
  if (res.termination == "no_degrees_of_freedom")
    std::cout << "notice: no degrees of freedom (every flow has a single path); "
                 "returning the initial policy\n";

  roadq::FlowEvaluation ev = eval.evaluate(res.policy.splits);
  std::cout << "objective " << roadq::fmt17(res.policy.objective_value) << "\n";
  print_flow_deltas(topo, ev);
  std::cout << "termination " << res.termination << " after " << res.trace.size()
            << " iterations\n";
  std::cout << "reconstruction: unknowns " << res.reconstruction.unknowns << ", rank "
            << res.reconstruction.rank << ", reproduction error "
            << roadq::fmt17(res.reconstruction.reproduction_error) << "\n";
  for (const auto& [from, to] : res.reconstruction.free_edges)
    std::cout << "  free direction on edge " << from << "-" << to << "\n";

  fs::create_directories(o.out_dir);
  {
    std::ofstream f(fs::path(o.out_dir) / "policy.json");
    if (!f) throw roadq::ParseError("cannot write policy.json in " + o.out_dir);
    f << policy_to_json(topo, res.policy).dump(2) << "\n";
  }
  {
    roadq::CsvWriter csv((fs::path(o.out_dir) / "trace.csv").string());
    csv.row({"iteration", "phi", "k_star", "w_star", "w_prime", "objective", "accepted"});
    for (const roadq::TraceRow& r : res.trace) {
      csv.row({std::to_string(r.iteration), roadq::fmt17(r.phi), r.k_star, r.w_star, r.w_prime,
               roadq::fmt17(r.objective_after), r.accepted ? "1" : "0"});
    }
  }
  json configs{{"engine", o.engine},
               {"solver", solver_json(cfg)},
               {"optimizer",
                {{"phi0", bh.phi0},
                 {"phi_min", bh.phi_min},
                 {"max_iterations", bh.max_iterations},
                 {"wprime_rule", o.wprime_rule}}}};
  write_manifest(o, "optimize", configs, {"policy.json", "trace.csv"});
  std::cout << "wrote " << (fs::path(o.out_dir) / "policy.json").string() << ", trace.csv, "
            << "manifest.json\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

int cmd_sweep(Options& o) {
  roadq::Topology topo = load_topology(o.input);
  roadq::SolverConfig cfg = resolve_solver(topo, o);

  // Resolve the swept flow: it must have exactly two paths.
  int flow_k = -1;
  if (!o.sweep_flow.empty()) {
    flow_k = topo.flow_index(o.sweep_flow);
    if (flow_k < 0) throw roadq::ParseError("unknown flow '" + o.sweep_flow + "'");
  } else {
    for (size_t k = 0; k < topo.flows.size(); ++k) {
      if (topo.flow_paths[k].size() == 2) {
        if (flow_k >= 0)
          throw roadq::ParseError("several flows have two paths; pick one with --flow");
        flow_k = int(k);
      }
    }
    if (flow_k < 0) throw roadq::ParseError("no flow with exactly two paths; nothing to sweep");
  }
  if (topo.flow_paths[size_t(flow_k)].size() != 2)
    throw roadq::ParseError("flow '" + topo.flows[size_t(flow_k)].id +
                            "' must have exactly two paths for a sweep, has " +
                            std::to_string(topo.flow_paths[size_t(flow_k)].size()));

  int w_swept = topo.flow_paths[size_t(flow_k)][1];
  if (!o.sweep_path.empty()) {
    w_swept = topo.path_index(flow_k, o.sweep_path);
    if (w_swept < 0)
      throw roadq::ParseError("flow '" + topo.flows[size_t(flow_k)].id + "' has no path '" +
                              o.sweep_path + "'");
  }
  int w_other = topo.flow_paths[size_t(flow_k)][0] == w_swept
                    ? topo.flow_paths[size_t(flow_k)][1]
                    : topo.flow_paths[size_t(flow_k)][0];

  if (!(o.sweep_from >= 0.0 && o.sweep_from <= 1.0 && o.sweep_to >= 0.0 && o.sweep_to <= 1.0 &&
        o.sweep_from <= o.sweep_to))
    throw roadq::ParseError("sweep range must satisfy 0 <= from <= to <= 1");
  if (o.sweep_points < 1 || (o.sweep_points == 1 && o.sweep_from != o.sweep_to))
    throw roadq::ParseError("sweep needs at least 2 points (or from == to)");

  std::vector<std::string> engines = o.engines.empty()
                                         ? std::vector<std::string>{o.engine}
                                         : o.engines;
  {
    std::vector<std::string> dedup;
    for (const std::string& e : engines) {
      roadq::engine_from_string(e);  // validate
      if (std::find(dedup.begin(), dedup.end(), e) == dedup.end()) dedup.push_back(e);
    }
    engines = dedup;
  }

  fs::create_directories(o.out_dir);
  roadq::CsvWriter csv((fs::path(o.out_dir) / "sweep.csv").string());
  std::vector<std::string> header = {"engine", "p", "stable", "objective"};
  for (const roadq::Flow& f : topo.flows) header.push_back("delta_" + f.id);
  csv.row(header);

  for (const std::string& eng : engines) {
    roadq::Evaluator eval(topo, roadq::engine_from_string(eng), cfg);
    double best = std::numeric_limits<double>::infinity();
    double best_p = 0.0;
    for (int i = 0; i < o.sweep_points; ++i) {
      double p = (o.sweep_points == 1)
                     ? o.sweep_from
                     : o.sweep_from + (o.sweep_to - o.sweep_from) * double(i) /
                                          double(o.sweep_points - 1);
      roadq::SplitVector splits = topo.initial_p;
      splits[size_t(w_swept)] = p;
      splits[size_t(w_other)] = 1.0 - p;
      std::vector<std::string> cells = {eng, roadq::fmt17(p)};
      try {
        roadq::FlowEvaluation ev = eval.evaluate(splits);
        cells.push_back("1");
        cells.push_back(roadq::fmt17(ev.objective));
        for (double d : ev.delta_flows) cells.push_back(roadq::fmt17(d));
        if (ev.objective < best) {
          best = ev.objective;
          best_p = p;
        }
      } catch (const roadq::InstabilityError&) {
        cells.push_back("0");
        cells.push_back("");
        for (size_t k = 0; k < topo.flows.size(); ++k) cells.push_back("");
      }
      csv.row(cells);
    }
    if (std::isfinite(best))
      std::cout << "engine " << eng << ": min objective " << roadq::fmt17(best) << " at p "
                << roadq::fmt17(best_p) << "\n";
    else
      std::cout << "engine " << eng << ": no stable sweep point\n";
  }

  json configs{{"engines", engines},
               {"solver", solver_json(cfg)},
               {"sweep",
                {{"flow", topo.flows[size_t(flow_k)].id},
                 {"path", topo.paths[size_t(w_swept)].signature},
                 {"from", o.sweep_from},
                 {"to", o.sweep_to},
                 {"points", o.sweep_points}}}};
  write_manifest(o, "sweep", configs, {"sweep.csv"});
  std::cout << "wrote " << (fs::path(o.out_dir) / "sweep.csv").string() << ", manifest.json\n";
  return 0;
}

// ---------------------------------------------------------------------------
// cdf
// ---------------------------------------------------------------------------

int cmd_cdf(Options& o) {
  roadq::Topology topo = load_topology(o.input);
  roadq::SplitVector splits =
      o.policy_file.empty() ? roadq::initial_splits(topo) : apply_policy_file(topo, o.policy_file);
  roadq::SolverConfig cfg = resolve_solver(topo, o);
  roadq::Evaluator eval(topo, roadq::engine_from_string(o.engine), cfg);

  roadq::FlowEvaluation ev = eval.evaluate(splits);
  std::cout << "objective " << roadq::fmt17(ev.objective) << "\n";
  print_flow_deltas(topo, ev);

  fs::create_directories(o.out_dir);
  {
    roadq::CsvWriter csv((fs::path(o.out_dir) / "cdf.csv").string());
    csv.row({"path_id", "t", "cdf"});
    size_t cells = size_t(std::floor(cfg.horizon / cfg.step + 0.5));
    for (size_t w = 0; w < topo.paths.size(); ++w) {
      auto dist = eval.path_dist(int(w), splits);
      for (size_t j = 0; j <= cells; ++j) {
        double t = double(j) * cfg.step;
        csv.row({topo.paths[w].id, roadq::fmt17(t), roadq::fmt17(dist->cdf(t))});
      }
    }
  }
  {
    roadq::CsvWriter csv((fs::path(o.out_dir) / "cdf_summary.csv").string());
    csv.row({"flow_id", "scope", "path_id", "omega", "p", "delta"});
    for (size_t k = 0; k < topo.flows.size(); ++k) {
      const roadq::Flow& flow = topo.flows[k];
      for (int w : topo.flow_paths[k]) {
        csv.row({flow.id, "path", topo.paths[size_t(w)].id, roadq::fmt17(flow.omega),
                 roadq::fmt17(splits[size_t(w)]), roadq::fmt17(ev.delta_paths[size_t(w)])});
      }
      csv.row({flow.id, "flow", "", roadq::fmt17(flow.omega), "",
               roadq::fmt17(ev.delta_flows[k])});
    }
  }
  json configs{{"engine", o.engine}, {"solver", solver_json(cfg)}};
  if (!o.policy_file.empty()) configs["policy"] = o.policy_file;
  write_manifest(o, "cdf", configs, {"cdf.csv", "cdf_summary.csv"});
  std::cout << "wrote " << (fs::path(o.out_dir) / "cdf.csv").string()
            << ", cdf_summary.csv, manifest.json\n";
  return 0;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

int cmd_simulate(Options& o) {
  roadq::Topology topo = load_topology(o.input);
  roadq::SplitVector splits =
      o.policy_file.empty() ? roadq::initial_splits(topo) : apply_policy_file(topo, o.policy_file);
  roadq::SolverConfig cfg = resolve_solver(topo, o);
  roadq::Engine engine = roadq::engine_from_string(o.engine);
  roadq::Evaluator eval(topo, engine, cfg);

  roadq::SimConfig sim;
  sim.n_vehicles = o.n_vehicles;
  sim.seed = o.seed;
  sim.warmup_fraction = o.warmup;
  sim.occupancy_cap = o.occupancy_cap;
  sim.batch.kind = (o.batch_kind == "geometric") ? roadq::BatchConfig::Kind::Geometric
                                                 : roadq::BatchConfig::Kind::Constant;
  sim.batch.mean = o.batch_mean;
  sim.validate();

  // Analytical reference first: an unstable operating point aborts here.
  roadq::FlowEvaluation ana = eval.evaluate(splits);
  roadq::SimResult res = roadq::simulate(topo, splits, engine, sim);

  fs::create_directories(o.out_dir);
  {
    roadq::CsvWriter csv((fs::path(o.out_dir) / "samples.csv").string());
    csv.row({"vehicle_id", "flow_id", "path_signature", "entry_time", "exit_time"});
    for (const roadq::VehicleRecord& r : res.vehicles) {
      csv.row({std::to_string(r.vehicle_id), topo.flows[size_t(r.flow_index)].id,
               topo.paths[size_t(r.path_index)].signature, roadq::fmt17(r.entry_time),
               roadq::fmt17(r.exit_time)});
    }
  }

  bool all_hard_pass = true;
  json report;
  report["engine"] = o.engine;
  report["n_vehicles"] = sim.n_vehicles;
  report["seed"] = sim.seed;
  report["warmup_fraction"] = sim.warmup_fraction;
  report["end_time"] = res.end_time;

  json flows = json::array();
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    double diff = std::abs(res.empirical_delta_flow[k] - ana.delta_flows[k]);
    bool pass = diff <= 0.02;
    all_hard_pass = all_hard_pass && pass;
    flows.push_back({{"id", topo.flows[k].id},
                     {"omega", topo.flows[k].omega},
                     {"delta_analytical", ana.delta_flows[k]},
                     {"delta_empirical", res.empirical_delta_flow[k]},
                     {"abs_error", diff},
                     {"threshold", 0.02},
                     {"pass", pass}});
    std::cout << "flow " << topo.flows[k].id << ": analytical delta "
              << roadq::fmt17(ana.delta_flows[k]) << ", empirical "
              << roadq::fmt17(res.empirical_delta_flow[k]) << " -> "
              << (pass ? "pass" : "FAIL") << "\n";
  }
  report["flows"] = flows;

  json paths = json::array();
  for (size_t w = 0; w < topo.paths.size(); ++w) {
    json row{{"id", topo.paths[w].id},
             {"n_samples", std::int64_t(res.path_samples[w].size())}};
    if (res.path_samples[w].size() >= 1000) {
      double ks = roadq::ks_distance(res.path_samples[w], *eval.path_dist(int(w), splits));
      bool single = topo.paths[w].queues.size() == 1;
      double threshold = single ? 0.02 : 0.05;
      bool pass = ks <= threshold;
      if (single) all_hard_pass = all_hard_pass && pass;
      row["ks"] = ks;
      row["threshold"] = threshold;
      row["advisory"] = !single;  // multi-queue paths carry an independence approximation
      row["pass"] = pass;
      std::cout << "path " << topo.paths[w].id << ": KS " << roadq::fmt17(ks)
                << (single ? "" : " (advisory)") << " -> " << (pass ? "pass" : "FAIL") << "\n";
    } else {
      row["ks"] = nullptr;
    }
    paths.push_back(row);
  }
  report["paths"] = paths;

  json queues = json::array();
  for (size_t q = 0; q < topo.queues.size(); ++q) {
    const roadq::QueueStats& st = res.queue_stats[q];
    if (st.arrivals == 0) continue;
    double occupancy = st.mean_occupancy(res.end_time);
    double throughput = double(st.arrivals) / res.end_time;
    double little_rhs = throughput * st.mean_sojourn();
    double rel = std::abs(occupancy - little_rhs) / std::max(occupancy, 1e-12);
    bool pass = rel <= 0.03;
    all_hard_pass = all_hard_pass && pass;
    queues.push_back({{"id", topo.queues[q].id},
                      {"utilization", st.utilization(res.end_time)},
                      {"mean_occupancy", occupancy},
                      {"mean_sojourn", st.mean_sojourn()},
                      {"little_residual_rel", rel},
                      {"threshold", 0.03},
                      {"pass", pass}});
  }
  report["queues"] = queues;

  json shares = json::array();
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    std::int64_t n_flow = 0;
    std::vector<std::int64_t> counts(topo.paths.size(), 0);
    for (const roadq::VehicleRecord& r : res.vehicles) {
      if (r.flow_index == int(k)) {
        ++n_flow;
        ++counts[size_t(r.path_index)];
      }
    }
    for (int w : topo.flow_paths[k]) {
      double p = splits[size_t(w)];
      double share = n_flow > 0 ? double(counts[size_t(w)]) / double(n_flow) : 0.0;
      double bound = 3.0 * std::sqrt(std::max(0.0, p * (1.0 - p)) / double(std::max<std::int64_t>(1, n_flow)));
      bool pass = std::abs(share - p) <= bound + 1e-12;
      all_hard_pass = all_hard_pass && pass;
      shares.push_back({{"path_id", topo.paths[size_t(w)].id},
                        {"expected_p", p},
                        {"empirical_share", share},
                        {"bound_3sigma", bound},
                        {"pass", pass}});
    }
  }
  report["path_shares"] = shares;
  report["all_hard_checks_pass"] = all_hard_pass;

  {
    std::ofstream f(fs::path(o.out_dir) / "sim_report.json");
    if (!f) throw roadq::ParseError("cannot write sim_report.json in " + o.out_dir);
    f << report.dump(2) << "\n";
  }
  json configs{{"engine", o.engine},
               {"solver", solver_json(cfg)},
               {"simulation",
                {{"n_vehicles", sim.n_vehicles},
                 {"seed", sim.seed},
                 {"warmup_fraction", sim.warmup_fraction},
                 {"occupancy_cap", sim.occupancy_cap},
                 {"batch_kind", o.batch_kind},
                 {"batch_mean", o.batch_mean}}}};
  if (!o.policy_file.empty()) configs["policy"] = o.policy_file;
  write_manifest(o, "simulate", configs, {"samples.csv", "sim_report.json"});
  std::cout << (all_hard_pass ? "all hard checks passed" : "some hard checks FAILED")
            << "; wrote " << (fs::path(o.out_dir) / "samples.csv").string()
            << ", sim_report.json, manifest.json\n";
  return 0;  // the report carries pass/fail; simulation itself succeeded
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

int cmd_validate(Options& o) {
  roadq::Topology topo = load_topology(o.input);
  roadq::SolverConfig cfg = resolve_solver(topo, o);
  roadq::Engine engine = roadq::engine_from_string(o.engine);
  roadq::SplitVector splits0 = roadq::initial_splits(topo);

  struct Check {
    std::string name;
    bool pass;
    std::string detail;
  };
  std::vector<Check> checks;

  // 1. Flow conservation under reconstructed transition probabilities.
  {
    auto residuals = roadq::check_flow_conservation(topo, splits0);
    double worst = 0.0;
    for (const auto& [id, r] : residuals) worst = std::max(worst, r);
    checks.push_back({"flow conservation", worst <= 1e-9,
                      "max residual " + roadq::fmt17(worst) + " (threshold 1e-9)"});
  }

  // 2. Split -> alpha -> split round-trip on random feasible splits.
  {
    std::mt19937_64 rng(12345);
    double worst = 0.0;
    for (int trial = 0; trial < 25; ++trial) {
      roadq::SplitVector s(topo.paths.size(), 0.0);
      for (size_t k = 0; k < topo.flows.size(); ++k) {
        double sum = 0.0;
        std::vector<double> draws;
        for (size_t i = 0; i < topo.flow_paths[k].size(); ++i) {
          double u = (double(rng() >> 11) + 0.5) * 0x1.0p-53;
          draws.push_back(-std::log(u));
          sum += draws.back();
        }
        for (size_t i = 0; i < draws.size(); ++i)
          s[size_t(topo.flow_paths[k][i])] = draws[i] / sum;
      }
      worst = std::max(worst, roadq::reconstruct_alphas(topo, s).reproduction_error);
    }
    checks.push_back({"alpha round-trip", worst <= 1e-9,
                      "max reproduction error " + roadq::fmt17(worst) + " over 25 random splits"});
  }

  // 3. Closed form vs. gridded convolution (all-Markovian view of each path).
  {
    std::vector<double> lambda = roadq::compute_arrival_rates(topo, splits0);
    roadq::require_stable(topo, lambda);
    double worst = 0.0;
    int compared = 0;
    for (const roadq::PathDef& path : topo.paths) {
      std::vector<roadq::QueuePoint> pts;
      for (int q : path.queues)
        pts.push_back({lambda[size_t(q)], topo.queues[size_t(q)].mu,
                       roadq::ServiceModel::Markovian});
      roadq::TravelTimeDistribution closed = roadq::path_distribution(pts, cfg);
      if (closed.kind() != roadq::TravelTimeDistribution::Kind::ClosedForm) continue;
      roadq::TravelTimeDistribution grid = roadq::path_distribution_gridded(pts, cfg);
      const std::vector<double>& g = grid.grid();
      for (size_t j = 0; j < g.size(); ++j)
        worst = std::max(worst, std::abs(closed.cdf(double(j) * grid.step()) - g[j]));
      ++compared;
    }
    checks.push_back({"closed form vs convolution", worst <= 1e-3,
                      "sup deviation " + roadq::fmt17(worst) + " over " +
                          std::to_string(compared) + " paths (threshold 1e-3)"});
  }

  // 4. Optimizer trace invariants on a short run.
  {
    roadq::Evaluator eval(topo, engine, cfg);
    roadq::BHConfig bh;
    bh.max_iterations = 500;
    roadq::BHResult res = roadq::bh_optimize(eval, splits0, bh);
    bool ok = true;
    std::string why = "trace length " + std::to_string(res.trace.size());
    double last_accepted = std::numeric_limits<double>::infinity();
    for (const roadq::TraceRow& r : res.trace) {
      if (r.accepted) {
        if (!(r.objective_after < r.objective_before - 1e-12) ||
            !(r.objective_after < last_accepted)) {
          ok = false;
          why = "accepted objective not strictly decreasing at iteration " +
                std::to_string(r.iteration);
        }
        last_accepted = r.objective_after;
      }
    }
    for (size_t k = 0; k < topo.flows.size(); ++k) {
      double sum = 0.0;
      for (int w : topo.flow_paths[k]) sum += res.policy.splits[size_t(w)];
      if (std::abs(sum - 1.0) > 1e-12) {
        ok = false;
        why = "final splits of flow " + topo.flows[k].id + " sum to " + roadq::fmt17(sum);
      }
    }
    if (int(res.trace.size()) > bh.max_iterations) {
      ok = false;
      why = "trace exceeds max_iterations";
    }
    checks.push_back({"optimizer invariants", ok, why + ", termination " + res.termination});
  }

  // 5. Simulation invariants on a short run.
  {
    roadq::Evaluator eval(topo, engine, cfg);
    roadq::SimConfig sim;
    sim.n_vehicles = 20000;
    sim.seed = 1;
    roadq::SimResult res = roadq::simulate(topo, splits0, engine, sim);
    bool ok = true;
    std::string why;
    double worst_little = 0.0;
    for (size_t q = 0; q < topo.queues.size(); ++q) {
      const roadq::QueueStats& st = res.queue_stats[q];
      if (st.arrivals == 0) continue;
      double occupancy = st.mean_occupancy(res.end_time);
      double rhs = double(st.arrivals) / res.end_time * st.mean_sojourn();
      double rel = std::abs(occupancy - rhs) / std::max(occupancy, 1e-12);
      worst_little = std::max(worst_little, rel);
    }
    if (worst_little > 0.03) {
      ok = false;
      why = "Little's-law residual " + roadq::fmt17(worst_little);
    }
    for (size_t k = 0; k < topo.flows.size() && ok; ++k) {
      std::int64_t n_flow = 0;
      std::vector<std::int64_t> counts(topo.paths.size(), 0);
      for (const roadq::VehicleRecord& r : res.vehicles) {
        if (r.flow_index == int(k)) {
          ++n_flow;
          ++counts[size_t(r.path_index)];
        }
      }
      for (int w : topo.flow_paths[k]) {
        double p = splits0[size_t(w)];
        double share = double(counts[size_t(w)]) / double(n_flow);
        double bound = 3.0 * std::sqrt(std::max(0.0, p * (1.0 - p)) / double(n_flow));
        if (std::abs(share - p) > bound + 1e-12) {
          ok = false;
          why = "path share " + topo.paths[size_t(w)].id + " off by " +
                roadq::fmt17(std::abs(share - p));
        }
      }
    }
    double worst_ks = 0.0;
    for (size_t w = 0; w < topo.paths.size() && ok; ++w) {
      if (topo.paths[w].queues.size() != 1 || res.path_samples[w].size() < 1000) continue;
      double ks = roadq::ks_distance(res.path_samples[w], *eval.path_dist(int(w), splits0));
      worst_ks = std::max(worst_ks, ks);
      if (ks > 0.02) {
        ok = false;
        why = "single-queue KS " + roadq::fmt17(ks) + " on " + topo.paths[w].id;
      }
    }
    if (ok)
      why = "worst Little residual " + roadq::fmt17(worst_little) +
            (worst_ks > 0.0 ? ", worst single-queue KS " + roadq::fmt17(worst_ks) : "");
    checks.push_back({"simulation invariants", ok, why});
  }

  bool all = true;
  for (const Check& c : checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    all = all && c.pass;
  }
  fs::create_directories(o.out_dir);
  json configs{{"engine", o.engine}, {"solver", solver_json(cfg)}};
  write_manifest(o, "validate", configs, {});
  std::cout << (all ? "validation passed" : "validation FAILED") << " (" << checks.size()
            << " checks)\n";
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Queue-network travel-time analysis, split optimization, and simulation"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* cmd, bool multi_engine = false) {
    cmd->add_option("input", o.input, "topology file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out-dir", o.out_dir, "output directory (default .)");
    if (multi_engine) {
      cmd->add_option("--engine", o.engines, "service-model engine (repeatable)")
          ->check(CLI::IsMember({"declared", "mm1", "md1"}));
    } else {
      cmd->add_option("--engine", o.engine, "service-model engine")
          ->check(CLI::IsMember({"declared", "mm1", "md1"}));
    }
    cmd->add_option("--step", o.step, "grid resolution")->each([&](const std::string&) {
      o.has_step = true;
    });
    cmd->add_option("--horizon", o.horizon, "grid truncation time")
        ->each([&](const std::string&) { o.has_horizon = true; });
    cmd->add_option("--tail-tol", o.tail_tol, "max probability mass beyond the horizon")
        ->each([&](const std::string&) { o.has_tail = true; });
    cmd->add_option("--md1-terms", o.md1_terms, "series term cap for deterministic service")
        ->each([&](const std::string&) { o.has_terms = true; });
  };

  CLI::App* optimize = app.add_subcommand("optimize", "run the split optimizer");
  add_common(optimize);
  optimize->add_option("--phi0", o.phi0, "initial shift fraction (default 0.2)");
  optimize->add_option("--phi-min", o.phi_min, "termination threshold (default 1e-3)");
  optimize->add_option("--max-iterations", o.max_iterations, "iteration cap (default 10000)");
  optimize->add_option("--wprime-rule", o.wprime_rule, "receiving-path rule (default literal)")
      ->check(CLI::IsMember({"literal", "maxmin"}));
  optimize->add_option("--policy", o.policy_file, "warm-start policy file")
      ->check(CLI::ExistingFile);

  CLI::App* sweep = app.add_subcommand("sweep", "sweep one path's split probability");
  add_common(sweep, true);
  sweep->add_option("--flow", o.sweep_flow, "flow to sweep (must have exactly two paths)");
  sweep->add_option("--path", o.sweep_path, "swept path signature (default: second path)");
  sweep->add_option("--from", o.sweep_from, "lowest split value (default 0)");
  sweep->add_option("--to", o.sweep_to, "highest split value (default 1)");
  sweep->add_option("--points", o.sweep_points, "number of sweep points (default 21)");

  CLI::App* cdf = app.add_subcommand("cdf", "emit per-path travel-time CDFs");
  add_common(cdf);
  cdf->add_option("--policy", o.policy_file, "policy file fixing the operating point")
      ->check(CLI::ExistingFile);

  CLI::App* simulate = app.add_subcommand("simulate", "discrete-event simulation cross-check");
  add_common(simulate);
  simulate->add_option("--policy", o.policy_file, "policy file fixing the operating point")
      ->check(CLI::ExistingFile);
  simulate->add_option("--n-vehicles", o.n_vehicles, "vehicles per flow (default 100000)");
  simulate->add_option("--seed", o.seed, "RNG seed (default 1)");
  simulate->add_option("--warmup", o.warmup, "earliest-exiting fraction discarded (default 0.1)");
  simulate->add_option("--occupancy-cap", o.occupancy_cap, "backlog abort threshold");
  simulate->add_option("--batch", o.batch_kind, "arrival batch kind (default constant)")
      ->check(CLI::IsMember({"constant", "geometric"}));
  simulate->add_option("--batch-mean", o.batch_mean, "mean batch size (default 1)");

  CLI::App* validate = app.add_subcommand("validate", "run the self-check battery");
  add_common(validate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // parse failures share the parse-error exit code
  }

  try {
    if (optimize->parsed()) return cmd_optimize(o);
    if (sweep->parsed()) return cmd_sweep(o);
    if (cdf->parsed()) return cmd_cdf(o);
    if (simulate->parsed()) return cmd_simulate(o);
    if (validate->parsed()) return cmd_validate(o);
    return 2;
  } catch (const roadq::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const roadq::InstabilityError& e) {
    std::cerr << "instability: " << e.what() << "\n";
    return 3;
  } catch (const roadq::InfeasibilityError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 5;
  }
}
