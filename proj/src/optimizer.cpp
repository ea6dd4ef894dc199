#include "roadq/optimizer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace roadq {

WPrimeRule wprime_rule_from_string(const std::string& name) {
  if (name == "literal") return WPrimeRule::LiteralPseudocode;
  if (name == "maxmin") return WPrimeRule::MaxMinSlack;
  throw ParseError("unknown receiving-path rule '" + name + "' (expected literal or maxmin)");
}

const char* wprime_rule_name(WPrimeRule rule) {
  return rule == WPrimeRule::LiteralPseudocode ? "literal" : "maxmin";
}

void BHConfig::validate() const {
  if (!(phi0 > 0.0 && phi0 < 1.0)) throw ParseError("phi0 must lie in (0, 1)");
  if (!(phi_min > 0.0 && phi_min < phi0))
    throw ParseError("phi_min must lie in (0, phi0)");
  if (max_iterations < 1) throw ParseError("max_iterations must be positive");
  if (!(improve_tol >= 0.0)) throw ParseError("improve_tol must be nonnegative");
}

// ---------------------------------------------------------------------------
// Critical queues
// ---------------------------------------------------------------------------

std::set<std::string> critical_queues(const Topology& topo, const std::vector<double>& lambda,
                                      double phi) {
  if (!topo.paths_enumerated()) throw ParseError("paths not enumerated yet");
  if (lambda.size() != topo.queues.size())
    throw ParseError("arrival-rate vector size mismatch");

  std::vector<double> slack(topo.queues.size());
  for (size_t i = 0; i < topo.queues.size(); ++i) slack[i] = topo.queues[i].mu - lambda[i];

  std::set<std::string> out;
  const size_t n_paths = topo.paths.size();
  for (size_t w1 = 0; w1 < n_paths; ++w1) {
    const std::vector<int>& q1 = topo.paths[w1].queues;
    for (size_t w2 = 0; w2 < n_paths; ++w2) {
      if (w1 == w2) continue;
      double budget = phi * topo.flows[size_t(topo.paths[w2].flow_index)].rate;
      const std::vector<int>& q2 = topo.paths[w2].queues;
      for (int qi : q1) {
        if (std::find(q2.begin(), q2.end(), qi) == q2.end()) continue;
        // Minimum slack among the *other* queues of w1; a single-queue path
        // offers no comparison queue and so no candidates.
        double min_other = std::numeric_limits<double>::infinity();
        for (int qj : q1) {
          if (qj != qi) min_other = std::min(min_other, slack[size_t(qj)]);
        }
        if (!std::isfinite(min_other)) continue;
        if (slack[size_t(qi)] - min_other <= budget) out.insert(topo.queues[size_t(qi)].id);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Improvement test
// ---------------------------------------------------------------------------

bool does_improve(Evaluator& eval, const SplitVector& splits, int k_star, int w_star,
                  int w_prime, double phi, double tol) {
  const Topology& topo = eval.topology();
  if (splits.size() != topo.paths.size()) throw ParseError("split vector size mismatch");
  if (w_star < 0 || size_t(w_star) >= topo.paths.size() || w_prime < 0 ||
      size_t(w_prime) >= topo.paths.size())
    throw ParseError("path index out of range");
  if (topo.paths[size_t(w_star)].flow_index != k_star ||
      topo.paths[size_t(w_prime)].flow_index != k_star)
    throw ParseError("both paths must belong to the designated flow");

  double shift = std::min(phi, splits[size_t(w_star)]);
  if (!(shift > 0.0) || w_star == w_prime) return false;

  SplitVector candidate = splits;
  candidate[size_t(w_star)] -= shift;
  candidate[size_t(w_prime)] += shift;

  double before, after;
  try {
    before = eval.objective(splits);
    after = eval.objective(candidate);
  } catch (const InstabilityError&) {
    return false;
  } catch (const InfeasibilityError&) {
    return false;
  }
  return after < before - tol;
}

// ---------------------------------------------------------------------------
// Bottleneck Hunting
// ---------------------------------------------------------------------------

namespace {

void normalize_per_flow(const Topology& topo, SplitVector& splits) {
  for (size_t k = 0; k < topo.flows.size(); ++k) {
    double sum = 0.0;
    for (int w : topo.flow_paths[k]) sum += splits[size_t(w)];
    if (!(sum > 0.0))
      throw ParseError("flow '" + topo.flows[k].id + "': split probabilities sum to zero");
    if (std::abs(sum - 1.0) > 1e-9)
      throw ParseError("flow '" + topo.flows[k].id + "': split probabilities sum to " +
                       std::to_string(sum) + ", expected 1");
    for (int w : topo.flow_paths[k]) splits[size_t(w)] /= sum;
  }
}

Policy make_policy(const Topology& topo, const SplitVector& splits, const EdgeAlphaMap& alphas,
                   double objective_value) {
  Policy p;
  p.splits = splits;
  p.service_rates.reserve(topo.queues.size());
  for (const RoadQueue& q : topo.queues) p.service_rates.push_back(q.mu);
  p.alphas = alphas;
  p.objective_value = objective_value;
  return p;
}

}  // namespace

BHResult bh_optimize(Evaluator& eval, SplitVector initial, const BHConfig& cfg) {
  cfg.validate();
  const Topology& topo = eval.topology();
  if (initial.size() != topo.paths.size()) throw ParseError("split vector size mismatch");
  for (double p : initial) {
    if (!(p >= -1e-12) || !std::isfinite(p))
      throw ParseError("split probabilities must be nonnegative");
  }
  for (double& p : initial) p = std::max(0.0, p);
  normalize_per_flow(topo, initial);
  require_stable(topo, eval.rates(initial));

  BHResult res;

  bool any_dof = false;
  for (const std::vector<int>& wp : topo.flow_paths) {
    if (wp.size() >= 2) any_dof = true;
  }
  if (!any_dof) {
    AlphaReconstruction rec = reconstruct_alphas(topo, initial);
    res.policy = make_policy(topo, initial, rec.alphas, eval.objective(initial));
    res.reconstruction = std::move(rec);
    res.termination = "no_degrees_of_freedom";
    return res;
  }

  SplitVector splits = std::move(initial);
  double phi = cfg.phi0;
  double objective = eval.objective(splits);

  int iter = 0;
  while (iter < cfg.max_iterations && phi >= cfg.phi_min) {
    ++iter;
    std::vector<double> lambda = eval.rates(splits);
    std::vector<double> slack(topo.queues.size());
    for (size_t i = 0; i < topo.queues.size(); ++i) slack[i] = topo.queues[i].mu - lambda[i];

    std::set<std::string> cq = critical_queues(topo, lambda, phi);
    auto in_cq = [&](int w) {
      for (int q : topo.paths[size_t(w)].queues) {
        if (cq.count(topo.queues[size_t(q)].id)) return true;
      }
      return false;
    };

    // Flows that still own at least one path clear of every critical queue;
    // when no flow does, all flows stay eligible.
    std::vector<int> eligible;
    for (size_t k = 0; k < topo.flows.size(); ++k) {
      bool has_free_path = false;
      for (int w : topo.flow_paths[k]) {
        if (!in_cq(w)) has_free_path = true;
      }
      if (has_free_path) eligible.push_back(int(k));
    }
    if (eligible.empty()) {
      eligible.resize(topo.flows.size());
      for (size_t k = 0; k < topo.flows.size(); ++k) eligible[k] = int(k);
    }

    FlowEvaluation ev = eval.evaluate(splits);

    int k_star = eligible[0];
    for (int k : eligible) {
      if (ev.delta_flows[size_t(k)] > ev.delta_flows[size_t(k_star)]) k_star = k;
    }

    const std::vector<int>& k_paths = topo.flow_paths[size_t(k_star)];
    int w_star = k_paths[0];
    for (int w : k_paths) {
      if (ev.delta_paths[size_t(w)] > ev.delta_paths[size_t(w_star)]) w_star = w;
    }

    auto max_slack_of = [&](int w) {
      double m = -std::numeric_limits<double>::infinity();
      for (int q : topo.paths[size_t(w)].queues) m = std::max(m, slack[size_t(q)]);
      return m;
    };
    auto min_slack_of = [&](int w) {
      double m = std::numeric_limits<double>::infinity();
      for (int q : topo.paths[size_t(w)].queues) m = std::min(m, slack[size_t(q)]);
      return m;
    };
    int w_prime = k_paths[0];
    if (cfg.wprime_rule == WPrimeRule::LiteralPseudocode) {
      for (int w : k_paths) {
        if (max_slack_of(w) < max_slack_of(w_prime)) w_prime = w;
      }
    } else {
      for (int w : k_paths) {
        if (min_slack_of(w) > min_slack_of(w_prime)) w_prime = w;
      }
    }

    TraceRow row;
    row.iteration = iter;
    row.phi = phi;
    row.k_star = topo.flows[size_t(k_star)].id;
    row.w_star = topo.paths[size_t(w_star)].id;
    row.w_prime = topo.paths[size_t(w_prime)].id;
    row.objective_before = objective;

    if (does_improve(eval, splits, k_star, w_star, w_prime, phi, cfg.improve_tol)) {
      double shift = std::min(phi, splits[size_t(w_star)]);
      splits[size_t(w_star)] -= shift;
      splits[size_t(w_prime)] += shift;
      double sum = 0.0;
      for (int w : k_paths) sum += splits[size_t(w)];
      for (int w : k_paths) splits[size_t(w)] /= sum;
      objective = eval.objective(splits);
      row.accepted = true;
    } else {
      phi /= 2.0;
      row.accepted = false;
    }
    row.objective_after = objective;
    res.trace.push_back(row);
  }

  res.termination = (phi < cfg.phi_min) ? "phi_min" : "max_iterations";
  AlphaReconstruction rec = reconstruct_alphas(topo, splits);
  res.policy = make_policy(topo, splits, rec.alphas, objective);
  res.reconstruction = std::move(rec);
  return res;
}

// ---------------------------------------------------------------------------
// Grid-search baseline
// ---------------------------------------------------------------------------

namespace {

// All length-m vectors of nonnegative integers summing to `levels`,
// in lexicographic order.
void compositions(int levels, int m, std::vector<int>& prefix,
                  std::vector<std::vector<int>>& out) {
  if (m == 1) {
    prefix.push_back(levels);
    out.push_back(prefix);
    prefix.pop_back();
    return;
  }
  for (int c = 0; c <= levels; ++c) {
    prefix.push_back(c);
    compositions(levels - c, m - 1, prefix, out);
    prefix.pop_back();
  }
}

}  // namespace

Policy grid_search(Evaluator& eval, double resolution) {
  const Topology& topo = eval.topology();
  if (!(resolution > 0.0 && resolution <= 1.0))
    throw ParseError("grid resolution must lie in (0, 1]");

  int dof = 0;
  for (const std::vector<int>& wp : topo.flow_paths) dof += int(wp.size()) - 1;
  if (dof > 3)
    throw InfeasibilityError(
        "grid search supports at most 3 degrees of freedom; this topology has " +
        std::to_string(dof));

  if (topo.flows.empty()) return make_policy(topo, {}, {}, 0.0);

  const int levels = std::max(1, int(std::llround(1.0 / resolution)));
  std::vector<std::vector<std::vector<int>>> per_flow;  // flow -> grid point -> counts
  for (const std::vector<int>& wp : topo.flow_paths) {
    std::vector<std::vector<int>> pts;
    std::vector<int> prefix;
    compositions(levels, int(wp.size()), prefix, pts);
    per_flow.push_back(std::move(pts));
  }

  SplitVector splits(topo.paths.size(), 0.0);
  SplitVector best;
  double best_obj = std::numeric_limits<double>::infinity();
  std::vector<size_t> cursor(per_flow.size(), 0);

  bool done = topo.flows.empty();
  while (!done) {
    for (size_t k = 0; k < per_flow.size(); ++k) {
      const std::vector<int>& counts = per_flow[k][cursor[k]];
      const std::vector<int>& wp = topo.flow_paths[k];
      for (size_t i = 0; i < wp.size(); ++i)
        splits[size_t(wp[i])] = double(counts[i]) / double(levels);
    }
    if (eval.stable(splits)) {
      double obj = eval.objective(splits);
      if (obj < best_obj) {
        best_obj = obj;
        best = splits;
      }
    }
    // advance the mixed-radix cursor
    size_t k = 0;
    for (; k < cursor.size(); ++k) {
      if (++cursor[k] < per_flow[k].size()) break;
      cursor[k] = 0;
    }
    if (k == cursor.size()) done = true;
  }

  if (best.empty())
    throw InfeasibilityError("every grid point is unstable; no feasible policy found");

  AlphaReconstruction rec = reconstruct_alphas(topo, best);
  return make_policy(topo, best, rec.alphas, best_obj);
}

// ---------------------------------------------------------------------------
// Transition-probability reconstruction
// ---------------------------------------------------------------------------

namespace {

// Consecutive queue pairs of a path, as (from,to) queue indices.
std::vector<std::pair<int, int>> path_edges(const PathDef& path) {
  std::vector<std::pair<int, int>> out;
  for (size_t i = 0; i + 1 < path.queues.size(); ++i)
    out.push_back({path.queues[i], path.queues[i + 1]});
  return out;
}

}  // namespace

AlphaReconstruction reconstruct_alphas(const Topology& topo, const SplitVector& splits) {
  if (!topo.paths_enumerated()) throw ParseError("paths not enumerated yet");
  if (splits.size() != topo.paths.size()) throw ParseError("split vector size mismatch");

  // Edges used by any path, and by any positive-probability path.
  std::map<std::pair<int, int>, bool> used;          // edge -> used by positive path
  std::map<int, std::set<std::pair<int, int>>> out_pos;  // queue -> positive out-edges
  for (size_t w = 0; w < topo.paths.size(); ++w) {
    for (auto e : path_edges(topo.paths[w])) {
      bool positive = splits[w] > 0.0;
      auto it = used.find(e);
      if (it == used.end()) {
        used.emplace(e, positive);
      } else {
        it->second = it->second || positive;
      }
      if (positive) out_pos[e.first].insert(e);
    }
  }

  AlphaReconstruction rec;
  auto id_of = [&](int q) { return topo.queues[size_t(q)].id; };

  // Classify: fixed -> constant; sole positive out-edge of its queue -> 1
  // (the queue passes its traffic straight through, and leaving such edges to
  // the minimum-norm solve would smear probability onto them); remaining
  // positive-used edges become unknowns; edges used only by zero-probability
  // paths get 0.
  std::map<std::pair<int, int>, double> value;    // resolved constants
  std::map<std::pair<int, int>, int> unknown_id;  // edge -> column
  for (const auto& [e, positive] : used) {
    std::optional<double> fixed = topo.fixed_alpha(e.first, e.second);
    if (fixed) {
      value[e] = *fixed;
    } else if (!positive) {
      value[e] = 0.0;
    } else if (out_pos[e.first].size() == 1) {
      value[e] = 1.0;
    } else {
      int col = int(unknown_id.size());
      unknown_id[e] = col;
    }
  }
  rec.unknowns = int(unknown_id.size());

  // One equation per positive path: sum of log-alphas along it equals log p.
  // Paths whose constants already include a zero cannot be log-linearized and
  // are left to the reproduction check.
  std::vector<std::vector<std::pair<int, double>>> rows;  // (column, coefficient)
  std::vector<double> rhs;
  for (size_t w = 0; w < topo.paths.size(); ++w) {
    if (!(splits[w] > 0.0)) continue;
    double b = std::log(splits[w]);
    std::vector<std::pair<int, double>> row;
    bool broken = false;
    for (auto e : path_edges(topo.paths[w])) {
      auto uit = unknown_id.find(e);
      if (uit != unknown_id.end()) {
        row.push_back({uit->second, 1.0});
      } else {
        double v = value.at(e);
        if (v <= 0.0) {
          broken = true;
          break;
        }
        b -= std::log(v);
      }
    }
    if (broken || row.empty()) continue;
    rows.push_back(std::move(row));
    rhs.push_back(b);
  }

  if (rec.unknowns > 0) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(rec.unknowns);
    std::vector<std::pair<int, int>> col_edge(size_t(rec.unknowns));
    for (const auto& [e, col] : unknown_id) col_edge[size_t(col)] = e;

    if (rows.empty()) {
      rec.rank = 0;
      for (auto e : col_edge) rec.free_edges.push_back({id_of(e.first), id_of(e.second)});
    } else {
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(long(rows.size()), long(rec.unknowns));
      Eigen::VectorXd b(long(rows.size()));
      for (size_t r = 0; r < rows.size(); ++r) {
        b[long(r)] = rhs[r];
        for (auto [col, coef] : rows[r]) A(long(r), long(col)) += coef;
      }
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeFullV);
      svd.setThreshold(1e-12);
      rec.rank = int(svd.rank());
      x = svd.solve(b);

      // One representative edge (largest component) per null-space direction.
      const Eigen::MatrixXd& V = svd.matrixV();
      std::set<std::pair<int, int>> seen;
      for (long c = svd.rank(); c < V.cols(); ++c) {
        Eigen::Index best_row = 0;
        V.col(c).cwiseAbs().maxCoeff(&best_row);
        auto e = col_edge[size_t(best_row)];
        if (seen.insert(e).second) rec.free_edges.push_back({id_of(e.first), id_of(e.second)});
      }
    }
    for (const auto& [e, col] : unknown_id) value[e] = std::exp(x[long(col)]);
  }

  for (const auto& [e, v] : value) rec.alphas[{id_of(e.first), id_of(e.second)}] = v;

  SplitVector reproduced = splits_from_alphas(topo, rec.alphas);
  for (size_t w = 0; w < splits.size(); ++w)
    rec.reproduction_error = std::max(rec.reproduction_error, std::abs(splits[w] - reproduced[w]));
  return rec;
}

SplitVector splits_from_alphas(const Topology& topo, const EdgeAlphaMap& alphas) {
  if (!topo.paths_enumerated()) throw ParseError("paths not enumerated yet");
  SplitVector out(topo.paths.size(), 1.0);
  for (size_t w = 0; w < topo.paths.size(); ++w) {
    double prod = 1.0;
    for (auto e : path_edges(topo.paths[w])) {
      auto it = alphas.find({topo.queues[size_t(e.first)].id, topo.queues[size_t(e.second)].id});
      prod *= (it == alphas.end()) ? 0.0 : it->second;
    }
    out[w] = prod;
  }
  return out;
}

std::map<std::string, double> check_flow_conservation(const Topology& topo,
                                                      const SplitVector& splits) {
  return check_flow_conservation(topo, splits, reconstruct_alphas(topo, splits).alphas);
}

}  // namespace roadq
