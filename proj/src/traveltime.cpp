#include "roadq/traveltime.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace roadq {

Engine engine_from_string(const std::string& name) {
  if (name == "mm1") return Engine::AllMarkovian;
  if (name == "md1") return Engine::AllDeterministic;
  if (name.empty() || name == "declared") return Engine::Declared;
  throw ParseError("unknown engine '" + name + "' (expected mm1, md1, or declared)");
}

const char* engine_name(Engine engine) {
  switch (engine) {
    case Engine::AllMarkovian: return "mm1";
    case Engine::AllDeterministic: return "md1";
    default: return "declared";
  }
}

SolverConfig SolverConfig::defaults_for(const Topology& topo) {
  double omega_min = std::numeric_limits<double>::infinity();
  double omega_max = 0.0;
  for (const Flow& f : topo.flows) {
    omega_min = std::min(omega_min, f.omega);
    omega_max = std::max(omega_max, f.omega);
  }
  if (topo.flows.empty()) {
    omega_min = 1.0;
    omega_max = 1.0;
  }
  SolverConfig cfg;
  cfg.step = omega_min / 2000.0;
  cfg.horizon = 10.0 * omega_max;
  cfg.tail_tol = 1e-4;
  cfg.md1_series_terms = 200;
  return cfg;
}

void SolverConfig::validate_for(const Topology& topo) const {
  if (!(step > 0.0)) throw ParseError("solver step must be positive");
  if (!(tail_tol > 0.0 && tail_tol <= 0.01))
    throw ParseError("tail_tol must be in (0, 0.01]");
  if (md1_series_terms < 10) throw ParseError("md1_series_terms must be at least 10");
  double omega_max = 0.0;
  for (const Flow& f : topo.flows) omega_max = std::max(omega_max, f.omega);
  if (!(horizon >= 4.0 * omega_max) || !(horizon > step))
    throw ParseError("horizon must be at least 4x the largest target travel time");
  if (horizon / step > 2e6) throw ParseError("grid too fine: horizon/step exceeds 2e6 cells");
}

// ---------------------------------------------------------------------------
// TravelTimeDistribution
// ---------------------------------------------------------------------------

TravelTimeDistribution TravelTimeDistribution::closed_form(std::vector<Term> terms,
                                                           double mean) {
  TravelTimeDistribution d;
  d.kind_ = Kind::ClosedForm;
  d.terms_ = std::move(terms);
  d.mean_ = mean;
  return d;
}

TravelTimeDistribution TravelTimeDistribution::gridded(std::vector<double> cdf, double step,
                                                       double tail_tol,
                                                       std::function<double(double)> exact_cdf) {
  if (cdf.size() < 2) throw ParseError("gridded distribution needs at least two samples");
  if (!(step > 0.0)) throw ParseError("gridded distribution needs a positive step");
  for (size_t j = 0; j < cdf.size(); ++j) {
    if (j > 0 && cdf[j] < cdf[j - 1] - 1e-12)
      throw ParseError("gridded CDF samples must be nondecreasing");
    if (!(cdf[j] >= -1e-12 && cdf[j] <= 1.0 + 1e-9))
      throw ParseError("gridded CDF samples must lie in [0, 1]");
    cdf[j] = std::min(1.0, std::max(0.0, cdf[j]));
    if (j > 0) cdf[j] = std::max(cdf[j], cdf[j - 1]);
  }
  if (cdf.back() < 1.0 - tail_tol) {
    std::ostringstream msg;
    msg << "horizon too short: CDF reaches only " << cdf.back()
        << " at the horizon (tail mass " << 1.0 - cdf.back() << " > tail_tol " << tail_tol
        << "); enlarge the horizon";
    throw InfeasibilityError(msg.str());
  }

  TravelTimeDistribution d;
  d.kind_ = Kind::Gridded;
  d.step_ = step;
  d.horizon_ = step * double(cdf.size() - 1);
  d.exact_ = std::move(exact_cdf);
  // Mean via the trapezoid rule on the complement (the tail beyond the
  // horizon, at most tail_tol in mass, is not represented).
  double acc = (1.0 - cdf[0]) / 2.0;
  for (size_t j = 1; j < cdf.size(); ++j) acc += 1.0 - cdf[j];
  d.mean_ = acc * step;
  d.grid_ = std::move(cdf);
  return d;
}

double TravelTimeDistribution::complement(double t) const {
  if (t < 0.0) return 1.0;
  if (kind_ == Kind::ClosedForm) {
    // Kahan-compensated sum of A * t^n * exp(tau * t).
    double sum = 0.0, comp = 0.0;
    for (const Term& term : terms_) {
      double v = term.A * std::exp(term.tau * t + double(term.n) * (t > 0.0 ? std::log(t) : 0.0));
      if (term.n > 0 && t == 0.0) v = 0.0;
      double y = v - comp;
      double s = sum + y;
      comp = (s - sum) - y;
      sum = s;
    }
    return std::min(1.0, std::max(0.0, sum));
  }
  return 1.0 - cdf(t);
}

double TravelTimeDistribution::cdf(double t) const {
  if (t < 0.0) return 0.0;
  if (kind_ == Kind::ClosedForm) return 1.0 - complement(t);
  double x = t / step_;
  if (x >= double(grid_.size() - 1)) {
    if (t > horizon_ * (1.0 + 1e-12) + 1e-300)
      throw InfeasibilityError("time beyond the distribution horizon; enlarge the horizon");
    return grid_.back();
  }
  size_t j = size_t(x);
  double frac = x - double(j);
  return grid_[j] + frac * (grid_[j + 1] - grid_[j]);
}

double delta_path(const TravelTimeDistribution& dist, double t_hat) {
  return dist.complement(t_hat);
}

// ---------------------------------------------------------------------------
// Scalar oracles
// ---------------------------------------------------------------------------

double mm1_sojourn_cdf(double lambda, double mu, double t) {
  if (lambda >= mu) throw InstabilityError("sojourn distribution undefined: lambda >= mu");
  if (t < 0.0) return 0.0;
  return -std::expm1(-(mu - lambda) * t);
}

double mm1_mean_sojourn(double lambda, double mu) {
  if (lambda >= mu) throw InstabilityError("mean sojourn undefined: lambda >= mu");
  return 1.0 / (mu - lambda);
}

double md1_mean_sojourn(double lambda, double mu) {
  if (lambda >= mu) throw InstabilityError("mean sojourn undefined: lambda >= mu");
  double d = 1.0 / mu;
  double rho = lambda / mu;
  return d + lambda * d * d / (2.0 * (1.0 - rho));
}

namespace {

// Decay exponent of the waiting-time tail for deterministic service with
// Poisson arrivals: the positive root of lambda*(exp(theta/mu) - 1) = theta.
// The tail obeys P(W > t) <= exp(-theta t), which justifies clamping the far
// tail to 1 where the alternating series would drown in cancellation noise.
double md1_tail_exponent(double lambda, double mu) {
  double d = 1.0 / mu;
  auto g = [&](double x) { return lambda * std::expm1(x * d) - x; };
  // The root is below any x with g(x) > 0; bracket by doubling.
  double hi = mu;
  while (g(hi) <= 0.0) hi *= 2.0;
  double lo = 0.0;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    (g(mid) > 0.0 ? hi : lo) = mid;
    if (hi - lo <= 1e-14 * hi) break;
  }
  return 0.5 * (lo + hi);
}

constexpr long double kLongEps = 1.1e-19L;

// The alternating series loses roughly exp(lambda t) * terms * eps to
// cancellation. Find the smallest tail level L such that clamping the CDF to
// 1 once exp(-theta t) <= L keeps the series noise below L/10 everywhere the
// series is actually evaluated. Levels above ~1e-7 mean heavy load; callers
// compare against their tail tolerance.
double md1_clamp_level(double lambda, double mu, double theta) {
  auto noise10 = [&](double level) {
    double t_c = std::log(1.0 / level) / theta;
    long double terms = (long double)(t_c * mu) + 2.0L;
    long double expo = (long double)std::min(lambda * t_c, 11000.0);
    return 10.0 * double(std::min(expl(expo) * terms * kLongEps, 1.0L));
  };
  // Raising the level shrinks t_c and with it the accumulated noise, so
  // "noise10(L) <= L" is monotone in L: bisect for the smallest such level.
  if (noise10(1e-7) <= 1e-7) return 1e-7;
  if (noise10(1.0) > 1.0) return 10.0;  // not attainable at any useful level
  double lo = std::log(1e-7), hi = 0.0;
  for (int i = 0; i < 80; ++i) {
    double mid = 0.5 * (lo + hi);
    (noise10(std::exp(mid)) <= std::exp(mid) ? hi : lo) = mid;
  }
  return std::exp(hi);
}

}  // namespace

double md1_wait_cdf(double lambda, double mu, double t, int max_terms) {
  if (!(mu > 0.0) || !(lambda >= 0.0))
    throw ParseError("waiting-time CDF needs mu > 0 and lambda >= 0");
  if (lambda >= mu) throw InstabilityError("waiting-time CDF undefined: lambda >= mu");
  if (t < 0.0) return 0.0;
  if (lambda == 0.0) return 1.0;

  double d = 1.0 / mu;
  double rho = lambda / mu;
  double theta = md1_tail_exponent(lambda, mu);
  double level = md1_clamp_level(lambda, mu, theta);
  if (theta * t >= std::log(1.0 / level)) return 1.0;

  long long k = (long long)(std::floor(t / d + 1e-12));
  if (k + 1 > max_terms) {
    std::ostringstream msg;
    msg << "waiting-time series needs " << (k + 1) << " terms (cap " << max_terms
        << "); raise md1_series_terms or shrink the horizon";
    throw InfeasibilityError(msg.str());
  }

  long double sum = 0.0L, comp = 0.0L;
  for (long long j = 0; j <= k; ++j) {
    long double y = (long double)lambda * ((long double)t - (long double)j * d);
    long double term;
    if (y <= 0.0L) {
      term = (j == 0) ? 1.0L : 0.0L;
    } else {
      long double mag = expl(y + (long double)j * logl(y) - lgammal((long double)j + 1.0L));
      term = (j % 2 == 0) ? mag : -mag;
    }
    long double yk = term - comp;
    long double s = sum + yk;
    comp = (s - sum) - yk;
    sum = s;
  }
  long double v = (1.0L - (long double)rho) * sum;
  if (v < 0.0L) v = 0.0L;
  if (v > 1.0L) v = 1.0L;
  return double(v);
}

double md1_sojourn_cdf(double lambda, double mu, double t, int max_terms) {
  double d = 1.0 / mu;
  if (t < d) return 0.0;
  return md1_wait_cdf(lambda, mu, t - d, max_terms);
}

// ---------------------------------------------------------------------------
// Closed form for sums of independent exponentials
// ---------------------------------------------------------------------------

std::vector<TravelTimeDistribution::Term> hypoexp_complement_terms(std::vector<double> rates) {
  using Term = TravelTimeDistribution::Term;
  if (rates.empty()) return {};
  for (double r : rates) {
    if (!(r > 0.0) || !std::isfinite(r)) return {};
  }
  std::sort(rates.begin(), rates.end());
  double r_max = rates.back();

  // Group near-equal rates (relative gap < 1e-8) so repeated slacks get the
  // exact polynomial-factor treatment instead of a singular denominator.
  struct Group {
    double v = 0.0;
    int k = 0;
  };
  std::vector<Group> groups;
  for (double r : rates) {
    if (!groups.empty() &&
        std::abs(r - groups.back().v / double(groups.back().k)) < 1e-8 * r_max) {
      groups.back().v += r;
      groups.back().k += 1;
    } else {
      groups.push_back({r, 1});
    }
  }
  for (Group& g : groups) g.v /= double(g.k);  // group rate = mean of members

  std::vector<Term> terms;

  if (groups.size() == 1) {
    // Pure Erlang: complement = exp(-v t) * sum_{m<k} (v t)^m / m!.
    const Group& g = groups[0];
    double coef = 1.0;
    for (int m = 0; m < g.k; ++m) {
      terms.push_back({coef, m, -g.v});
      coef *= g.v / double(m + 1);
    }
    return terms;
  }

  const size_t n = groups.size();
  for (size_t i = 0; i < n; ++i) {
    const int ki = groups[i].k;
    const double vi = groups[i].v;

    // H(s) = prod_j v_j^{k_j} / prod_{j != i} (s + v_j)^{k_j}, evaluated with
    // all derivatives at s = -v_i via the log-derivative recursion.
    // H^(p) = sum_{q<p} C(p-1,q) H^(q) psi^(p-1-q), psi = (log H)'.
    std::vector<double> h(size_t(ki), 0.0);    // h[p] = H^(p)(-v_i)
    std::vector<double> psi(size_t(ki), 0.0);  // psi[r] = psi^(r)(-v_i)

    double log_abs = 0.0;
    double sign = 1.0;
    for (size_t j = 0; j < n; ++j) {
      log_abs += double(groups[j].k) * std::log(groups[j].v);
      if (j == i) continue;
      double dj = groups[j].v - vi;
      log_abs -= double(groups[j].k) * std::log(std::abs(dj));
      if (dj < 0.0 && groups[j].k % 2 == 1) sign = -sign;
    }
    if (log_abs > 700.0) return {};  // coefficients overflow; grid fallback
    h[0] = sign * std::exp(log_abs);

    for (int r = 0; r + 1 <= ki - 1; ++r) {
      // psi^(r)(-v_i) = (-1)^(r+1) r! sum_{j != i} k_j / (v_j - v_i)^(r+1)
      double s = 0.0;
      for (size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        double dj = groups[j].v - vi;
        s += double(groups[j].k) / std::pow(dj, double(r + 1));
      }
      double fact = 1.0;
      for (int m = 2; m <= r; ++m) fact *= double(m);
      psi[size_t(r)] = ((r % 2 == 0) ? -1.0 : 1.0) * fact * s;
    }
    for (int p = 1; p <= ki - 1; ++p) {
      double acc = 0.0;
      double binom = 1.0;  // C(p-1, q)
      for (int q = 0; q <= p - 1; ++q) {
        acc += binom * h[size_t(q)] * psi[size_t(p - 1 - q)];
        binom = binom * double(p - 1 - q) / double(q + 1);
      }
      h[size_t(p)] = acc;
    }

    // a_{i,j} = H^(k_i - j)(-v_i) / (k_i - j)!  for j = 1..k_i
    std::vector<double> a(size_t(ki) + 1, 0.0);
    for (int j = 1; j <= ki; ++j) {
      double fact = 1.0;
      for (int m = 2; m <= ki - j; ++m) fact *= double(m);
      a[size_t(j)] = h[size_t(ki - j)] / fact;
    }

    // Complement contribution: exp(-v_i t) * sum_m C_m t^m with
    // C_m = (1/m!) * sum_{j>m} a_{i,j} / v_i^{j-m}.
    double mfact = 1.0;
    for (int m = 0; m <= ki - 1; ++m) {
      if (m >= 2) mfact *= double(m);
      double c = 0.0;
      for (int j = m + 1; j <= ki; ++j) c += a[size_t(j)] / std::pow(vi, double(j - m));
      c /= mfact;
      if (c != 0.0) terms.push_back({c, m, -vi});
    }
  }

  // Validation: the complement must be exactly 1 at t = 0; cancellation blowup
  // in ill-conditioned cases fails this and the caller falls back to the grid.
  double g0 = 0.0;
  for (const Term& t : terms) {
    if (!std::isfinite(t.A)) return {};
    if (t.n == 0) g0 += t.A;
  }
  if (std::abs(g0 - 1.0) > 1e-9) return {};
  return terms;
}

// ---------------------------------------------------------------------------
// Distributions for queues and paths
// ---------------------------------------------------------------------------

namespace {

size_t grid_cells(const SolverConfig& cfg) {
  return size_t(std::floor(cfg.horizon / cfg.step + 0.5));
}

// Probability masses on the lattice {0, step, 2*step, ...}: cell j takes the
// CDF increment over ((j-1/2) step, (j+1/2) step], so lattice positions add
// exactly under convolution and midpoint errors cancel to second order.
std::vector<double> cell_masses(const std::function<double(double)>& cdf, double step,
                                size_t max_cells, double keep_tail) {
  std::vector<double> m;
  m.reserve(1024);
  double prev = 0.0;
  for (size_t j = 0; j <= max_cells; ++j) {
    double hi = cdf((double(j) + 0.5) * step);
    m.push_back(std::max(0.0, hi - prev));
    prev = hi;
    if (1.0 - hi <= keep_tail) return m;
  }
  throw InfeasibilityError(
      "horizon too short: a queue's sojourn distribution does not reach the tail "
      "tolerance within the horizon; enlarge the horizon");
}

// Direct convolution truncated to max_cells lattice points; mass pushed past
// the truncation is returned as spill.
std::pair<std::vector<double>, double> convolve_truncated(const std::vector<double>& a,
                                                          const std::vector<double>& b,
                                                          size_t max_cells) {
  size_t full = a.size() + b.size() - 1;
  size_t len = std::min(full, max_cells + 1);
  std::vector<double> out(len, 0.0);
  double spill = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double ai = a[i];
    if (ai == 0.0) continue;
    size_t jmax = b.size();
    if (i + jmax > len) jmax = (len > i) ? len - i : 0;
    const double* bp = b.data();
    double* op = out.data() + i;
    for (size_t j = 0; j < jmax; ++j) op[j] += ai * bp[j];
    for (size_t j = jmax; j < b.size(); ++j) spill += ai * bp[j];
  }
  return {std::move(out), spill};
}

std::function<double(double)> exact_sojourn_cdf(const QueuePoint& q, const SolverConfig& cfg) {
  if (q.service == ServiceModel::Markovian) {
    double lambda = q.lambda, mu = q.mu;
    return [lambda, mu](double t) { return mm1_sojourn_cdf(lambda, mu, t); };
  }
  double lambda = q.lambda, mu = q.mu;
  int terms = cfg.md1_series_terms;
  return [lambda, mu, terms](double t) { return md1_sojourn_cdf(lambda, mu, t, terms); };
}

void require_point_stable(const QueuePoint& q) {
  if (q.lambda >= q.mu) {
    std::ostringstream msg;
    msg << "queue unstable: arrival rate " << q.lambda << " >= service rate " << q.mu;
    throw InstabilityError(msg.str());
  }
}

void require_md1_accuracy(const QueuePoint& q, const SolverConfig& cfg) {
  if (q.service != ServiceModel::Deterministic || q.lambda <= 0.0) return;
  double theta = md1_tail_exponent(q.lambda, q.mu);
  double level = md1_clamp_level(q.lambda, q.mu, theta);
  if (level > cfg.tail_tol / 2.0) {
    std::ostringstream msg;
    msg << "deterministic-service load too high (utilization " << q.lambda / q.mu
        << ") for the requested tail accuracy; raise tail_tol above " << 2.0 * level
        << " or lower the load";
    throw InfeasibilityError(msg.str());
  }
}

// Exact CDF samples on the lattice, carrying the evaluator for later
// point-exact queries.
TravelTimeDistribution gridded_from_exact(const std::function<double(double)>& exact,
                                          const SolverConfig& cfg) {
  size_t cells = grid_cells(cfg);
  std::vector<double> grid(cells + 1, 0.0);
  bool saturated = false;
  for (size_t j = 0; j <= cells; ++j) {
    if (saturated) {
      grid[j] = 1.0;
      continue;
    }
    grid[j] = exact(double(j) * cfg.step);
    if (j > 0) {
      // Series evaluators jitter by their admitted noise (at most a fraction
      // of tail_tol) near their tail clamp; larger drops mean a broken
      // evaluator, smaller ones are monotonized away.
      if (grid[j] < grid[j - 1] - cfg.tail_tol)
        throw ParseError("gridded CDF samples must be nondecreasing");
      grid[j] = std::max(grid[j], grid[j - 1]);
    }
    if (grid[j] >= 1.0) saturated = true;
  }
  return TravelTimeDistribution::gridded(std::move(grid), cfg.step, cfg.tail_tol, exact);
}

}  // namespace

TravelTimeDistribution sojourn_distribution(const QueuePoint& q, const SolverConfig& cfg) {
  require_point_stable(q);
  if (q.service == ServiceModel::Markovian) {
    double r = q.mu - q.lambda;
    return TravelTimeDistribution::closed_form({{1.0, 0, -r}}, 1.0 / r);
  }
  require_md1_accuracy(q, cfg);
  return gridded_from_exact(exact_sojourn_cdf(q, cfg), cfg);
}

TravelTimeDistribution path_distribution(const std::vector<QueuePoint>& queues,
                                         const SolverConfig& cfg) {
  if (queues.empty()) throw ParseError("path distribution needs at least one queue");
  for (const QueuePoint& q : queues) require_point_stable(q);

  if (queues.size() == 1) return sojourn_distribution(queues[0], cfg);

  bool all_markovian = true;
  for (const QueuePoint& q : queues) {
    if (q.service != ServiceModel::Markovian) all_markovian = false;
  }
  if (all_markovian) {
    std::vector<double> rates;
    double mean = 0.0;
    for (const QueuePoint& q : queues) {
      rates.push_back(q.mu - q.lambda);
      mean += 1.0 / (q.mu - q.lambda);
    }
    auto terms = hypoexp_complement_terms(rates);
    if (!terms.empty()) return TravelTimeDistribution::closed_form(std::move(terms), mean);
  }
  return path_distribution_gridded(queues, cfg);
}

TravelTimeDistribution path_distribution_gridded(const std::vector<QueuePoint>& queues,
                                                 const SolverConfig& cfg) {
  if (queues.empty()) throw ParseError("path distribution needs at least one queue");
  for (const QueuePoint& q : queues) require_point_stable(q);
  if (queues.size() == 1) {
    // Exact samples: a single queue needs no convolution, and cell masses
    // would shift its CDF by half a cell.
    require_md1_accuracy(queues[0], cfg);
    return gridded_from_exact(exact_sojourn_cdf(queues[0], cfg), cfg);
  }

  // Gridded convolution of per-queue lattice masses.
  for (const QueuePoint& q : queues) require_md1_accuracy(q, cfg);
  size_t cells = grid_cells(cfg);
  double keep_tail = std::min(1e-7, cfg.tail_tol / 100.0);

  std::vector<double> acc;
  double spill = 0.0;
  for (const QueuePoint& q : queues) {
    std::vector<double> m = cell_masses(exact_sojourn_cdf(q, cfg), cfg.step, cells, keep_tail);
    if (acc.empty()) {
      acc = std::move(m);
    } else {
      auto [conv, s] = convolve_truncated(acc, m, cells);
      acc = std::move(conv);
      spill += s;
    }
  }

  double total = 0.0;
  for (double v : acc) total += v;
  double missing = 1.0 - total;
  if (missing > cfg.tail_tol) {
    std::ostringstream msg;
    msg << "horizon too short: " << missing
        << " of the path's probability mass falls past the horizon (tail_tol " << cfg.tail_tol
        << "); enlarge the horizon";
    throw InfeasibilityError(msg.str());
  }

  std::vector<double> grid(cells + 1, 1.0);
  double cum = 0.0;
  for (size_t j = 0; j < acc.size() && j <= cells; ++j) {
    cum += acc[j] / total;  // renormalize the truncated mass to 1
    grid[j] = std::min(1.0, cum);
  }
  for (size_t j = acc.size(); j <= cells; ++j) grid[j] = 1.0;
  return TravelTimeDistribution::gridded(std::move(grid), cfg.step, cfg.tail_tol);
}

// ---------------------------------------------------------------------------
// Evaluator
// ---------------------------------------------------------------------------

Evaluator::Evaluator(const Topology& topo, Engine engine, SolverConfig cfg)
    : topo_(&topo), engine_(engine), cfg_(cfg) {
  if (!topo.paths_enumerated()) throw ParseError("paths not enumerated yet");
  cfg_.validate_for(topo);
}

ServiceModel Evaluator::service_of(int queue_index) const {
  switch (engine_) {
    case Engine::AllMarkovian: return ServiceModel::Markovian;
    case Engine::AllDeterministic: return ServiceModel::Deterministic;
    default: return topo_->queues[size_t(queue_index)].service;
  }
}

std::vector<double> Evaluator::rates(const SplitVector& splits) const {
  return compute_arrival_rates(*topo_, splits);
}

bool Evaluator::stable(const SplitVector& splits) const {
  return is_stable(*topo_, rates(splits));
}

Evaluator::Key Evaluator::path_key(int path_index, const std::vector<double>& lambda) const {
  const PathDef& path = topo_->paths[size_t(path_index)];
  Key key;
  key.reserve(path.queues.size() * 3);
  for (int q : path.queues) {
    std::uint64_t lam_bits = 0, mu_bits = 0;
    double lam = lambda[size_t(q)], mu = topo_->queues[size_t(q)].mu;
    std::memcpy(&lam_bits, &lam, sizeof lam_bits);
    std::memcpy(&mu_bits, &mu, sizeof mu_bits);
    key.push_back(lam_bits);
    key.push_back(mu_bits);
    key.push_back(std::uint64_t(service_of(q) == ServiceModel::Deterministic));
  }
  return key;
}

std::shared_ptr<const TravelTimeDistribution> Evaluator::path_dist(int path_index,
                                                                   const SplitVector& splits) {
  std::vector<double> lambda = rates(splits);
  Key key = path_key(path_index, lambda);
  auto it = path_cache_.find(key);
  if (it != path_cache_.end()) return it->second;

  const PathDef& path = topo_->paths[size_t(path_index)];
  std::vector<QueuePoint> points;
  points.reserve(path.queues.size());
  for (int q : path.queues) {
    points.push_back({lambda[size_t(q)], topo_->queues[size_t(q)].mu, service_of(q)});
  }
  auto dist = std::make_shared<const TravelTimeDistribution>(path_distribution(points, cfg_));
  path_cache_.emplace(std::move(key), dist);
  return dist;
}

FlowEvaluation Evaluator::evaluate(const SplitVector& splits) {
  std::vector<double> lambda = rates(splits);
  require_stable(*topo_, lambda);

  FlowEvaluation out;
  out.delta_paths.assign(topo_->paths.size(), 0.0);
  out.delta_flows.assign(topo_->flows.size(), 0.0);
  out.objective = 0.0;
  for (size_t k = 0; k < topo_->flows.size(); ++k) {
    const Flow& flow = topo_->flows[k];
    double dk = 0.0;
    for (int w : topo_->flow_paths[k]) {
      double dw = delta_path(*path_dist(w, splits), flow.omega);
      out.delta_paths[size_t(w)] = dw;
      dk += splits[size_t(w)] * dw;
    }
    out.delta_flows[k] = dk;
    out.objective = std::max(out.objective, dk);
  }
  return out;
}

double Evaluator::objective(const SplitVector& splits) { return evaluate(splits).objective; }

}  // namespace roadq
