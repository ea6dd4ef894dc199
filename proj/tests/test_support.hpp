// Shared helpers for the test binaries: bundled-data paths, CLI invocation,
// a minimal CSV reader, and random topology generators for property tests.
#pragma once

#include "roadq/model.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace support {

inline std::string data_file(const std::string& name) {
  return std::string(ROADQ_DATA_DIR) + "/" + name;
}

inline std::string cli_path() { return std::string(ROADQ_CLI_PATH); }

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr combined
};

inline CommandResult run_command(const std::string& cmd) {
  std::string full = cmd + " 2>&1";
  FILE* pipe = popen(full.c_str(), "r");
  if (!pipe) return {127, "popen failed"};
  std::string out;
  char buf[4096];
  size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  int status = pclose(pipe);
  int code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  return {code, out};
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double urand(std::mt19937_64& rng) {
  return (double(rng() >> 11) + 0.5) * 0x1.0p-53;  // strictly inside (0, 1)
}

// Random parallel-branch network: flow "fm" forks at queue "in" across
// `branches` single-queue branches that merge into queue "out". When
// `second_flow` is set, flow "fx" enters through its own queue "in2" and is
// forced along branch "b0" (a single-path flow sharing the junction).
// Service rates are sized so that every queue stays stable even when an
// optimizer concentrates a whole flow on one branch (utilization <= rho_cap).
inline roadq::Topology random_fork_topology(std::mt19937_64& rng, int branches, bool second_flow,
                                            bool allow_deterministic, double rho_cap = 0.8) {
  double r1 = 0.5 + urand(rng);
  double r2 = second_flow ? 0.3 + 0.7 * urand(rng) : 0.0;
  auto rho = [&] { return 0.3 + (rho_cap - 0.3) * urand(rng); };
  auto service = [&] { return (allow_deterministic && urand(rng) < 0.35) ? "D" : "M"; };

  std::ostringstream js;
  js << std::setprecision(17);
  js << "{\"queues\":[";
  double mu_in = r1 / rho();
  js << "{\"id\":\"in\",\"mu_max\":" << mu_in << ",\"service\":\"" << service() << "\"}";
  std::vector<double> mu_b(static_cast<size_t>(branches), 0.0);
  for (int j = 0; j < branches; ++j) {
    double worst = r1 + (j == 0 ? r2 : 0.0);
    mu_b[size_t(j)] = worst / rho();
    js << ",{\"id\":\"b" << j << "\",\"mu_max\":" << mu_b[size_t(j)] << ",\"service\":\""
       << service() << "\"}";
  }
  double mu_out = (r1 + r2) / rho();
  js << ",{\"id\":\"out\",\"mu_max\":" << mu_out << ",\"service\":\"" << service() << "\"}";
  double mu_in2 = 0.0;
  if (second_flow) {
    mu_in2 = r2 / rho();
    js << ",{\"id\":\"in2\",\"mu_max\":" << mu_in2 << ",\"service\":\"" << service() << "\"}";
  }
  js << "],\"edges\":[";
  bool first = true;
  for (int j = 0; j < branches; ++j) {
    if (!first) js << ",";
    first = false;
    js << "{\"from\":\"in\",\"to\":\"b" << j << "\"},{\"from\":\"b" << j
       << "\",\"to\":\"out\"}";
  }
  if (second_flow) js << ",{\"from\":\"in2\",\"to\":\"b0\"}";
  js << "],\"flows\":[";

  // Target travel times scaled off a rough sojourn estimate at uniform splits.
  double lam_b0 = r1 / double(branches) + r2;
  double est_main = 1.0 / (mu_in - r1) + 1.0 / (mu_b[0] - lam_b0) + 1.0 / (mu_out - (r1 + r2));
  double omega1 = std::max(0.2, (1.2 + 1.8 * urand(rng)) * est_main);
  js << "{\"id\":\"fm\",\"ingress\":\"in\",\"egress\":\"out\",\"rate\":" << r1
     << ",\"omega\":" << omega1 << "}";
  if (second_flow) {
    double est2 = 1.0 / (mu_in2 - r2) + 1.0 / (mu_b[0] - lam_b0) + 1.0 / (mu_out - (r1 + r2));
    double omega2 = std::max(0.2, (1.2 + 1.8 * urand(rng)) * est2);
    js << ",{\"id\":\"fx\",\"ingress\":\"in2\",\"egress\":\"out\",\"rate\":" << r2
       << ",\"omega\":" << omega2 << "}";
  }
  js << "]}";

  roadq::Topology topo = roadq::Topology::from_string(js.str());
  roadq::enumerate_paths(topo);
  return topo;
}

}  // namespace support
