#pragma once

#include <map>
#include <string>
#include <vector>

#include "contbox/optim.hpp"

namespace contbox::examples {

struct ExampleConfig {
  std::string name;
  int N = 10, m = 4;
  double tol = 1e-8, h0 = 0.01;
  int steps = 500;
  std::map<std::string, double> pars;  // overrides of the example defaults
  std::string stage;                   // optional named stage to stop at
  std::string out_dir = ".";
  std::string format = "jsonl";
};

struct RunResult {
  int status = 0;
  std::map<std::string, double> summary;
  std::vector<std::string> files;
};

std::vector<std::string> registry();
RunResult run_example(const ExampleConfig& cfg);

/// sigma_min scan along a branch for a set of restriction scenarios; writes
/// one CSV row per chart: (phase or omega, sigma_min per scenario).
RunResult svd_scan(const std::string& example, const std::vector<std::string>& scenarios,
                   const ExampleConfig& cfg, bool scale_delta_cols = false);

}  // namespace contbox::examples
