#pragma once

#include <functional>
#include <vector>

#include "contbox/acp.hpp"

namespace contbox::stepper {

/// Fixed-step explicit midpoint integrator for systems with a single discrete
/// delay; the delayed state is read from the stored history by linear
/// interpolation. Adequate for generating continuation seeds.
struct DdeResult {
  std::vector<double> t;
  std::vector<Vec> x;
  Vec at(double time) const;  // linear interpolation, clamped
};

DdeResult integrate_dde(const std::function<Vec(double, const Vec&, const Vec&)>& f,
                        const std::function<Vec(double)>& history, double alpha, double t0,
                        double t1, double dt, const Vec& x0);

/// Extract one period of a scalar limit cycle between upward crossings of
/// x[comp] = level near the end of the run; returns false if none found.
bool extract_period(const DdeResult& run, int comp, double level, double& t_start,
                    double& period);

}  // namespace contbox::stepper
