#include "contbox/stepper.hpp"

#include <cmath>
#include <stdexcept>

namespace contbox::stepper {

Vec DdeResult::at(double time) const {
  if (t.empty()) throw std::runtime_error("empty trajectory");
  if (time <= t.front()) return x.front();
  if (time >= t.back()) return x.back();
  // uniform grid
  double dt = t[1] - t[0];
  size_t k = std::min(t.size() - 2, static_cast<size_t>((time - t.front()) / dt));
  while (k + 1 < t.size() && t[k + 1] < time) ++k;
  while (k > 0 && t[k] > time) --k;
  double s = (time - t[k]) / (t[k + 1] - t[k]);
  return (1.0 - s) * x[k] + s * x[k + 1];
}

DdeResult integrate_dde(const std::function<Vec(double, const Vec&, const Vec&)>& f,
                        const std::function<Vec(double)>& history, double alpha, double t0,
                        double t1, double dt, const Vec& x0) {
  DdeResult out;
  int steps = static_cast<int>(std::ceil((t1 - t0) / dt));
  out.t.reserve(steps + 1);
  out.x.reserve(steps + 1);
  out.t.push_back(t0);
  out.x.push_back(x0);
  auto delayed = [&](double time) -> Vec {
    if (alpha <= 0.0) return out.x.back();
    double td = time - alpha;
    if (td <= t0) return history(td);
    return out.at(td);
  };
  for (int k = 0; k < steps; ++k) {
    double t = out.t.back();
    double h = std::min(dt, t1 - t);
    const Vec& x = out.x.back();
    Vec k1 = f(t, x, delayed(t));
    Vec xm = x + 0.5 * h * k1;
    Vec k2 = f(t + 0.5 * h, xm, delayed(t + 0.5 * h));
    out.t.push_back(t + h);
    out.x.push_back(x + h * k2);
  }
  return out;
}

bool extract_period(const DdeResult& run, int comp, double level, double& t_start,
                    double& period) {
  std::vector<double> crossings;
  for (size_t k = 1; k < run.t.size(); ++k) {
    double a = run.x[k - 1][comp] - level, b = run.x[k][comp] - level;
    if (a < 0.0 && b >= 0.0) {
      double s = a / (a - b);
      crossings.push_back(run.t[k - 1] + s * (run.t[k] - run.t[k - 1]));
    }
  }
  if (crossings.size() < 3) return false;
  t_start = crossings[crossings.size() - 2];
  period = crossings[crossings.size() - 1] - t_start;
  return true;
}

}  // namespace contbox::stepper
