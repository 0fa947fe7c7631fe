#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "contbox/acp.hpp"

namespace contbox::atlas {

using acp::Point;
using acp::RestrictedProblem;

/// One solution point with local tangent data.
struct Chart {
  Point point;
  Vec x;        // packed unknowns of the restriction the chart was computed in
  Mat tangent;  // orthonormal columns spanning the nullspace
  double step = 0.0;
  std::vector<std::string> labels;
  int branch_id = 0, point_id = 0;
  double sv_min = -1.0;  // filled on demand
};

struct Event {
  std::string name;
  std::function<double(const Chart&)> fn;
  double target = 0.0;
  bool terminal = false;
};

struct ContinuationOptions {
  double tol_res = 1e-8;
  int max_newton = 10;
  double h0 = 0.01, h_min = 1e-6, h_max = 0.5;
  int max_steps = 1000;
  std::vector<Event> events;
  double sv_threshold = 1e-6;
  int direction = +1;       // sign of the initial tangent
  int svd_dense_limit = 800;  // use dense SVD for tangents up to this size
  bool stop_on_closed_loop = true;
  bool verbose = false;
};

struct Branch {
  std::vector<Chart> charts;
  std::vector<std::pair<std::string, Chart>> events_found;
  bool terminated_by_event = false;
  std::string termination;
};

/// Extra affine condition normal.(x - base) = 0 appended to the restricted
/// residual (pseudo-arclength closure and event localization).
struct AffineRow {
  Vec normal, base;
};

struct NewtonReport {
  bool converged = false;
  int iterations = 0;
  double res_norm = 0.0;
};

/// Damped Newton (step halving, <= 4 halvings per iteration) on the restricted
/// problem plus optional affine rows. Throws on singular solves only when no
/// retreat is possible; returns the report otherwise.
NewtonReport newton_solve(const RestrictedProblem& rp, Vec& x, const ContinuationOptions& opts,
                          const std::vector<AffineRow>& extra = {});

Chart make_chart(const RestrictedProblem& rp, const Vec& x);

/// Correct a guess to tol_res; throws std::runtime_error on failure.
Chart newton_correct(const RestrictedProblem& rp, const Vec& guess, const ContinuationOptions& opts);
Chart newton_correct(const RestrictedProblem& rp, const Point& guess, const ContinuationOptions& opts);

/// Orthonormal nullspace basis of the restricted Jacobian via SVD. Column
/// count equals the deficit at regular points; rank deficiency beyond the
/// deficit throws unless allow_singular.
Mat tangent_basis(const RestrictedProblem& rp, const Chart& chart, double sv_threshold = 1e-6,
                  bool allow_singular = false);

/// Smallest singular value of the restricted Jacobian.
double min_singular_value(const RestrictedProblem& rp, const Chart& chart);

/// 1-D pseudo-arclength continuation with event detection.
Branch continue_branch(const RestrictedProblem& rp, const Chart& chart0,
                       const ContinuationOptions& opts);

/// Localize an event bracketed by two consecutive charts: secant iteration on
/// the connecting segment; returns a converged chart with |event| <= 1e-8.
Chart locate_event(const RestrictedProblem& rp, const Chart& a, const Chart& b, const Event& ev,
                   const ContinuationOptions& opts);

/// Fixed-step breadth-first cover of a 2-D solution manifold.
std::vector<Chart> cover_2d(const RestrictedProblem& rp, const Chart& chart0,
                            const ContinuationOptions& opts);

}  // namespace contbox::atlas
