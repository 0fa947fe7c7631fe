#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "contbox/atlas.hpp"
#include "contbox/ddecoll.hpp"

namespace contbox::optim {

using atlas::Chart;
using atlas::ContinuationOptions;

/// One stage of a successive-continuation run. Terminal events are either a
/// monitor crossing a target or a fold of the objective (sign change of the
/// tangent component along the objective's parameter direction).
struct Stage {
  std::string name;
  std::vector<std::string> release;      // labels of mu/nu freed at this stage
  std::map<std::string, double> fix;     // labels pinned (with values)
  std::string event_label;               // empty: run to max_steps
  double event_target = 0.0;
  bool event_is_fold = false;            // event_label is the fold monitor
  bool bootstrap_after = false;          // solve multipliers at the event chart
  std::string normalize;                 // monitor whose multiplier is set to 1
  int max_steps = 200;
  int direction = +1;
  double h0 = -1.0;  // per-stage override
};

struct StagePlan {
  std::string objective_label;
  acp::Restriction base;
  std::vector<Stage> stages;
};

StagePlan plan_from_json(const std::string& text);
std::string plan_to_json(const StagePlan& plan);

struct StageResult {
  Chart final_chart;
  acp::Restriction final_restriction;
  std::vector<atlas::Branch> trail;
  std::vector<Chart> stage_charts;
};

using MultLookup = std::function<int(const std::string&)>;

/// Direct linear solve for the continuation multipliers at a candidate
/// stationary point: least squares on the adjoint system with the normalized
/// multiplier set to 1, followed by a Newton solve of the full augmented
/// system under the given restriction.
Chart bootstrap_multipliers(const acp::ProblemHandle& h, const acp::RestrictedProblem& rp_after,
                            const Chart& chart, int norm_mult_index,
                            const ContinuationOptions& opts, double ls_tol = 1e-6,
                            double* ls_residual = nullptr);

StageResult run_stages(const acp::ProblemHandle& h, const StagePlan& plan, const Chart& seed,
                       const ContinuationOptions& opts, const MultLookup& mult_lookup);

struct PrcResult {
  Vec lam_de_bp;     // differential multipliers at the base points
  Vec lam_bc;        // boundary multiplier
  double lam_ps = 0.0;  // phase (Poincare section) multiplier
  double eta_T = 0.0;
  double normalization = 0.0;  // lam_DE(0)^T f(0) + wrap integral of lam_CP^T f
  Vec lam_de_f_cn;   // lam_DE^T f at the collocation nodes (ODE limit check)
};

/// Extract the phase response data from a chart with eta_T = 1 on a
/// single-segment periodic instance whose first coupling interval carries the
/// wrapped history.
PrcResult prc_extract(const ddecoll::Instance& inst, const Chart& chart,
                      const std::string& period_label, const std::string& phase_label);

/// Rows T_j(2*tau - 1), j = 1..q, of the classical (max-norm-1) Chebyshev
/// polynomials of the first kind via the three-term recurrence.
Mat chebyshev_basis(int q, const Vec& tau);

}  // namespace contbox::optim
