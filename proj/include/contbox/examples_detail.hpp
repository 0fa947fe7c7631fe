#pragma once

// Entry points of the worked case studies; the CLI runner and the acceptance
// suite both drive them through these interfaces.

#include <map>
#include <string>
#include <vector>

#include "contbox/optim.hpp"

namespace contbox::examples::detail {

struct InflectionResult {
  double omega1 = 0.0, omega2 = 0.0, poly_residual = 0.0;
  double oracle_root = 0.0;  // nearest root of the inflection polynomial
  Vec lambdas;               // lambda_1..lambda_7 at the stationary chart
  Vec lambdas_closed;        // closed forms evaluated at the chart
  double eta_obj = 0.0;
  atlas::Chart final_chart;
};
InflectionResult run_inflection(double zeta = 0.3, double eps = 1e-3, double om_start = 0.5);

/// Roots of 3 w^3 + 5(2 z^2 - 1) w^2 + (16 z^4 - 16 z^2 + 1) w + 1 - 2 z^2 in
/// w = omega^2, returned as omega > 0 (independent oracle for the inflection
/// example).
std::vector<double> inflection_polynomial_roots(double zeta);
double inflection_polynomial(double zeta, double omega);

struct LinoscScan {
  std::vector<double> phase;  // response phase along the branch
  std::map<std::string, std::vector<double>> svmin;
};
/// Analytic linear-oscillator sensitivity scan (algebraic problem) over the
/// resonance, for scenarios from {fix-ab, fix-amp, fix-b, free}.
LinoscScan run_linosc_sensitivity(double zeta, const std::vector<std::string>& scenarios);
/// sigma_min of the fix-ab restriction at a given point (closed form
/// sqrt((1-w^2)^2 + 4 z^2 w^2) for cross-checks).
double linosc_sigma_min_closed(double zeta, double omega);

struct ConnectingResult {
  double p2_hb_oracle = 0.0, omega_hb_oracle = 0.0;  // characteristic-equation solve
  double p2_at_T20 = 0.0;                            // periodic family at mu_T = 20
  double eps_hom = 0.0, taucr_hom = 0.0;             // homoclinic Newton solve
  double taucr_at_T20 = 0.0;
  atlas::Branch family;
  atlas::Chart homoclinic;
};
ConnectingResult run_connecting(int N = 100, int m = 4);

struct MackeyResult {
  double alpha_hb_oracle = 0.0;  // characteristic-equation solve
  double alpha_small_amp = 0.0;  // branch point where the amplitude reaches the event level
  double amp_at_event = 0.0;
  double T_at_07 = 0.0;
  double normalization = 0.0, eta_T = 0.0, lam_ps = 0.0;
  double prc_periodicity = 0.0;  // |lam_DE(0) - lam_DE(1)|
  double shift_predicted = 0.0, shift_actual = 0.0, delta_bc = 0.0;
  atlas::Chart prc_chart;
  optim::PrcResult prc;
};
MackeyResult run_mackey(int N = 50, int m = 4, double alpha_run = 0.7);

struct OdePrcCheck {
  double max_dev = 0.0;  // max |lam_DE . f - 1| at the collocation nodes
  double normalization = 0.0;
  double lam_ps = 0.0;
};
/// Zero-delay limit cycle (Hopf normal form) phase-response identity check.
OdePrcCheck run_ode_prc(int N = 20, int m = 4);

struct OptimalControlResult {
  double J = 0.0, nu_J = 0.0;
  Vec nu_p;
  atlas::Chart final_chart;
};
OptimalControlResult run_optimal_control(int q = 8, int N = 10, int m = 4);

struct TorusResult {
  double om = 0.0, T = 0.0, al = 0.0;
  double nu_om = 0.0, nu_T = 0.0;
  atlas::Chart chart;
};
TorusResult run_torus(double alpha_target, int M = 11, int N = 10, int m = 4,
                      double rho = 0.6618, int fold_direction = +1);

struct DuffingScan {
  std::vector<double> phase;                         // response phase in (0, pi)
  std::map<std::string, std::vector<double>> svmin;  // per scenario
  double peak_svmin_fixab = 0.0;                     // at the response peak
  double peak_inv_svmin_free = 0.0;                  // max over branch of 1/svmin
};
DuffingScan run_duffing_scan(double zeta, double gamma, const std::vector<std::string>& scenarios,
                             bool scale_delta_cols = false, int N = 10, int m = 4);

/// sigma_min of the scan Jacobian: zero-problem rows plus the gradient rows of
/// the named fixing monitors, over the u variables minus the dropped columns
/// (projection-pinned variables). Optional hook edits the dense matrix before
/// the decomposition (used by the delay-column rescaling study).
double scan_svmin(const acp::ProblemHandle& h, const acp::Point& p,
                  const std::vector<int>& drop_u_cols,
                  const std::vector<std::pair<std::string, double>>& extra_row_monitors,
                  const std::function<void(Mat&)>& postprocess = nullptr);

struct DataAssimResult {
  double eta = 0.0, nu_u0 = 0.0, nu_p0 = 0.0;
  double J = 0.0, u0 = 0.0, p0 = 0.0;
  double fd_grad_u0 = 0.0, fd_grad_p0 = 0.0;
  atlas::Chart final_chart;
};
DataAssimResult run_data_assim(int N = 6, int m = 3);

}  // namespace contbox::examples::detail
