#include <cmath>

#include "contbox/examples_detail.hpp"

namespace contbox::examples::detail {

using namespace contbox::acp;

double inflection_polynomial(double z, double om) {
  double w = om * om;
  return 3 * w * w * w + 5 * (2 * z * z - 1) * w * w +
         (16 * std::pow(z, 4) - 16 * z * z + 1) * w + 1 - 2 * z * z;
}

std::vector<double> inflection_polynomial_roots(double zeta) {
  // bisection over a scan grid in w = omega^2
  auto p = [zeta](double w) {
    return 3 * w * w * w + 5 * (2 * zeta * zeta - 1) * w * w +
           (16 * std::pow(zeta, 4) - 16 * zeta * zeta + 1) * w + 1 - 2 * zeta * zeta;
  };
  std::vector<double> roots;
  const int K = 4000;
  double lo = 1e-6, hi = 4.0;
  double prev = p(lo);
  for (int k = 1; k <= K; ++k) {
    double w = lo + (hi - lo) * k / K;
    double val = p(w);
    if ((prev < 0) != (val < 0)) {
      double a = lo + (hi - lo) * (k - 1) / K, b = w;
      for (int it = 0; it < 80; ++it) {
        double mid = 0.5 * (a + b);
        if ((p(a) < 0) != (p(mid) < 0))
          b = mid;
        else
          a = mid;
      }
      roots.push_back(std::sqrt(0.5 * (a + b)));
    }
    prev = val;
  }
  return roots;
}

namespace {

struct Osc {
  double A, B, C;
};

Osc linosc_response(double zeta, double om) {
  double D = std::pow(1 - om * om, 2) + 4 * zeta * zeta * om * om;
  return {(1 - om * om) / D, 2 * zeta * om / D, 1.0 / std::sqrt(D)};
}

// u layout: 0:A1 1:B1 2:C1 | 3:A2 4:B2 5:C2 | 6:om1 7:om2 8:eps | 9:zeta
AugmentedProblem build_inflection(double zeta, double eps, double om1) {
  AugmentedProblem prob;
  Osc o1 = linosc_response(zeta, om1);
  Osc o2 = linosc_response(zeta, om1 - eps);

  Vec u1(3);
  u1 << o1.A, o1.B, o1.C;
  prob.add_phi(
      "c1def", {}, u1, 1,
      [](const Vec& u) {
        return Vec(Vec::Constant(1, u[2] * u[2] - u[0] * u[0] - u[1] * u[1]));
      },
      [](const Vec& u) {
        Mat J(1, 3);
        J << -2 * u[0], -2 * u[1], 2 * u[2];
        return J;
      });
  Vec u2(3);
  u2 << o2.A, o2.B, o2.C;
  prob.add_phi(
      "c2def", {}, u2, 1,
      [](const Vec& u) {
        return Vec(Vec::Constant(1, u[2] * u[2] - u[0] * u[0] - u[1] * u[1]));
      },
      [](const Vec& u) {
        Mat J(1, 3);
        J << -2 * u[0], -2 * u[1], 2 * u[2];
        return J;
      });
  Vec u3(3);
  u3 << om1, om1 - eps, eps;
  prob.add_phi(
      "omlink", {}, u3, 1,
      [](const Vec& u) { return Vec(Vec::Constant(1, u[0] - u[1] - u[2])); },
      [](const Vec&) {
        Mat J(1, 3);
        J << 1, -1, -1;
        return J;
      });
  // oscillator pairs; zeta enters as a new variable with the first of them
  Vec u4(1);
  u4 << zeta;
  auto osc_a = [](const Vec& u) {
    double A = u[0], B = u[1], om = u[2], z = u[3];
    return Vec(Vec::Constant(1, (1 - om * om) * A + 2 * z * om * B - 1.0));
  };
  auto osc_a_d = [](const Vec& u) {
    double A = u[0], B = u[1], om = u[2], z = u[3];
    Mat J(1, 4);
    J << (1 - om * om), 2 * z * om, -2 * om * A + 2 * z * B, 2 * om * B;
    return J;
  };
  auto osc_b = [](const Vec& u) {
    double A = u[0], B = u[1], om = u[2], z = u[3];
    return Vec(Vec::Constant(1, (1 - om * om) * B - 2 * z * om * A));
  };
  auto osc_b_d = [](const Vec& u) {
    double A = u[0], B = u[1], om = u[2], z = u[3];
    Mat J(1, 4);
    J << -2 * z * om, (1 - om * om), -2 * om * B - 2 * z * A, -2 * om * A;
    return J;
  };
  prob.add_phi("osc1a", {0, 1, 6}, u4, 1, osc_a, osc_a_d);
  prob.add_phi("osc1b", {0, 1, 6, 9}, Vec(), 1, osc_b, osc_b_d);
  prob.add_phi("osc2a", {3, 4, 7, 9}, Vec(), 1, osc_a, osc_a_d);
  prob.add_phi("osc2b", {3, 4, 7, 9}, Vec(), 1, osc_b, osc_b_d);

  auto ident = [](const Vec& u) { return Vec(u); };
  auto ident_d = [](const Vec&) { return Mat(Mat::Identity(1, 1)); };
  prob.add_psi("zeta", {9}, Vec(), {"zeta"}, ident, ident_d);
  prob.add_psi("eps", {8}, Vec(), {"eps"}, ident, ident_d);
  prob.add_psi("om1", {6}, Vec(), {"om1"}, ident, ident_d);
  prob.add_psi(
      "obj", {2, 5}, Vec(), {"obj"},
      [](const Vec& u) { return Vec(Vec::Constant(1, u[0] - u[1])); },
      [](const Vec&) {
        Mat J(1, 2);
        J << 1, -1;
        return J;
      });

  for (const char* fid : {"c1def", "c2def", "omlink", "osc1a", "osc1b", "osc2a", "osc2b",
                          "zeta", "eps", "om1", "obj"})
    add_transpose_adjoint(prob, fid);

  // complementary monitors tracking the objective and om1 multipliers
  int i_obj = prob.data().blocks[prob.data().block_index.at("adj.obj")].lam_new0;
  int i_om1 = prob.data().blocks[prob.data().block_index.at("adj.om1")].lam_new0;
  auto track = [](const Vec&, const Vec& lam, const Vec&) { return Vec(lam); };
  auto track_d = [](const Vec&, const Vec&, const Vec&) { return Mat(Mat::Identity(1, 1)); };
  prob.add_theta("t_obj", {}, {i_obj}, {}, Vec(), {"nu_obj"}, track, track_d);
  prob.add_theta("t_om1", {}, {i_om1}, {}, Vec(), {"nu_om1"}, track, track_d);
  return prob;
}

}  // namespace

InflectionResult run_inflection(double zeta, double eps, double om_start) {
  auto prob = build_inflection(zeta, eps, om_start);
  auto h = prob.close();
  atlas::Chart seed;
  seed.point = initial_point(h);

  optim::StagePlan plan;
  plan.objective_label = "obj";
  plan.base.fixed_mu = {{"zeta", zeta}, {"eps", eps}, {"om1", om_start}};
  plan.base.fixed_nu = {{"nu_obj", 0.0}};
  optim::Stage s1;
  s1.name = "fold-hunt";
  s1.release = {"om1"};
  s1.event_label = "obj";
  s1.event_is_fold = true;
  s1.max_steps = 600;
  s1.h0 = 0.02;
  optim::Stage s2;
  s2.name = "bootstrap";
  s2.fix = {{"nu_obj", 1.0}, {"nu_om1", 0.0}};
  s2.bootstrap_after = true;
  s2.normalize = "obj";
  s2.max_steps = 0;
  plan.stages = {s1, s2};

  atlas::ContinuationOptions opts;
  opts.tol_res = 1e-11;
  opts.h_max = 0.05;
  auto mult = [&](const std::string& lb) {
    return h.block("adj." + lb).lam_new0;
  };
  auto res = optim::run_stages(h, plan, seed, opts, mult);

  InflectionResult out;
  out.final_chart = res.final_chart;
  const Vec& u = res.final_chart.point.u;
  out.omega1 = u[6];
  out.omega2 = u[7];
  out.poly_residual = inflection_polynomial(zeta, out.omega1);
  auto roots = inflection_polynomial_roots(zeta);
  double best = 1e9;
  for (double r : roots)
    if (std::abs(r - out.omega1) < std::abs(best - out.omega1)) best = r;
  out.oracle_root = best;
  out.lambdas = res.final_chart.point.lam.head(7);
  out.eta_obj = res.final_chart.point.lam[h.block("adj.obj").lam_new0];

  double D1 = std::pow(1 - u[6] * u[6], 2) + 4 * zeta * zeta * u[6] * u[6];
  double D2 = std::pow(1 - u[7] * u[7], 2) + 4 * zeta * zeta * u[7] * u[7];
  out.lambdas_closed = Vec(7);
  out.lambdas_closed << -std::sqrt(D1) / 2.0, std::sqrt(D2) / 2.0,
      -2 * u[6] * (1 - 2 * zeta * zeta - u[6] * u[6]) / std::pow(D1, 1.5),
      -1.0 / std::sqrt(D1), 0.0, 1.0 / std::sqrt(D2), 0.0;
  return out;
}

// --------------------------------------------------------------------------
// linear-oscillator sensitivity scan (closed-form checks for the Jacobian
// singular values of restricted continuation problems)

double linosc_sigma_min_closed(double zeta, double omega) {
  return std::sqrt(std::pow(1 - omega * omega, 2) + 4 * zeta * zeta * omega * omega);
}

namespace {

// u: 0:A 1:B 2:om 3:a 4:b
acp::ProblemHandle linosc_handle(double zeta, double om0, double a0, double b0) {
  AugmentedProblem prob;
  Vec u0(5);
  double D = std::pow(1 - om0 * om0, 2) + 4 * zeta * zeta * om0 * om0;
  u0 << ((1 - om0 * om0) * a0 - 2 * zeta * om0 * b0) / D,
      ((1 - om0 * om0) * b0 + 2 * zeta * om0 * a0) / D, om0, a0, b0;
  prob.add_phi(
      "osc", {}, u0, 2,
      [zeta](const Vec& u) {
        double A = u[0], B = u[1], om = u[2], a = u[3], b = u[4];
        Vec r(2);
        r[0] = (1 - om * om) * A + 2 * zeta * om * B - a;
        r[1] = (1 - om * om) * B - 2 * zeta * om * A - b;
        return r;
      },
      [zeta](const Vec& u) {
        double A = u[0], B = u[1], om = u[2];
        Mat J(2, 5);
        J << (1 - om * om), 2 * zeta * om, 2 * zeta * B - 2 * A * om, -1, 0,
            -2 * zeta * om, (1 - om * om), -2 * zeta * A - 2 * B * om, 0, -1;
        return J;
      });
  auto ident = [](const Vec& u) { return Vec(u); };
  auto ident_d = [](const Vec&) { return Mat(Mat::Identity(1, 1)); };
  prob.add_psi("om", {2}, Vec(), {"om"}, ident, ident_d);
  prob.add_psi("a", {3}, Vec(), {"a"}, ident, ident_d);
  prob.add_psi("b", {4}, Vec(), {"b"}, ident, ident_d);
  prob.add_psi(
      "amp2", {3, 4}, Vec(), {"amp2"},
      [](const Vec& u) { return Vec(Vec::Constant(1, u[0] * u[0] + u[1] * u[1])); },
      [](const Vec& u) {
        Mat J(1, 2);
        J << 2 * u[0], 2 * u[1];
        return J;
      });
  return prob.close();
}

}  // namespace

LinoscScan run_linosc_sensitivity(double zeta, const std::vector<std::string>& scenarios) {
  // sweep the resonance peak: omega - 1 in [-20 zeta, 20 zeta]
  const double a0 = 1.5 * zeta, b0 = 0.0;
  LinoscScan out;
  for (const auto& s : scenarios) out.svmin[s] = {};
  for (int k = 0; k <= 80; ++k) {
    double om = 1.0 + zeta * (-20.0 + 40.0 * k / 80.0);
    auto h = linosc_handle(zeta, om, a0, b0);
    acp::Point p = initial_point(h);
    double phase = std::atan2(p.u[1], p.u[0]);  // response phase relative to forcing
    out.phase.push_back(phase);
    for (const auto& s : scenarios) {
      std::vector<int> drop;
      std::vector<std::pair<std::string, double>> rows;
      if (s == "fix-ab") {
        drop = {3, 4};
      } else if (s == "fix-amp") {
        rows = {{"amp2", 0.5}};  // scaled gradient (a, b), as in the analysis
      } else if (s == "fix-b") {
        drop = {4};
      } else if (s != "free") {
        throw std::invalid_argument("unsupported scenario: " + s);
      }
      out.svmin[s].push_back(scan_svmin(h, p, drop, rows));
    }
  }
  return out;
}

}  // namespace contbox::examples::detail
