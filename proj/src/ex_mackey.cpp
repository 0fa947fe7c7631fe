#include <iostream>
#include <cmath>

#include "contbox/examples_detail.hpp"
#include "contbox/graph.hpp"
#include "contbox/stepper.hpp"

namespace contbox::examples::detail {

using namespace contbox::ddecoll;

namespace {

// f = a y / (1 + y^b) - x with p = (T, alpha, a, b)
coll::Field mackey_field() {
  coll::Field f;
  f.n = 1;
  f.ny = 1;
  f.q = 4;
  auto gain = [](double y, double a, double b) { return a * y / (1.0 + std::pow(y, b)); };
  f.f = [gain](double, const Vec& x, const Mat& y, const Vec& p) {
    return Vec(Vec::Constant(1, gain(y(0, 0), p[2], p[3]) - x[0]));
  };
  f.fx = [](double, const Vec&, const Mat&, const Vec&) { return Mat(Mat::Constant(1, 1, -1.0)); };
  f.fy = [](double, const Vec&, const Mat& y, const Vec& p) {
    double yb = std::pow(y(0, 0), p[3]);
    double d = p[2] * (1.0 + (1.0 - p[3]) * yb) / std::pow(1.0 + yb, 2);
    return Mat(Mat::Constant(1, 1, d));
  };
  f.fp = [gain](double, const Vec&, const Mat& y, const Vec& p) {
    Mat J = Mat::Zero(1, 4);
    double yv = y(0, 0);
    double yb = std::pow(yv, p[3]);
    J(0, 2) = yv / (1.0 + yb);
    // d/db of a y / (1 + y^b) = -a y y^b ln y / (1+y^b)^2
    J(0, 3) = yv > 0.0 ? -p[2] * yv * yb * std::log(yv) / std::pow(1.0 + yb, 2) : 0.0;
    return J;
  };
  return f;
}

struct MackeyBuild {
  Instance inst;
  double T_seed = 0.0;
};

MackeyBuild build_mackey(int N, int m, double alpha, double a, double b, bool with_adjoints,
                         double bc_offset = 0.0) {
  // seed from the history time stepper
  auto rhs = [a, b](double, const Vec& x, const Vec& xd) {
    return Vec(Vec::Constant(1, a * xd[0] / (1.0 + std::pow(xd[0], b)) - x[0]));
  };
  auto hist = [](double) { return Vec(Vec::Constant(1, 0.5)); };
  auto run = stepper::integrate_dde(rhs, hist, alpha, 0.0, 60.0, 5e-4, Vec::Constant(1, 0.5));
  double t0 = 0.0, T = 0.0;
  if (!stepper::extract_period(run, 0, 1.0, t0, T))
    throw std::runtime_error("mackey seed: no limit cycle found");

  graph::DelayGraph g;
  g.nodes.push_back({"s0", 1, {T, "T"}, {alpha, "alpha"}, "mackey"});
  g.edges.push_back({0, 0, Mat::Identity(1, 1)});
  auto compiled = graph::compile(g);

  DdeSpec spec;
  spec.p_labels = compiled.p_labels;  // T, alpha
  spec.p_labels.push_back("a");
  spec.p_labels.push_back("b");
  spec.p0 = Vec(4);
  spec.p0 << compiled.p0[0], compiled.p0[1], a, b;
  spec.duration_monitors = false;
  Segment sg;
  sg.name = "s0";
  sg.field = mackey_field();
  sg.x_init = [run, t0, T](double tau) { return run.at(t0 + tau * T); };
  sg.T_init = T;
  sg.couplings.push_back(compiled.couplings[0]);
  spec.segments.push_back(sg);
  spec.bcs = compiled.bcs;
  if (bc_offset != 0.0) {
    spec.bcs[0].offset = [bc_offset](const Vec&) { return Vec(Vec::Constant(1, bc_offset)); };
    spec.bcs[0].offset_dp = [](const Vec&) { return Mat(Mat::Zero(1, 4)); };
  }
  spec.algebraic = compiled.links;

  Builder bld(spec, N, m, with_adjoints);
  bld.add_endpoint_monitor(0, 0, 0, "phase");
  // mean-square deviation from the equilibrium z = 1 (amplitude proxy)
  Builder::Integrand amp;
  amp.g = [](double, const Vec& x, const Mat&, const Vec&) {
    return (x[0] - 1.0) * (x[0] - 1.0);
  };
  amp.gx = [](double, const Vec& x, const Mat&, const Vec&) {
    return Vec(Vec::Constant(1, 2.0 * (x[0] - 1.0)));
  };
  amp.gy = [](double, const Vec&, const Mat&, const Vec&) { return Mat(Mat::Zero(1, 1)); };
  bld.add_integral_monitor(0, amp, "amp2", /*adjoint=*/false);
  if (with_adjoints) bld.add_multiplier_monitor("T", "nu_T");
  MackeyBuild out{bld.close(), T};
  return out;
}

}  // namespace

double mackey_alpha_hb_oracle(double a, double b) {
  // linearization about z* = (a-1)^(1/b): lambda = -1 + fy e^(-lambda alpha)
  double zs = std::pow(a - 1.0, 1.0 / b);
  double zb = std::pow(zs, b);
  double fy = a * (1.0 + (1.0 - b) * zb) / std::pow(1.0 + zb, 2);
  // i w = -1 + fy (cos - i sin): cos(w al) = -1/fy, w = -fy sin(w al)
  double c = -1.0 / fy;
  double w = std::sqrt(fy * fy - 1.0);
  double wal = std::acos(c);
  return wal / w;
}

MackeyResult run_mackey(int N, int m, double alpha_run) {
  const double a = 2.0, b = 10.0;
  MackeyResult out;
  out.alpha_hb_oracle = mackey_alpha_hb_oracle(a, b);

  auto mk = build_mackey(N, m, alpha_run, a, b, true);
  auto& inst = mk.inst;
  const auto& h = inst.handle;

  atlas::ContinuationOptions opts;
  opts.tol_res = 1e-9;
  opts.max_newton = 20;

  acp::Restriction base;
  base.fixed_mu = {{"alpha", alpha_run}, {"a", a}, {"b", b}, {"phase", 1.0}};
  base.fixed_nu = {{"nu_T", 0.0}};
  acp::RestrictedProblem rp0(h, base);
  atlas::Chart orbit = atlas::newton_correct(rp0, acp::initial_point(h), opts);
  out.T_at_07 = orbit.point.mu[h.mu_index("T")];

  // Hopf approach: release alpha, run the amplitude proxy down to 1e-4
  {
    acp::Restriction r = base;
    r.fixed_mu.erase("alpha");
    acp::RestrictedProblem rp(h, r);
    atlas::ContinuationOptions copts = opts;
    copts.h0 = 0.05;
    copts.h_max = 1.0;
    copts.max_steps = 800;
    copts.svd_dense_limit = 0;  // force the bordered tangent path
    atlas::Event ev;
    ev.name = "amp_small";
    int ia = h.mu_index("amp2");
    ev.fn = [ia](const atlas::Chart& c) { return c.point.mu[ia]; };
    ev.target = 1e-4;
    ev.terminal = true;
    copts.events.push_back(ev);
    atlas::Chart c0 = orbit;
    c0.x = rp.pack(orbit.point);
    // pick the direction of decreasing alpha
    Vec t;
    {
      atlas::Branch probe = atlas::continue_branch(rp, c0, [&] {
        auto o = copts;
        o.events.clear();
        o.max_steps = 1;
        return o;
      }());
      int ialpha = h.mu_index("alpha");
      double dal = probe.charts.back().point.mu[ialpha] - orbit.point.mu[ialpha];
      copts.direction = dal < 0 ? +1 : -1;
    }
    copts.verbose = getenv("MACKEY_DEBUG") != nullptr;
    atlas::Branch br = atlas::continue_branch(rp, c0, copts);
    if (getenv("MACKEY_DEBUG")) {
      int ia2 = h.mu_index("alpha"), iA = h.mu_index("amp2");
      for (size_t k = 0; k < br.charts.size(); k += 20)
        std::cerr << "chart " << k << " alpha=" << br.charts[k].point.mu[ia2]
                  << " amp2=" << br.charts[k].point.mu[iA] << " h=" << br.charts[k].step << "\n";
      std::cerr << "termination: " << br.termination << "\n";
    }
    if (!br.terminated_by_event)
      throw std::runtime_error("mackey: amplitude event not reached: " + br.termination);
    out.alpha_small_amp = br.charts.back().point.mu[h.mu_index("alpha")];
    out.amp_at_event = br.charts.back().point.mu[h.mu_index("amp2")];
  }

  // PRC at alpha_run: bootstrap eta_T = 1
  {
    acp::Restriction r = base;
    r.fixed_nu["nu_T"] = 1.0;
    acp::RestrictedProblem rp(h, r);
    atlas::Chart prc_chart =
        optim::bootstrap_multipliers(h, rp, orbit, inst.mult_index("T"), opts);
    out.prc_chart = prc_chart;
    out.prc = optim::prc_extract(inst, prc_chart, "T", "phase");
    out.normalization = out.prc.normalization;
    out.eta_T = out.prc.eta_T;
    out.lam_ps = out.prc.lam_ps;
    out.prc_periodicity =
        std::abs(out.prc.lam_de_bp[0] - out.prc.lam_de_bp[out.prc.lam_de_bp.size() - 1]);

    // linear response: perturb the periodicity condition by delta_BC
    const double delta = 1e-4;
    out.delta_bc = delta;
    auto mk2 = build_mackey(N, m, alpha_run, a, b, false, delta);
    const auto& h2 = mk2.inst.handle;
    acp::Restriction r2;
    r2.fixed_mu = {{"alpha", alpha_run}, {"a", a}, {"b", b}, {"phase", 1.0}};
    acp::RestrictedProblem rp2(h2, r2);
    acp::Point seed = acp::initial_point(h2);
    seed.u = prc_chart.point.u.head(h2.n_u());
    seed.mu = acp::eval_mu(h2, seed.u);
    atlas::Chart pert = atlas::newton_correct(rp2, seed, opts);
    double T_pert = pert.point.mu[h2.mu_index("T")];
    out.shift_actual = T_pert - out.T_at_07;
    out.shift_predicted = -out.prc.lam_de_bp[0] * delta;
  }
  return out;
}

OdePrcCheck run_ode_prc(int N, int m) {
  // Hopf normal form: stable circle of radius 1, period 2 pi / omega
  coll::Field f;
  f.n = 2;
  f.ny = 0;
  f.q = 2;  // (omega, T)
  f.f = [](double, const Vec& x, const Mat&, const Vec& p) {
    double r2 = x.squaredNorm();
    Vec out(2);
    out[0] = x[0] - p[0] * x[1] - x[0] * r2;
    out[1] = p[0] * x[0] + x[1] - x[1] * r2;
    return out;
  };
  f.fx = [](double, const Vec& x, const Mat&, const Vec& p) {
    double r2 = x.squaredNorm();
    Mat J(2, 2);
    J << 1.0 - r2 - 2 * x[0] * x[0], -p[0] - 2 * x[0] * x[1],
        p[0] - 2 * x[0] * x[1], 1.0 - r2 - 2 * x[1] * x[1];
    return J;
  };
  f.fp = [](double, const Vec& x, const Mat&, const Vec&) {
    Mat J = Mat::Zero(2, 2);
    J(0, 0) = -x[1];
    J(1, 0) = x[0];
    return J;
  };

  DdeSpec spec;
  spec.p_labels = {"omega", "T"};
  spec.p0 = Vec(2);
  spec.p0 << 1.0, 2.0 * M_PI;
  spec.duration_monitors = false;
  Segment sg;
  sg.name = "s0";
  sg.field = f;
  sg.x_init = [](double tau) {
    Vec v(2);
    v << std::cos(2 * M_PI * tau), std::sin(2 * M_PI * tau);
    return v;
  };
  sg.T_init = 2.0 * M_PI;
  spec.segments.push_back(sg);
  BoundaryCondition bc;
  bc.segment = 0;
  ParMatrix B;
  B.value = Mat::Identity(2, 2);
  bc.terms.emplace_back(0, B);
  spec.bcs.push_back(bc);
  spec.algebraic.push_back(link_eq("T0", Ref::t0(0), 0.0));
  spec.algebraic.push_back(link_eq("Tpin", Ref::t(0), Ref::par(1)));

  Builder bld(spec, N, m, true);
  bld.add_endpoint_monitor(0, 1, 0, "phase");  // x2(0) = 0
  bld.add_multiplier_monitor("T", "nu_T");
  auto inst = bld.close();
  const auto& h = inst.handle;

  atlas::ContinuationOptions opts;
  opts.tol_res = 1e-10;
  acp::Restriction base;
  base.fixed_mu = {{"omega", 1.0}, {"phase", 0.0}};
  base.fixed_nu = {{"nu_T", 0.0}};
  acp::RestrictedProblem rp0(h, base);
  atlas::Chart orbit = atlas::newton_correct(rp0, acp::initial_point(h), opts);

  acp::Restriction r = base;
  r.fixed_nu["nu_T"] = 1.0;
  acp::RestrictedProblem rp(h, r);
  atlas::Chart prc_chart = optim::bootstrap_multipliers(h, rp, orbit, inst.mult_index("T"), opts);
  auto prc = optim::prc_extract(inst, prc_chart, "T", "phase");
  OdePrcCheck out;
  out.normalization = prc.normalization;
  out.lam_ps = prc.lam_ps;
  out.max_dev = (prc.lam_de_f_cn.array() - 1.0).abs().maxCoeff();
  return out;
}

}  // namespace contbox::examples::detail
