#include "contbox/optim.hpp"

#include <json.hpp>

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace contbox::optim {

using acp::ProblemHandle;
using acp::Restriction;
using acp::RestrictedProblem;

StagePlan plan_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  StagePlan plan;
  plan.objective_label = j.value("objective", std::string());
  if (j.contains("fix_mu"))
    for (auto& [k, v] : j["fix_mu"].items()) plan.base.fixed_mu[k] = v.get<double>();
  if (j.contains("fix_nu"))
    for (auto& [k, v] : j["fix_nu"].items()) plan.base.fixed_nu[k] = v.get<double>();
  for (const auto& js : j.at("stages")) {
    Stage s;
    s.name = js.value("name", std::string());
    if (js.contains("release"))
      for (const auto& r : js["release"]) s.release.push_back(r.get<std::string>());
    if (js.contains("fix"))
      for (auto& [k, v] : js["fix"].items()) s.fix[k] = v.get<double>();
    if (js.contains("terminal_event")) {
      const auto& ev = js["terminal_event"];
      if (ev.contains("fold_of")) {
        s.event_is_fold = true;
        s.event_label = ev["fold_of"].get<std::string>();
      } else {
        s.event_label = ev.at("label").get<std::string>();
        s.event_target = ev.value("target", 0.0);
      }
    }
    s.bootstrap_after = js.value("bootstrap", false);
    s.normalize = js.value("normalize", std::string());
    s.max_steps = js.value("max_steps", 200);
    s.direction = js.value("direction", 1);
    s.h0 = js.value("h0", -1.0);
    plan.stages.push_back(s);
  }
  return plan;
}

std::string plan_to_json(const StagePlan& plan) {
  nlohmann::json j;
  j["objective"] = plan.objective_label;
  for (const auto& [k, v] : plan.base.fixed_mu) j["fix_mu"][k] = v;
  for (const auto& [k, v] : plan.base.fixed_nu) j["fix_nu"][k] = v;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : plan.stages) {
    nlohmann::json js;
    js["name"] = s.name;
    js["release"] = s.release;
    for (const auto& [k, v] : s.fix) js["fix"][k] = v;
    if (!s.event_label.empty()) {
      if (s.event_is_fold)
        js["terminal_event"]["fold_of"] = s.event_label;
      else {
        js["terminal_event"]["label"] = s.event_label;
        js["terminal_event"]["target"] = s.event_target;
      }
    }
    js["bootstrap"] = s.bootstrap_after;
    js["normalize"] = s.normalize;
    js["max_steps"] = s.max_steps;
    js["direction"] = s.direction;
    if (s.h0 > 0) js["h0"] = s.h0;
    j["stages"].push_back(js);
  }
  return j.dump(2);
}

Chart bootstrap_multipliers(const ProblemHandle& h, const RestrictedProblem& rp_after,
                            const Chart& chart, int norm_mult_index,
                            const ContinuationOptions& opts, double ls_tol,
                            double* ls_residual) {
  SpMat A = acp::adjoint_matrix(h, chart.point.u);  // n_Lambda x n_lam
  const int n_lam = static_cast<int>(A.cols());
  if (norm_mult_index < 0 || norm_mult_index >= n_lam)
    throw std::out_of_range("bootstrap: multiplier index");
  Mat Ad = Mat(A);
  // complementary parameters fixed in the target restriction pin the
  // corresponding (linear) complementary monitor values of lambda
  std::vector<std::pair<Vec, double>> extra_rows;
  {
    const auto& d = h.data();
    for (const auto& blk : d.blocks) {
      if (blk.kind != acp::BlockKind::Theta) continue;
      for (int i = 0; i < blk.out_dim; ++i) {
        auto it = rp_after.restriction().fixed_nu.find(blk.par_labels[i]);
        if (it == rp_after.restriction().fixed_nu.end()) continue;
        Vec usub(blk.Ku.size()), vsub(blk.Kv.size());
        for (size_t k = 0; k < blk.Ku.size(); ++k)
          usub[static_cast<Eigen::Index>(k)] = chart.point.u[blk.Ku[k]];
        for (size_t k = 0; k < blk.Kv.size(); ++k)
          vsub[static_cast<Eigen::Index>(k)] = chart.point.v[blk.Kv[k]];
        Vec lam0 = Vec::Zero(blk.Klam.size());
        double theta0 = blk.eval3(usub, lam0, vsub)[i];
        // linear-in-lambda tracker: row = d(theta_i)/d(lambda)
        Vec row = Vec::Zero(n_lam);
        for (size_t k = 0; k < blk.Klam.size(); ++k) {
          Vec e = lam0;
          e[static_cast<Eigen::Index>(k)] = 1.0;
          row[blk.Klam[k]] = blk.eval3(usub, e, vsub)[i] - theta0;
        }
        extra_rows.emplace_back(row, it->second - theta0);
      }
    }
  }
  Mat Afull(Ad.rows() + static_cast<Eigen::Index>(extra_rows.size()), n_lam);
  Afull.topRows(Ad.rows()) = Ad;
  Vec rhs_full = Vec::Zero(Afull.rows());
  for (size_t e = 0; e < extra_rows.size(); ++e) {
    Afull.row(Ad.rows() + static_cast<Eigen::Index>(e)) = extra_rows[e].first.transpose();
    rhs_full[Ad.rows() + static_cast<Eigen::Index>(e)] = extra_rows[e].second;
  }
  Vec b = rhs_full - Afull.col(norm_mult_index);
  Mat Ar(Afull.rows(), n_lam - 1);
  for (int c = 0, at = 0; c < n_lam; ++c)
    if (c != norm_mult_index) Ar.col(at++) = Afull.col(c);
  Vec sol = Ar.colPivHouseholderQr().solve(b);
  Vec lam(n_lam);
  for (int c = 0, at = 0; c < n_lam; ++c)
    lam[c] = (c == norm_mult_index) ? 1.0 : sol[at++];
  double res = (Ad * lam).lpNorm<Eigen::Infinity>();
  if (ls_residual) *ls_residual = res;
  double scale = std::max(1.0, Ad.cwiseAbs().maxCoeff());
  if (res > ls_tol * scale)
    throw std::runtime_error("bootstrap_multipliers: least-squares residual " +
                             std::to_string(res) + " (not a stationary point)");
  acp::Point p = chart.point;
  p.lam = lam;
  p.nu = acp::eval_nu(h, p.u, p.lam, p.v);
  for (const auto& [k, v] : rp_after.restriction().fixed_nu) p.nu[h.nu_index(k)] = v;
  for (const auto& [k, v] : rp_after.restriction().fixed_mu) p.mu[h.mu_index(k)] = v;
  return atlas::newton_correct(rp_after, p, opts);
}

namespace {

bool is_mu_label(const ProblemHandle& h, const std::string& label) {
  return h.data().mu_index.count(label) != 0;
}

void apply_stage_restriction(const ProblemHandle& h, Restriction& r, const Stage& s,
                             const Chart& cur) {
  for (const auto& lb : s.release) {
    if (is_mu_label(h, lb))
      r.fixed_mu.erase(lb);
    else
      r.fixed_nu.erase(lb);
  }
  for (const auto& [lb, val] : s.fix) {
    double v = val;
    if (std::isnan(v)) {
      // pin at the chart's current value
      v = is_mu_label(h, lb) ? cur.point.mu[h.mu_index(lb)] : cur.point.nu[h.nu_index(lb)];
    }
    if (is_mu_label(h, lb))
      r.fixed_mu[lb] = v;
    else
      r.fixed_nu[lb] = v;
  }
}

}  // namespace

StageResult run_stages(const ProblemHandle& h, const StagePlan& plan, const Chart& seed,
                       const ContinuationOptions& base_opts, const MultLookup& mult_lookup) {
  StageResult out;
  Restriction cur = plan.base;
  Chart chart = seed;
  for (size_t si = 0; si < plan.stages.size(); ++si) {
    const Stage& st = plan.stages[si];
    apply_stage_restriction(h, cur, st, chart);
    RestrictedProblem rp(h, cur);
    ContinuationOptions opts = base_opts;
    if (st.h0 > 0) opts.h0 = st.h0;
    opts.max_steps = st.max_steps;
    opts.direction = st.direction;

    if (st.max_steps == 0 || rp.deficit() == 0) {
      if (st.bootstrap_after) {
        int idx = mult_lookup(st.normalize.empty() ? plan.objective_label : st.normalize);
        chart = bootstrap_multipliers(h, rp, chart, idx, opts);
      } else {
        chart = atlas::newton_correct(rp, chart.point, opts);
      }
      out.stage_charts.push_back(chart);
      continue;
    }
    if (rp.deficit() != 1)
      throw std::logic_error("run_stages: stage '" + st.name + "' leaves deficit " +
                             std::to_string(rp.deficit()));

    // correct the incoming chart under the new restriction by a bordered solve
    Vec x0 = rp.pack(chart.point);
    {
      std::vector<atlas::AffineRow> rows(1);
      rows[0].normal = Vec::Zero(rp.dim());
      // pin the position along the manifold with a random-ish but fixed normal
      rows[0].normal = Vec::Ones(rp.dim()).normalized();
      rows[0].base = x0;
      atlas::NewtonReport rep = atlas::newton_solve(rp, x0, opts, rows);
      if (!rep.converged) {
        // fall back: pin the first released label if any
        x0 = rp.pack(chart.point);
        std::vector<atlas::AffineRow> rows2(1);
        rows2[0].normal = Vec::Zero(rp.dim());
        int pos = -1;
        for (const auto& lb : rp.free_mu())
          if ((pos = rp.mu_position(lb)) >= 0) break;
        if (pos < 0) throw std::runtime_error("run_stages: cannot seed stage " + st.name);
        rows2[0].normal[pos] = 1.0;
        rows2[0].base = x0;
        rep = atlas::newton_solve(rp, x0, opts, rows2);
        if (!rep.converged)
          throw std::runtime_error("run_stages: stage seed correction failed: " + st.name);
      }
    }
    Chart c0 = atlas::make_chart(rp, x0);
    c0.branch_id = static_cast<int>(si);

    atlas::Event ev;
    bool have_event = !st.event_label.empty();
    if (have_event) {
      ev.name = st.event_label;
      ev.terminal = true;
      if (st.event_is_fold) {
        int pos = rp.mu_position(st.event_label);
        if (pos < 0) throw std::invalid_argument("fold label not free: " + st.event_label);
        ev.fn = [pos](const Chart& c) {
          return c.tangent.size() ? c.tangent(pos, 0) : 0.0;
        };
        ev.target = 0.0;
      } else if (is_mu_label(h, st.event_label)) {
        int idx = h.mu_index(st.event_label);
        ev.fn = [idx](const Chart& c) { return c.point.mu[idx]; };
        ev.target = st.event_target;
      } else {
        int idx = h.nu_index(st.event_label);
        ev.fn = [idx](const Chart& c) { return c.point.nu[idx]; };
        ev.target = st.event_target;
      }
      opts.events.push_back(ev);
    }

    atlas::Branch br = atlas::continue_branch(rp, c0, opts);
    out.trail.push_back(br);
    if (have_event) {
      if (!br.terminated_by_event)
        throw std::runtime_error("run_stages: terminal event '" + st.event_label +
                                 "' not bracketed within max_steps in stage " + st.name);
      chart = br.charts.back();
    } else {
      chart = br.charts.back();
    }
    out.stage_charts.push_back(chart);
  }
  out.final_chart = chart;
  out.final_restriction = cur;
  return out;
}

PrcResult prc_extract(const ddecoll::Instance& inst, const Chart& chart,
                      const std::string& period_label, const std::string& phase_label) {
  PrcResult out;
  const auto& L = inst.seg[0];
  const auto& disc = *inst.disc[0];
  const acp::Point& pt = chart.point;
  out.eta_T = pt.lam[inst.mult_index(period_label)];
  if (std::abs(out.eta_T - 1.0) > 1e-6)
    throw std::runtime_error("prc_extract: eta_T != 1 at this chart");
  out.lam_de_bp = pt.lam.segment(L.lam0, L.n_bp * L.n);
  out.lam_bc = L.zeta0 >= 0 ? Vec(pt.lam.segment(L.zeta0, L.n)) : Vec();
  out.lam_ps = pt.lam[inst.mult_index(phase_label)];

  const auto& fld = inst.spec.segments[0].field;
  Vec x = pt.u.segment(L.x0, L.n_bp * L.n);
  Vec y = L.ny > 0 ? Vec(pt.u.segment(L.y0[0], L.n_bp * L.n * L.ny)) : Vec(Vec::Zero(0));
  double T0 = pt.u[L.iT0], T = pt.u[L.iT];
  Vec p = pt.u.segment(L.ip, L.q);

  Vec lam_cn = disc.W * out.lam_de_bp;
  Vec x_cn = disc.W * x;
  std::vector<Vec> ycn(L.ny);
  for (int l = 0; l < L.ny; ++l)
    ycn[l] = disc.W * y.segment(l * L.n_bp * L.n, L.n_bp * L.n);
  out.lam_de_f_cn.resize(L.n_cn);
  for (int c = 0; c < L.n_cn; ++c) {
    Mat yc(L.n, L.ny);
    for (int l = 0; l < L.ny; ++l) yc.col(l) = ycn[l].segment(c * L.n, L.n);
    Vec fv = fld.f(T0 + T * disc.mesh.tau_cn[c], x_cn.segment(c * L.n, L.n), yc, p);
    out.lam_de_f_cn[c] = lam_cn.segment(c * L.n, L.n).dot(fv);
  }

  // normalization: lam_DE(0)^T f(0) + wrap integral of lam_CP^T f
  Mat y0m(L.n, L.ny);
  for (int l = 0; l < L.ny; ++l) y0m.col(l) = y.segment(l * L.n_bp * L.n, L.n);
  out.normalization =
      out.lam_de_bp.head(L.n).dot(fld.f(T0, x.head(L.n), y0m, p));
  if (L.ny > 0) {
    // the first coupling interval (0, gamma_e1) carries the wrapped history;
    // integrate mu(tau - 1 + a) f(x(tau), y(tau)) over tau in (1 - a, 1)
    double a = pt.u[L.ige[0][0]];  // = alpha / T
    if (a > 1e-14) {
      Vec mu_bp = pt.lam.segment(L.mu0[0], L.n_bp * L.n);
      const int m = inst.m, N = inst.N;
      for (int c = 0; c < L.n_cn; ++c) {
        double tau = disc.mesh.tau_cn[c];
        if (tau < 1.0 - a) continue;
        std::vector<int> cols;
        std::vector<double> vals;
        coll::interp_row(disc.mesh, tau - 1.0 + a, false, cols, vals);
        Vec mu = Vec::Zero(L.n);
        for (size_t k = 0; k < cols.size(); ++k) mu += vals[k] * mu_bp.segment(cols[k] * L.n, L.n);
        Mat yc(L.n, L.ny);
        for (int l = 0; l < L.ny; ++l) yc.col(l) = ycn[l].segment(c * L.n, L.n);
        Vec fv = fld.f(T0 + T * tau, x_cn.segment(c * L.n, L.n), yc, p);
        out.normalization += disc.mesh.w[c % m] / (2.0 * N) * mu.dot(fv);
      }
    }
  }
  return out;
}

Mat chebyshev_basis(int q, const Vec& tau) {
  if (q < 1) throw std::invalid_argument("chebyshev_basis: q must be >= 1");
  Mat B(q, tau.size());
  for (Eigen::Index t = 0; t < tau.size(); ++t) {
    double x = 2.0 * tau[t] - 1.0;
    double Tm1 = 1.0, Tm = x;
    B(0, t) = 1.0;
    if (q > 1) B(1, t) = x;
    for (int j = 2; j < q; ++j) {
      double Tn = 2.0 * x * Tm - Tm1;
      B(j, t) = Tn;
      Tm1 = Tm;
      Tm = Tn;
    }
  }
  return B;
}

}  // namespace contbox::optim
