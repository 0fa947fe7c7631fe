#include "contbox/atlas.hpp"

#include <Eigen/SparseLU>

#include <cmath>
#include <deque>
#include <iostream>
#include <stdexcept>

namespace contbox::atlas {

namespace {

SpMat stack_rows(const SpMat& J, const std::vector<AffineRow>& extra) {
  if (extra.empty()) return J;
  SpMat A(J.rows() + static_cast<Eigen::Index>(extra.size()), J.cols());
  std::vector<Triplet> trips;
  trips.reserve(static_cast<size_t>(J.nonZeros()) + extra.size() * static_cast<size_t>(J.cols()));
  for (int k = 0; k < J.outerSize(); ++k)
    for (SpMat::InnerIterator it(J, k); it; ++it)
      trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
  for (size_t e = 0; e < extra.size(); ++e)
    for (Eigen::Index j = 0; j < extra[e].normal.size(); ++j)
      if (extra[e].normal[j] != 0.0)
        trips.emplace_back(static_cast<int>(J.rows() + static_cast<Eigen::Index>(e)),
                           static_cast<int>(j), extra[e].normal[j]);
  A.setFromTriplets(trips.begin(), trips.end());
  return A;
}

Vec full_residual(const RestrictedProblem& rp, const Vec& x, const std::vector<AffineRow>& extra) {
  Vec r = rp.residual(x);
  if (extra.empty()) return r;
  Vec out(r.size() + static_cast<Eigen::Index>(extra.size()));
  out.head(r.size()) = r;
  for (size_t e = 0; e < extra.size(); ++e)
    out[r.size() + static_cast<Eigen::Index>(e)] = extra[e].normal.dot(x - extra[e].base);
  return out;
}

}  // namespace

NewtonReport newton_solve(const RestrictedProblem& rp, Vec& x, const ContinuationOptions& opts,
                          const std::vector<AffineRow>& extra) {
  NewtonReport rep;
  Vec r = full_residual(rp, x, extra);
  double rn = r.lpNorm<Eigen::Infinity>();
  for (int it = 0; it < opts.max_newton; ++it) {
    SpMat J = stack_rows(rp.jacobian(x), extra);
    if (J.rows() != J.cols()) throw std::logic_error("newton_solve: system not square");
    Eigen::SparseLU<SpMat> lu;
    lu.analyzePattern(J);
    lu.factorize(J);
    if (lu.info() != Eigen::Success) {
      rep.converged = false;
      rep.res_norm = rn;
      return rep;
    }
    Vec dx = lu.solve(-r);
    double damp = 1.0;
    Vec xn, rn2v;
    double rn2 = 0.0;
    for (int halve = 0; halve <= 4; ++halve) {
      xn = x + damp * dx;
      rn2v = full_residual(rp, xn, extra);
      rn2 = rn2v.lpNorm<Eigen::Infinity>();
      if (rn2 < rn || rn2 <= opts.tol_res) break;
      damp *= 0.5;
    }
    x = xn;
    r = rn2v;
    rn = rn2;
    rep.iterations = it + 1;
    double step_norm = damp * dx.norm();
    if (rn <= opts.tol_res && step_norm <= opts.tol_res * (1.0 + x.norm())) {
      rep.converged = true;
      rep.res_norm = rn;
      return rep;
    }
  }
  rep.converged = rn <= opts.tol_res;
  rep.res_norm = rn;
  return rep;
}

Chart make_chart(const RestrictedProblem& rp, const Vec& x) {
  Chart c;
  c.x = x;
  c.point = rp.unpack(x);
  const auto& h = rp.handle();
  c.point.mu = acp::eval_mu(h, c.point.u);
  c.point.nu = acp::eval_nu(h, c.point.u, c.point.lam, c.point.v);
  // fixed parameters keep their restriction values
  for (const auto& [k, v] : rp.restriction().fixed_mu) c.point.mu[h.mu_index(k)] = v;
  for (const auto& [k, v] : rp.restriction().fixed_nu) c.point.nu[h.nu_index(k)] = v;
  return c;
}

Chart newton_correct(const RestrictedProblem& rp, const Vec& guess,
                     const ContinuationOptions& opts) {
  if (rp.deficit() != 0) throw std::logic_error("newton_correct: restricted deficit must be 0");
  Vec x = guess;
  NewtonReport rep = newton_solve(rp, x, opts);
  if (!rep.converged) throw std::runtime_error("newton_correct: no convergence");
  return make_chart(rp, x);
}

Chart newton_correct(const RestrictedProblem& rp, const Point& guess,
                     const ContinuationOptions& opts) {
  return newton_correct(rp, rp.pack(guess), opts);
}

Mat tangent_basis(const RestrictedProblem& rp, const Chart& chart, double sv_threshold,
                  bool allow_singular) {
  SpMat J = rp.jacobian(chart.x);
  Mat Jd = Mat(J);
  Eigen::BDCSVD<Mat> svd(Jd, Eigen::ComputeFullV);
  const int cols = static_cast<int>(Jd.cols());
  const int rows = static_cast<int>(Jd.rows());
  const int d = rp.deficit();
  if (d < 0) throw std::logic_error("tangent_basis: negative deficit");
  double smax = svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
  int rank = 0;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
    if (svd.singularValues()[i] > sv_threshold * std::max(1.0, smax)) ++rank;
  int nullity = cols - rank;
  if (nullity > d && !allow_singular)
    throw std::runtime_error("tangent_basis: rank deficiency beyond deficit (singular point)");
  int k = std::max(nullity, d);
  (void)rows;
  return svd.matrixV().rightCols(std::min(k, cols));
}

double min_singular_value(const RestrictedProblem& rp, const Chart& chart) {
  Mat Jd = Mat(rp.jacobian(chart.x));
  Eigen::BDCSVD<Mat> svd(Jd);
  return svd.singularValues().minCoeff();
}

namespace {

// Tangent via one bordered solve [J; t_prev^T] t = [0; 1]; falls back to SVD.
bool bordered_tangent(const RestrictedProblem& rp, const Vec& x, const Vec& t_prev, Vec& t_out) {
  SpMat J = rp.jacobian(x);
  std::vector<AffineRow> rows(1);
  rows[0].normal = t_prev;
  rows[0].base = Vec::Zero(t_prev.size());
  SpMat A = stack_rows(J, rows);
  if (A.rows() != A.cols()) return false;
  Eigen::SparseLU<SpMat> lu;
  lu.analyzePattern(A);
  lu.factorize(A);
  if (lu.info() != Eigen::Success) return false;
  Vec rhs = Vec::Zero(A.rows());
  rhs[A.rows() - 1] = 1.0;
  Vec t = lu.solve(rhs);
  double nrm = t.norm();
  if (!std::isfinite(nrm) || nrm == 0.0) return false;
  t_out = t / nrm;
  return true;
}

Vec initial_tangent(const RestrictedProblem& rp, const Chart& chart,
                    const ContinuationOptions& opts) {
  if (chart.tangent.cols() == 1 && chart.tangent.rows() == chart.x.size())
    return chart.tangent.col(0);
  if (rp.dim() <= opts.svd_dense_limit) {
    Mat T = tangent_basis(rp, chart, opts.sv_threshold);
    if (T.cols() < 1) throw std::runtime_error("continue_branch: empty tangent space");
    return T.col(0);
  }
  // Larger systems: bordered solves seeded from candidate coordinates; free
  // continuation parameters first.
  std::vector<int> candidates;
  for (const auto& lb : rp.free_mu()) candidates.push_back(rp.mu_position(lb));
  for (int i = 0; i < rp.dim(); i += std::max(1, rp.dim() / 13)) candidates.push_back(i);
  Vec t;
  for (int cand : candidates) {
    Vec e = Vec::Zero(rp.dim());
    e[cand] = 1.0;
    if (bordered_tangent(rp, chart.x, e, t)) return t;
  }
  Mat T = tangent_basis(rp, chart, opts.sv_threshold);
  return T.col(0);
}

}  // namespace

Branch continue_branch(const RestrictedProblem& rp, const Chart& chart0,
                       const ContinuationOptions& opts) {
  if (rp.deficit() != 1) throw std::logic_error("continue_branch: deficit must be 1");
  Branch br;
  Chart cur = chart0;
  if (cur.x.size() != rp.dim()) {  // chart from another restriction
    cur.x = rp.pack(cur.point);
    cur.tangent = Mat();
  }
  {
    Vec r0 = rp.residual(cur.x);
    if (r0.lpNorm<Eigen::Infinity>() > 10 * opts.tol_res)
      throw std::runtime_error("continue_branch: initial chart not converged");
  }
  Vec t = initial_tangent(rp, cur, opts);
  t *= opts.direction;
  cur.tangent = t;
  cur.point_id = 0;
  br.charts.push_back(cur);

  std::vector<double> ev_prev(opts.events.size());
  for (size_t e = 0; e < opts.events.size(); ++e)
    ev_prev[e] = opts.events[e].fn(cur) - opts.events[e].target;

  double h = opts.h0;
  int accepted = 0;
  while (accepted < opts.max_steps) {
    Vec x_pred = cur.x + h * t;
    Vec x_new = x_pred;
    std::vector<AffineRow> rows(1);
    rows[0].normal = t;
    rows[0].base = x_pred;
    NewtonReport rep = newton_solve(rp, x_new, opts, rows);
    if (!rep.converged) {
      if (h <= opts.h_min * (1 + 1e-12)) {
        br.termination = "corrector failure at h_min";
        break;
      }
      h = std::max(h / 2.0, opts.h_min);
      continue;
    }
    Chart next = make_chart(rp, x_new);
    Vec t_new;
    if (!bordered_tangent(rp, x_new, t, t_new)) {
      // near-singular tangent update: keep previous direction
      t_new = t;
    }
    if (t_new.dot(t) < 0.0) t_new = -t_new;
    next.tangent = t_new;
    next.step = h;
    next.point_id = ++accepted;
    if (opts.verbose)
      std::cerr << "step " << accepted << " h=" << h << " res=" << rep.res_norm << "\n";

    bool stop = false;
    for (size_t e = 0; e < opts.events.size(); ++e) {
      double val = opts.events[e].fn(next) - opts.events[e].target;
      if (ev_prev[e] == 0.0) ev_prev[e] = val;
      if (val == 0.0 || (val > 0) != (ev_prev[e] > 0)) {
        Chart evc = locate_event(rp, br.charts.back(), next, opts.events[e], opts);
        evc.labels.push_back(opts.events[e].name);
        br.events_found.emplace_back(opts.events[e].name, evc);
        if (opts.events[e].terminal) {
          br.charts.push_back(evc);
          br.terminated_by_event = true;
          br.termination = "event " + opts.events[e].name;
          stop = true;
          break;
        }
      }
      ev_prev[e] = val;
    }
    if (stop) break;

    br.charts.push_back(next);
    if (opts.stop_on_closed_loop && accepted > 5 && (next.x - br.charts.front().x).norm() < h &&
        t_new.dot(br.charts.front().tangent.col(0)) > 0.0) {
      br.termination = "closed loop";
      break;
    }
    cur = next;
    t = t_new;
    h = std::min(2.0 * h, opts.h_max);
  }
  if (br.termination.empty()) br.termination = "max_steps";
  for (auto& c : br.charts) c.branch_id = chart0.branch_id;
  return br;
}

Chart locate_event(const RestrictedProblem& rp, const Chart& a, const Chart& b, const Event& ev,
                   const ContinuationOptions& opts) {
  double fa = ev.fn(a) - ev.target;
  double fb = ev.fn(b) - ev.target;
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if ((fa > 0) == (fb > 0)) throw std::invalid_argument("locate_event: no sign change");
  Vec dir = b.x - a.x;
  double len = dir.norm();
  if (len == 0.0) return a;
  Vec t = dir / len;

  double sa = 0.0, sb = 1.0;
  Chart best = b;
  double fbest = fb;
  double s = 0.5;
  for (int it = 0; it < 30; ++it) {
    // secant step with bisection safeguard
    s = sa - fa * (sb - sa) / (fb - fa);
    if (!(s > sa + 1e-12 && s < sb - 1e-12)) s = 0.5 * (sa + sb);
    Vec x_pred = a.x + s * dir;
    Vec x_new = x_pred;
    std::vector<AffineRow> rows(1);
    rows[0].normal = t;
    rows[0].base = x_pred;
    NewtonReport rep = newton_solve(rp, x_new, opts, rows);
    if (!rep.converged) throw std::runtime_error("locate_event: corrector failure");
    Chart c = make_chart(rp, x_new);
    if (a.tangent.cols() == 1) {
      Vec tc;
      if (bordered_tangent(rp, x_new, a.tangent.col(0), tc)) {
        if (tc.dot(a.tangent.col(0)) < 0.0) tc = -tc;
        c.tangent = tc;
      } else {
        c.tangent = a.tangent;
      }
    }
    double fc = ev.fn(c) - ev.target;
    if (std::abs(fc) < std::abs(fbest)) {
      best = c;
      fbest = fc;
    }
    if (std::abs(fc) <= 1e-8) return best;
    if ((fc > 0) == (fa > 0)) {
      sa = s;
      fa = fc;
    } else {
      sb = s;
      fb = fc;
    }
  }
  if (std::abs(fbest) <= 1e-8) return best;
  throw std::runtime_error("locate_event: no convergence within 30 iterations");
}

std::vector<Chart> cover_2d(const RestrictedProblem& rp, const Chart& chart0,
                            const ContinuationOptions& opts) {
  if (rp.deficit() != 2) throw std::logic_error("cover_2d: deficit must be 2");
  std::vector<Chart> atlas_charts;
  std::deque<Chart> frontier;

  Chart c0 = chart0;
  if (c0.tangent.cols() != 2) c0.tangent = tangent_basis(rp, c0, opts.sv_threshold);
  atlas_charts.push_back(c0);
  frontier.push_back(c0);
  const double h = opts.h0;
  const double merge2 = 0.25 * h * h;  // (0.5 h)^2

  auto near_existing = [&](const Vec& x) {
    for (const auto& c : atlas_charts)
      if ((c.x - x).squaredNorm() < merge2) return true;
    return false;
  };

  // Two bordered solves give the new tangent plane; orthonormalize.
  auto plane_at = [&](const Vec& x, const Mat& prev, Mat& out) -> bool {
    SpMat J = rp.jacobian(x);
    std::vector<AffineRow> rows(2);
    rows[0].normal = prev.col(0);
    rows[0].base = Vec::Zero(prev.rows());
    rows[1].normal = prev.col(1);
    rows[1].base = Vec::Zero(prev.rows());
    SpMat A = stack_rows(J, rows);
    if (A.rows() != A.cols()) return false;
    Eigen::SparseLU<SpMat> lu;
    lu.analyzePattern(A);
    lu.factorize(A);
    if (lu.info() != Eigen::Success) return false;
    Mat T(prev.rows(), 2);
    for (int k = 0; k < 2; ++k) {
      Vec rhs = Vec::Zero(A.rows());
      rhs[J.rows() + k] = 1.0;
      T.col(k) = lu.solve(rhs);
    }
    // Gram-Schmidt
    T.col(0).normalize();
    T.col(1) -= T.col(0).dot(T.col(1)) * T.col(0);
    double n1 = T.col(1).norm();
    if (n1 == 0.0) return false;
    T.col(1) /= n1;
    out = T;
    return true;
  };

  int produced = 1;
  while (!frontier.empty() && produced < opts.max_steps) {
    Chart c = frontier.front();
    frontier.pop_front();
    for (int k = 0; k < 6 && produced < opts.max_steps; ++k) {
      double th = 2.0 * M_PI * k / 6.0;
      Vec dir = std::cos(th) * c.tangent.col(0) + std::sin(th) * c.tangent.col(1);
      Vec x_pred = c.x + h * dir;
      if (near_existing(x_pred)) continue;
      std::vector<AffineRow> rows(2);
      rows[0].normal = c.tangent.col(0);
      rows[0].base = x_pred;
      rows[1].normal = c.tangent.col(1);
      rows[1].base = x_pred;
      Vec x_new = x_pred;
      NewtonReport rep = newton_solve(rp, x_new, opts, rows);
      if (!rep.converged) continue;  // skip, frontier continues
      if (near_existing(x_new)) continue;
      Chart nc = make_chart(rp, x_new);
      Mat T;
      if (!plane_at(x_new, c.tangent, T)) continue;
      nc.tangent = T;
      nc.step = h;
      nc.point_id = produced++;
      atlas_charts.push_back(nc);
      frontier.push_back(nc);
    }
  }
  return atlas_charts;
}

}  // namespace contbox::atlas
