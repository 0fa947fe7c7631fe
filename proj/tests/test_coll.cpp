#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "contbox/coll.hpp"

using namespace contbox;
using coll::build_disc;
using coll::build_mesh;

TEST_CASE("gauss nodes and weights") {
  for (int m = 1; m <= 7; ++m) {
    Vec z, w;
    coll::gauss_legendre(m, z, w);
    CHECK(w.sum() == doctest::Approx(2.0).epsilon(1e-14));
    for (Eigen::Index k = 0; k < z.size(); ++k)
      CHECK(z[k] == doctest::Approx(-z[z.size() - 1 - k]).epsilon(1e-14));
    // exactness up to degree 2m-1
    for (int d = 0; d < 2 * m; ++d) {
      double quad = 0.0;
      for (Eigen::Index k = 0; k < z.size(); ++k) quad += w[k] * std::pow(z[k], d);
      double exact = (d % 2 == 0) ? 2.0 / (d + 1) : 0.0;
      CHECK(std::abs(quad - exact) < 1e-13);
    }
  }
}

TEST_CASE("build_mesh basics") {
  auto m11 = build_mesh(1, 1);
  CHECK(m11.tau_cn.size() == 1);
  CHECK(m11.tau_cn[0] == doctest::Approx(0.5));
  CHECK(m11.w[0] == doctest::Approx(2.0));

  auto m22 = build_mesh(2, 2);
  CHECK(m22.z[1] == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-14));
  CHECK(m22.w[0] == doctest::Approx(1.0));

  // duplication identity tau_bp[(m+1)j] == tau_bp[(m+1)j - 1] == tau_pt[j]
  auto mm = build_mesh(5, 4);
  for (int j = 1; j < 5; ++j) {
    CHECK(mm.tau_bp[5 * j] == doctest::Approx(mm.tau_pt[j]).epsilon(1e-15));
    CHECK(mm.tau_bp[5 * j - 1] == doctest::Approx(mm.tau_pt[j]).epsilon(1e-15));
  }
}

TEST_CASE("index_map conventions") {
  Vec sigma(5);
  sigma << 0, 0.25, 0.5, 0.75, 1.0;
  CHECK(coll::index_of(0.35, sigma) == 2);
  CHECK(coll::index_of(-0.1, sigma) == 1);
  CHECK(coll::index_of(1.0, sigma) == 4);
  CHECK(coll::index_of(0.25, sigma) == 2);
  Vec taus(6);
  taus << -0.2, 0.1, 0.25, 0.6, 0.99, 1.5;
  auto idx = coll::index_map(taus, sigma);
  for (Eigen::Index k = 1; k < idx.size(); ++k) CHECK(idx[k] >= idx[k - 1]);
}

TEST_CASE("interpolation and continuity maps") {
  auto disc = build_disc(build_mesh(4, 3), 2);
  const int nbp = 4 * 4 * 2;
  Vec ones = Vec::Ones(nbp);
  Vec v = disc.W * ones;
  for (Eigen::Index k = 0; k < v.size(); ++k) CHECK(v[k] == doctest::Approx(1.0).epsilon(1e-14));
  Vec dv = disc.Wp * ones;
  for (Eigen::Index k = 0; k < dv.size(); ++k) CHECK(std::abs(dv[k]) < 1e-13);

  // Q annihilates continuous samples
  Vec smooth(nbp);
  for (int b = 0; b < 16; ++b)
    for (int i = 0; i < 2; ++i) smooth[b * 2 + i] = std::sin(disc.mesh.tau_bp[b] + i);
  CHECK((disc.Q * smooth).lpNorm<Eigen::Infinity>() < 1e-14);

  // interp at the collocation nodes equals W
  SpMat M = coll::interp_matrix(disc, disc.mesh.tau_cn, 1.0, 0.0, false);
  CHECK((Mat(M) - Mat(disc.W)).lpNorm<Eigen::Infinity>() < 1e-13);
}

TEST_CASE("shifted interpolation of a smooth function") {
  auto disc = build_disc(build_mesh(10, 4), 1);
  const int nbp = 10 * 5;
  Vec samples(nbp);
  for (int b = 0; b < nbp; ++b) samples[b] = std::sin(2 * M_PI * disc.mesh.tau_bp[b]);
  // evaluate at tau - 1/10 for interior times
  Vec times(21);
  for (int k = 0; k <= 20; ++k) times[k] = 0.15 + 0.03 * k;
  SpMat M = coll::interp_matrix(disc, times, 1.0, 0.1, false);
  Vec vals = M * samples;
  for (Eigen::Index k = 0; k < times.size(); ++k)
    CHECK(vals[k] == doctest::Approx(std::sin(2 * M_PI * (times[k] - 0.1))).epsilon(1e-4));
  // reproduction of smooth polynomial data at the nodes is exact
  Vec poly(nbp);
  for (int b = 0; b < nbp; ++b) poly[b] = std::pow(disc.mesh.tau_bp[b], 4) - disc.mesh.tau_bp[b];
  SpMat Mi = coll::interp_matrix(disc, disc.mesh.tau_cn, 1.0, 0.0, false);
  Vec pv = Mi * poly;
  for (int c = 0; c < 40; ++c) {
    double t = disc.mesh.tau_cn[c];
    CHECK(pv[c] == doctest::Approx(std::pow(t, 4) - t).epsilon(1e-12));
  }
}

namespace {

coll::Field exp_field() {
  coll::Field f;
  f.n = 1;
  f.ny = 0;
  f.q = 0;
  f.f = [](double, const Vec& x, const Mat&, const Vec&) { return x; };
  f.fx = [](double, const Vec&, const Mat&, const Vec&) { return Mat(Mat::Identity(1, 1)); };
  return f;
}

// solve the linear collocation system for x' = x, x(0)=1
Vec solve_exp(const coll::SegmentDisc& disc) {
  const int N = disc.mesh.N, m = disc.mesh.m;
  const int nbp = N * (m + 1);
  Mat A = Mat::Zero(nbp, nbp);
  Vec rhs = Vec::Zero(nbp);
  Mat top = 2.0 * N * Mat(disc.Wp) - Mat(disc.W);
  A.topRows(N * m) = top;
  if (N > 1) A.middleRows(N * m, N - 1) = Mat(disc.Q);
  A(nbp - 1, 0) = 1.0;
  rhs(nbp - 1) = 1.0;
  return A.fullPivLu().solve(rhs);
}

}  // namespace

TEST_CASE("ode_residual") {
  auto disc = build_disc(build_mesh(3, 2), 1);
  coll::Field f;
  f.n = 1;
  f.ny = 0;
  f.q = 0;
  f.f = [](double, const Vec&, const Mat&, const Vec&) { return Vec(Vec::Ones(1)); };
  f.fx = [](double, const Vec&, const Mat&, const Vec&) { return Mat(Mat::Zero(1, 1)); };
  Vec x_bp = disc.mesh.tau_bp;
  Vec r = coll::ode_residual(disc, x_bp, Vec(), 0.0, 1.0, Vec(), f);
  CHECK(r.size() == 3 * 2);
  CHECK(r.lpNorm<Eigen::Infinity>() < 1e-14);

  auto disc10 = build_disc(build_mesh(10, 4), 1);
  Vec sol = solve_exp(disc10);
  CHECK(sol[sol.size() - 1] == doctest::Approx(std::exp(1.0)).epsilon(1e-10));
  Vec r2 = coll::ode_residual(disc10, sol, Vec(), 0.0, 1.0, Vec(), exp_field());
  CHECK(r2.lpNorm<Eigen::Infinity>() < 1e-11);
}

TEST_CASE("collocation convergence order") {
  for (int m = 2; m <= 3; ++m) {
    std::vector<double> errs;
    for (int N : {4, 8}) {
      auto disc = build_disc(build_mesh(N, m), 1);
      Vec sol = solve_exp(disc);
      errs.push_back(std::abs(sol[sol.size() - 1] - std::exp(1.0)));
    }
    CHECK(errs[0] / errs[1] >= std::pow(2.0, m));
  }
}

TEST_CASE("continuity_residual") {
  auto disc = build_disc(build_mesh(3, 2), 1);
  Vec x = Vec::Zero(9);
  for (int b = 0; b < 9; ++b) x[b] = std::cos(disc.mesh.tau_bp[b]);
  CHECK(coll::continuity_residual(disc, x).lpNorm<Eigen::Infinity>() < 1e-15);
  x[3] += 0.5;  // first base point of interval 2
  Vec r = coll::continuity_residual(disc, x);
  CHECK(r[0] == doctest::Approx(0.5));
  CHECK(std::abs(r[1]) < 1e-15);

  auto disc1 = build_disc(build_mesh(1, 3), 2);
  CHECK(coll::continuity_residual(disc1, Vec::Zero(8)).size() == 0);
}

TEST_CASE("quad_integrate") {
  auto disc = build_disc(build_mesh(2, 3), 1);
  Vec ones = Vec::Ones(6);
  CHECK(coll::quad_integrate(disc, ones) == doctest::Approx(1.0).epsilon(1e-15));
  Vec cubes(6);
  for (int c = 0; c < 6; ++c) cubes[c] = std::pow(disc.mesh.tau_cn[c], 3);
  CHECK(coll::quad_integrate(disc, cubes) == doctest::Approx(0.25).epsilon(1e-14));
  // indicator of [0, 0.5] aligned with the mesh boundary
  Vec ind(6);
  for (int c = 0; c < 6; ++c) ind[c] = disc.mesh.tau_cn[c] <= 0.5 ? 1.0 : 0.0;
  CHECK(coll::quad_integrate(disc, ind) == doctest::Approx(0.5).epsilon(1e-15));
}

namespace {

// random continuous base-point data (duplicated interior points equal)
Vec random_continuous(const coll::CollMesh& mesh, int n, std::mt19937& rng) {
  std::normal_distribution<double> dist;
  const int N = mesh.N, m = mesh.m;
  Vec out(N * (m + 1) * n);
  Vec prev_end;
  for (int a = 0; a < N; ++a) {
    for (int k = 0; k <= m; ++k) {
      Vec v(n);
      if (k == 0 && a > 0)
        v = prev_end;
      else
        for (int i = 0; i < n; ++i) v[i] = dist(rng);
      out.segment(((m + 1) * a + k) * n, n) = v;
      if (k == m) prev_end = v;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("adjoint of the exponential segment") {
  // the dx contribution vanishes iff lambda solves the adjoint collocation
  // system for lambda' = -lambda
  auto disc = build_disc(build_mesh(10, 4), 1);
  const int nbp = 50;
  Mat A = Mat::Zero(nbp, nbp);
  Vec rhs = Vec::Zero(nbp);
  Mat top = -2.0 * 10 * Mat(disc.Wp) - Mat(disc.W);
  A.topRows(40) = top;
  A.middleRows(40, 9) = Mat(disc.Q);
  A(49, 0) = 1.0;
  rhs(49) = 1.0;
  Vec lam = A.fullPivLu().solve(rhs);
  for (int b = 0; b < nbp; ++b)
    CHECK(lam[b] == doctest::Approx(std::exp(-disc.mesh.tau_bp[b])).epsilon(1e-8));
  Vec x = solve_exp(disc);
  auto contrib = coll::ode_adjoint(disc, x, Vec(), 0.0, 1.0, Vec(), exp_field(), lam,
                                   Vec::Zero(1), nullptr);
  CHECK(contrib.dx.lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("ode_adjoint homogeneity and FD consistency") {
  std::mt19937 rng(42);
  const int N = 4, m = 3, n = 2, ny = 1, q = 2;
  auto disc = build_disc(build_mesh(N, m), n);
  coll::Field f;
  f.n = n;
  f.ny = ny;
  f.q = q;
  f.f = [](double t, const Vec& x, const Mat& y, const Vec& p) {
    Vec out(2);
    out[0] = p[0] * x[1] + 0.3 * x[0] * x[0] + y(0, 0) + 0.1 * std::sin(t);
    out[1] = -x[0] + p[1] * y(1, 0) * y(1, 0) + 0.2 * x[0] * x[1];
    return out;
  };
  f.fx = [](double, const Vec& x, const Mat&, const Vec& p) {
    Mat J(2, 2);
    J << 0.6 * x[0], p[0], -1.0 + 0.2 * x[1], 0.2 * x[0];
    return J;
  };
  f.fy = [](double, const Vec&, const Mat& y, const Vec& p) {
    Mat J(2, 2);
    J << 1.0, 0.0, 0.0, 2.0 * p[1] * y(1, 0);
    return J;
  };
  f.ft = [](double t, const Vec&, const Mat&, const Vec&) {
    Vec out(2);
    out << 0.1 * std::cos(t), 0.0;
    return out;
  };
  f.fp = [](double, const Vec& x, const Mat& y, const Vec&) {
    Mat J(2, 2);
    J << x[1], 0.0, 0.0, y(1, 0) * y(1, 0);
    return J;
  };

  const int nbp = N * (m + 1);
  Vec x_bp = random_continuous(disc.mesh, n, rng);
  std::normal_distribution<double> dist;
  Vec y_bp(nbp * n * ny);
  for (Eigen::Index k = 0; k < y_bp.size(); ++k) y_bp[k] = dist(rng);
  double T0 = 0.3, T = 1.7;
  Vec p(2);
  p << 0.8, -0.4;
  Vec lam = random_continuous(disc.mesh, n, rng);
  Vec zeta(2);
  zeta << 0.5, -1.1;

  coll::BcRow bc;
  coll::BcTerm term;
  term.j = 0;
  Mat B0 = (Mat(2, 2) << 1.0, 0.2, -0.3, 0.9).finished();
  Mat D1 = (Mat(2, 2) << 0.0, 1.0, 0.0, 0.0).finished();
  auto Bfun = [B0, D1](const Vec& pv) { return Mat(B0 + pv[1] * D1); };
  term.B = Bfun(p);
  term.dB_dp = {Mat::Zero(2, 2), D1};
  term.xj1 = Vec(2);
  term.xj1 << dist(rng), dist(rng);
  bc.terms.push_back(term);
  bc.b = Vec::Zero(2);

  auto z = coll::ode_adjoint(disc, x_bp, y_bp, T0, T, p, f, Vec::Zero(nbp * n), Vec::Zero(n),
                             &bc);
  CHECK(z.dx.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(z.dy.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(z.dT == 0.0);

  auto a1 = coll::ode_adjoint(disc, x_bp, y_bp, T0, T, p, f, lam, zeta, &bc);
  auto a2 = coll::ode_adjoint(disc, x_bp, y_bp, T0, T, p, f, 2.0 * lam, 2.0 * zeta, &bc);
  CHECK((a2.dx - 2.0 * a1.dx).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK(a2.dT == doctest::Approx(2.0 * a1.dT).epsilon(1e-12));

  // quadrature-discretized partial Lagrangian
  Vec xj1 = term.xj1;
  auto Lag = [&](const Vec& xv, const Vec& yv, double T0v, double Tv, const Vec& pv,
                 const Vec& xj1v) {
    Vec r = coll::ode_residual(disc, xv, yv, T0v, Tv, pv, f);
    Vec lam_cn = disc.W * lam;
    double L = 0.0;
    for (int c = 0; c < N * m; ++c)
      L += disc.mesh.w[c % m] / (2.0 * N) * lam_cn.segment(c * n, n).dot(r.segment(c * n, n));
    Vec bcr = xv.head(n) - Bfun(pv) * xj1v - bc.b;
    L += zeta.dot(bcr);
    return L;
  };
  auto Lag_bp = [&](const Vec& yv) {
    double L = 0.0;
    for (int b = 0; b < nbp; ++b) {
      double tb = T0 + T * disc.mesh.tau_bp[b];
      Mat yb = coll::y_at(f, yv, n, b, nbp);
      Vec fv = f.f(tb, x_bp.segment(b * n, n), yb, p);
      L += disc.bp_weights[b] * lam.segment(b * n, n).dot(-T * fv);
    }
    return L;
  };

  const double h = 1e-6;
  SUBCASE("x direction") {
    Vec dx = random_continuous(disc.mesh, n, rng);
    double fd =
        (Lag(x_bp + h * dx, y_bp, T0, T, p, xj1) - Lag(x_bp - h * dx, y_bp, T0, T, p, xj1)) /
        (2.0 * h);
    Vec dx_cn = disc.W * dx;
    double pred = 0.0;
    for (int c = 0; c < N * m; ++c)
      pred +=
          disc.mesh.w[c % m] / (2.0 * N) * a1.dx.segment(c * n, n).dot(dx_cn.segment(c * n, n));
    pred += a1.dx0.dot(dx.head(n)) + a1.dx1.dot(dx.tail(n));
    CHECK(pred == doctest::Approx(fd).epsilon(1e-5));
  }
  SUBCASE("y direction") {
    Vec dy(nbp * n * ny);
    for (Eigen::Index k = 0; k < dy.size(); ++k) dy[k] = dist(rng);
    double fd = (Lag_bp(y_bp + h * dy) - Lag_bp(y_bp - h * dy)) / (2.0 * h);
    double pred = 0.0;
    for (int b = 0; b < nbp; ++b)
      for (int i = 0; i < n; ++i) pred += disc.bp_weights[b] * a1.dy[b * n + i] * dy[b * n + i];
    CHECK(pred == doctest::Approx(fd).epsilon(1e-5));
  }
  SUBCASE("scalar directions") {
    double fd =
        (Lag(x_bp, y_bp, T0 + h, T, p, xj1) - Lag(x_bp, y_bp, T0 - h, T, p, xj1)) / (2.0 * h);
    CHECK(a1.dT0 == doctest::Approx(fd).epsilon(1e-5));
    fd = (Lag(x_bp, y_bp, T0, T + h, p, xj1) - Lag(x_bp, y_bp, T0, T - h, p, xj1)) / (2.0 * h);
    CHECK(a1.dT == doctest::Approx(fd).epsilon(1e-5));
    for (int k = 0; k < q; ++k) {
      Vec pp = p, pm = p;
      pp[k] += h;
      pm[k] -= h;
      fd = (Lag(x_bp, y_bp, T0, T, pp, xj1) - Lag(x_bp, y_bp, T0, T, pm, xj1)) / (2.0 * h);
      CHECK(a1.dp[k] == doctest::Approx(fd).epsilon(1e-5));
    }
    Vec dxj(2);
    dxj << dist(rng), dist(rng);
    fd = (Lag(x_bp, y_bp, T0, T, p, xj1 + h * dxj) - Lag(x_bp, y_bp, T0, T, p, xj1 - h * dxj)) /
         (2.0 * h);
    CHECK(a1.dxj1[0].dot(dxj) == doctest::Approx(fd).epsilon(1e-5));
  }
}
