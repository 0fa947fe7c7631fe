#include <doctest.h>

#include <cmath>
#include <random>

#include "contbox/acp.hpp"

using namespace contbox;
using namespace contbox::acp;

namespace {

// circle zero function with one monitor, used across the tests
AugmentedProblem circle_problem() {
  AugmentedProblem prob;
  Vec u0(2);
  u0 << 1.0, 0.0;
  prob.add_phi(
      "circle", {}, u0, 1,
      [](const Vec& u) { return Vec(Vec::Constant(1, u[0] * u[0] + u[1] * u[1] - 1.0)); },
      [](const Vec& u) {
        Mat J(1, 2);
        J << 2 * u[0], 2 * u[1];
        return J;
      });
  prob.add_psi("x_mon", {0}, Vec(), {"x"}, [](const Vec& u) { return Vec(u); });
  return prob;
}

}  // namespace

TEST_CASE("empty and trivial construction") {
  AugmentedProblem prob;
  CHECK(prob.n_u() == 0);
  CHECK_THROWS_AS(prob.close(), std::logic_error);  // empty problem

  AugmentedProblem p2;
  Vec u0(3);
  u0 << 1, 2, 3;
  p2.add_phi("f", {}, u0, 2, [](const Vec& u) { return Vec(u.head(2)); });
  CHECK(p2.n_u() == 3);
  auto h = p2.close();
  CHECK(deficit(h, {}) == 1);  // 3 vars, 2 equations
  CHECK_THROWS_AS(
      p2.add_phi("g", {}, Vec(), 1, [](const Vec&) { return Vec(Vec::Zero(1)); }),
      std::logic_error);
}

TEST_CASE("residual stacking and restriction") {
  auto prob = circle_problem();
  auto h = prob.close();
  Point p = initial_point(h);
  CHECK(p.mu[0] == doctest::Approx(1.0));
  Vec r = residual(h, p);
  CHECK(r.size() == 2);
  CHECK(std::abs(r[0]) < 1e-15);
  CHECK(std::abs(r[1]) < 1e-15);
  p.mu[0] = 0.9;
  r = residual(h, p);
  CHECK(r[1] == doctest::Approx(0.1));

  // newton on the restriction x fixed at 0.8 -> (0.8, +-0.6)
  Restriction res;
  res.fixed_mu["x"] = 0.8;
  RestrictedProblem rp(h, res);
  CHECK(rp.deficit() == 0);
  Vec x(2);
  x << 0.8, 0.5;
  // plain newton iteration through the sparse jacobian
  for (int it = 0; it < 20; ++it) {
    Vec rr = rp.residual(x);
    if (rr.lpNorm<Eigen::Infinity>() < 1e-12) break;
    Mat J = Mat(rp.jacobian(x));
    x -= J.fullPivLu().solve(rr);
  }
  CHECK(x[0] == doctest::Approx(0.8));
  CHECK(x[1] == doctest::Approx(0.6).epsilon(1e-10));

  CHECK(deficit(h, {}) == 1);
  CHECK(deficit(h, res) == 0);  // deficit decreases by 1 per fixed label
  Restriction bad;
  bad.fixed_mu["nope"] = 0.0;
  CHECK_THROWS_AS(deficit(h, bad), std::invalid_argument);
}

TEST_CASE("duplicate labels and fids are rejected") {
  AugmentedProblem prob;
  Vec u0(1);
  u0 << 0.5;
  prob.add_phi("f", {}, u0, 1, [](const Vec& u) { return Vec(u); });
  CHECK_THROWS_AS(prob.add_phi("f", {0}, Vec(), 1, [](const Vec& u) { return Vec(u); }),
                  std::invalid_argument);
  prob.add_psi("m1", {0}, Vec(), {"a"}, [](const Vec& u) { return Vec(u); });
  CHECK_THROWS_AS(prob.add_psi("m2", {0}, Vec(), {"a"}, [](const Vec& u) { return Vec(u); }),
                  std::invalid_argument);
  CHECK_THROWS_AS(prob.add_phi("g", {7}, Vec(), 1, [](const Vec& u) { return Vec(u); }),
                  std::out_of_range);
}

TEST_CASE("jacobian: linear exact, quadratic FD vs analytic, sparsity") {
  AugmentedProblem prob;
  Mat A(2, 3);
  A << 1, 2, 3, 4, 5, 6;
  Vec u0(3);
  u0 << 0.3, -0.2, 0.7;
  prob.add_phi("lin", {}, u0, 2, [A](const Vec& u) { return Vec(A * u); });
  Vec v0(2);
  v0 << 0.5, 0.6;
  prob.add_phi(
      "quad", std::vector<int>{0}, v0, 2,
      [](const Vec& u) {
        Vec r(2);
        r[0] = u[0] * u[1] + u[2] * u[2];
        r[1] = std::sin(u[1]) - u[0];
        return r;
      },
      [](const Vec& u) {
        Mat J(2, 3);
        J << u[1], u[0], 2 * u[2], -1.0, std::cos(u[1]), 0.0;
        return J;
      });
  auto h = prob.close();
  Point p = initial_point(h);
  SpMat J = jacobian(h, p);
  // linear block exact
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) CHECK(Mat(J)(r, c) == doctest::Approx(A(r, c)).epsilon(1e-14));
  // quadratic block: FD (by erasing the analytic derivative) vs analytic
  AugmentedProblem prob2;
  prob2.add_phi("lin", {}, u0, 2, [A](const Vec& u) { return Vec(A * u); });
  prob2.add_phi("quad", std::vector<int>{0}, v0, 2, [](const Vec& u) {
    Vec r(2);
    r[0] = u[0] * u[1] + u[2] * u[2];
    r[1] = std::sin(u[1]) - u[0];
    return r;
  });
  auto h2 = prob2.close();
  SpMat J2 = jacobian(h2, initial_point(h2));
  CHECK((Mat(J) - Mat(J2)).lpNorm<Eigen::Infinity>() < 1e-6);
  // sparsity contained in the dependency sets
  Mat Jd = Mat(J);
  CHECK(Jd(0, 3) == 0.0);  // lin block does not touch the quad vars
  CHECK(Jd(2, 1) == 0.0);  // quad block only sees u0, u3, u4
}

TEST_CASE("lambda blocks: homogeneity, chain embedding, bootstrap algebra") {
  // stationary points of x on the circle: adjoint columns for u1, u2
  AugmentedProblem prob;
  Vec u0(2);
  u0 << 1.0, 0.0;
  prob.add_phi(
      "circle", {}, u0, 1,
      [](const Vec& u) { return Vec(Vec::Constant(1, u[0] * u[0] + u[1] * u[1] - 1.0)); },
      [](const Vec& u) {
        Mat J(1, 2);
        J << 2 * u[0], 2 * u[1];
        return J;
      });
  prob.add_psi("x_mon", {0}, Vec(), {"x"}, [](const Vec& u) { return Vec(u); });
  // adjoint of the circle constraint: one multiplier, columns du1, du2
  prob.add_lambda("adj.circle", {0, 1}, Vec::Zero(1), {{"du1"}, {"du2"}},
                  [](const Vec& u) {
                    SpMat L(1, 2);
                    L.insert(0, 0) = 2 * u[0];
                    L.insert(0, 1) = 2 * u[1];
                    return L;
                  });
  // adjoint of the monitor: eta enters the du1 column
  prob.add_lambda("adj.x_mon", {0}, Vec::Zero(1), {{"du1"}}, [](const Vec&) {
    SpMat L(1, 1);
    L.insert(0, 0) = 1.0;
    return L;
  });
  auto h = prob.close();
  CHECK(h.n_Lambda() == 2);
  Point p = initial_point(h);
  p.lam << 0.3, 0.7;
  Vec r = residual(h, p);
  // groups: phi (1), psi (1), Lambda (2)
  CHECK(r.size() == 4);
  // homogeneity: scaling lambda scales exactly the adjoint group
  Point p2 = p;
  p2.lam *= 3.0;
  Vec r2 = residual(h, p2);
  CHECK(r2[0] == r[0]);
  CHECK(r2[1] == r[1]);
  CHECK(r2[2] == doctest::Approx(3.0 * r[2]).epsilon(1e-15));
  CHECK(r2[3] == doctest::Approx(3.0 * r[3]).epsilon(1e-15));

  // bootstrap algebra at (1, 0): eta = 1 requires lambda = -1/2
  p.lam << -0.5, 1.0;
  r = residual(h, p);
  CHECK(std::abs(r[2]) < 1e-15);  // du1: 2*1*(-1/2) + 1 = 0
  CHECK(std::abs(r[3]) < 1e-15);  // du2: 2*0*(-1/2) = 0

  // jacobian structure: d(adjoint)/dlambda = Lambda^T
  SpMat J = jacobian(h, p);
  Mat Jd = Mat(J);
  CHECK(Jd(2, 2) == doctest::Approx(2.0));  // d(du1 eq)/d lam1 = 2 u1
  CHECK(Jd(3, 2) == doctest::Approx(0.0));
  CHECK(Jd(2, 3) == doctest::Approx(1.0));  // d(du1 eq)/d eta
  // d(adjoint)/du via FD fallback on the contribution map
  CHECK(Jd(2, 0) == doctest::Approx(2.0 * p.lam[0]).epsilon(1e-6));
}

TEST_CASE("chain embedding leaves earlier residual entries intact") {
  auto build = [](bool extended) {
    AugmentedProblem prob;
    Vec u0(2);
    u0 << 0.4, -0.3;
    prob.add_phi("f1", {}, u0, 1, [](const Vec& u) {
      return Vec(Vec::Constant(1, u[0] * u[0] - u[1]));
    });
    prob.add_psi("m", {1}, Vec(), {"b"}, [](const Vec& u) { return Vec(u); });
    if (extended) {
      Vec v0(1);
      v0 << 2.0;
      prob.add_phi("f2", {0}, v0, 1,
                   [](const Vec& u) { return Vec(Vec::Constant(1, u[0] * u[1] - 1.0)); });
    }
    return prob.close();
  };
  auto h1 = build(false);
  auto h2 = build(true);
  Point p1 = initial_point(h1);
  Point p2 = initial_point(h2);
  Vec r1 = residual(h1, p1);
  Vec r2 = residual(h2, p2);
  CHECK(r2[0] == r1[0]);  // bit-identical
  CHECK(r2[2] == r1[1]);  // psi group shifted by the new phi rows
}

TEST_CASE("xi and theta blocks") {
  AugmentedProblem prob;
  Vec u0(1);
  u0 << 2.0;
  prob.add_phi("f", {}, u0, 1, [](const Vec& u) { return Vec(Vec::Constant(1, u[0] - 2.0)); });
  prob.add_lambda("adj.f", {0}, Vec::Constant(1, 0.7), {{"du"}}, [](const Vec&) {
    SpMat L(1, 1);
    L.insert(0, 0) = 1.0;
    return L;
  });
  // complementary zero function 1 - eta and complementary monitor nu = eta
  prob.add_xi("comp", {}, {0}, {}, Vec(), 1,
              [](const Vec&, const Vec& lam, const Vec&) {
                return Vec(Vec::Constant(1, 1.0 - lam[0]));
              });
  prob.add_theta("track", {}, {0}, {}, Vec(), {"nu_eta"},
                 [](const Vec&, const Vec& lam, const Vec&) { return Vec(lam); });
  auto h = prob.close();
  Point p = initial_point(h);
  CHECK(p.nu[0] == doctest::Approx(0.7));
  Vec r = residual(h, p);
  CHECK(r.size() == 4);
  CHECK(r[2] == doctest::Approx(0.3));   // xi: 1 - 0.7
  CHECK(std::abs(r[3]) < 1e-15);         // theta - nu = 0
  SpMat J = jacobian(h, p);
  Mat Jd = Mat(J);
  // columns: u (1), lam (1), mu (0), nu (1)
  CHECK(Jd(2, 1) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(Jd(3, 2) == doctest::Approx(-1.0));  // d(theta - nu)/d nu
}
