#include <doctest.h>

#include <cmath>

#include "contbox/examples_detail.hpp"
#include "contbox/optim.hpp"

using namespace contbox;
namespace exd = contbox::examples::detail;

TEST_CASE("chebyshev basis recurrence and endpoints") {
  Vec tau(5);
  tau << 0.0, 0.25, 0.5, 0.75, 1.0;
  Mat B = optim::chebyshev_basis(5, tau);
  for (Eigen::Index t = 0; t < tau.size(); ++t) {
    CHECK(B(0, t) == doctest::Approx(1.0));
    CHECK(B(1, t) == doctest::Approx(2 * tau[t] - 1));
    double x = 2 * tau[t] - 1;
    for (int j = 2; j < 5; ++j)
      CHECK(B(j, t) == doctest::Approx(2 * x * B(j - 1, t) - B(j - 2, t)).epsilon(1e-14));
    // classical T_j(cos t) = cos(j t)
    double th = std::acos(x);
    for (int j = 0; j < 5; ++j) CHECK(B(j, t) == doctest::Approx(std::cos(j * th)).epsilon(1e-12));
  }
}

TEST_CASE("stage plan JSON round trip") {
  optim::StagePlan plan;
  plan.objective_label = "obj";
  plan.base.fixed_mu = {{"a", 1.0}};
  optim::Stage s;
  s.name = "s1";
  s.release = {"b"};
  s.event_label = "obj";
  s.event_is_fold = true;
  s.max_steps = 33;
  plan.stages.push_back(s);
  auto text = optim::plan_to_json(plan);
  auto back = optim::plan_from_json(text);
  CHECK(back.objective_label == "obj");
  CHECK(back.base.fixed_mu.at("a") == 1.0);
  CHECK(back.stages.size() == 1);
  CHECK(back.stages[0].event_is_fold);
  CHECK(back.stages[0].max_steps == 33);
}

TEST_CASE("inflection example: staged run finds the stationary point") {
  auto res = exd::run_inflection(0.3, 1e-3, 0.5);
  // the eps-difference stationary point sits eps/2 from the inflection root,
  // so the root distance is the sharp O(eps) measure
  CHECK(std::abs(res.omega1 - res.oracle_root) <= 1e-3);
  CHECK(std::abs(res.poly_residual) <= 5e-3);  // = |poly'| * eps/2
  CHECK(res.eta_obj == doctest::Approx(1.0).epsilon(1e-10));
  // bootstrap multipliers match the closed forms
  for (int k = 0; k < 7; ++k)
    CHECK(res.lambdas[k] == doctest::Approx(res.lambdas_closed[k]).epsilon(1e-8));
}

TEST_CASE("linear-oscillator sensitivity scan closed forms") {
  double zeta = 5e-3;
  auto scan = exd::run_linosc_sensitivity(zeta, {"fix-ab", "free"});
  // at the peak (omega = 1, midpoint of the sweep): sigma_min = 2 zeta
  size_t mid = scan.svmin["fix-ab"].size() / 2;
  CHECK(scan.svmin["fix-ab"][mid] == doctest::Approx(2 * zeta).epsilon(1e-9));
  CHECK(exd::linosc_sigma_min_closed(zeta, 1.0) == doctest::Approx(0.01).epsilon(1e-12));
  // free scenario stays O(1)-conditioned: min over the sweep well above O(zeta)
  double worst = *std::min_element(scan.svmin["free"].begin(), scan.svmin["free"].end());
  CHECK(worst > 20 * zeta);
}

TEST_CASE("sigma_min ratio across zeta for the fixed-ab scenario") {
  // restatement of the O(zeta) law at computed-ratio level
  auto s1 = exd::run_linosc_sensitivity(5e-3, {"fix-ab"});
  auto s2 = exd::run_linosc_sensitivity(5e-4, {"fix-ab"});
  size_t mid = s1.svmin["fix-ab"].size() / 2;
  double ratio = s1.svmin["fix-ab"][mid] / s2.svmin["fix-ab"][mid];
  CHECK(ratio >= 5.0);
  CHECK(ratio <= 20.0);
}
