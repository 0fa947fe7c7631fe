#include <doctest.h>
#include <cmath>
#include "contbox/examples_detail.hpp"
namespace exd = contbox::examples::detail;

TEST_CASE("ode limit-cycle phase response identities") {
  auto r = exd::run_ode_prc(20, 4);
  CHECK(r.max_dev < 1e-6);
  CHECK(r.normalization == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(std::abs(r.lam_ps) < 1e-8);
}

TEST_CASE("mackey-glass prc (small mesh)") {
  auto r = exd::run_mackey(30, 4, 0.7);
  CAPTURE(r.T_at_07);
  CAPTURE(r.alpha_small_amp);
  CAPTURE(r.normalization);
  CHECK(std::abs(r.T_at_07 - 2.2958) < 2e-3);
  CHECK(std::abs(r.alpha_small_amp - 0.4708) < 5e-3);
  CHECK(std::abs(r.alpha_hb_oracle - 0.4708) < 2e-4);
  CHECK(r.normalization == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(std::abs(r.lam_ps) < 1e-6);
  CHECK(r.prc_periodicity < 1e-6);
  CHECK(std::abs(r.shift_actual - r.shift_predicted) < 5e-8 + 5 * r.delta_bc * r.delta_bc);
}
