#include <doctest.h>

#include <cmath>

#include "contbox/graph.hpp"

using namespace contbox;
using namespace contbox::graph;

namespace {

DelayGraph self_loop(double T, double alpha, int n = 1) {
  DelayGraph g;
  g.nodes.push_back({"a", n, {T, ""}, {alpha, ""}, "f"});
  g.edges.push_back({0, 0, Mat::Identity(n, n)});
  return g;
}

DelayGraph two_cycle(double T1, double T2, double alpha, int n = 1) {
  DelayGraph g;
  g.nodes.push_back({"a", n, {T1, ""}, {alpha, ""}, "f1"});
  g.nodes.push_back({"b", n, {T2, ""}, {alpha, ""}, "f2"});
  g.edges.push_back({0, 1, Mat::Identity(n, n)});
  g.edges.push_back({1, 0, Mat::Identity(n, n)});
  return g;
}

}  // namespace

TEST_CASE("histories: self loop") {
  auto g = self_loop(1.0, 0.4);
  auto hs = enumerate_histories(g, 0);
  REQUIRE(hs.size() == 1);
  CHECK(hs[0].kappa == std::vector<int>{0, 0});
  CHECK(hs[0].ell == 2);
  CHECK(hs[0].iota == 1);
  REQUIRE(hs[0].boundaries.size() == 1);
  CHECK(hs[0].boundaries[0] == doctest::Approx(0.4));
}

TEST_CASE("histories: two-node cycle with T1 < alpha < T1 + T2") {
  auto g = two_cycle(0.6, 1.0, 0.8);
  auto hs = enumerate_histories(g, 1);  // node 2 in 1-based speech
  REQUIRE(hs.size() == 1);
  CHECK(hs[0].kappa == std::vector<int>{1, 0, 1});
  CHECK(hs[0].ell == 3);
}

TEST_CASE("histories: five-segment chain of the data-assimilation example") {
  // T = (0.2, 0.3, 0.2, 0.2, 0.1), alpha = 0.5 for segments 3..5
  DelayGraph g;
  double Ts[5] = {0.2, 0.3, 0.2, 0.2, 0.1};
  for (int k = 0; k < 5; ++k) {
    double alpha = k >= 2 ? 0.5 : 0.0;
    g.nodes.push_back({"s" + std::to_string(k + 1), 2, {Ts[k], ""}, {alpha, ""}, "f"});
    if (k > 0) g.edges.push_back({k, k - 1, Mat::Identity(2, 2)});
  }
  auto hs = enumerate_histories(g, 4);
  REQUIRE(hs.size() == 1);
  // history of segment 5 terminates at segment 2
  CHECK(hs[0].kappa.back() == 1);
  auto compiled = compile(g);
  REQUIRE(compiled.couplings[4].size() == 1);
  const auto& blk = compiled.couplings[4][0];
  CHECK(blk.summands.size() == 1);
  CHECK(blk.summands[0].source == 1);
  // shift: x5(t - alpha) = x2(T2+T3+T4 - alpha + t): delta = (alpha - (T2+T3+T4))/T5
  CHECK(blk.delta0 == doctest::Approx((0.5 - 0.7) / 0.1));
  CHECK(blk.gamma_b0 == doctest::Approx(0.0));
  CHECK(blk.gamma_e0 == doctest::Approx(1.0));
}

TEST_CASE("compile: single self loop gives the periodic-orbit couplings") {
  auto g = self_loop(1.3, 0.4);
  auto c = compile(g);
  REQUIRE(c.couplings[0].size() == 2);
  // y(tau) = x(tau + 1 - alpha/T) on (0, alpha/T): delta_1 = alpha/T - 1
  CHECK(c.couplings[0][0].delta0 == doctest::Approx(0.4 / 1.3 - 1.0));
  CHECK(c.couplings[0][0].gamma_e0 == doctest::Approx(0.4 / 1.3));
  CHECK(c.couplings[0][1].delta0 == doctest::Approx(0.4 / 1.3));
  CHECK(c.couplings[0][1].gamma_e0 == doctest::Approx(1.0));
  REQUIRE(c.bcs.size() == 1);
  CHECK(c.bcs[0].segment == 0);
  // supplements: T pin, T0 pin, delta pin
  CHECK(c.links.size() == 3);
}

TEST_CASE("compile: two-node cycle with alpha < T1, T2") {
  auto g = two_cycle(1.0, 0.8, 0.3);
  auto c = compile(g);
  // y1 on (0, alpha): x2(T2 + t - alpha); on (alpha, T1): x1(t - alpha)
  REQUIRE(c.couplings[0].size() == 2);
  CHECK(c.couplings[0][0].summands[0].source == 1);
  CHECK(c.couplings[0][0].delta0 == doctest::Approx((0.3 - 0.8) / 1.0));
  CHECK(c.couplings[0][1].summands[0].source == 0);
  CHECK(c.couplings[0][1].delta0 == doctest::Approx(0.3));
  // empty matrix product: identity exactly
  CHECK((c.couplings[0][1].summands[0].A.value - Mat::Identity(1, 1)).norm() == 0.0);
}

TEST_CASE("compile: partition soundness on random-ish graphs") {
  for (double alpha : {0.15, 0.45, 0.85}) {
    auto g = two_cycle(0.7, 0.5, alpha);
    auto c = compile(g);
    for (int i = 0; i < 2; ++i) {
      const auto& blocks = c.couplings[i];
      REQUIRE(!blocks.empty());
      CHECK(blocks.front().gamma_b0 == doctest::Approx(0.0));
      CHECK(blocks.back().gamma_e0 == doctest::Approx(1.0));
      for (size_t k = 0; k + 1 < blocks.size(); ++k) {
        CHECK(blocks[k].gamma_e0 == doctest::Approx(blocks[k + 1].gamma_b0));
        CHECK(blocks[k].gamma_b0 <= blocks[k].gamma_e0);
      }
    }
  }
}

TEST_CASE("validate diagnostics") {
  auto g = self_loop(1.0, 0.4);
  CHECK(validate(g).ok());

  DelayGraph bad = g;
  bad.edges[0].B = Mat::Identity(2, 2);  // wrong dimensions
  auto rep = validate(bad);
  REQUIRE(!rep.ok());
  CHECK(rep.errors[0].message.find("expected 1x1") != std::string::npos);

  DelayGraph unreachable;
  unreachable.nodes.push_back({"a", 1, {1.0, ""}, {0.5, ""}, "f"});
  auto rep2 = validate(unreachable);
  REQUIRE(!rep2.ok());
  CHECK(rep2.errors[0].message.find("delay unreachable") != std::string::npos);
}

TEST_CASE("graph JSON round trip") {
  std::string text = R"({
    "nodes": [{"id": "a", "n": 2, "T": "Tpar", "alpha": 0.4, "field": "f"}],
    "edges": [{"from": 0, "to": 0, "B": [1, 0, 0, 1]}]
  })";
  auto g = parse_graph(text);
  CHECK(g.nodes[0].T.is_par());
  CHECK(g.nodes[0].T.par == "Tpar");
  CHECK(g.nodes[0].alpha.value == doctest::Approx(0.4));
  CHECK(g.edges[0].B.rows() == 2);
}

TEST_CASE("slack branches add one redundant condition") {
  auto g = self_loop(1.0, 0.4);
  auto plain = compile(g, false);
  auto slack = compile(g, true);
  CHECK(slack.couplings[0].size() == plain.couplings[0].size() + 1);
  // the extra first interval is empty at the current parameters
  CHECK(slack.couplings[0][0].gamma_b0 == doctest::Approx(0.0));
  CHECK(slack.couplings[0][0].gamma_e0 == doctest::Approx(0.0));
  // remaining intervals still partition [0,1]
  CHECK(slack.couplings[0].back().gamma_e0 == doctest::Approx(1.0));
}
