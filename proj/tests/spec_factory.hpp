#pragma once

// Shared helpers for randomized delay-coupled specs, used by the unit tests
// and the acceptance suite.

#include <random>

#include "contbox/ddecoll.hpp"
#include "contbox/graph.hpp"

namespace contbox::testing {

inline coll::Field random_field(int n, int ny, int q, std::mt19937& rng) {
  std::uniform_real_distribution<double> U(-0.6, 0.6);
  Mat Lx(n, n), Ly(n, n * std::max(1, ny)), Lp(n, std::max(1, q)), S(n, n);
  Vec c(n), d(n);
  for (int i = 0; i < n; ++i) {
    c[i] = U(rng);
    d[i] = 0.3 * U(rng);
    for (int j = 0; j < n; ++j) {
      Lx(i, j) = U(rng);
      S(i, j) = 0.4 * U(rng);
    }
    for (int j = 0; j < n * std::max(1, ny); ++j) Ly(i, j) = U(rng);
    for (int j = 0; j < std::max(1, q); ++j) Lp(i, j) = U(rng);
  }
  coll::Field f;
  f.n = n;
  f.ny = ny;
  f.q = q;
  f.f = [=](double t, const Vec& x, const Mat& y, const Vec& p) {
    Vec out = Lx * x + c + d * std::sin(t);
    for (int i = 0; i < n; ++i) out[i] += x.dot(S.row(i)) * x[i % n];
    for (int l = 0; l < ny; ++l) out += Ly.middleCols(l * n, n) * y.col(l);
    if (q > 0) out += Lp.leftCols(q) * p;
    return out;
  };
  f.fx = [=](double, const Vec& x, const Mat&, const Vec&) {
    Mat J = Lx;
    for (int i = 0; i < n; ++i) {
      // d/dx of (x . S_i) * x[i % n]
      J.row(i) += Vec(S.row(i)).transpose() * x[i % n];
      J(i, i % n) += x.dot(S.row(i));
    }
    return J;
  };
  f.fy = [=](double, const Vec&, const Mat&, const Vec&) { return Mat(Ly.leftCols(n * ny)); };
  f.ft = [=](double t, const Vec&, const Mat&, const Vec&) { return Vec(d * std::cos(t)); };
  f.fp = [=](double, const Vec&, const Mat&, const Vec&) { return Mat(Lp.leftCols(q)); };
  return f;
}

inline graph::DelayGraph random_graph(std::mt19937& rng, int max_M = 3, int max_n = 3) {
  std::uniform_int_distribution<int> Mdist(1, max_M), ndist(1, max_n);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const int M = Mdist(rng);
  const int n = ndist(rng);  // shared state dimension
  // Multi-predecessor sums are well-posed only when every history shares its
  // duration sequence, so extra edges come with equal node durations.
  bool torus_style = M > 1 && U(rng) < 0.4;
  graph::DelayGraph g;
  double T_common = 0.6 + 0.9 * U(rng);
  for (int i = 0; i < M; ++i) {
    double T = torus_style ? T_common : 0.6 + 0.9 * U(rng);
    g.nodes.push_back({"s" + std::to_string(i), n, {T, ""}, {0.0, ""}, "f"});
  }
  for (int i = 0; i < M; ++i) {
    int j = (i + M - 1) % M;
    Mat B = Mat::Identity(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) B(r, c) += 0.3 * (U(rng) - 0.5);
    g.edges.push_back({i, j, B});
    if (torus_style && U(rng) < 0.5) {
      int j2 = (i + M - 2) % M;
      if (g.edge(i, j2) == nullptr) {
        Mat B2 = 0.5 * Mat::Identity(n, n);
        g.edges.push_back({i, j2, B2});
      }
    }
  }
  // delays: reachable within up to two predecessor hops
  for (int i = 0; i < M; ++i) {
    double reach = 0.0;
    int cur = i;
    for (int hop = 0; hop < 2; ++hop) {
      cur = (cur + M - 1) % M;
      reach += g.nodes[cur].T.value;
    }
    g.nodes[i].alpha.value = (0.15 + 0.7 * U(rng)) * reach;
  }
  return g;
}

struct RandomSpec {
  ddecoll::DdeSpec spec;
  graph::DelayGraph graph;
  int K = 0;  // boundary-condition count
  int G = 0;  // segments with y-dependence
};

inline RandomSpec random_spec(std::mt19937& rng, bool with_links, int max_M = 3, int max_n = 3) {
  RandomSpec out;
  out.graph = random_graph(rng, max_M, max_n);
  auto compiled = graph::compile(out.graph);
  const int M = static_cast<int>(out.graph.nodes.size());
  const int q = 2;
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  ddecoll::DdeSpec spec;
  spec.p_labels = {"pa", "pb"};
  spec.p0 = Vec(2);
  spec.p0 << 0.3, -0.2;
  spec.duration_monitors = false;
  for (int i = 0; i < M; ++i) {
    ddecoll::Segment sg;
    sg.name = "s" + std::to_string(i);
    int n = out.graph.nodes[i].n;
    bool coupled = !compiled.couplings[i].empty();
    sg.field = random_field(n, coupled ? 1 : 0, q, rng);
    double a = U(rng), b = U(rng);
    sg.x_init = [n, a, b](double tau) {
      Vec v(n);
      for (int k = 0; k < n; ++k) v[k] = a * std::cos(tau + k) + b * 0.3 * tau;
      return v;
    };
    sg.T0_init = 0.0;
    sg.T_init = out.graph.nodes[i].T.value;
    if (coupled) {
      sg.couplings.push_back(compiled.couplings[i]);
      ++out.G;
    }
    spec.segments.push_back(sg);
  }
  spec.bcs = compiled.bcs;
  out.K = static_cast<int>(compiled.bcs.size());
  if (with_links) spec.algebraic = compiled.links;
  out.spec = spec;
  return out;
}

/// Random admissible point: continuous x data, arbitrary y, slightly
/// perturbed mesh scalars, random continuous multipliers.
inline acp::Point random_point(const ddecoll::Instance& inst, std::mt19937& rng,
                               double scalar_jitter = 0.02) {
  std::normal_distribution<double> Nd(0.0, 0.5);
  acp::Point p = acp::initial_point(inst.handle);
  for (const auto& L : inst.seg) {
    // continuous x perturbation
    Vec prev;
    for (int a = 0; a < inst.N; ++a)
      for (int k = 0; k <= inst.m; ++k) {
        Vec v(L.n);
        if (k == 0 && a > 0)
          v = prev;
        else
          for (int i = 0; i < L.n; ++i) v[i] = Nd(rng);
        p.u.segment(L.x0 + ((inst.m + 1) * a + k) * L.n, L.n) += 0.3 * v;
        if (k == inst.m) prev = v;
      }
    for (int l = 0; l < L.ny; ++l)
      for (int k = 0; k < L.n_bp * L.n; ++k) p.u[L.y0[l] + k] += 0.3 * Nd(rng);
    p.u[L.iT0] += scalar_jitter * Nd(rng);
    p.u[L.iT] += scalar_jitter * Nd(rng);
    for (int k = 0; k < L.q; ++k) p.u[L.ip + k] += scalar_jitter * Nd(rng);
    for (int l = 0; l < L.ny; ++l)
      for (size_t k = 0; k < L.idlt[l].size(); ++k) p.u[L.idlt[l][k]] += scalar_jitter * Nd(rng);
    // gammas: keep the partition ordered
    for (int l = 0; l < L.ny; ++l)
      for (size_t k = 0; k < L.igb[l].size(); ++k) {
        double width = p.u[L.ige[l][k]] - p.u[L.igb[l][k]];
        double shift = 0.1 * scalar_jitter * Nd(rng) * width;
        if (k > 0) p.u[L.igb[l][k]] += shift;
        if (k + 1 < L.igb[l].size()) p.u[L.ige[l][k]] += shift;
      }
  }
  if (inst.with_adjoints) {
    for (Eigen::Index k = 0; k < p.lam.size(); ++k) p.lam[k] = Nd(rng);
    // lambda_bp must be continuous for the adjoint identities
    for (const auto& L : inst.seg) {
      Vec prev;
      for (int a = 0; a < inst.N; ++a)
        for (int k = 0; k <= inst.m; ++k) {
          if (k == 0 && a > 0)
            p.lam.segment(L.lam0 + ((inst.m + 1) * a) * L.n, L.n) = prev;
          if (k == inst.m) prev = p.lam.segment(L.lam0 + ((inst.m + 1) * a + k) * L.n, L.n);
        }
    }
  }
  p.mu = acp::eval_mu(inst.handle, p.u);
  p.nu = acp::eval_nu(inst.handle, p.u, p.lam, p.v);
  return p;
}

}  // namespace contbox::testing
