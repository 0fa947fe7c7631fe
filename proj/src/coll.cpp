#include "contbox/coll.hpp"

#include <cmath>
#include <stdexcept>

namespace contbox::coll {

void gauss_legendre(int m, Vec& z, Vec& w) {
  // Nodes/weights to 30 digits, m <= 7.
  switch (m) {
    case 1:
      z = Vec::Zero(1);
      w = Vec::Constant(1, 2.0);
      return;
    case 2: {
      double a = 0.577350269189625764509148780502L;
      z.resize(2), w.resize(2);
      z << -a, a;
      w << 1.0, 1.0;
      return;
    }
    case 3: {
      double a = 0.774596669241483377035853079956L;
      z.resize(3), w.resize(3);
      z << -a, 0.0, a;
      w << 5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0;
      return;
    }
    case 4: {
      double a = 0.339981043584856264802665759103L;
      double b = 0.861136311594052575223946488893L;
      double wa = 0.652145154862546142626936050778L;
      double wb = 0.347854845137453857373063949222L;
      z.resize(4), w.resize(4);
      z << -b, -a, a, b;
      w << wb, wa, wa, wb;
      return;
    }
    case 5: {
      double a = 0.538469310105683091036314420700L;
      double b = 0.906179845938663992797626878299L;
      double w0 = 0.568888888888888888888888888889L;
      double wa = 0.478628670499366468041291514836L;
      double wb = 0.236926885056189087514264040720L;
      z.resize(5), w.resize(5);
      z << -b, -a, 0.0, a, b;
      w << wb, wa, w0, wa, wb;
      return;
    }
    case 6: {
      double a = 0.238619186083196908630501721681L;
      double b = 0.661209386466264513661399595020L;
      double c = 0.932469514203152027812301554494L;
      double wa = 0.467913934572691047389870343990L;
      double wb = 0.360761573048138607569833513838L;
      double wc = 0.171324492379170345040296142173L;
      z.resize(6), w.resize(6);
      z << -c, -b, -a, a, b, c;
      w << wc, wb, wa, wa, wb, wc;
      return;
    }
    case 7: {
      double a = 0.405845151377397166906606412077L;
      double b = 0.741531185599394439863864773281L;
      double c = 0.949107912342758524526189684048L;
      double w0 = 0.417959183673469387755102040816L;
      double wa = 0.381830050505118944950369775489L;
      double wb = 0.279705391489276667901467771424L;
      double wc = 0.129484966168869693270611432679L;
      z.resize(7), w.resize(7);
      z << -c, -b, -a, 0.0, a, b, c;
      w << wc, wb, wa, w0, wa, wb, wc;
      return;
    }
    default:
      throw std::invalid_argument("gauss_legendre: m must be in 1..7");
  }
}

CollMesh build_mesh(int N, int m) {
  if (N < 1) throw std::invalid_argument("build_mesh: N must be >= 1");
  CollMesh mesh;
  mesh.N = N;
  mesh.m = m;
  gauss_legendre(m, mesh.z, mesh.w);
  mesh.tau_pt.resize(N + 1);
  for (int j = 0; j <= N; ++j) mesh.tau_pt[j] = static_cast<double>(j) / N;
  mesh.tau_bp.resize(N * (m + 1));
  for (int j = 0; j < N; ++j)
    for (int k = 0; k <= m; ++k)
      mesh.tau_bp[(m + 1) * j + k] = mesh.tau_pt[j] + static_cast<double>(k) / (N * m);
  mesh.tau_cn.resize(N * m);
  for (int j = 0; j < N; ++j)
    for (int k = 0; k < m; ++k)
      mesh.tau_cn[m * j + k] = mesh.tau_pt[j] + (1.0 + mesh.z[k]) / (2.0 * N);
  return mesh;
}

int index_of(double tau, const Vec& sigma) {
  const int P = static_cast<int>(sigma.size()) - 1;
  if (tau < sigma[0]) return 1;
  if (tau >= sigma[P]) return P;
  // largest p with sigma[p-1] <= tau (half-open intervals [s_p, s_{p+1}))
  int lo = 0, hi = P;
  while (hi - lo > 1) {
    int mid = (lo + hi) / 2;
    if (sigma[mid] <= tau)
      lo = mid;
    else
      hi = mid;
  }
  return lo + 1;
}

Eigen::VectorXi index_map(const Vec& tau, const Vec& sigma) {
  Eigen::VectorXi out(tau.size());
  for (Eigen::Index i = 0; i < tau.size(); ++i) out[i] = index_of(tau[i], sigma);
  return out;
}

double lagrange_basis(int m, int c, double xi) {
  if (m == 0) return 1.0;
  double sc = -1.0 + 2.0 * c / m;
  double num = 1.0, den = 1.0;
  for (int l = 0; l <= m; ++l) {
    if (l == c) continue;
    double sl = -1.0 + 2.0 * l / m;
    num *= (xi - sl);
    den *= (sc - sl);
  }
  return num / den;
}

double lagrange_deriv(int m, int c, double xi) {
  if (m == 0) return 0.0;
  double sc = -1.0 + 2.0 * c / m;
  double den = 1.0;
  for (int l = 0; l <= m; ++l) {
    if (l == c) continue;
    den *= (sc - (-1.0 + 2.0 * l / m));
  }
  double sum = 0.0;
  for (int j = 0; j <= m; ++j) {
    if (j == c) continue;
    double prod = 1.0;
    for (int l = 0; l <= m; ++l) {
      if (l == c || l == j) continue;
      prod *= (xi - (-1.0 + 2.0 * l / m));
    }
    sum += prod;
  }
  return sum / den;
}

SegmentDisc build_disc(const CollMesh& mesh, int n) {
  SegmentDisc d;
  d.n = n;
  d.mesh = mesh;
  const int N = mesh.N, m = mesh.m;
  std::vector<contbox::Triplet> tw, twp, tq;
  for (int a = 0; a < N; ++a) {
    for (int dd = 0; dd < m; ++dd) {
      for (int c = 0; c <= m; ++c) {
        double L = lagrange_basis(m, c, mesh.z[dd]);
        double Lp = lagrange_deriv(m, c, mesh.z[dd]);
        for (int i = 0; i < n; ++i) {
          int row = (m * a + dd) * n + i;
          int col = ((m + 1) * a + c) * n + i;
          if (L != 0.0) tw.emplace_back(row, col, L);
          if (Lp != 0.0) twp.emplace_back(row, col, Lp);
        }
      }
    }
  }
  d.W.resize(N * m * n, N * (m + 1) * n);
  d.W.setFromTriplets(tw.begin(), tw.end());
  d.Wp.resize(N * m * n, N * (m + 1) * n);
  d.Wp.setFromTriplets(twp.begin(), twp.end());

  for (int j = 1; j < N; ++j)
    for (int i = 0; i < n; ++i) {
      tq.emplace_back((j - 1) * n + i, ((m + 1) * j) * n + i, 1.0);
      tq.emplace_back((j - 1) * n + i, ((m + 1) * j - 1) * n + i, -1.0);
    }
  d.Q.resize((N - 1) * n, N * (m + 1) * n);
  d.Q.setFromTriplets(tq.begin(), tq.end());

  std::vector<contbox::Triplet> to;
  for (int a = 0; a < N; ++a)
    for (int dd = 0; dd < m; ++dd)
      for (int i = 0; i < n; ++i) {
        int row = (m * a + dd) * n + i;
        to.emplace_back(row, row, mesh.w[dd]);
      }
  d.Omega.resize(N * m * n, N * m * n);
  d.Omega.setFromTriplets(to.begin(), to.end());

  // Exact weights for integrating base-point samples: integrate each uniform
  // Lagrange basis polynomial over [-1,1] with a Gauss rule of full degree.
  Vec zg, wg;
  gauss_legendre(std::min(7, m + 1), zg, wg);
  Vec wl = Vec::Zero(m + 1);
  for (int c = 0; c <= m; ++c)
    for (Eigen::Index g = 0; g < zg.size(); ++g)
      wl[c] += wg[g] * lagrange_basis(m, c, zg[g]);
  d.bp_weights.resize(N * (m + 1));
  for (int a = 0; a < N; ++a)
    for (int c = 0; c <= m; ++c) d.bp_weights[(m + 1) * a + c] = wl[c] / (2.0 * N);
  return d;
}

int interp_row(const CollMesh& mesh, double t, bool deriv, std::vector<int>& cols,
               std::vector<double>& vals) {
  const int N = mesh.N, m = mesh.m;
  int j = index_of(t, mesh.tau_pt);  // 1-based, clamped
  double xi = 2.0 * N * t + 1.0 - 2.0 * j;
  cols.resize(m + 1);
  vals.resize(m + 1);
  for (int c = 0; c <= m; ++c) {
    cols[c] = (m + 1) * (j - 1) + c;
    vals[c] = deriv ? 2.0 * N * lagrange_deriv(m, c, xi) : lagrange_basis(m, c, xi);
  }
  return j;
}

SpMat interp_matrix(const SegmentDisc& disc, const Vec& times, double b, double c, bool deriv) {
  const int n = disc.n;
  std::vector<contbox::Triplet> trips;
  std::vector<int> cols;
  std::vector<double> vals;
  for (Eigen::Index t = 0; t < times.size(); ++t) {
    interp_row(disc.mesh, b * times[t] - c, deriv, cols, vals);
    for (size_t k = 0; k < cols.size(); ++k)
      for (int i = 0; i < n; ++i)
        trips.emplace_back(static_cast<int>(t) * n + i, cols[k] * n + i, vals[k]);
  }
  SpMat M(static_cast<int>(times.size()) * n, disc.mesh.N * (disc.mesh.m + 1) * n);
  M.setFromTriplets(trips.begin(), trips.end());
  return M;
}

Mat y_at(const Field& fld, const Vec& y_bp, int n, int bp_index, int n_bp) {
  Mat y(n, fld.ny);
  for (int l = 0; l < fld.ny; ++l)
    y.col(l) = y_bp.segment(l * n_bp * n + bp_index * n, n);
  return y;
}

namespace {

// states interpolated to the collocation nodes
struct CnStates {
  Mat x;  // n x Nm
  std::vector<Mat> y;  // per node: n x ny
  Vec t;  // physical times
};

CnStates at_nodes(const SegmentDisc& disc, const Vec& x_bp, const Vec& y_bp, double T0, double T,
                  const Field& fld) {
  const int N = disc.mesh.N, m = disc.mesh.m, n = disc.n;
  const int n_bp = N * (m + 1);
  CnStates s;
  Vec x_cn = disc.W * x_bp;
  s.x.resize(n, N * m);
  for (int cidx = 0; cidx < N * m; ++cidx) s.x.col(cidx) = x_cn.segment(cidx * n, n);
  s.y.resize(N * m, Mat(n, fld.ny));
  for (int l = 0; l < fld.ny; ++l) {
    Vec ycol_cn = disc.W * y_bp.segment(l * n_bp * n, n_bp * n);
    for (int cidx = 0; cidx < N * m; ++cidx) s.y[cidx].col(l) = ycol_cn.segment(cidx * n, n);
  }
  s.t.resize(N * m);
  for (int cidx = 0; cidx < N * m; ++cidx) s.t[cidx] = T0 + T * disc.mesh.tau_cn[cidx];
  return s;
}

}  // namespace

Vec ode_residual(const SegmentDisc& disc, const Vec& x_bp, const Vec& y_bp, double T0, double T,
                 const Vec& p, const Field& fld) {
  const int N = disc.mesh.N, m = disc.mesh.m, n = disc.n;
  if (x_bp.size() != N * (m + 1) * n) throw std::invalid_argument("ode_residual: x_bp size");
  if (y_bp.size() != static_cast<Eigen::Index>(N * (m + 1) * n * fld.ny))
    throw std::invalid_argument("ode_residual: y_bp size");
  CnStates s = at_nodes(disc, x_bp, y_bp, T0, T, fld);
  Vec r = 2.0 * N * (disc.Wp * x_bp);
  for (int c = 0; c < N * m; ++c) {
    Vec fv = fld.f(s.t[c], s.x.col(c), s.y[c], p);
    if (fv.size() != n) throw std::runtime_error("field output dimension mismatch");
    r.segment(c * n, n) -= T * fv;
  }
  return r;
}

Vec continuity_residual(const SegmentDisc& disc, const Vec& x_bp) { return disc.Q * x_bp; }

double quad_integrate(const SegmentDisc& disc, const Vec& g_cn) {
  const int N = disc.mesh.N, m = disc.mesh.m;
  if (g_cn.size() != N * m) throw std::invalid_argument("quad_integrate: g_cn size");
  double s = 0.0;
  for (int a = 0; a < N; ++a)
    for (int d = 0; d < m; ++d) s += disc.mesh.w[d] * g_cn[m * a + d];
  return s / (2.0 * N);
}

AdjointBlockSet ode_adjoint(const SegmentDisc& disc, const Vec& x_bp, const Vec& y_bp, double T0,
                            double T, const Vec& p, const Field& fld, const Vec& lambda_bp,
                            const Vec& zeta, const BcRow* bc) {
  const int N = disc.mesh.N, m = disc.mesh.m, n = disc.n;
  const int n_bp = N * (m + 1);
  const int q = static_cast<int>(p.size());
  CnStates s = at_nodes(disc, x_bp, y_bp, T0, T, fld);
  Vec lam_cn = disc.W * lambda_bp;
  Vec lamp_cn = 2.0 * N * (disc.Wp * lambda_bp);

  AdjointBlockSet out;
  out.dx = Vec::Zero(N * m * n);
  out.dy = Vec::Zero(n_bp * n * fld.ny);
  out.dp = Vec::Zero(q);
  out.dx0 = -lambda_bp.head(n);
  out.dx1 = lambda_bp.tail(n);
  if (bc) out.dx0 += zeta;

  const double quad = 1.0 / (2.0 * N);
  for (int c = 0; c < N * m; ++c) {
    Vec lam = lam_cn.segment(c * n, n);
    double wq = disc.mesh.w[c % m] * quad;
    Mat fx = fld.fx(s.t[c], s.x.col(c), s.y[c], p);
    out.dx.segment(c * n, n) = -lamp_cn.segment(c * n, n) - T * fx.transpose() * lam;
    Vec fv = fld.f(s.t[c], s.x.col(c), s.y[c], p);
    Vec ftv = fld.ft ? fld.ft(s.t[c], s.x.col(c), s.y[c], p) : Vec(Vec::Zero(n));
    out.dT0 += -T * wq * ftv.dot(lam);
    out.dT += -wq * (fv + T * disc.mesh.tau_cn[c] * ftv).dot(lam);
    if (q > 0) {
      Mat fpv = fld.fp(s.t[c], s.x.col(c), s.y[c], p);
      out.dp += -T * wq * fpv.transpose() * lam;
    }
  }
  if (fld.ny > 0) {
    for (int b = 0; b < n_bp; ++b) {
      double tb = T0 + T * disc.mesh.tau_bp[b];
      Vec xb = x_bp.segment(b * n, n);
      Mat yb = y_at(fld, y_bp, n, b, n_bp);
      Mat fyv = fld.fy(tb, xb, yb, p);  // n x n*ny
      Vec lam = lambda_bp.segment(b * n, n);
      for (int l = 0; l < fld.ny; ++l)
        out.dy.segment(l * n_bp * n + b * n, n) = -T * fyv.middleCols(l * n, n).transpose() * lam;
    }
  }
  if (bc) {
    out.dxj1.reserve(bc->terms.size());
    for (const auto& term : bc->terms) {
      out.dxj1.push_back(-term.B.transpose() * zeta);
      for (int k = 0; k < static_cast<int>(term.dB_dp.size()); ++k)
        out.dp[k] -= zeta.dot(term.dB_dp[k] * term.xj1);
    }
    if (bc->db_dp) out.dp -= bc->db_dp->transpose() * zeta;
  }
  return out;
}

}  // namespace contbox::coll
