#include "contbox/ddecoll.hpp"

#include <cmath>
#include <complex>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace contbox::ddecoll {

using coll::CollMesh;
using coll::index_of;
using coll::interp_row;

Mat ParMatrix::deriv(const Vec& p, int k) const {
  if (dp) return dp(p, k);
  if (!fn) return Mat::Zero(value.rows(), value.cols());
  const double h = std::sqrt(std::numeric_limits<double>::epsilon()) *
                   std::max(1.0, std::abs(p[k]));
  Vec pp = p;
  pp[k] = p[k] + h;
  Mat up = fn(pp);
  pp[k] = p[k] - h;
  Mat dn = fn(pp);
  return (up - dn) / (2.0 * h);
}

AlgebraicLink link_eq(const std::string& name, Ref a, double rhs) {
  AlgebraicLink l;
  l.name = name;
  l.terms.push_back({1.0, a, Ref::one()});
  l.rhs = rhs;
  return l;
}

AlgebraicLink link_eq(const std::string& name, Ref a, Ref b) {
  AlgebraicLink l;
  l.name = name;
  l.terms.push_back({1.0, a, Ref::one()});
  l.terms.push_back({-1.0, b, Ref::one()});
  return l;
}

AlgebraicLink link_prod(const std::string& name, Ref a, Ref b, Ref c) {
  AlgebraicLink l;
  l.name = name;
  l.terms.push_back({1.0, a, b});
  l.terms.push_back({-1.0, c, Ref::one()});
  return l;
}

int Instance::mult_index(const std::string& label) const {
  auto it = monitors.find(label);
  if (it == monitors.end() || it->second.mult_index < 0)
    throw std::invalid_argument("no multiplier for monitor: " + label);
  return it->second.mult_index;
}

int Instance::zero_deficit() const {
  int rows = 0;
  for (const auto& blk : handle.data().blocks)
    if (blk.kind == acp::BlockKind::Phi) rows += blk.out_dim;
  return handle.n_u() - rows;
}

namespace {

struct LocalMap {
  std::vector<int> Ku;
  std::unordered_map<int, int> pos;
  int scalar(int g) {
    auto it = pos.find(g);
    if (it != pos.end()) return it->second;
    int l = static_cast<int>(Ku.size());
    Ku.push_back(g);
    pos[g] = l;
    return l;
  }
  int range(int g0, int count) {
    int l = static_cast<int>(Ku.size());
    for (int i = 0; i < count; ++i) {
      Ku.push_back(g0 + i);
      pos[g0 + i] = l + i;
    }
    return l;
  }
};

// Per-call view of one coupling column's state gathered from u_sub.
struct CpState {
  int C = 0;
  std::vector<double> gb, ge, delta, Tj;
  double Ti = 0.0;
  Vec p;
  Vec sigma;  // {0, gb_2..gb_C, 1}
};

struct CpPlan {
  // local u_sub offsets for the coupling phi/lambda evaluators
  int y0 = -1;  // phi block only
  std::vector<std::array<int, 2>> g;  // (gb, ge) per block
  std::vector<int> d;                 // delta per block
  int Ti = -1;
  std::vector<int> Tj;  // per block (-1 for history blocks)
  int p0 = -1, q = 0;
  std::vector<int> src_seg;     // unique source segments
  std::vector<int> src_local;   // local offset of each unique source's x_bp
  std::vector<std::vector<int>> summand_src;  // per block: index into src_seg
  std::vector<int> fd_skip;     // gamma locals
};

CpState cp_state(const CpPlan& pl, const Vec& u) {
  CpState s;
  s.C = static_cast<int>(pl.g.size());
  s.gb.resize(s.C);
  s.ge.resize(s.C);
  s.delta.resize(s.C);
  s.Tj.resize(s.C);
  for (int k = 0; k < s.C; ++k) {
    s.gb[k] = u[pl.g[k][0]];
    s.ge[k] = u[pl.g[k][1]];
    s.delta[k] = u[pl.d[k]];
    s.Tj[k] = pl.Tj[k] >= 0 ? u[pl.Tj[k]] : 0.0;
  }
  s.Ti = u[pl.Ti];
  s.p = u.segment(pl.p0, pl.q);
  s.sigma.resize(s.C + 1);
  s.sigma[0] = 0.0;
  for (int k = 1; k < s.C; ++k) s.sigma[k] = s.gb[k];
  s.sigma[s.C] = 1.0;
  return s;
}

double eval_ref(const Ref& r, const Vec& u, const std::vector<SegmentLayout>& seg) {
  switch (r.kind) {
    case Ref::T0:
      return u[seg[r.seg].iT0];
    case Ref::T:
      return u[seg[r.seg].iT];
    case Ref::GammaB:
      return u[seg[r.seg].igb[r.col][r.block]];
    case Ref::GammaE:
      return u[seg[r.seg].ige[r.col][r.block]];
    case Ref::Delta:
      return u[seg[r.seg].idlt[r.col][r.block]];
    case Ref::Par:
      return u[seg[0].ip + r.pidx];
    case Ref::One:
      return 1.0;
  }
  return 0.0;
}

int ref_uindex(const Ref& r, const std::vector<SegmentLayout>& seg) {
  switch (r.kind) {
    case Ref::T0:
      return seg[r.seg].iT0;
    case Ref::T:
      return seg[r.seg].iT;
    case Ref::GammaB:
      return seg[r.seg].igb[r.col][r.block];
    case Ref::GammaE:
      return seg[r.seg].ige[r.col][r.block];
    case Ref::Delta:
      return seg[r.seg].idlt[r.col][r.block];
    case Ref::Par:
      return seg[0].ip + r.pidx;
    case Ref::One:
      return -1;
  }
  return -1;
}

std::string adj_col_name(const Ref& r, const std::vector<SegmentLayout>& seg, int& offset) {
  offset = 0;
  switch (r.kind) {
    case Ref::T0:
      return seg[r.seg].name + ".dT0";
    case Ref::T:
      return seg[r.seg].name + ".dT";
    case Ref::GammaB:
      offset = 2 * r.block;
      return seg[r.seg].name + ".y" + std::to_string(r.col) + ".dg";
    case Ref::GammaE:
      offset = 2 * r.block + 1;
      return seg[r.seg].name + ".y" + std::to_string(r.col) + ".dg";
    case Ref::Delta:
      offset = r.block;
      return seg[r.seg].name + ".y" + std::to_string(r.col) + ".dD";
    case Ref::Par:
      offset = r.pidx;
      return seg[0].name + ".dp";
    case Ref::One:
      return "";
  }
  return "";
}

}  // namespace

// ---------------------------------------------------------------------------
// coupling evaluation helpers (shared by the phi block, the lambda block and
// the public ops)

namespace {

struct SrcView {
  const SegmentDisc* disc = nullptr;
  const double* x = nullptr;  // x_bp of the source, length n_bp * n
  int n = 0;
};

Vec interp_state(const SrcView& sv, double t, bool deriv) {
  std::vector<int> cols;
  std::vector<double> vals;
  interp_row(sv.disc->mesh, t, deriv, cols, vals);
  Vec out = Vec::Zero(sv.n);
  for (size_t k = 0; k < cols.size(); ++k)
    for (int i = 0; i < sv.n; ++i) out[i] += vals[k] * sv.x[cols[k] * sv.n + i];
  return out;
}

}  // namespace

Vec coupling_residual(const SegmentDisc& disc_own, const std::vector<CouplingBlock>& blocks,
                      const Vec& y_bp, const std::vector<Vec>& gb, const std::vector<Vec>& ge_un,
                      const Vec& deltas, double T_own, const Vec& T_all,
                      const std::vector<const Vec*>& x_src, const Vec& p,
                      const std::vector<const SegmentDisc*>& disc_src) {
  (void)ge_un;
  const int n = disc_own.n;
  const int n_bp = disc_own.mesh.N * (disc_own.mesh.m + 1);
  const int C = static_cast<int>(blocks.size());
  Vec sigma(C + 1);
  sigma[0] = 0.0;
  for (int k = 1; k < C; ++k) sigma[k] = gb[k][0];
  sigma[C] = 1.0;
  Vec r = y_bp;
  for (int b = 0; b < n_bp; ++b) {
    double tau = disc_own.mesh.tau_bp[b];
    int k = index_of(tau, sigma) - 1;
    const auto& blk = blocks[k];
    if (blk.is_history()) {
      r.segment(b * n, n) -= blk.history->g(T_own * tau - deltas[k], p);
    } else {
      double Tj = T_all[blk.target_duration];
      double sh = (T_own / Tj) * (tau - deltas[k]);
      for (size_t s = 0; s < blk.summands.size(); ++s) {
        SrcView sv{disc_src[blk.summands[s].source], x_src[blk.summands[s].source]->data(),
                   disc_src[blk.summands[s].source]->n};
        r.segment(b * n, n) -= blk.summands[s].A(p) * interp_state(sv, sh, false);
      }
    }
  }
  return r;
}

Mat torus_coupling_matrices(int M, double rho, int n) {
  if (M % 2 == 0) throw std::invalid_argument("torus_coupling_matrices: M must be odd");
  using Cplx = std::complex<double>;
  using CMat = Eigen::MatrixXcd;
  CMat F(M, M);
  const Cplx im(0.0, 1.0);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j)
      F(i, j) = std::exp(-2.0 * M_PI * im * static_cast<double>(i * j) / static_cast<double>(M));
  CMat R = CMat::Zero(M, M);
  R(0, 0) = 1.0;
  int half = M / 2;
  for (int k = 1; k <= half; ++k) {
    R(k, k) = std::exp(-2.0 * M_PI * im * (static_cast<double>(k) * rho));
    R(M - k, M - k) = std::exp(2.0 * M_PI * im * (static_cast<double>(k) * rho));
  }
  CMat A = F.inverse() * (R * F);
  double max_imag = A.imag().cwiseAbs().maxCoeff();
  if (max_imag > 1e-12)
    throw std::runtime_error("torus_coupling_matrices: nonreal result");
  Mat out(M * n, M * n);
  out.setZero();
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j)
      for (int c = 0; c < n; ++c) out(i * n + c, j * n + c) = A(i, j).real();
  return out;
}

// ---------------------------------------------------------------------------
// Builder

Builder::Builder(const DdeSpec& spec, int N, int m, bool with_adjoints) {
  inst_.spec = spec;
  inst_.N = N;
  inst_.m = m;
  inst_.with_adjoints = with_adjoints;
  build();
}

Instance instantiate(const DdeSpec& spec, int N, int m, bool with_adjoints) {
  Builder b(spec, N, m, with_adjoints);
  return b.close();
}

namespace {

// sample a tau -> R^n function at the base points
Vec sample_bp(const CollMesh& mesh, int n, const std::function<Vec(double)>& f) {
  int n_bp = mesh.N * (mesh.m + 1);
  Vec out(n_bp * n);
  for (int b = 0; b < n_bp; ++b) out.segment(b * n, n) = f(mesh.tau_bp[b]);
  return out;
}

}  // namespace

void Builder::build() {
  const DdeSpec& spec = inst_.spec;
  const int M = static_cast<int>(spec.segments.size());
  const int q = static_cast<int>(spec.p0.size());
  if (static_cast<int>(spec.p_labels.size()) != q)
    throw std::invalid_argument("p_labels size mismatch");
  CollMesh mesh = coll::build_mesh(inst_.N, inst_.m);
  inst_.disc.resize(M);
  inst_.seg.resize(M);

  // --- segment collocation + continuity blocks -----------------------------
  for (int i = 0; i < M; ++i) {
    const Segment& sg = spec.segments[i];
    const int n = sg.field.n, ny = sg.field.ny;
    if (sg.field.q != q) throw std::invalid_argument("segment field q mismatch");
    if (static_cast<int>(sg.couplings.size()) != ny)
      throw std::invalid_argument("couplings per y column mismatch");
    inst_.disc[i] = std::make_shared<SegmentDisc>(coll::build_disc(mesh, n));
    auto& L = inst_.seg[i];
    L.name = sg.name.empty() ? ("s" + std::to_string(i)) : sg.name;
    L.n = n;
    L.ny = ny;
    L.q = q;
    L.n_bp = inst_.N * (inst_.m + 1);
    L.n_cn = inst_.N * inst_.m;

    Vec x0 = sample_bp(mesh, n, sg.x_init);
    Vec u_new(L.n_bp * n * (1 + ny) + 2 + q);
    u_new.head(L.n_bp * n) = x0;
    L.x0 = prob_.n_u();
    for (int l = 0; l < ny; ++l) {
      L.y0.push_back(L.x0 + L.n_bp * n * (1 + l));
      Vec ycol;
      if (l < static_cast<int>(sg.y_init.size()) && sg.y_init[l]) {
        ycol = sample_bp(mesh, n, sg.y_init[l]);
      } else {
        // default: evaluate the coupling map on the sampled x data
        std::vector<Vec> gb(sg.couplings[l].size()), ge(sg.couplings[l].size());
        Vec deltas(sg.couplings[l].size());
        for (size_t k = 0; k < sg.couplings[l].size(); ++k) {
          gb[k] = Vec::Constant(1, sg.couplings[l][k].gamma_b0);
          ge[k] = Vec::Constant(1, sg.couplings[l][k].gamma_e0);
          deltas[static_cast<Eigen::Index>(k)] = sg.couplings[l][k].delta0;
        }
        Vec T_all(M);
        for (int jj = 0; jj < M; ++jj) T_all[jj] = spec.segments[jj].T_init;
        std::vector<Vec> xs(M);
        std::vector<const Vec*> xp(M);
        std::vector<const SegmentDisc*> dp(M);
        for (int jj = 0; jj < M; ++jj) {
          xs[jj] = sample_bp(mesh, spec.segments[jj].field.n, spec.segments[jj].x_init);
          xp[jj] = &xs[jj];
          dp[jj] = inst_.disc[jj] ? inst_.disc[jj].get() : nullptr;
        }
        // discs for later segments are not built yet; build on demand
        std::vector<std::shared_ptr<SegmentDisc>> tmp;
        for (int jj = 0; jj < M; ++jj)
          if (!dp[jj]) {
            tmp.push_back(std::make_shared<SegmentDisc>(
                coll::build_disc(mesh, spec.segments[jj].field.n)));
            dp[jj] = tmp.back().get();
          }
        Vec zero_y = Vec::Zero(L.n_bp * n);
        ycol = -coupling_residual(*inst_.disc[i], sg.couplings[l], zero_y, gb, ge, deltas,
                                  sg.T_init, T_all, xp, spec.p0, dp);
      }
      u_new.segment(L.n_bp * n * (1 + l), L.n_bp * n) = ycol;
    }
    u_new[L.n_bp * n * (1 + ny)] = sg.T0_init;
    u_new[L.n_bp * n * (1 + ny) + 1] = sg.T_init;
    u_new.tail(q) = spec.p0;
    L.iT0 = L.x0 + L.n_bp * n * (1 + ny);
    L.iT = L.iT0 + 1;
    L.ip = L.iT + 1;

    auto disc = inst_.disc[i];
    Field fld = sg.field;
    const int nbp = L.n_bp, ncn = L.n_cn;
    auto eval = [disc, fld, n, ny, q, nbp](const Vec& u) {
      Vec x = u.head(nbp * n);
      Vec y = u.segment(nbp * n, nbp * n * ny);
      double T0 = u[nbp * n * (1 + ny)];
      double T = u[nbp * n * (1 + ny) + 1];
      Vec p = u.tail(q);
      return coll::ode_residual(*disc, x, y, T0, T, p, fld);
    };
    auto deriv = [disc, fld, n, ny, q, nbp, ncn](const Vec& u) {
      Vec x = u.head(nbp * n);
      Vec y = u.segment(nbp * n, nbp * n * ny);
      double T0 = u[nbp * n * (1 + ny)];
      double T = u[nbp * n * (1 + ny) + 1];
      Vec p = u.tail(q);
      const auto& msh = disc->mesh;
      const int N = msh.N, m = msh.m;
      std::vector<Triplet> trips;
      Vec x_cn = disc->W * x;
      std::vector<Mat> ycols(ny);
      for (int l = 0; l < ny; ++l) {
        Vec yc = disc->W * y.segment(l * nbp * n, nbp * n);
        ycols[l].resize(n, ncn);
        for (int c = 0; c < ncn; ++c) ycols[l].col(c) = yc.segment(c * n, n);
      }
      for (int a = 0; a < N; ++a) {
        for (int dd = 0; dd < m; ++dd) {
          int c = m * a + dd;
          double t = T0 + T * msh.tau_cn[c];
          Vec xc = x_cn.segment(c * n, n);
          Mat yc(n, ny);
          for (int l = 0; l < ny; ++l) yc.col(l) = ycols[l].col(c);
          Mat fx = fld.fx(t, xc, yc, p);
          Mat fy = ny > 0 ? fld.fy(t, xc, yc, p) : Mat();
          Vec fv = fld.f(t, xc, yc, p);
          Vec ftv = fld.ft ? fld.ft(t, xc, yc, p) : Vec(Vec::Zero(n));
          for (int bc = 0; bc <= m; ++bc) {
            double Lv = coll::lagrange_basis(m, bc, msh.z[dd]);
            double Lp = coll::lagrange_deriv(m, bc, msh.z[dd]);
            int col0 = ((m + 1) * a + bc) * n;
            for (int r = 0; r < n; ++r) {
              if (Lp != 0.0) trips.emplace_back(c * n + r, col0 + r, 2.0 * N * Lp);
              if (Lv != 0.0) {
                for (int cc = 0; cc < n; ++cc) {
                  double vx = -T * fx(r, cc) * Lv;
                  if (vx != 0.0) trips.emplace_back(c * n + r, col0 + cc, vx);
                  for (int l = 0; l < ny; ++l) {
                    double vy = -T * fy(r, l * n + cc) * Lv;
                    if (vy != 0.0)
                      trips.emplace_back(c * n + r, nbp * n * (1 + l) + col0 + cc, vy);
                  }
                }
              }
            }
          }
          for (int r = 0; r < n; ++r) {
            double vT0 = -T * ftv[r];
            if (vT0 != 0.0) trips.emplace_back(c * n + r, nbp * n * (1 + ny), vT0);
            double vT = -fv[r] - T * msh.tau_cn[c] * ftv[r];
            if (vT != 0.0) trips.emplace_back(c * n + r, nbp * n * (1 + ny) + 1, vT);
          }
          if (q > 0) {
            Mat fp = fld.fp(t, xc, yc, p);
            for (int r = 0; r < n; ++r)
              for (int k = 0; k < q; ++k)
                if (fp(r, k) != 0.0)
                  trips.emplace_back(c * n + r, nbp * n * (1 + ny) + 2 + k, -T * fp(r, k));
          }
        }
      }
      SpMat J(ncn * n, nbp * n * (1 + ny) + 2 + q);
      J.setFromTriplets(trips.begin(), trips.end());
      return J;
    };
    prob_.add_phi_sp(L.name + ".ode", {}, u_new, ncn * n, eval, deriv);

    // continuity
    std::vector<int> Kx(nbp * n);
    for (int k = 0; k < nbp * n; ++k) Kx[k] = L.x0 + k;
    SpMat Q = disc->Q;
    prob_.add_phi_sp(
        L.name + ".cont", Kx, Vec(), (inst_.N - 1) * n,
        [Q](const Vec& u) { return Vec(Q * u); }, [Q](const Vec&) { return Q; });
  }

  // --- boundary conditions --------------------------------------------------
  for (size_t b = 0; b < spec.bcs.size(); ++b) {
    const auto& bc = spec.bcs[b];
    const auto& Li = inst_.seg[bc.segment];
    const int n = Li.n;
    LocalMap lm;
    int x0_loc = lm.range(Li.x0, n);  // x_i(0)
    std::vector<int> xj_loc;
    for (const auto& [j, B] : bc.terms)
      xj_loc.push_back(lm.range(inst_.seg[j].x0 + (inst_.seg[j].n_bp - 1) * inst_.seg[j].n,
                                inst_.seg[j].n));
    int p_loc = lm.range(Li.ip, q);
    auto terms = bc.terms;
    auto offset = bc.offset;
    auto offset_dp = bc.offset_dp;
    auto eval = [terms, offset, n, q, x0_loc, xj_loc, p_loc](const Vec& u) {
      Vec p = u.segment(p_loc, q);
      Vec r = u.segment(x0_loc, n);
      for (size_t t = 0; t < terms.size(); ++t)
        r -= terms[t].second(p) * u.segment(xj_loc[t], terms[t].second(p).cols());
      if (offset) r -= offset(p);
      return r;
    };
    auto deriv = [terms, offset, offset_dp, n, q, x0_loc, xj_loc, p_loc](const Vec& u) {
      Vec p = u.segment(p_loc, q);
      Mat J = Mat::Zero(n, u.size());
      J.block(0, x0_loc, n, n) = Mat::Identity(n, n);
      for (size_t t = 0; t < terms.size(); ++t) {
        Mat B = terms[t].second(p);
        J.block(0, xj_loc[t], n, B.cols()) = -B;
        for (int k = 0; k < q; ++k) {
          Mat dB = terms[t].second.deriv(p, k);
          if (dB.size() > 0)
            J.col(p_loc + k) -= dB * u.segment(xj_loc[t], B.cols());
        }
      }
      if (offset && offset_dp) J.block(0, p_loc, n, q) -= offset_dp(p);
      return J;
    };
    prob_.add_phi("bc" + std::to_string(b), lm.Ku, Vec(), n, eval, deriv);
  }
  n_bc_ = static_cast<int>(spec.bcs.size());

  // --- mesh, coupling and algebraic blocks per y column ---------------------
  for (int i = 0; i < M; ++i) {
    auto& L = inst_.seg[i];
    const Segment& sg = spec.segments[i];
    L.igb.resize(L.ny);
    L.ige.resize(L.ny);
    L.idlt.resize(L.ny);
    for (int l = 0; l < L.ny; ++l) {
      const auto& blocks = sg.couplings[l];
      const int C = static_cast<int>(blocks.size());
      if (C == 0) throw std::invalid_argument("y column without coupling blocks");
      const std::string base = L.name + ".y" + std::to_string(l);

      // mesh conditions; new u = (gb_1, ge_1, ..., gb_C, ge_C)
      Vec g0(2 * C);
      for (int k = 0; k < C; ++k) {
        g0[2 * k] = blocks[k].gamma_b0;
        g0[2 * k + 1] = blocks[k].gamma_e0;
      }
      int g_base = prob_.n_u();
      for (int k = 0; k < C; ++k) {
        L.igb[l].push_back(g_base + 2 * k);
        L.ige[l].push_back(g_base + 2 * k + 1);
      }
      auto mesh_eval = [C](const Vec& u) {
        Vec r(C + 1);
        r[0] = u[0];                                      // gb_1 = 0
        for (int k = 0; k + 1 < C; ++k) r[k + 1] = u[2 * (k + 1)] - u[2 * k + 1];
        r[C] = 1.0 - u[2 * C - 1];                        // ge_C = 1
        return r;
      };
      auto mesh_deriv = [C](const Vec& u) {
        Mat J = Mat::Zero(C + 1, u.size());
        J(0, 0) = 1.0;
        for (int k = 0; k + 1 < C; ++k) {
          J(k + 1, 2 * (k + 1)) = 1.0;
          J(k + 1, 2 * k + 1) = -1.0;
        }
        J(C, 2 * C - 1) = -1.0;
        return J;
      };
      prob_.add_phi(base + ".mesh", {}, g0, C + 1, mesh_eval, mesh_deriv);

      // coupling block; new u = deltas
      CpPlan pl;
      LocalMap lm;
      pl.y0 = lm.range(L.y0[l], L.n_bp * L.n);
      for (int k = 0; k < C; ++k)
        pl.g.push_back({lm.scalar(L.igb[l][k]), lm.scalar(L.ige[l][k])});
      pl.Ti = lm.scalar(L.iT);
      pl.q = q;
      pl.p0 = lm.range(L.ip, q);
      std::vector<int> src_of_seg(M, -1);
      pl.summand_src.resize(C);
      for (int k = 0; k < C; ++k) {
        if (blocks[k].is_history()) {
          pl.Tj.push_back(-1);
          continue;
        }
        pl.Tj.push_back(lm.scalar(inst_.seg[blocks[k].target_duration].iT));
        for (const auto& s : blocks[k].summands) {
          if (src_of_seg[s.source] < 0) {
            src_of_seg[s.source] = static_cast<int>(pl.src_seg.size());
            pl.src_seg.push_back(s.source);
            pl.src_local.push_back(
                lm.range(inst_.seg[s.source].x0, inst_.seg[s.source].n_bp * inst_.seg[s.source].n));
          }
          pl.summand_src[k].push_back(src_of_seg[s.source]);
        }
      }
      for (int k = 0; k < C; ++k)
        for (int gi : {pl.g[k][0], pl.g[k][1]}) pl.fd_skip.push_back(gi);
      // deltas appended as new variables, locals known: Ku.size() .. +C-1
      Vec d0(C);
      for (int k = 0; k < C; ++k) d0[k] = blocks[k].delta0;
      int d_base_local = static_cast<int>(lm.Ku.size());
      for (int k = 0; k < C; ++k) pl.d.push_back(d_base_local + k);
      int d_base = prob_.n_u();
      for (int k = 0; k < C; ++k) L.idlt[l].push_back(d_base + k);

      auto disc_own = inst_.disc[i];
      std::vector<std::shared_ptr<SegmentDisc>> disc_src;
      for (int sidx : pl.src_seg) disc_src.push_back(inst_.disc[sidx]);
      auto blocks_copy = blocks;
      const int n = L.n, nbp = L.n_bp;

      auto cp_eval = [pl, blocks_copy, disc_own, disc_src, n, nbp](const Vec& u) {
        CpState st = cp_state(pl, u);
        Vec r = u.segment(pl.y0, nbp * n);
        for (int b = 0; b < nbp; ++b) {
          double tau = disc_own->mesh.tau_bp[b];
          int k = index_of(tau, st.sigma) - 1;
          const auto& blk = blocks_copy[k];
          if (blk.is_history()) {
            r.segment(b * n, n) -= blk.history->g(st.Ti * tau - st.delta[k], st.p);
          } else {
            double sh = (st.Ti / st.Tj[k]) * (tau - st.delta[k]);
            for (size_t s = 0; s < blk.summands.size(); ++s) {
              int sl = pl.summand_src[k][s];
              SrcView sv{disc_src[sl].get(), u.data() + pl.src_local[sl], disc_src[sl]->n};
              r.segment(b * n, n) -= blk.summands[s].A(st.p) * interp_state(sv, sh, false);
            }
          }
        }
        return r;
      };
      auto cp_deriv = [pl, blocks_copy, disc_own, disc_src, n, nbp](const Vec& u) {
        CpState st = cp_state(pl, u);
        std::vector<Triplet> trips;
        std::vector<int> cols;
        std::vector<double> vals;
        for (int b = 0; b < nbp; ++b) {
          double tau = disc_own->mesh.tau_bp[b];
          int k = index_of(tau, st.sigma) - 1;
          const auto& blk = blocks_copy[k];
          for (int r = 0; r < n; ++r) trips.emplace_back(b * n + r, pl.y0 + b * n + r, 1.0);
          if (blk.is_history()) {
            double s_arg = st.Ti * tau - st.delta[k];
            Vec gs = blk.history->gs(s_arg, st.p);
            for (int r = 0; r < n; ++r) {
              trips.emplace_back(b * n + r, pl.Ti, -gs[r] * tau);
              trips.emplace_back(b * n + r, pl.d[k], gs[r]);
            }
            if (blk.history->gp) {
              Mat gp = blk.history->gp(s_arg, st.p);
              for (int r = 0; r < n; ++r)
                for (int kk = 0; kk < pl.q; ++kk)
                  if (gp(r, kk) != 0.0)
                    trips.emplace_back(b * n + r, pl.p0 + kk, -gp(r, kk));
            }
          } else {
            double Tj = st.Tj[k];
            double sh = (st.Ti / Tj) * (tau - st.delta[k]);
            for (size_t s = 0; s < blk.summands.size(); ++s) {
              int sl = pl.summand_src[k][s];
              SrcView sv{disc_src[sl].get(), u.data() + pl.src_local[sl], disc_src[sl]->n};
              Mat A = blk.summands[s].A(st.p);
              interp_row(disc_src[sl]->mesh, sh, false, cols, vals);
              for (size_t cc = 0; cc < cols.size(); ++cc)
                for (int r = 0; r < n; ++r)
                  for (int c2 = 0; c2 < n; ++c2)
                    if (A(r, c2) != 0.0)
                      trips.emplace_back(b * n + r, pl.src_local[sl] + cols[cc] * n + c2,
                                         -A(r, c2) * vals[cc]);
              Vec xp = interp_state(sv, sh, true);
              Vec Axp = A * xp;
              for (int r = 0; r < n; ++r) {
                trips.emplace_back(b * n + r, pl.d[k], (st.Ti / Tj) * Axp[r]);
                trips.emplace_back(b * n + r, pl.Ti, -(tau - st.delta[k]) / Tj * Axp[r]);
                trips.emplace_back(b * n + r, pl.Tj[k],
                                   st.Ti / (Tj * Tj) * (tau - st.delta[k]) * Axp[r]);
              }
              Vec xv = interp_state(sv, sh, false);
              for (int kk = 0; kk < pl.q; ++kk) {
                Mat dA = blk.summands[s].A.deriv(st.p, kk);
                if (dA.size() == 0) continue;
                Vec dAx = dA * xv;
                for (int r = 0; r < n; ++r)
                  if (dAx[r] != 0.0) trips.emplace_back(b * n + r, pl.p0 + kk, -dAx[r]);
              }
            }
          }
        }
        SpMat J(nbp * n, u.size() + 0);
        J.setFromTriplets(trips.begin(), trips.end());
        return J;
      };
      // note: J size must cover the appended deltas
      auto cp_deriv_sized = [cp_deriv](const Vec& u) { return cp_deriv(u); };
      prob_.add_phi_sp(base + ".cp", lm.Ku, d0, nbp * n, cp_eval, cp_deriv_sized, pl.fd_skip);

      // algebraic xi conditions
      struct XiRow {
        int k;
        bool is_e;  // xi_e (k < C-1) or xi_b (k >= 1)
      };
      std::vector<XiRow> xirows;
      for (int k = 0; k + 1 < C; ++k)
        if (!blocks[k].is_history()) xirows.push_back({k, true});
      for (int k = 1; k < C; ++k)
        if (!blocks[k].is_history()) xirows.push_back({k, false});
      if (!xirows.empty()) {
        LocalMap lx;
        int Ti_loc = lx.scalar(L.iT);
        std::vector<int> Tj_loc(C, -1), gb_loc(C, -1), ge_loc(C, -1), d_loc(C, -1);
        for (const auto& xr : xirows) {
          int k = xr.k;
          if (Tj_loc[k] < 0) Tj_loc[k] = lx.scalar(inst_.seg[blocks[k].target_duration].iT);
          if (d_loc[k] < 0) d_loc[k] = lx.scalar(L.idlt[l][k]);
          if (xr.is_e && ge_loc[k] < 0) ge_loc[k] = lx.scalar(L.ige[l][k]);
          if (!xr.is_e && gb_loc[k] < 0) gb_loc[k] = lx.scalar(L.igb[l][k]);
        }
        auto xi_eval = [xirows, Ti_loc, Tj_loc, gb_loc, ge_loc, d_loc](const Vec& u) {
          Vec r(xirows.size());
          for (size_t rr = 0; rr < xirows.size(); ++rr) {
            int k = xirows[rr].k;
            double g = xirows[rr].is_e ? u[ge_loc[k]] : u[gb_loc[k]];
            r[static_cast<Eigen::Index>(rr)] =
                (u[Ti_loc] / u[Tj_loc[k]]) * (g - u[d_loc[k]]) - (xirows[rr].is_e ? 1.0 : 0.0);
          }
          return r;
        };
        auto xi_deriv = [xirows, Ti_loc, Tj_loc, gb_loc, ge_loc, d_loc](const Vec& u) {
          Mat J = Mat::Zero(xirows.size(), u.size());
          for (size_t rr = 0; rr < xirows.size(); ++rr) {
            int k = xirows[rr].k;
            int g_loc = xirows[rr].is_e ? ge_loc[k] : gb_loc[k];
            double Ti = u[Ti_loc], Tj = u[Tj_loc[k]], g = u[g_loc], dk = u[d_loc[k]];
            J(rr, Ti_loc) += (g - dk) / Tj;
            J(rr, Tj_loc[k]) += -Ti * (g - dk) / (Tj * Tj);
            J(rr, g_loc) += Ti / Tj;
            J(rr, d_loc[k]) += -Ti / Tj;
          }
          return J;
        };
        prob_.add_phi(base + ".xi", lx.Ku, Vec(), static_cast<int>(xirows.size()), xi_eval,
                      xi_deriv);
      }
    }
  }

  // --- parameter gluing ------------------------------------------------------
  for (int i = 1; i < M && q > 0; ++i) {
    LocalMap lm;
    int pi = lm.range(inst_.seg[i].ip, q);
    int p0 = lm.range(inst_.seg[0].ip, q);
    auto eval = [pi, p0, q](const Vec& u) {
      return Vec(u.segment(pi, q) - u.segment(p0, q));
    };
    auto deriv = [pi, p0, q](const Vec& u) {
      Mat J = Mat::Zero(q, u.size());
      J.block(0, pi, q, q) = Mat::Identity(q, q);
      J.block(0, p0, q, q) = -Mat::Identity(q, q);
      return J;
    };
    prob_.add_phi("glue" + std::to_string(i), lm.Ku, Vec(), q, eval, deriv);
  }

  // --- algebraic links --------------------------------------------------------
  for (size_t li = 0; li < spec.algebraic.size(); ++li) {
    const auto& link = spec.algebraic[li];
    LocalMap lm;
    struct TermLoc {
      double coeff;
      int a = -1, b = -1;  // locals; -1 means constant one
    };
    std::vector<TermLoc> tls;
    for (const auto& t : link.terms) {
      TermLoc tl;
      tl.coeff = t.coeff;
      int ia = ref_uindex(t.a, inst_.seg);
      int ib = ref_uindex(t.b, inst_.seg);
      if (ia >= 0) tl.a = lm.scalar(ia);
      if (ib >= 0) tl.b = lm.scalar(ib);
      tls.push_back(tl);
    }
    double rhs = link.rhs;
    auto eval = [tls, rhs](const Vec& u) {
      double s = -rhs;
      for (const auto& t : tls) {
        double va = t.a >= 0 ? u[t.a] : 1.0;
        double vb = t.b >= 0 ? u[t.b] : 1.0;
        s += t.coeff * va * vb;
      }
      return Vec(Vec::Constant(1, s));
    };
    auto deriv = [tls](const Vec& u) {
      Mat J = Mat::Zero(1, u.size());
      for (const auto& t : tls) {
        double va = t.a >= 0 ? u[t.a] : 1.0;
        double vb = t.b >= 0 ? u[t.b] : 1.0;
        if (t.a >= 0) J(0, t.a) += t.coeff * vb;
        if (t.b >= 0) J(0, t.b) += t.coeff * va;
      }
      return J;
    };
    std::string nm = link.name.empty() ? ("link" + std::to_string(li)) : ("link." + link.name);
    prob_.add_phi(nm, lm.Ku, Vec(), 1, eval, deriv);
  }

  // --- monitors ---------------------------------------------------------------
  for (int j = 0; j < q; ++j) {
    int idx = inst_.seg[0].ip + j;
    prob_.add_psi("mon." + spec.p_labels[j], {idx}, Vec(), {spec.p_labels[j]},
                  [](const Vec& u) { return Vec(u); },
                  [](const Vec&) { return Mat(Mat::Identity(1, 1)); });
    MonitorInfo mi;
    mi.label = spec.p_labels[j];
    mi.fid = "mon." + spec.p_labels[j];
    inst_.monitors[mi.label] = mi;
    pending_monitor_adjoints_.push_back(mi.label);
  }
  if (spec.duration_monitors) {
    for (int i = 0; i < M; ++i) {
      for (auto [suffix, idx] :
           std::vector<std::pair<std::string, int>>{{".T0", inst_.seg[i].iT0},
                                                    {".T", inst_.seg[i].iT}}) {
        std::string lb = inst_.seg[i].name + suffix;
        prob_.add_psi("mon." + lb, {idx}, Vec(), {lb}, [](const Vec& u) { return Vec(u); },
                      [](const Vec&) { return Mat(Mat::Identity(1, 1)); });
        MonitorInfo mi;
        mi.label = lb;
        mi.fid = "mon." + lb;
        inst_.monitors[lb] = mi;  // observability only: no adjoint
      }
    }
  }

  if (inst_.with_adjoints) build_adjoints();
}

namespace {

// deduplicating column-reference plan for lambda blocks
struct ColPlan {
  std::vector<acp::ColumnRef> refs;
  std::map<std::string, int> base;
  int total = 0;
  int add(const std::string& name, int count = 1, Vec weights = Vec(), bool var = true) {
    auto it = base.find(name);
    if (it != base.end()) return it->second;
    base[name] = total;
    refs.push_back(acp::ColumnRef(name, count, std::move(weights), var));
    int at = total;
    total += count;
    return at;
  }
};

}  // namespace

void Builder::build_adjoints() {
  const DdeSpec& spec = inst_.spec;
  const int M = static_cast<int>(spec.segments.size());
  const int q = static_cast<int>(spec.p0.size());
  const int N = inst_.N, m = inst_.m;

  // --- per-segment multipliers ------------------------------------------------
  for (int i = 0; i < M; ++i) {
    auto& L = inst_.seg[i];
    const int n = L.n, ny = L.ny, nbp = L.n_bp, ncn = L.n_cn;
    auto disc = inst_.disc[i];
    Field fld = spec.segments[i].field;

    Vec wcn(ncn * n);
    for (int c = 0; c < ncn; ++c)
      for (int r = 0; r < n; ++r) wcn[c * n + r] = disc->mesh.w[c % m] / (2.0 * N);
    Vec wbp(nbp * n);
    for (int b = 0; b < nbp; ++b)
      for (int r = 0; r < n; ++r) wbp[b * n + r] = disc->bp_weights[b];

    ColPlan cp;
    int c_dxcn = cp.add(L.name + ".dxcn", ncn * n, wcn);
    int c_lcont = cp.add(L.name + ".lcont", (N - 1) * n, Vec::Zero((N - 1) * n), false);
    int c_dx0 = cp.add(L.name + ".dx0", n);
    int c_dx1 = cp.add(L.name + ".dx1", n);
    std::vector<int> c_dy(ny);
    for (int l = 0; l < ny; ++l) c_dy[l] = cp.add(L.name + ".dy" + std::to_string(l), nbp * n, wbp);
    int c_dT0 = cp.add(L.name + ".dT0");
    int c_dT = cp.add(L.name + ".dT");
    int c_dp = q > 0 ? cp.add(L.name + ".dp", q) : -1;

    std::vector<int> Ku;
    for (int k = 0; k < nbp * n * (1 + ny) + 2 + q; ++k) Ku.push_back(L.x0 + k);
    const int total_cols = cp.total;

    auto unpack_seg = [n, ny, q, nbp](const Vec& u, Vec& x, Vec& y, double& T0, double& T,
                                      Vec& p) {
      x = u.head(nbp * n);
      y = u.segment(nbp * n, nbp * n * ny);
      T0 = u[nbp * n * (1 + ny)];
      T = u[nbp * n * (1 + ny) + 1];
      p = u.tail(q);
    };

    auto apply = [disc, fld, unpack_seg, n, ny, q, nbp, ncn, N, total_cols, c_dxcn, c_lcont,
                  c_dx0, c_dx1, c_dy, c_dT0, c_dT, c_dp](const Vec& u, const Vec& lam) {
      Vec x, y, p;
      double T0, T;
      unpack_seg(u, x, y, T0, T, p);
      coll::AdjointBlockSet a =
          coll::ode_adjoint(*disc, x, y, T0, T, p, fld, lam, Vec::Zero(n), nullptr);
      Vec out = Vec::Zero(total_cols);
      out.segment(c_dxcn, ncn * n) = a.dx;
      out.segment(c_lcont, (N - 1) * n) = disc->Q * lam;
      out.segment(c_dx0, n) = a.dx0;
      out.segment(c_dx1, n) = a.dx1;
      for (int l = 0; l < ny; ++l)
        out.segment(c_dy[l], nbp * n) = a.dy.segment(l * nbp * n, nbp * n);
      out[c_dT0] = a.dT0;
      out[c_dT] = a.dT;
      if (q > 0) out.segment(c_dp, q) = a.dp;
      return out;
    };

    auto lam_eval = [disc, fld, unpack_seg, n, ny, q, nbp, ncn, N, m, total_cols, c_dxcn,
                     c_lcont, c_dx0, c_dx1, c_dy, c_dT0, c_dT, c_dp](const Vec& u) {
      Vec x, y, p;
      double T0, T;
      unpack_seg(u, x, y, T0, T, p);
      const auto& msh = disc->mesh;
      std::vector<Triplet> trips;
      Vec x_cn = disc->W * x;
      std::vector<Vec> y_cn(ny);
      for (int l = 0; l < ny; ++l) y_cn[l] = disc->W * y.segment(l * nbp * n, nbp * n);
      // quadrature accumulators for the scalar columns
      Mat acc = Mat::Zero(nbp * n, 2 + q);
      for (int a = 0; a < N; ++a) {
        for (int dd = 0; dd < m; ++dd) {
          int c = m * a + dd;
          double t = T0 + T * msh.tau_cn[c];
          Vec xc = x_cn.segment(c * n, n);
          Mat yc(n, ny);
          for (int l = 0; l < ny; ++l) yc.col(l) = y_cn[l].segment(c * n, n);
          Mat fx = fld.fx(t, xc, yc, p);
          Vec fv = fld.f(t, xc, yc, p);
          Vec ftv = fld.ft ? fld.ft(t, xc, yc, p) : Vec(Vec::Zero(n));
          Mat fp = q > 0 ? fld.fp(t, xc, yc, p) : Mat();
          double wq = msh.w[dd] / (2.0 * N);
          for (int bc = 0; bc <= m; ++bc) {
            double Lv = coll::lagrange_basis(m, bc, msh.z[dd]);
            double Lp = coll::lagrange_deriv(m, bc, msh.z[dd]);
            int b = (m + 1) * a + bc;
            for (int rr = 0; rr < n; ++rr) {
              // equation (c, rr): -lam'(tau_c) - T fx^T lam
              if (Lp != 0.0)
                trips.emplace_back(b * n + rr, c_dxcn + c * n + rr, -2.0 * N * Lp);
              if (Lv != 0.0)
                for (int ii = 0; ii < n; ++ii)
                  if (fx(ii, rr) != 0.0)
                    trips.emplace_back(b * n + ii, c_dxcn + c * n + rr, -T * Lv * fx(ii, rr));
            }
            if (Lv != 0.0) {
              for (int ii = 0; ii < n; ++ii) {
                acc(b * n + ii, 0) += -T * wq * Lv * ftv[ii];
                acc(b * n + ii, 1) += -wq * Lv * (fv[ii] + T * msh.tau_cn[c] * ftv[ii]);
                for (int k = 0; k < q; ++k) acc(b * n + ii, 2 + k) += -T * wq * Lv * fp(ii, k);
              }
            }
          }
        }
      }
      for (int k = 0; k < disc->Q.outerSize(); ++k)
        for (SpMat::InnerIterator it(disc->Q, k); it; ++it)
          trips.emplace_back(static_cast<int>(it.col()), c_lcont + static_cast<int>(it.row()),
                             it.value());
      for (int rr = 0; rr < n; ++rr) {
        trips.emplace_back(rr, c_dx0 + rr, -1.0);
        trips.emplace_back((nbp - 1) * n + rr, c_dx1 + rr, 1.0);
      }
      for (int l = 0; l < ny; ++l) {
        for (int b = 0; b < nbp; ++b) {
          double tb = T0 + T * msh.tau_bp[b];
          Vec xb = x.segment(b * n, n);
          Mat yb = coll::y_at(fld, y, n, b, nbp);
          Mat fyv = fld.fy(tb, xb, yb, p);
          for (int ii = 0; ii < n; ++ii)
            for (int rr = 0; rr < n; ++rr)
              if (fyv(ii, l * n + rr) != 0.0)
                trips.emplace_back(b * n + ii, c_dy[l] + b * n + rr, -T * fyv(ii, l * n + rr));
        }
      }
      for (int r = 0; r < nbp * n; ++r) {
        if (acc(r, 0) != 0.0) trips.emplace_back(r, c_dT0, acc(r, 0));
        if (acc(r, 1) != 0.0) trips.emplace_back(r, c_dT, acc(r, 1));
        for (int k = 0; k < q; ++k)
          if (acc(r, 2 + k) != 0.0) trips.emplace_back(r, c_dp + k, acc(r, 2 + k));
      }
      SpMat Lm(nbp * n, total_cols);
      Lm.setFromTriplets(trips.begin(), trips.end());
      return Lm;
    };

    prob_.add_lambda("adj." + L.name, Ku, Vec::Zero(nbp * n), cp.refs, lam_eval, apply);
    L.lam0 = prob_.data().blocks.back().lam_new0;
  }

  // --- boundary-condition multipliers ------------------------------------------
  for (int b = 0; b < n_bc_; ++b) {
    const auto& bc = spec.bcs[b];
    const auto& Li = inst_.seg[bc.segment];
    const int n = Li.n;
    LocalMap lm;
    std::vector<int> xj_loc;
    for (const auto& [j, B] : bc.terms)
      xj_loc.push_back(
          lm.range(inst_.seg[j].x0 + (inst_.seg[j].n_bp - 1) * inst_.seg[j].n, inst_.seg[j].n));
    int p_loc = q > 0 ? lm.range(Li.ip, q) : -1;
    ColPlan cp;
    int c_dx0 = cp.add(Li.name + ".dx0", n);
    std::vector<int> c_dx1;
    for (const auto& [j, B] : bc.terms)
      c_dx1.push_back(cp.add(inst_.seg[j].name + ".dx1", inst_.seg[j].n));
    int c_dp = q > 0 ? cp.add(Li.name + ".dp", q) : -1;
    auto terms = bc.terms;
    auto offset_dp = bc.offset_dp;
    const int total_cols = cp.total;
    auto lam_eval = [terms, offset_dp, n, q, xj_loc, p_loc, c_dx0, c_dx1, c_dp,
                     total_cols](const Vec& u) {
      Vec p = q > 0 ? Vec(u.segment(p_loc, q)) : Vec();
      std::vector<Triplet> trips;
      for (int r = 0; r < n; ++r) trips.emplace_back(r, c_dx0 + r, 1.0);
      Mat dpacc = Mat::Zero(n, q);
      for (size_t t = 0; t < terms.size(); ++t) {
        Mat B = terms[t].second(p);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < B.cols(); ++c)
            if (B(r, c) != 0.0) trips.emplace_back(r, c_dx1[t] + c, -B(r, c));
        for (int k = 0; k < q; ++k) {
          Mat dB = terms[t].second.deriv(p, k);
          if (dB.size() > 0) dpacc.col(k) -= dB * u.segment(xj_loc[t], B.cols());
        }
      }
      if (offset_dp) dpacc -= offset_dp(p);
      for (int r = 0; r < n; ++r)
        for (int k = 0; k < q; ++k)
          if (dpacc(r, k) != 0.0) trips.emplace_back(r, c_dp + k, dpacc(r, k));
      SpMat Lm(n, total_cols);
      Lm.setFromTriplets(trips.begin(), trips.end());
      return Lm;
    };
    prob_.add_lambda("adj.bc" + std::to_string(b), lm.Ku, Vec::Zero(n), cp.refs, lam_eval);
    inst_.seg[bc.segment].zeta0 = prob_.data().blocks.back().lam_new0;
  }

  // --- mesh, coupling and algebraic multipliers ---------------------------------
  for (int i = 0; i < M; ++i) {
    auto& L = inst_.seg[i];
    const Segment& sg = spec.segments[i];
    const int n = L.n, nbp = L.n_bp, ncn = L.n_cn;
    L.mu0.resize(L.ny, -1);
    L.col_dD.resize(L.ny);
    L.col_dg.resize(L.ny);
    for (int l = 0; l < L.ny; ++l) {
      const auto& blocks = sg.couplings[l];
      const int C = static_cast<int>(blocks.size());
      const std::string base = L.name + ".y" + std::to_string(l);

      // mesh multipliers eta_1..eta_{C+1}
      {
        ColPlan cp;
        int c_dg = cp.add(base + ".dg", 2 * C);
        const int total_cols = cp.total;
        auto lam_eval = [C, c_dg, total_cols](const Vec&) {
          std::vector<Triplet> trips;
          for (int k = 0; k < C; ++k) {
            trips.emplace_back(k, c_dg + 2 * k, 1.0);        // d gamma_b,k: +eta_k
            trips.emplace_back(k + 1, c_dg + 2 * k + 1, -1.0);  // d gamma_e,k: -eta_{k+1}
          }
          SpMat Lm(C + 1, total_cols);
          Lm.setFromTriplets(trips.begin(), trips.end());
          return Lm;
        };
        prob_.add_lambda("adj." + base + ".mesh", {}, Vec::Zero(C + 1), cp.refs, lam_eval);
      }

      // coupling multipliers mu_bp
      {
        CpPlan pl;
        LocalMap lm;
        for (int k = 0; k < C; ++k)
          pl.g.push_back({lm.scalar(L.igb[l][k]), lm.scalar(L.ige[l][k])});
        for (int k = 0; k < C; ++k) pl.d.push_back(lm.scalar(L.idlt[l][k]));
        pl.Ti = lm.scalar(L.iT);
        pl.q = q;
        pl.p0 = q > 0 ? lm.range(L.ip, q) : static_cast<int>(lm.Ku.size());
        std::vector<int> src_of_seg(M, -1);
        pl.summand_src.resize(C);
        for (int k = 0; k < C; ++k) {
          if (blocks[k].is_history()) {
            pl.Tj.push_back(-1);
            continue;
          }
          pl.Tj.push_back(lm.scalar(inst_.seg[blocks[k].target_duration].iT));
          for (const auto& s : blocks[k].summands) {
            if (src_of_seg[s.source] < 0) {
              src_of_seg[s.source] = static_cast<int>(pl.src_seg.size());
              pl.src_seg.push_back(s.source);
              pl.src_local.push_back(lm.range(inst_.seg[s.source].x0,
                                              inst_.seg[s.source].n_bp * inst_.seg[s.source].n));
            }
            pl.summand_src[k].push_back(src_of_seg[s.source]);
          }
        }
        for (int k = 0; k < C; ++k)
          for (int gi : {pl.g[k][0], pl.g[k][1]}) pl.fd_skip.push_back(gi);

        ColPlan cp;
        int c_dy = cp.add(base.substr(0, base.find(".y")) + ".dy" + std::to_string(l), nbp * n);
        // NOTE: name must match the segment block's dy range
        std::vector<int> c_dxcn(pl.src_seg.size());
        for (size_t s = 0; s < pl.src_seg.size(); ++s)
          c_dxcn[s] = cp.add(inst_.seg[pl.src_seg[s]].name + ".dxcn",
                             inst_.seg[pl.src_seg[s]].n_cn * inst_.seg[pl.src_seg[s]].n);
        int c_dT = cp.add(L.name + ".dT");
        std::vector<int> c_dTj(C, -1);
        for (int k = 0; k < C; ++k)
          if (!blocks[k].is_history())
            c_dTj[k] = cp.add(inst_.seg[blocks[k].target_duration].name + ".dT");
        int c_dD = cp.add(base + ".dD", C);
        int c_dp = q > 0 ? cp.add(L.name + ".dp", q) : -1;
        const int total_cols = cp.total;

        auto disc_own = inst_.disc[i];
        std::vector<std::shared_ptr<SegmentDisc>> disc_src;
        for (int sidx : pl.src_seg) disc_src.push_back(inst_.disc[sidx]);
        auto blocks_copy = blocks;

        // value of the contribution vector for given (u_sub, mu)
        auto apply = [pl, blocks_copy, disc_own, disc_src, n, nbp, ncn, N, m, c_dy, c_dxcn,
                      c_dT, c_dTj, c_dD, c_dp, total_cols](const Vec& u, const Vec& mu) {
          CpState st = cp_state(pl, u);
          const auto& msh = disc_own->mesh;
          Vec out = Vec::Zero(total_cols);
          out.segment(c_dy, nbp * n) = mu;
          Vec mu_cn = disc_own->W * mu;
          std::vector<int> cols;
          std::vector<double> vals;
          // target-node contributions, per source segment
          for (size_t s = 0; s < pl.src_seg.size(); ++s) {
            const auto& dsc = *disc_src[s];
            for (int k = 0; k < st.C; ++k) {
              const auto& blk = blocks_copy[k];
              if (blk.is_history()) continue;
              double Tj = st.Tj[k];
              double xib = (st.Ti / Tj) * (st.gb[k] - st.delta[k]);
              double xie = (st.Ti / Tj) * (st.ge[k] - st.delta[k]);
              for (size_t ss = 0; ss < blk.summands.size(); ++ss) {
                if (pl.summand_src[k][ss] != static_cast<int>(s)) continue;
                Mat A = blk.summands[ss].A(st.p);
                for (int c = 0; c < dsc.mesh.N * dsc.mesh.m; ++c) {
                  double tc = dsc.mesh.tau_cn[c];
                  if (tc < xib || tc >= xie) continue;
                  double arg = (Tj / st.Ti) * tc + st.delta[k];
                  interp_row(msh, arg, false, cols, vals);
                  Vec mut = Vec::Zero(n);
                  for (size_t cc = 0; cc < cols.size(); ++cc)
                    mut += vals[cc] * mu.segment(cols[cc] * n, n);
                  out.segment(c_dxcn[s] + c * dsc.n, dsc.n) -= (Tj / st.Ti) * (A.transpose() * mut);
                }
              }
            }
          }
          // quadrature contributions on the own nodes
          for (int c = 0; c < ncn; ++c) {
            double tau = msh.tau_cn[c];
            int k = index_of(tau, st.sigma) - 1;
            const auto& blk = blocks_copy[k];
            double wq = msh.w[c % m] / (2.0 * N);
            Vec muc = mu_cn.segment(c * n, n);
            if (blk.is_history()) {
              double s_arg = st.Ti * tau - st.delta[k];
              Vec gs = blk.history->gs(s_arg, st.p);
              out[c_dT] += -wq * tau * muc.dot(gs);
              out[c_dD + k] += wq * muc.dot(gs);
              if (blk.history->gp && pl.q > 0) {
                Mat gp = blk.history->gp(s_arg, st.p);
                out.segment(c_dp, pl.q) += -wq * (gp.transpose() * muc);
              }
              continue;
            }
            double Tj = st.Tj[k];
            double sh = (st.Ti / Tj) * (tau - st.delta[k]);
            for (size_t ss = 0; ss < blk.summands.size(); ++ss) {
              int sl = pl.summand_src[k][ss];
              SrcView sv{disc_src[sl].get(), u.data() + pl.src_local[sl], disc_src[sl]->n};
              Mat A = blk.summands[ss].A(st.p);
              Vec Axp = A * interp_state(sv, sh, true);
              double mAxp = muc.dot(Axp);
              out[c_dT] += -wq * (tau - st.delta[k]) / Tj * mAxp;
              out[c_dTj[k]] += wq * st.Ti / (Tj * Tj) * (tau - st.delta[k]) * mAxp;
              out[c_dD + k] += wq * (st.Ti / Tj) * mAxp;
              if (pl.q > 0) {
                Vec xv = interp_state(sv, sh, false);
                for (int kk = 0; kk < pl.q; ++kk) {
                  Mat dA = blk.summands[ss].A.deriv(st.p, kk);
                  if (dA.size() > 0) out[c_dp + kk] += -wq * muc.dot(dA * xv);
                }
              }
            }
          }
          return out;
        };

        auto lam_eval = [pl, blocks_copy, disc_own, disc_src, n, nbp, ncn, N, m, c_dy,
                         c_dxcn, c_dT, c_dTj, c_dD, c_dp, total_cols](const Vec& u) {
          CpState st = cp_state(pl, u);
          const auto& msh = disc_own->mesh;
          std::vector<Triplet> trips;
          std::vector<int> cols;
          std::vector<double> vals;
          for (int r = 0; r < nbp * n; ++r) trips.emplace_back(r, c_dy + r, 1.0);
          Mat acc = Mat::Zero(nbp * n, total_cols - c_dT);  // scalar columns from c_dT on
          for (size_t s = 0; s < pl.src_seg.size(); ++s) {
            const auto& dsc = *disc_src[s];
            for (int k = 0; k < st.C; ++k) {
              const auto& blk = blocks_copy[k];
              if (blk.is_history()) continue;
              double Tj = st.Tj[k];
              double xib = (st.Ti / Tj) * (st.gb[k] - st.delta[k]);
              double xie = (st.Ti / Tj) * (st.ge[k] - st.delta[k]);
              for (size_t ss = 0; ss < blk.summands.size(); ++ss) {
                if (pl.summand_src[k][ss] != static_cast<int>(s)) continue;
                Mat A = blk.summands[ss].A(st.p);
                for (int c = 0; c < dsc.mesh.N * dsc.mesh.m; ++c) {
                  double tc = dsc.mesh.tau_cn[c];
                  if (tc < xib || tc >= xie) continue;
                  double arg = (Tj / st.Ti) * tc + st.delta[k];
                  interp_row(msh, arg, false, cols, vals);
                  for (size_t cc = 0; cc < cols.size(); ++cc)
                    for (int ii = 0; ii < n; ++ii)
                      for (int rr = 0; rr < dsc.n; ++rr)
                        if (A(ii, rr) != 0.0)
                          trips.emplace_back(cols[cc] * n + ii, c_dxcn[s] + c * dsc.n + rr,
                                             -(Tj / st.Ti) * vals[cc] * A(ii, rr));
                }
              }
            }
          }
          for (int c = 0; c < ncn; ++c) {
            double tau = msh.tau_cn[c];
            int k = index_of(tau, st.sigma) - 1;
            const auto& blk = blocks_copy[k];
            double wq = msh.w[c % m] / (2.0 * N);
            interp_row(msh, tau, false, cols, vals);  // mu(tau_c) from mu_bp
            auto add_mu_weighted = [&](int col, const Vec& vec_n) {
              for (size_t cc = 0; cc < cols.size(); ++cc)
                for (int ii = 0; ii < n; ++ii)
                  if (vec_n[ii] != 0.0) acc(cols[cc] * n + ii, col - c_dT) += vals[cc] * vec_n[ii];
            };
            if (blk.is_history()) {
              double s_arg = st.Ti * tau - st.delta[k];
              Vec gs = blk.history->gs(s_arg, st.p);
              add_mu_weighted(c_dT, Vec(-wq * tau * gs));
              add_mu_weighted(c_dD + k, Vec(wq * gs));
              if (blk.history->gp && pl.q > 0) {
                Mat gp = blk.history->gp(s_arg, st.p);
                for (int kk = 0; kk < pl.q; ++kk) add_mu_weighted(c_dp + kk, Vec(-wq * gp.col(kk)));
              }
              continue;
            }
            double Tj = st.Tj[k];
            double sh = (st.Ti / Tj) * (tau - st.delta[k]);
            for (size_t ss = 0; ss < blk.summands.size(); ++ss) {
              int sl = pl.summand_src[k][ss];
              SrcView sv{disc_src[sl].get(), u.data() + pl.src_local[sl], disc_src[sl]->n};
              Mat A = blk.summands[ss].A(st.p);
              Vec Axp = A * interp_state(sv, sh, true);
              add_mu_weighted(c_dT, Vec(-wq * (tau - st.delta[k]) / Tj * Axp));
              add_mu_weighted(c_dTj[k], Vec(wq * st.Ti / (Tj * Tj) * (tau - st.delta[k]) * Axp));
              add_mu_weighted(c_dD + k, Vec(wq * (st.Ti / Tj) * Axp));
              if (pl.q > 0) {
                Vec xv = interp_state(sv, sh, false);
                for (int kk = 0; kk < pl.q; ++kk) {
                  Mat dA = blk.summands[ss].A.deriv(st.p, kk);
                  if (dA.size() > 0) add_mu_weighted(c_dp + kk, Vec(-wq * (dA * xv)));
                }
              }
            }
          }
          for (int r = 0; r < nbp * n; ++r)
            for (int c = 0; c < acc.cols(); ++c)
              if (acc(r, c) != 0.0) trips.emplace_back(r, c_dT + c, acc(r, c));
          SpMat Lm(nbp * n, total_cols);
          Lm.setFromTriplets(trips.begin(), trips.end());
          return Lm;
        };

        prob_.add_lambda("adj." + base + ".cp", lm.Ku, Vec::Zero(nbp * n), cp.refs, lam_eval,
                         apply, nullptr, pl.fd_skip);
        L.mu0[l] = prob_.data().blocks.back().lam_new0;
      }

      // algebraic-condition multipliers chi
      {
        struct XiRow {
          int k;
          bool is_e;
        };
        std::vector<XiRow> xirows;
        for (int k = 0; k + 1 < C; ++k)
          if (!blocks[k].is_history()) xirows.push_back({k, true});
        for (int k = 1; k < C; ++k)
          if (!blocks[k].is_history()) xirows.push_back({k, false});
        if (!xirows.empty()) {
          LocalMap lx;
          int Ti_loc = lx.scalar(L.iT);
          std::vector<int> Tj_loc(C, -1), g_loc(2 * C, -1), d_loc(C, -1);
          for (const auto& xr : xirows) {
            int k = xr.k;
            if (Tj_loc[k] < 0) Tj_loc[k] = lx.scalar(inst_.seg[blocks[k].target_duration].iT);
            if (d_loc[k] < 0) d_loc[k] = lx.scalar(L.idlt[l][k]);
            int gi = xr.is_e ? 2 * k + 1 : 2 * k;
            if (g_loc[gi] < 0)
              g_loc[gi] = lx.scalar(xr.is_e ? L.ige[l][k] : L.igb[l][k]);
          }
          ColPlan cp;
          int c_dT = cp.add(L.name + ".dT");
          std::vector<int> c_dTj(C, -1);
          for (const auto& xr : xirows)
            if (c_dTj[xr.k] < 0)
              c_dTj[xr.k] = cp.add(inst_.seg[blocks[xr.k].target_duration].name + ".dT");
          int c_dg = cp.add(base + ".dg", 2 * C);
          int c_dD = cp.add(base + ".dD", C);
          const int total_cols = cp.total;
          auto lam_eval = [xirows, Ti_loc, Tj_loc, g_loc, d_loc, c_dT, c_dTj, c_dg, c_dD,
                           total_cols](const Vec& u) {
            std::vector<Triplet> trips;
            for (size_t rr = 0; rr < xirows.size(); ++rr) {
              int k = xirows[rr].k;
              int gi = xirows[rr].is_e ? 2 * k + 1 : 2 * k;
              double Ti = u[Ti_loc], Tj = u[Tj_loc[k]], g = u[g_loc[gi]], dk = u[d_loc[k]];
              int r = static_cast<int>(rr);
              trips.emplace_back(r, c_dT, (g - dk) / Tj);
              trips.emplace_back(r, c_dTj[k], -Ti * (g - dk) / (Tj * Tj));
              trips.emplace_back(r, c_dg + gi, Ti / Tj);
              trips.emplace_back(r, c_dD + k, -Ti / Tj);
            }
            SpMat Lm(static_cast<int>(xirows.size()), total_cols);
            Lm.setFromTriplets(trips.begin(), trips.end());
            return Lm;
          };
          prob_.add_lambda("adj." + base + ".xi", lx.Ku,
                           Vec::Zero(static_cast<int>(xirows.size())), cp.refs, lam_eval);
        }
      }
    }
  }

  // --- gluing multipliers -------------------------------------------------------
  for (int i = 1; i < M && q > 0; ++i) {
    ColPlan cp;
    int c_pi = cp.add(inst_.seg[i].name + ".dp", q);
    int c_p0 = cp.add(inst_.seg[0].name + ".dp", q);
    const int total_cols = cp.total;
    auto lam_eval = [q, c_pi, c_p0, total_cols](const Vec&) {
      std::vector<Triplet> trips;
      for (int k = 0; k < q; ++k) {
        trips.emplace_back(k, c_pi + k, 1.0);
        trips.emplace_back(k, c_p0 + k, -1.0);
      }
      SpMat Lm(q, total_cols);
      Lm.setFromTriplets(trips.begin(), trips.end());
      return Lm;
    };
    prob_.add_lambda("adj.glue" + std::to_string(i), {}, Vec::Zero(q), cp.refs, lam_eval);
  }

  // --- link multipliers -----------------------------------------------------------
  for (size_t li = 0; li < spec.algebraic.size(); ++li) {
    const auto& link = spec.algebraic[li];
    LocalMap lm;
    ColPlan cp;
    struct TermPlan {
      double coeff;
      int a_loc = -1, b_loc = -1;
      int a_col = -1, b_col = -1;
    };
    std::vector<TermPlan> tps;
    for (const auto& t : link.terms) {
      TermPlan tp;
      tp.coeff = t.coeff;
      int ia = ref_uindex(t.a, inst_.seg);
      int ib = ref_uindex(t.b, inst_.seg);
      if (ia >= 0) {
        tp.a_loc = lm.scalar(ia);
        int off = 0;
        std::string nm = adj_col_name(t.a, inst_.seg, off);
        auto range = prob_.column(nm);
        tp.a_col = cp.add(nm, range.count) + off;
      }
      if (ib >= 0) {
        tp.b_loc = lm.scalar(ib);
        int off = 0;
        std::string nm = adj_col_name(t.b, inst_.seg, off);
        auto range = prob_.column(nm);
        tp.b_col = cp.add(nm, range.count) + off;
      }
      tps.push_back(tp);
    }
    const int total_cols = cp.total;
    auto lam_eval = [tps, total_cols](const Vec& u) {
      std::vector<Triplet> trips;
      for (const auto& t : tps) {
        double va = t.a_loc >= 0 ? u[t.a_loc] : 1.0;
        double vb = t.b_loc >= 0 ? u[t.b_loc] : 1.0;
        if (t.a_col >= 0 && t.coeff * vb != 0.0) trips.emplace_back(0, t.a_col, t.coeff * vb);
        if (t.b_col >= 0 && t.coeff * va != 0.0) trips.emplace_back(0, t.b_col, t.coeff * va);
      }
      SpMat Lm(1, total_cols);
      Lm.setFromTriplets(trips.begin(), trips.end());
      return Lm;
    };
    std::string nm = link.name.empty() ? ("link" + std::to_string(li)) : ("link." + link.name);
    prob_.add_lambda("adj." + nm, lm.Ku, Vec::Zero(1), cp.refs, lam_eval);
  }

  // --- parameter-monitor multipliers ------------------------------------------------
  for (int j = 0; j < q; ++j) {
    const std::string& lb = spec.p_labels[j];
    ColPlan cp;
    int c_dp = cp.add(inst_.seg[0].name + ".dp", q);
    const int total_cols = cp.total;
    int jj = j;
    auto lam_eval = [jj, c_dp, total_cols](const Vec&) {
      SpMat Lm(1, total_cols);
      Lm.insert(0, c_dp + jj) = 1.0;
      return Lm;
    };
    std::string fid = "adj.mon." + lb;
    prob_.add_lambda(fid, {}, Vec::Zero(1), cp.refs, lam_eval);
    inst_.monitors[lb].adj_fid = fid;
    inst_.monitors[lb].mult_index = prob_.data().blocks.back().lam_new0;
  }
  pending_monitor_adjoints_.clear();
}

// ---------------------------------------------------------------------------
// extra monitors

std::string Builder::add_endpoint_monitor(int seg, int comp, int end, const std::string& label) {
  const auto& L = inst_.seg[seg];
  int idx = L.x0 + (end ? (L.n_bp - 1) * L.n : 0) + comp;
  prob_.add_psi("mon." + label, {idx}, Vec(), {label}, [](const Vec& u) { return Vec(u); },
                [](const Vec&) { return Mat(Mat::Identity(1, 1)); });
  MonitorInfo mi;
  mi.label = label;
  mi.fid = "mon." + label;
  if (inst_.with_adjoints) {
    ColPlan cp;
    int c = cp.add(L.name + (end ? ".dx1" : ".dx0"), L.n);
    const int total_cols = cp.total;
    int cc = c + comp;
    auto lam_eval = [cc, total_cols](const Vec&) {
      SpMat Lm(1, total_cols);
      Lm.insert(0, cc) = 1.0;
      return Lm;
    };
    mi.adj_fid = "adj.mon." + label;
    prob_.add_lambda(mi.adj_fid, {}, Vec::Zero(1), cp.refs, lam_eval);
    mi.mult_index = prob_.data().blocks.back().lam_new0;
  }
  inst_.monitors[label] = mi;
  return mi.fid;
}

std::string Builder::add_point_monitor(int seg, int comp, double tau0, bool unknown_tau,
                                       const std::string& label) {
  const auto& L = inst_.seg[seg];
  if (comp < 0 || comp >= L.n) throw std::out_of_range("point monitor component out of range");
  std::vector<int> Ku(L.n_bp * L.n);
  for (int k = 0; k < L.n_bp * L.n; ++k) Ku[k] = L.x0 + k;
  auto disc = inst_.disc[seg];
  const int n = L.n, nbpn = L.n_bp * L.n;
  Vec new_u0 = unknown_tau ? Vec(Vec::Constant(1, tau0)) : Vec();
  auto eval = [disc, n, comp, tau0, unknown_tau, nbpn](const Vec& u) {
    double tau = unknown_tau ? u[nbpn] : tau0;
    std::vector<int> cols;
    std::vector<double> vals;
    interp_row(disc->mesh, tau, false, cols, vals);
    double v = 0.0;
    for (size_t k = 0; k < cols.size(); ++k) v += vals[k] * u[cols[k] * n + comp];
    return Vec(Vec::Constant(1, v));
  };
  auto deriv = [disc, n, comp, tau0, unknown_tau, nbpn](const Vec& u) {
    double tau = unknown_tau ? u[nbpn] : tau0;
    Mat J = Mat::Zero(1, u.size());
    std::vector<int> cols;
    std::vector<double> vals;
    interp_row(disc->mesh, tau, false, cols, vals);
    for (size_t k = 0; k < cols.size(); ++k) J(0, cols[k] * n + comp) = vals[k];
    if (unknown_tau) {
      interp_row(disc->mesh, tau, true, cols, vals);
      double vp = 0.0;
      for (size_t k = 0; k < cols.size(); ++k) vp += vals[k] * u[cols[k] * n + comp];
      J(0, nbpn) = vp;
    }
    return J;
  };
  prob_.add_psi("mon." + label, Ku, new_u0, {label}, eval, deriv);
  MonitorInfo mi;
  mi.label = label;
  mi.fid = "mon." + label;
  inst_.monitors[label] = mi;  // interior point values carry no adjoint block
  return mi.fid;
}

std::string Builder::add_integral_monitor(int seg, const Integrand& g, const std::string& label,
                                          bool adjoint) {
  const auto& L = inst_.seg[seg];
  const int n = L.n, ny = L.ny, q = L.q, nbp = L.n_bp, ncn = L.n_cn;
  auto disc = inst_.disc[seg];
  const int N = inst_.N, m = inst_.m;
  std::vector<int> Ku(nbp * n * (1 + ny) + 2 + q);
  for (size_t k = 0; k < Ku.size(); ++k) Ku[k] = L.x0 + static_cast<int>(k);

  auto states = [disc, n, ny, q, nbp, ncn](const Vec& u, Vec& x_cn, std::vector<Vec>& y_cn,
                                           double& T0, double& T, Vec& p) {
    Vec x = u.head(nbp * n);
    x_cn = disc->W * x;
    y_cn.resize(ny);
    for (int l = 0; l < ny; ++l)
      y_cn[l] = disc->W * u.segment(nbp * n * (1 + l), nbp * n);
    T0 = u[nbp * n * (1 + ny)];
    T = u[nbp * n * (1 + ny) + 1];
    p = u.tail(q);
  };
  auto gg = g;
  auto eval = [states, gg, disc, n, ny, ncn, N, m](const Vec& u) {
    Vec x_cn, p;
    std::vector<Vec> y_cn;
    double T0, T;
    states(u, x_cn, y_cn, T0, T, p);
    double s = 0.0;
    for (int c = 0; c < ncn; ++c) {
      Mat yc(n, ny);
      for (int l = 0; l < ny; ++l) yc.col(l) = y_cn[l].segment(c * n, n);
      s += disc->mesh.w[c % m] / (2.0 * N) *
           gg.g(T0 + T * disc->mesh.tau_cn[c], x_cn.segment(c * n, n), yc, p);
    }
    return Vec(Vec::Constant(1, T * s));
  };
  auto deriv = [states, gg, disc, n, ny, ncn, N, m, nbp, q](const Vec& u) {
    Vec x_cn, p;
    std::vector<Vec> y_cn;
    double T0, T;
    states(u, x_cn, y_cn, T0, T, p);
    Mat J = Mat::Zero(1, u.size());
    double quad_g = 0.0;
    for (int c = 0; c < ncn; ++c) {
      double wq = disc->mesh.w[c % m] / (2.0 * N);
      double tau = disc->mesh.tau_cn[c];
      double t = T0 + T * tau;
      Vec xc = x_cn.segment(c * n, n);
      Mat yc(n, ny);
      for (int l = 0; l < ny; ++l) yc.col(l) = y_cn[l].segment(c * n, n);
      double gv = gg.g(t, xc, yc, p);
      quad_g += wq * gv;
      Vec gx = gg.gx(t, xc, yc, p);
      Mat gy = ny > 0 ? gg.gy(t, xc, yc, p) : Mat();
      double gt = gg.gt ? gg.gt(t, xc, yc, p) : 0.0;
      Vec gp = (q > 0 && gg.gp) ? gg.gp(t, xc, yc, p) : Vec(Vec::Zero(q));
      int a = c / m, dd = c % m;
      for (int bc = 0; bc <= m; ++bc) {
        double Lv = coll::lagrange_basis(m, bc, disc->mesh.z[dd]);
        if (Lv == 0.0) continue;
        int col0 = ((m + 1) * a + bc) * n;
        for (int rr = 0; rr < n; ++rr) {
          J(0, col0 + rr) += T * wq * Lv * gx[rr];
          for (int l = 0; l < ny; ++l)
            J(0, nbp * n * (1 + l) + col0 + rr) += T * wq * Lv * gy(rr, l);
        }
      }
      J(0, nbp * n * (1 + ny)) += T * wq * gt;               // T0
      J(0, nbp * n * (1 + ny) + 1) += T * wq * tau * gt;     // T via t = T0 + T tau
      for (int k = 0; k < q; ++k) J(0, nbp * n * (1 + ny) + 2 + k) += T * wq * gp[k];
    }
    J(0, nbp * n * (1 + ny) + 1) += quad_g;  // d/dT of the leading factor T
    return J;
  };
  prob_.add_psi("mon." + label, Ku, Vec(), {label}, eval, deriv);

  MonitorInfo mi;
  mi.label = label;
  mi.fid = "mon." + label;
  if (inst_.with_adjoints && adjoint) {
    Vec wcn(ncn * n);
    for (int c = 0; c < ncn; ++c)
      for (int r = 0; r < n; ++r) wcn[c * n + r] = disc->mesh.w[c % m] / (2.0 * N);
    ColPlan cp;
    int c_dxcn = cp.add(L.name + ".dxcn", ncn * n, wcn);
    std::vector<int> c_dy(ny);
    for (int l = 0; l < ny; ++l) c_dy[l] = cp.add(L.name + ".dy" + std::to_string(l), nbp * n);
    int c_dT0 = cp.add(L.name + ".dT0");
    int c_dT = cp.add(L.name + ".dT");
    int c_dp = q > 0 ? cp.add(L.name + ".dp", q) : -1;
    const int total_cols = cp.total;
    auto lam_eval = [states, gg, disc, n, ny, ncn, nbp, q, N, m, c_dxcn, c_dy, c_dT0, c_dT,
                     c_dp, total_cols](const Vec& u) {
      Vec x_cn, p;
      std::vector<Vec> y_cn;
      double T0, T;
      states(u, x_cn, y_cn, T0, T, p);
      std::vector<Triplet> trips;
      double acc_T0 = 0.0, acc_T = 0.0;
      Vec acc_p = Vec::Zero(q);
      for (int c = 0; c < ncn; ++c) {
        double wq = disc->mesh.w[c % m] / (2.0 * N);
        double tau = disc->mesh.tau_cn[c];
        double t = T0 + T * tau;
        Vec xc = x_cn.segment(c * n, n);
        Mat yc(n, ny);
        for (int l = 0; l < ny; ++l) yc.col(l) = y_cn[l].segment(c * n, n);
        // pointwise coefficient of delta x at the nodes: T * g_x
        Vec gx = gg.gx(t, xc, yc, p);
        for (int rr = 0; rr < n; ++rr)
          if (gx[rr] != 0.0) trips.emplace_back(0, c_dxcn + c * n + rr, T * gx[rr]);
        double gt = gg.gt ? gg.gt(t, xc, yc, p) : 0.0;
        acc_T0 += T * wq * gt;
        acc_T += wq * (gg.g(t, xc, yc, p) + T * tau * gt);
        if (q > 0 && gg.gp) acc_p += T * wq * gg.gp(t, xc, yc, p);
      }
      // pointwise coefficient of delta y at the base points: T * g_y
      Vec x = u.head(nbp * n);
      for (int l = 0; l < ny; ++l) {
        for (int b = 0; b < nbp; ++b) {
          double tb = T0 + T * disc->mesh.tau_bp[b];
          Vec xb = x.segment(b * n, n);
          Mat yb(n, ny);
          for (int ll = 0; ll < ny; ++ll)
            yb.col(ll) = u.segment(nbp * n * (1 + ll) + b * n, n);
          Mat gy = gg.gy(tb, xb, yb, p);
          for (int rr = 0; rr < n; ++rr)
            if (gy(rr, l) != 0.0) trips.emplace_back(0, c_dy[l] + b * n + rr, T * gy(rr, l));
        }
      }
      if (acc_T0 != 0.0) trips.emplace_back(0, c_dT0, acc_T0);
      trips.emplace_back(0, c_dT, acc_T);
      for (int k = 0; k < q; ++k)
        if (acc_p[k] != 0.0) trips.emplace_back(0, c_dp + k, acc_p[k]);
      SpMat Lm(1, total_cols);
      Lm.setFromTriplets(trips.begin(), trips.end());
      return Lm;
    };
    mi.adj_fid = "adj.mon." + label;
    prob_.add_lambda(mi.adj_fid, Ku, Vec::Zero(1), cp.refs, lam_eval);
    mi.mult_index = prob_.data().blocks.back().lam_new0;
  }
  {
    auto disc2 = disc;
    auto gg2 = g;
    int x0 = L.x0;
    mi.psi_bp = [disc2, gg2, x0, n, ny, q, nbp](const Vec& ufull) {
      double T0 = ufull[x0 + nbp * n * (1 + ny)];
      double T = ufull[x0 + nbp * n * (1 + ny) + 1];
      Vec p = ufull.segment(x0 + nbp * n * (1 + ny) + 2, q);
      double s = 0.0;
      for (int b = 0; b < nbp; ++b) {
        double tb = T0 + T * disc2->mesh.tau_bp[b];
        Vec xb = ufull.segment(x0 + b * n, n);
        Mat yb(n, ny);
        for (int l = 0; l < ny; ++l)
          yb.col(l) = ufull.segment(x0 + nbp * n * (1 + l) + b * n, n);
        s += disc2->bp_weights[b] * gg2.g(tb, xb, yb, p);
      }
      return T * s;
    };
  }
  inst_.monitors[label] = mi;
  return mi.fid;
}

std::string Builder::add_endpoint_fn_monitor(const std::string& label,
                                             std::function<double(const Vec&)> fn,
                                             std::function<Vec(const Vec&)> grad) {
  const int M = static_cast<int>(inst_.seg.size());
  std::vector<int> Ku;
  int total = 0;
  for (int i = 0; i < M; ++i) {
    const auto& L = inst_.seg[i];
    for (int k = 0; k < L.n; ++k) Ku.push_back(L.x0 + k);
    for (int k = 0; k < L.n; ++k) Ku.push_back(L.x0 + (L.n_bp - 1) * L.n + k);
    total += 2 * L.n;
  }
  auto eval = [fn](const Vec& u) { return Vec(Vec::Constant(1, fn(u))); };
  auto deriv = [grad](const Vec& u) {
    Vec g = grad(u);
    Mat J(1, u.size());
    J.row(0) = g.transpose();
    return J;
  };
  prob_.add_psi("mon." + label, Ku, Vec(), {label}, eval, deriv);
  MonitorInfo mi;
  mi.label = label;
  mi.fid = "mon." + label;
  if (inst_.with_adjoints) {
    ColPlan cp;
    std::vector<std::pair<int, int>> spans;  // (col base, n) per segment end
    for (int i = 0; i < M; ++i) {
      spans.emplace_back(cp.add(inst_.seg[i].name + ".dx0", inst_.seg[i].n), inst_.seg[i].n);
      spans.emplace_back(cp.add(inst_.seg[i].name + ".dx1", inst_.seg[i].n), inst_.seg[i].n);
    }
    const int total_cols = cp.total;
    auto lam_eval = [grad, spans, total_cols](const Vec& u) {
      Vec g = grad(u);
      SpMat Lm(1, total_cols);
      std::vector<Triplet> trips;
      int at = 0;
      for (const auto& [base, nn] : spans) {
        for (int k = 0; k < nn; ++k)
          if (g[at + k] != 0.0) trips.emplace_back(0, base + k, g[at + k]);
        at += nn;
      }
      Lm.setFromTriplets(trips.begin(), trips.end());
      return Lm;
    };
    mi.adj_fid = "adj.mon." + label;
    prob_.add_lambda(mi.adj_fid, Ku, Vec::Zero(1), cp.refs, lam_eval);
    mi.mult_index = prob_.data().blocks.back().lam_new0;
  }
  inst_.monitors[label] = mi;
  return mi.fid;
}

std::string Builder::add_multiplier_monitor(const std::string& monitor_label,
                                            const std::string& nu_label) {
  auto it = inst_.monitors.find(monitor_label);
  if (it == inst_.monitors.end() || it->second.mult_index < 0)
    throw std::invalid_argument("monitor has no multiplier: " + monitor_label);
  int idx = it->second.mult_index;
  return prob_.add_theta(
      "cmon." + nu_label, {}, {idx}, {}, Vec(), {nu_label},
      [](const Vec&, const Vec& lam, const Vec&) { return Vec(lam); },
      [](const Vec&, const Vec&, const Vec&) { return Mat(Mat::Identity(1, 1)); });
}

std::string Builder::add_custom_end_phi(const std::string& fid, int seg, int rows,
                                        std::function<Vec(const Vec&, const Vec&, const Vec&)> f,
                                        std::function<Mat(const Vec&, const Vec&, const Vec&)> df) {
  const auto& L = inst_.seg[seg];
  const int n = L.n, q = L.q;
  LocalMap lm;
  int x0_loc = lm.range(L.x0, n);
  int x1_loc = lm.range(L.x0 + (L.n_bp - 1) * n, n);
  int p_loc = q > 0 ? lm.range(L.ip, q) : -1;
  auto eval = [f, x0_loc, x1_loc, p_loc, n, q](const Vec& u) {
    return f(u.segment(x0_loc, n), u.segment(x1_loc, n),
             q > 0 ? Vec(u.segment(p_loc, q)) : Vec());
  };
  auto deriv = [df, x0_loc, x1_loc, p_loc, n, q](const Vec& u) {
    return df(u.segment(x0_loc, n), u.segment(x1_loc, n),
              q > 0 ? Vec(u.segment(p_loc, q)) : Vec());
  };
  return prob_.add_phi(fid, lm.Ku, Vec(), rows, eval, deriv);
}

Instance Builder::close() {
  inst_.handle = prob_.close();
  if (inst_.with_adjoints) {
    for (auto& L : inst_.seg) {
      L.col_dxcn = inst_.handle.column(L.name + ".dxcn").start;
      L.col_lcont = inst_.handle.column(L.name + ".lcont").start;
      L.col_dx0 = inst_.handle.column(L.name + ".dx0").start;
      L.col_dx1 = inst_.handle.column(L.name + ".dx1").start;
      for (int l = 0; l < L.ny; ++l)
        L.col_dy.push_back(inst_.handle.column(L.name + ".dy" + std::to_string(l)).start);
      L.col_dT0 = inst_.handle.column(L.name + ".dT0").start;
      L.col_dT = inst_.handle.column(L.name + ".dT").start;
      if (L.q > 0) L.col_dp = inst_.handle.column(L.name + ".dp").start;
      for (int l = 0; l < L.ny; ++l) {
        const std::string base = L.name + ".y" + std::to_string(l);
        int C = static_cast<int>(inst_.spec.segments[&L - inst_.seg.data()].couplings[l].size());
        auto rD = inst_.handle.column(base + ".dD");
        auto rg = inst_.handle.column(base + ".dg");
        std::vector<int> dD(C);
        std::vector<std::array<int, 2>> dg(C);
        for (int k = 0; k < C; ++k) {
          dD[k] = rD.start + k;
          dg[k] = {rg.start + 2 * k, rg.start + 2 * k + 1};
        }
        L.col_dD[l] = dD;
        L.col_dg[l] = dg;
      }
    }
  }
  return inst_;
}

// ---------------------------------------------------------------------------
// discretized Lagrangian diagnostics

namespace {

double dot_over(const Vec& a, const Vec& b) { return a.dot(b); }

}  // namespace

double lagrangian(const Instance& inst, const acp::Point& pt, const VarGroup& g) {
  const auto& spec = inst.spec;
  const int M = static_cast<int>(spec.segments.size());
  const int N = inst.N, m = inst.m;
  const int q = static_cast<int>(spec.p0.size());
  const Vec& u = pt.u;
  const Vec& lam = pt.lam;
  double L = 0.0;

  auto seg_x = [&](int i) { return Vec(u.segment(inst.seg[i].x0, inst.seg[i].n_bp * inst.seg[i].n)); };
  auto seg_y = [&](int i) {
    return Vec(u.segment(inst.seg[i].y0.empty() ? inst.seg[i].x0 : inst.seg[i].y0[0],
                         inst.seg[i].n_bp * inst.seg[i].n * inst.seg[i].ny));
  };
  auto seg_p = [&](int i) { return Vec(u.segment(inst.seg[i].ip, q)); };

  // ODE terms
  for (int i = 0; i < M; ++i) {
    const auto& Ls = inst.seg[i];
    const Field& fld = spec.segments[i].field;
    const auto& disc = *inst.disc[i];
    Vec x = seg_x(i), y = Ls.ny ? seg_y(i) : Vec(Vec::Zero(0));
    double T0 = u[Ls.iT0], T = u[Ls.iT];
    Vec p = seg_p(i);
    Vec lam_bp = lam.segment(Ls.lam0, Ls.n_bp * Ls.n);
    bool bp_mode = (g.kind == VarGroup::Y && g.seg == i);
    if (bp_mode) {
      for (int b = 0; b < Ls.n_bp; ++b) {
        double tb = T0 + T * disc.mesh.tau_bp[b];
        Mat yb = coll::y_at(fld, y, Ls.n, b, Ls.n_bp);
        Vec fv = fld.f(tb, x.segment(b * Ls.n, Ls.n), yb, p);
        L += disc.bp_weights[b] * lam_bp.segment(b * Ls.n, Ls.n).dot(-T * fv);
      }
    } else {
      Vec r = coll::ode_residual(disc, x, y, T0, T, p, fld);
      Vec lam_cn = disc.W * lam_bp;
      for (int c = 0; c < Ls.n_cn; ++c)
        L += disc.mesh.w[c % m] / (2.0 * N) *
             lam_cn.segment(c * Ls.n, Ls.n).dot(r.segment(c * Ls.n, Ls.n));
    }
  }

  // boundary conditions
  for (size_t b = 0; b < spec.bcs.size(); ++b) {
    const auto& bc = spec.bcs[b];
    const auto& Li = inst.seg[bc.segment];
    if (Li.zeta0 < 0) continue;
    // zeta rows are stacked per bc in declaration order
    int z0 = inst.handle.block("adj.bc" + std::to_string(b)).lam_new0;
    Vec zeta = lam.segment(z0, Li.n);
    Vec p = seg_p(bc.segment);
    Vec r = u.segment(Li.x0, Li.n);
    for (const auto& [j, B] : bc.terms)
      r -= B(p) * u.segment(inst.seg[j].x0 + (inst.seg[j].n_bp - 1) * inst.seg[j].n,
                            inst.seg[j].n);
    if (bc.offset) r -= bc.offset(p);
    L += zeta.dot(r);
  }

  // coupling terms
  for (int i = 0; i < M; ++i) {
    const auto& Ls = inst.seg[i];
    const auto& disc = *inst.disc[i];
    for (int l = 0; l < Ls.ny; ++l) {
      const auto& blocks = spec.segments[i].couplings[l];
      const int C = static_cast<int>(blocks.size());
      Vec mu = lam.segment(Ls.mu0[l], Ls.n_bp * Ls.n);
      Vec ycol = u.segment(Ls.y0[l], Ls.n_bp * Ls.n);
      Vec p = seg_p(i);
      double Ti = u[Ls.iT];
      Vec sigma(C + 1);
      sigma[0] = 0.0;
      for (int k = 1; k < C; ++k) sigma[k] = u[Ls.igb[l][k]];
      sigma[C] = 1.0;
      if (g.kind == VarGroup::Y && g.seg == i && g.col == l) {
        for (int b = 0; b < Ls.n_bp; ++b)
          L += disc.bp_weights[b] * mu.segment(b * Ls.n, Ls.n).dot(ycol.segment(b * Ls.n, Ls.n));
        continue;
      }
      if (g.kind == VarGroup::X) {
        // source-node parameterization for the summands drawing on g.seg
        Vec mu_own_bp = mu;
        for (int k = 0; k < C; ++k) {
          if (blocks[k].is_history()) continue;
          double Tj = u[inst.seg[blocks[k].target_duration].iT];
          double dk = u[Ls.idlt[l][k]];
          double xib = (Ti / Tj) * (u[Ls.igb[l][k]] - dk);
          double xie = (Ti / Tj) * (u[Ls.ige[l][k]] - dk);
          for (const auto& s : blocks[k].summands) {
            if (s.source != g.seg) continue;
            const auto& dsrc = *inst.disc[s.source];
            Vec xs = seg_x(s.source);
            Mat A = s.A(p);
            for (int c = 0; c < dsrc.mesh.N * dsrc.mesh.m; ++c) {
              double tc = dsrc.mesh.tau_cn[c];
              if (tc < xib || tc >= xie) continue;
              double arg = (Tj / Ti) * tc + dk;
              std::vector<int> cols;
              std::vector<double> vals;
              interp_row(disc.mesh, arg, false, cols, vals);
              Vec mut = Vec::Zero(Ls.n);
              for (size_t cc = 0; cc < cols.size(); ++cc)
                mut += vals[cc] * mu_own_bp.segment(cols[cc] * Ls.n, Ls.n);
              Vec xv = Vec::Zero(dsrc.n);
              std::vector<int> c2;
              std::vector<double> v2;
              interp_row(dsrc.mesh, tc, false, c2, v2);
              for (size_t cc = 0; cc < c2.size(); ++cc)
                xv += v2[cc] * xs.segment(c2[cc] * dsrc.n, dsrc.n);
              L += -(Tj / Ti) * dsrc.mesh.w[c % dsrc.mesh.m] / (2.0 * dsrc.mesh.N) *
                   mut.dot(A * xv);
            }
          }
        }
        continue;
      }
      // scalar groups: own-node quadrature of the full integrand
      Vec mu_cn = disc.W * mu;
      Vec y_cn = disc.W * ycol;
      for (int c = 0; c < Ls.n_cn; ++c) {
        double tau = disc.mesh.tau_cn[c];
        int k = index_of(tau, sigma) - 1;
        const auto& blk = blocks[k];
        double wq = disc.mesh.w[c % m] / (2.0 * N);
        Vec val = y_cn.segment(c * Ls.n, Ls.n);
        if (blk.is_history()) {
          val -= blk.history->g(Ti * tau - u[Ls.idlt[l][k]], p);
        } else {
          double Tj = u[inst.seg[blk.target_duration].iT];
          double sh = (Ti / Tj) * (tau - u[Ls.idlt[l][k]]);
          for (const auto& s : blk.summands) {
            Vec xs = seg_x(s.source);
            SrcView sv{inst.disc[s.source].get(), xs.data(), inst.disc[s.source]->n};
            val -= s.A(p) * interp_state(sv, sh, false);
          }
        }
        L += wq * mu_cn.segment(c * Ls.n, Ls.n).dot(val);
      }
    }
  }

  // mesh, xi, glue and link terms (exact algebra; include always)
  for (int i = 0; i < M; ++i) {
    const auto& Ls = inst.seg[i];
    for (int l = 0; l < Ls.ny; ++l) {
      const auto& blocks = spec.segments[i].couplings[l];
      const int C = static_cast<int>(blocks.size());
      int eta0 = inst.handle.block("adj." + Ls.name + ".y" + std::to_string(l) + ".mesh").lam_new0;
      L += lam[eta0] * u[Ls.igb[l][0]];
      for (int k = 0; k + 1 < C; ++k)
        L += lam[eta0 + k + 1] * (u[Ls.igb[l][k + 1]] - u[Ls.ige[l][k]]);
      L += lam[eta0 + C] * (1.0 - u[Ls.ige[l][C - 1]]);
      // xi
      std::string xid = "adj." + Ls.name + ".y" + std::to_string(l) + ".xi";
      if (inst.handle.data().block_index.count(xid)) {
        int chi0 = inst.handle.block(xid).lam_new0;
        int r = 0;
        double Ti = u[Ls.iT];
        for (int k = 0; k + 1 < C; ++k)
          if (!blocks[k].is_history()) {
            double Tj = u[inst.seg[blocks[k].target_duration].iT];
            L += lam[chi0 + r++] * ((Ti / Tj) * (u[Ls.ige[l][k]] - u[Ls.idlt[l][k]]) - 1.0);
          }
        for (int k = 1; k < C; ++k)
          if (!blocks[k].is_history()) {
            double Tj = u[inst.seg[blocks[k].target_duration].iT];
            L += lam[chi0 + r++] * ((Ti / Tj) * (u[Ls.igb[l][k]] - u[Ls.idlt[l][k]]));
          }
      }
    }
  }
  for (int i = 1; i < M && q > 0; ++i) {
    int g0 = inst.handle.block("adj.glue" + std::to_string(i)).lam_new0;
    L += lam.segment(g0, q).dot(seg_p(i) - seg_p(0));
  }
  for (size_t li = 0; li < spec.algebraic.size(); ++li) {
    const auto& link = spec.algebraic[li];
    std::string nm = link.name.empty() ? ("link" + std::to_string(li)) : ("link." + link.name);
    int c0 = inst.handle.block("adj." + nm).lam_new0;
    double s = -link.rhs;
    for (const auto& t : link.terms)
      s += t.coeff * eval_ref(t.a, u, inst.seg) * eval_ref(t.b, u, inst.seg);
    L += lam[c0] * s;
  }

  // monitor terms with multipliers
  for (const auto& [lb, mi] : inst.monitors) {
    if (mi.mult_index < 0) continue;
    double psi;
    if (g.kind == VarGroup::Y && mi.psi_bp) {
      psi = mi.psi_bp(u);
    } else {
      const auto& blk = inst.handle.block(mi.fid);
      Vec usub(blk.Ku.size());
      for (size_t k = 0; k < blk.Ku.size(); ++k)
        usub[static_cast<Eigen::Index>(k)] = u[blk.Ku[k]];
      psi = blk.eval(usub)[0];
    }
    L += lam[mi.mult_index] * psi;
  }
  (void)dot_over;
  return L;
}

double paired_contraction(const Instance& inst, const acp::Point& pt, const Vec& du,
                          const VarGroup& g) {
  const auto& d = inst.handle.data();
  Vec r = acp::residual(inst.handle, pt);
  const int off_lam = d.n_phi + d.n_psi;
  double s = 0.0;
  auto colw = [&](int c) { return d.columns[c].weight; };
  if (g.kind == VarGroup::X) {
    const auto& Ls = inst.seg[g.seg];
    const auto& disc = *inst.disc[g.seg];
    Vec dux = du.segment(Ls.x0, Ls.n_bp * Ls.n);
    Vec dux_cn = disc.W * dux;
    for (int c = 0; c < Ls.n_cn * Ls.n; ++c)
      s += colw(Ls.col_dxcn + c) * r[off_lam + Ls.col_dxcn + c] * dux_cn[c];
    for (int k = 0; k < Ls.n; ++k) {
      s += r[off_lam + Ls.col_dx0 + k] * dux[k];
      s += r[off_lam + Ls.col_dx1 + k] * dux[(Ls.n_bp - 1) * Ls.n + k];
    }
  } else if (g.kind == VarGroup::Y) {
    const auto& Ls = inst.seg[g.seg];
    for (int c = 0; c < Ls.n_bp * Ls.n; ++c)
      s += colw(Ls.col_dy[g.col] + c) * r[off_lam + Ls.col_dy[g.col] + c] *
           du[Ls.y0[g.col] + c];
  } else if (g.kind == VarGroup::Scalars) {
    for (const auto& Ls : inst.seg) {
      s += r[off_lam + Ls.col_dT0] * du[Ls.iT0];
      s += r[off_lam + Ls.col_dT] * du[Ls.iT];
      for (int k = 0; k < Ls.q; ++k) s += r[off_lam + Ls.col_dp + k] * du[Ls.ip + k];
      for (int l = 0; l < Ls.ny; ++l)
        for (size_t k = 0; k < Ls.col_dD[l].size(); ++k)
          s += r[off_lam + Ls.col_dD[l][k]] * du[Ls.idlt[l][k]];
    }
  } else {  // Gamma
    for (const auto& Ls : inst.seg)
      for (int l = 0; l < Ls.ny; ++l)
        for (size_t k = 0; k < Ls.col_dg[l].size(); ++k) {
          s += r[off_lam + Ls.col_dg[l][k][0]] * du[Ls.igb[l][k]];
          s += r[off_lam + Ls.col_dg[l][k][1]] * du[Ls.ige[l][k]];
        }
  }
  return s;
}

}  // namespace contbox::ddecoll
