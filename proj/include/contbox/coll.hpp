#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <functional>
#include <optional>
#include <vector>

#include "contbox/acp.hpp"

namespace contbox::coll {

using contbox::Mat;
using contbox::SpMat;
using contbox::Vec;

/// Gauss-Legendre nodes (increasing) and weights on [-1,1]; m in 1..7.
void gauss_legendre(int m, Vec& z, Vec& w);

struct CollMesh {
  int N = 10;
  int m = 4;
  Vec tau_pt;  // N+1 uniform partition points
  Vec tau_bp;  // N(m+1) base points, interval endpoints duplicated
  Vec tau_cn;  // Nm collocation nodes
  Vec z, w;    // Gauss nodes and weights on [-1,1]
};

CollMesh build_mesh(int N, int m);

/// pi(tau; sigma): 1-based interval index, clamped to [1, P] outside [0,1).
int index_of(double tau, const Vec& sigma);
Eigen::VectorXi index_map(const Vec& tau, const Vec& sigma);

/// Lagrange basis of degree m on the uniform nodes -1 + 2(k-1)/m of [-1,1].
double lagrange_basis(int m, int c, double xi);
double lagrange_deriv(int m, int c, double xi);

struct SegmentDisc {
  int n = 1;
  CollMesh mesh;
  SpMat W;      // Nmn x N(m+1)n interpolation to collocation nodes
  SpMat Wp;     // same shape; x'(tau_cn) = 2N * Wp * vec(x_bp)
  SpMat Q;      // (N-1)n x N(m+1)n continuity map
  SpMat Omega;  // Nmn x Nmn diagonal quadrature weights (no 1/2N factor)
  Vec bp_weights;  // N(m+1): exact integration weights for base-point samples
};

SegmentDisc build_disc(const CollMesh& mesh, int n);

/// Sparse evaluation matrix: row block t maps vec(x_bp) to the interpolant (or
/// its true derivative) at b*times[t] - c, extrapolating the boundary interval
/// for out-of-range arguments.
SpMat interp_matrix(const SegmentDisc& disc, const Vec& times, double b, double c, bool deriv);

/// Dense row of basis coefficients for a single evaluation time; writes into
/// cols[i] (global base-point index) and vals[i]. Returns the interval index.
int interp_row(const CollMesh& mesh, double t, bool deriv, std::vector<int>& cols,
               std::vector<double>& vals);

/// Vector field with analytic first derivatives. y is n x ny (one column per
/// discrete delay); ny = 0 for plain ODEs.
struct Field {
  int n = 1, ny = 0, q = 0;
  std::function<Vec(double, const Vec&, const Mat&, const Vec&)> f;
  std::function<Mat(double, const Vec&, const Mat&, const Vec&)> fx;  // n x n
  std::function<Mat(double, const Vec&, const Mat&, const Vec&)> fy;  // n x n*ny
  std::function<Vec(double, const Vec&, const Mat&, const Vec&)> ft;  // n
  std::function<Mat(double, const Vec&, const Mat&, const Vec&)> fp;  // n x q
};

/// y stored column-major by delay column: [y_col1_bp; y_col2_bp; ...].
Mat y_at(const Field& fld, const Vec& y_bp, int n, int bp_index, int n_bp);

/// Collocation residual 2N*Wp*vec(x_bp) - T*vec(f_cn), length Nmn.
Vec ode_residual(const SegmentDisc& disc, const Vec& x_bp, const Vec& y_bp, double T0, double T,
                 const Vec& p, const Field& fld);

/// Continuity gaps Q*vec(x_bp), length (N-1)n.
Vec continuity_residual(const SegmentDisc& disc, const Vec& x_bp);

/// (1/2N) * sum of w-weighted values at the collocation nodes.
double quad_integrate(const SegmentDisc& disc, const Vec& g_cn);

/// One boundary-condition row x(0) = sum_j B_j(p) x_j(1) + b(p) as seen from
/// this segment's adjoint: B matrices, their parameter derivatives and the
/// current end states of the coupled segments.
struct BcTerm {
  int j = 0;  // source segment id (informational)
  Mat B;
  std::vector<Mat> dB_dp;  // one n x n matrix per parameter, may be empty
  Vec xj1;
};
struct BcRow {
  std::vector<BcTerm> terms;
  Vec b;                   // offset, may be empty
  std::optional<Mat> db_dp;  // n x q
};

/// Adjoint contributions of the segment partial Lagrangian
///   int lambda^T (x' - T f) dtau + zeta^T (x(0) - sum B_j x_j(1) - b)
/// evaluated at the given multipliers. All contributions are linear and
/// homogeneous in (lambda_bp, zeta).
struct AdjointBlockSet {
  Vec dx;             // Nmn, at collocation nodes
  Vec dx0, dx1;       // n each
  Vec dy;             // N(m+1)*n*ny at base points
  double dT0 = 0.0, dT = 0.0;
  Vec dp;             // q
  std::vector<Vec> dxj1;  // n rows per BC term, aligned with bc->terms
};

AdjointBlockSet ode_adjoint(const SegmentDisc& disc, const Vec& x_bp, const Vec& y_bp, double T0,
                            double T, const Vec& p, const Field& fld, const Vec& lambda_bp,
                            const Vec& zeta, const BcRow* bc);

}  // namespace contbox::coll
