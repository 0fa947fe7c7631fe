#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "contbox/acp.hpp"
#include "contbox/coll.hpp"

namespace contbox::ddecoll {

using coll::Field;
using coll::SegmentDisc;

/// Matrix-valued function of the shared problem parameters.
struct ParMatrix {
  Mat value;                                      // constant case
  std::function<Mat(const Vec&)> fn;              // overrides value when set
  std::function<Mat(const Vec&, int)> dp;         // d/dp_k; zero when absent and constant
  Mat operator()(const Vec& p) const { return fn ? fn(p) : value; }
  Mat deriv(const Vec& p, int k) const;
};

struct Summand {
  ParMatrix A;
  int source = 0;  // source segment index
};

/// Known-history coupling y(tau) = g(T*tau - Delta, p).
struct KnownHistory {
  std::function<Vec(double, const Vec&)> g;
  std::function<Vec(double, const Vec&)> gs;  // d/ds
  std::function<Mat(double, const Vec&)> gp;  // n x q
};

struct CouplingBlock {
  double gamma_b0 = 0.0, gamma_e0 = 1.0;
  double delta0 = 0.0;
  int target_duration = -1;  // j_{i,k}; ignored for known-history blocks
  std::vector<Summand> summands;
  std::optional<KnownHistory> history;
  bool is_history() const { return history.has_value(); }
};

struct BoundaryCondition {
  int segment = 0;  // i in x_i(0) = sum_j B_ij(p) x_j(1) + b(p)
  std::vector<std::pair<int, ParMatrix>> terms;
  std::function<Vec(const Vec&)> offset;      // optional b(p)
  std::function<Mat(const Vec&)> offset_dp;   // n x q
};

/// Quantities referenced by declarative algebraic links.
struct Ref {
  enum Kind { T0, T, GammaB, GammaE, Delta, Par, One } kind = One;
  int seg = 0, col = 0, block = 0;  // for T0/T: seg; gamma/delta: (seg, col, block)
  int pidx = 0;                     // for Par
  static Ref t0(int s) { return {T0, s, 0, 0, 0}; }
  static Ref t(int s) { return {T, s, 0, 0, 0}; }
  static Ref gb(int s, int c, int k) { return {GammaB, s, c, k, 0}; }
  static Ref ge(int s, int c, int k) { return {GammaE, s, c, k, 0}; }
  static Ref delta(int s, int c, int k) { return {Delta, s, c, k, 0}; }
  static Ref par(int j) { return {Par, 0, 0, 0, j}; }
  static Ref one() { return {One, 0, 0, 0, 0}; }
};

struct LinkTerm {
  double coeff = 1.0;
  Ref a, b;  // product of up to two references (b defaults to One)
};

/// sum of terms - rhs = 0
struct AlgebraicLink {
  std::string name;
  std::vector<LinkTerm> terms;
  double rhs = 0.0;
};

AlgebraicLink link_eq(const std::string& name, Ref a, double rhs);          // a = rhs
AlgebraicLink link_eq(const std::string& name, Ref a, Ref b);               // a - b = 0
AlgebraicLink link_prod(const std::string& name, Ref a, Ref b, Ref c);      // a*b - c = 0

struct Segment {
  std::string name;
  Field field;
  std::function<Vec(double)> x_init;
  std::vector<std::function<Vec(double)>> y_init;  // optional, per column
  double T0_init = 0.0, T_init = 1.0;
  std::vector<std::vector<CouplingBlock>> couplings;  // per y column
};

struct DdeSpec {
  std::vector<Segment> segments;
  Vec p0;
  std::vector<std::string> p_labels;
  std::vector<BoundaryCondition> bcs;
  std::vector<AlgebraicLink> algebraic;
  bool duration_monitors = true;  // observability monitors for T0_i, T_i
};

struct SegmentLayout {
  std::string name;
  int n = 0, ny = 0, q = 0, n_bp = 0, n_cn = 0;
  int x0 = -1;
  std::vector<int> y0;
  int iT0 = -1, iT = -1, ip = -1;
  std::vector<std::vector<int>> igb, ige, idlt;  // per column, per block
  int lam0 = -1;             // lambda_bp multipliers
  std::vector<int> mu0;      // coupling multipliers per column
  int zeta0 = -1;            // boundary multipliers (first own bc)
  // adjoint equation columns
  int col_dxcn = -1, col_lcont = -1, col_dx0 = -1, col_dx1 = -1;
  std::vector<int> col_dy;
  int col_dT0 = -1, col_dT = -1, col_dp = -1;
  std::vector<std::vector<int>> col_dD;
  std::vector<std::vector<std::array<int, 2>>> col_dg;
};

struct MonitorInfo {
  std::string label;
  std::string fid;        // psi block
  std::string adj_fid;    // lambda block, empty if none
  int mult_index = -1;    // global multiplier index of its eta
  // base-point-quadrature variant of the monitor value (integral monitors
  // only), used by the group-consistent Lagrangian diagnostics
  std::function<double(const Vec&)> psi_bp;
};

class Builder;

struct Instance {
  acp::ProblemHandle handle;
  DdeSpec spec;
  int N = 10, m = 4;
  bool with_adjoints = false;
  std::vector<std::shared_ptr<SegmentDisc>> disc;
  std::vector<SegmentLayout> seg;
  std::map<std::string, MonitorInfo> monitors;

  int mult_index(const std::string& monitor_label) const;
  /// Zero-problem dimensional deficit with every parameter free.
  int zero_deficit() const;
};

/// Builds the staged augmented problem for a spec: per segment collocation and
/// continuity blocks, boundary conditions, mesh/coupling/algebraic blocks,
/// parameter gluing, parameter monitors, then (optionally) the matching
/// adjoint blocks in the same order.
class Builder {
 public:
  Builder(const DdeSpec& spec, int N, int m, bool with_adjoints);

  acp::AugmentedProblem& problem() { return prob_; }
  const std::vector<SegmentLayout>& segments() const { return inst_.seg; }
  const Instance& peek() const { return inst_; }
  bool with_adjoints() const { return inst_.with_adjoints; }

  /// Monitor of x_i(end)[comp]; end=0 or 1. Adjoint-capable.
  std::string add_endpoint_monitor(int seg, int comp, int end, const std::string& label);
  /// Monitor of the interpolant x_i(tau*)[comp]; tau* fixed or a new unknown.
  /// Zero-problem only (no adjoint block): see point_monitor notes.
  std::string add_point_monitor(int seg, int comp, double tau0, bool unknown_tau,
                                const std::string& label);
  /// Monitor T * integral over [0,1] of g(t, x, y, p); adjoint-capable.
  struct Integrand {
    std::function<double(double, const Vec&, const Mat&, const Vec&)> g;
    std::function<Vec(double, const Vec&, const Mat&, const Vec&)> gx;   // n
    std::function<Mat(double, const Vec&, const Mat&, const Vec&)> gy;   // n x ny
    std::function<double(double, const Vec&, const Mat&, const Vec&)> gt;
    std::function<Vec(double, const Vec&, const Mat&, const Vec&)> gp;   // q
  };
  std::string add_integral_monitor(int seg, const Integrand& g, const std::string& label,
                                   bool adjoint = true);
  /// Monitor of a function of the stacked segment endpoint states
  /// [x_1(0); x_1(1); x_2(0); x_2(1); ...]; adjoint-capable.
  std::string add_endpoint_fn_monitor(
      const std::string& label, std::function<double(const Vec&)> fn,
      std::function<Vec(const Vec&)> grad);
  /// Complementary monitor tracking the multiplier of a monitor label.
  std::string add_multiplier_monitor(const std::string& monitor_label, const std::string& nu_label);

  /// Free-form zero function over the end states of one segment plus the
  /// parameters: rows x(0)|x(1)|p -> R^k. Zero-problem only.
  std::string add_custom_end_phi(const std::string& fid, int seg, int rows,
                                 std::function<Vec(const Vec&, const Vec&, const Vec&)> f,
                                 std::function<Mat(const Vec&, const Vec&, const Vec&)> df);

  Instance close();

 private:
  friend Instance instantiate_impl(Builder&);
  void build();
  void build_adjoints();
  acp::AugmentedProblem prob_;
  Instance inst_;
  int n_bc_ = 0;
  std::vector<std::string> pending_monitor_adjoints_;
};

/// One-call instantiation when no extra blocks are needed.
Instance instantiate(const DdeSpec& spec, int N, int m, bool with_adjoints);

/// Standalone coupling residual for one y column of one segment: inputs are
/// raw arrays, so tests can drive it directly.
Vec coupling_residual(const SegmentDisc& disc_own, const std::vector<CouplingBlock>& blocks,
                      const Vec& y_bp, const std::vector<Vec>& gb, const std::vector<Vec>& ge_un,
                      const Vec& deltas, double T_own, const Vec& T_all,
                      const std::vector<const Vec*>& x_src, const Vec& p,
                      const std::vector<const SegmentDisc*>& disc_src);

/// M x M block matrix of n x n blocks implementing rotation by 2*pi*rho in
/// Fourier space; M odd; imaginary parts (<= 1e-12) discarded.
Mat torus_coupling_matrices(int M, double rho, int n);

/// Variation groups for the directional Lagrangian test.
struct VarGroup {
  enum Kind { X, Y, Scalars, Gamma } kind = X;
  int seg = 0, col = 0;  // X: seg; Y: (seg, col)
};

/// Value of the discretized Lagrangian with every integral discretized in the
/// pairing of the given variation group (see module notes): used by the
/// finite-difference adjoint checks.
double lagrangian(const Instance& inst, const acp::Point& p, const VarGroup& g);

/// Pairing-weighted contraction of the assembled adjoint residual with an
/// admissible variation du of the u variables, restricted to the group.
double paired_contraction(const Instance& inst, const acp::Point& p, const Vec& du,
                          const VarGroup& g);

}  // namespace contbox::ddecoll
