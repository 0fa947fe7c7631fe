#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace contbox {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

namespace acp {

/// One evaluation point of an augmented continuation problem. mu/nu hold
/// values for every continuation parameter (fixed or free).
struct Point {
  Vec u, lam, v, mu, nu;
};

enum class BlockKind { Phi, Psi, Lambda, Xi, Theta };

using VecFn = std::function<Vec(const Vec&)>;
using MatFn = std::function<Mat(const Vec&)>;
using SpMatFn = std::function<SpMat(const Vec&)>;
using VecFn3 = std::function<Vec(const Vec&, const Vec&, const Vec&)>;
using MatFn3 = std::function<Mat(const Vec&, const Vec&, const Vec&)>;
// Adjoint block: sparse matrix of shape out_dim x (#referenced columns),
// entries are functions of the gathered u sub-vector.
using LamFn = std::function<SpMat(const Vec&)>;
// Optional fast path: value of Lambda_block(u_sub)^T * lam_rows.
using LamApplyFn = std::function<Vec(const Vec&, const Vec&)>;
// Optional analytic derivative of Lambda_block(u_sub)^T lam_rows w.r.t. u_sub.
using LamDerivFn = std::function<Mat(const Vec&, const Vec&)>;

/// A reference to a contiguous range of adjoint-equation columns. Ranges are
/// created the first time a lambda block names them and reused (with matching
/// count) by later blocks.
struct ColumnRef {
  std::string name;
  int count = 1;
  Vec weights;               // pairing weights, broadcast from 1.0 when empty
  bool is_variation = true;  // false for multiplier-continuity equations
  ColumnRef() = default;
  ColumnRef(std::string n, int c = 1, Vec w = Vec(), bool var = true)
      : name(std::move(n)), count(c), weights(std::move(w)), is_variation(var) {}
};

struct FunctionBlock {
  std::string fid;
  BlockKind kind = BlockKind::Phi;
  std::vector<int> Ku, Klam, Kv;
  std::vector<int> KLam;  // lambda blocks: global column indices, in call order
  int out_dim = 0;        // rows (lambda: number of new multipliers)
  VecFn eval;
  MatFn deriv;       // optional: d(eval)/d(u_sub)
  SpMatFn deriv_sp;  // optional sparse variant, preferred when set
  VecFn3 eval3;
  MatFn3 deriv3;  // optional: d(eval3)/d(u_sub|lam_sub|v_sub) stacked columns
  LamFn lam_eval;
  LamApplyFn lam_apply;
  LamDerivFn lam_deriv;
  std::vector<int> fd_skip;  // local u_sub indices with structurally zero derivative

  // bookkeeping (set by add_block)
  int u_new0 = 0, n_u_new = 0;
  int lam_new0 = 0, n_lam_new = 0;
  int v_new0 = 0, n_v_new = 0;
  int row0 = 0;  // offset within the block's residual group
  std::vector<std::string> par_labels;
};

struct ColumnInfo {
  std::string name;  // range name; entry i of the range is name[i]
  double weight = 1.0;
  bool is_variation = true;
  int created_by = -1;  // block index
};

struct ColumnRange {
  int start = 0, count = 0;
};

struct ProblemData {
  Vec u0, lam0, v0;
  std::vector<std::string> mu_labels, nu_labels;
  std::vector<FunctionBlock> blocks;
  std::vector<ColumnInfo> columns;  // adjoint-equation columns (n_Lambda)
  std::map<std::string, ColumnRange> column_index;
  std::map<std::string, int> block_index;
  std::map<std::string, int> mu_index, nu_index;
  // variable names, optional; parallel to u
  std::vector<std::string> u_names;
  int n_u = 0, n_lam = 0, n_v = 0;
  int n_phi = 0, n_psi = 0, n_xi = 0, n_theta = 0;
  int n_Lambda() const { return static_cast<int>(columns.size()); }
  int residual_dim() const { return n_phi + n_psi + n_Lambda() + n_xi + n_theta; }
};

class ProblemHandle {
 public:
  ProblemHandle() = default;
  explicit ProblemHandle(std::shared_ptr<const ProblemData> d) : d_(std::move(d)) {}
  const ProblemData& data() const { return *d_; }
  bool valid() const { return static_cast<bool>(d_); }
  int n_u() const { return d_->n_u; }
  int n_lam() const { return d_->n_lam; }
  int n_v() const { return d_->n_v; }
  int n_phi() const { return d_->n_phi; }
  int n_psi() const { return d_->n_psi; }
  int n_Lambda() const { return d_->n_Lambda(); }
  int n_xi() const { return d_->n_xi; }
  int n_theta() const { return d_->n_theta; }
  int mu_index(const std::string& label) const;
  int nu_index(const std::string& label) const;
  ColumnRange column(const std::string& name) const;
  const FunctionBlock& block(const std::string& fid) const;

 private:
  std::shared_ptr<const ProblemData> d_;
};

/// Staged construction per the chain of partial realizations: blocks may
/// reference only variables and columns that already exist when they are
/// added.
class AugmentedProblem {
 public:
  AugmentedProblem() : d_(std::make_shared<ProblemData>()) {}

  int n_u() const { return d_->n_u; }
  int n_lam() const { return d_->n_lam; }
  int n_v() const { return d_->n_v; }

  /// Names for newly added u variables (optional, improves diagnostics).
  void name_u(int index, const std::string& name);
  int u_index(const std::string& name) const;

  std::string add_phi(const std::string& fid, std::vector<int> Ku, const Vec& new_u0,
                      int out_dim, VecFn eval, MatFn deriv = nullptr);
  std::string add_phi_sp(const std::string& fid, std::vector<int> Ku, const Vec& new_u0,
                         int out_dim, VecFn eval, SpMatFn deriv_sp,
                         std::vector<int> fd_skip = {});
  std::string add_psi(const std::string& fid, std::vector<int> Ku, const Vec& new_u0,
                      const std::vector<std::string>& par_labels, VecFn eval,
                      MatFn deriv = nullptr);
  /// Adds k_lambda = new_lam0.size() multipliers. `cols` lists the adjoint
  /// columns the block writes to, existing or new, in the column order of
  /// lam_eval's output.
  std::string add_lambda(const std::string& fid, std::vector<int> Ku, const Vec& new_lam0,
                         const std::vector<ColumnRef>& cols, LamFn lam_eval,
                         LamApplyFn lam_apply = nullptr, LamDerivFn lam_deriv = nullptr,
                         std::vector<int> fd_skip = {});
  std::string add_xi(const std::string& fid, std::vector<int> Ku, std::vector<int> Klam,
                     std::vector<int> Kv, const Vec& new_v0, int out_dim, VecFn3 eval,
                     MatFn3 deriv = nullptr);
  std::string add_theta(const std::string& fid, std::vector<int> Ku, std::vector<int> Klam,
                        std::vector<int> Kv, const Vec& new_v0,
                        const std::vector<std::string>& par_labels, VecFn3 eval,
                        MatFn3 deriv = nullptr);

  bool has_column(const std::string& name) const {
    return d_->column_index.count(name) != 0;
  }
  ColumnRange column(const std::string& name) const;

  ProblemHandle close();
  bool closed() const { return closed_; }

  const ProblemData& data() const { return *d_; }

 private:
  void check_open() const;
  void check_Ku(const std::vector<int>& Ku) const;
  std::string add_block(FunctionBlock blk, const Vec& new_u0, const Vec& new_lam0,
                        const Vec& new_v0);
  std::shared_ptr<ProblemData> d_;
  bool closed_ = false;
};

/// Initial point assembled from the staged initial guesses; mu/nu are set to
/// the monitor values at (u0, lam0, v0).
Point initial_point(const ProblemHandle& h);

/// Monitor values Psi(u) in label order.
Vec eval_mu(const ProblemHandle& h, const Vec& u);
/// Complementary monitor values Theta(u, lam, v) in label order.
Vec eval_nu(const ProblemHandle& h, const Vec& u, const Vec& lam, const Vec& v);

/// Stacked residual (Phi; Psi-mu; Lambda^T lam; Xi; Theta-nu).
Vec residual(const ProblemHandle& h, const Point& p);

/// Sparse Jacobian with column order (u, lam, v, mu, nu).
SpMat jacobian(const ProblemHandle& h, const Point& p);

/// Assembled adjoint matrix Lambda(u)^T of shape n_Lambda x n_lam.
SpMat adjoint_matrix(const ProblemHandle& h, const Vec& u);

struct Restriction {
  std::map<std::string, double> fixed_mu, fixed_nu;
};

int deficit(const ProblemHandle& h, const Restriction& r);

/// The problem over unknowns x = (u, lam, v, free mu, free nu) with fixed
/// parameters substituted.
class RestrictedProblem {
 public:
  RestrictedProblem() = default;
  RestrictedProblem(ProblemHandle h, Restriction r);

  int dim() const { return dim_; }
  int rows() const { return h_.data().residual_dim(); }
  int deficit() const { return acp::deficit(h_, r_); }
  const ProblemHandle& handle() const { return h_; }
  const Restriction& restriction() const { return r_; }

  Vec pack(const Point& p) const;
  Point unpack(const Vec& x) const;
  Vec residual(const Vec& x) const;
  SpMat jacobian(const Vec& x) const;

  /// Index of a free parameter inside x; -1 if fixed.
  int mu_position(const std::string& label) const;
  int nu_position(const std::string& label) const;
  const std::vector<std::string>& free_mu() const { return free_mu_; }
  const std::vector<std::string>& free_nu() const { return free_nu_; }

 private:
  ProblemHandle h_;
  Restriction r_;
  std::vector<std::string> free_mu_, free_nu_;
  std::vector<int> free_mu_idx_, free_nu_idx_;  // indices into mu/nu vectors
  int dim_ = 0;
};

/// Central finite difference with per-component step sqrt(eps)*max(1,|x_i|).
Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x,
                const std::vector<int>& skip = {});

/// Adjoint block of an algebraic phi/psi block as its transpose gradient:
/// one multiplier per row, entries D(eval)^T written into the per-variable
/// columns "du<index>". Requires an analytic derivative on the source block.
std::string add_transpose_adjoint(AugmentedProblem& prob, const std::string& fid);

}  // namespace acp
}  // namespace contbox
