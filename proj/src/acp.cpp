#include "contbox/acp.hpp"

#include <cmath>

namespace contbox::acp {

namespace {

Vec gather(const Vec& x, const std::vector<int>& idx) {
  Vec out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = x[idx[i]];
  return out;
}

void check_unique_label(const std::map<std::string, int>& table, const std::string& label) {
  if (table.count(label)) throw std::invalid_argument("duplicate parameter label: " + label);
}

}  // namespace

int ProblemHandle::mu_index(const std::string& label) const {
  auto it = d_->mu_index.find(label);
  if (it == d_->mu_index.end()) throw std::invalid_argument("unknown mu label: " + label);
  return it->second;
}

int ProblemHandle::nu_index(const std::string& label) const {
  auto it = d_->nu_index.find(label);
  if (it == d_->nu_index.end()) throw std::invalid_argument("unknown nu label: " + label);
  return it->second;
}

ColumnRange ProblemHandle::column(const std::string& name) const {
  auto it = d_->column_index.find(name);
  if (it == d_->column_index.end()) throw std::invalid_argument("unknown adjoint column: " + name);
  return it->second;
}

const FunctionBlock& ProblemHandle::block(const std::string& fid) const {
  auto it = d_->block_index.find(fid);
  if (it == d_->block_index.end()) throw std::invalid_argument("unknown block: " + fid);
  return d_->blocks[it->second];
}

void AugmentedProblem::check_open() const {
  if (closed_) throw std::logic_error("problem closed");
}

void AugmentedProblem::check_Ku(const std::vector<int>& Ku) const {
  for (int k : Ku)
    if (k < 0 || k >= d_->n_u) throw std::out_of_range("u dependency index out of range");
}

void AugmentedProblem::name_u(int index, const std::string& name) {
  if (index < 0 || index >= d_->n_u) throw std::out_of_range("u index out of range");
  if (static_cast<int>(d_->u_names.size()) < d_->n_u) d_->u_names.resize(d_->n_u);
  d_->u_names[index] = name;
}

int AugmentedProblem::u_index(const std::string& name) const {
  for (size_t i = 0; i < d_->u_names.size(); ++i)
    if (d_->u_names[i] == name) return static_cast<int>(i);
  throw std::invalid_argument("unknown u variable: " + name);
}

ColumnRange AugmentedProblem::column(const std::string& name) const {
  auto it = d_->column_index.find(name);
  if (it == d_->column_index.end()) throw std::invalid_argument("unknown adjoint column: " + name);
  return it->second;
}

std::string AugmentedProblem::add_block(FunctionBlock blk, const Vec& new_u0,
                                        const Vec& new_lam0, const Vec& new_v0) {
  check_open();
  if (d_->block_index.count(blk.fid)) throw std::invalid_argument("duplicate fid: " + blk.fid);
  check_Ku(blk.Ku);
  for (int k : blk.Klam)
    if (k < 0 || k >= d_->n_lam) throw std::out_of_range("lambda dependency index out of range");
  for (int k : blk.Kv)
    if (k < 0 || k >= d_->n_v) throw std::out_of_range("v dependency index out of range");

  blk.u_new0 = d_->n_u;
  blk.n_u_new = static_cast<int>(new_u0.size());
  blk.lam_new0 = d_->n_lam;
  blk.n_lam_new = static_cast<int>(new_lam0.size());
  blk.v_new0 = d_->n_v;
  blk.n_v_new = static_cast<int>(new_v0.size());

  // New variables are appended to the block's dependency sets in order.
  for (int i = 0; i < blk.n_u_new; ++i) blk.Ku.push_back(d_->n_u + i);
  for (int i = 0; i < blk.n_lam_new; ++i) blk.Klam.push_back(d_->n_lam + i);
  for (int i = 0; i < blk.n_v_new; ++i) blk.Kv.push_back(d_->n_v + i);

  if (blk.n_u_new > 0) {
    d_->u0.conservativeResize(d_->n_u + blk.n_u_new);
    d_->u0.tail(blk.n_u_new) = new_u0;
    d_->n_u += blk.n_u_new;
  }
  if (blk.n_lam_new > 0) {
    d_->lam0.conservativeResize(d_->n_lam + blk.n_lam_new);
    d_->lam0.tail(blk.n_lam_new) = new_lam0;
    d_->n_lam += blk.n_lam_new;
  }
  if (blk.n_v_new > 0) {
    d_->v0.conservativeResize(d_->n_v + blk.n_v_new);
    d_->v0.tail(blk.n_v_new) = new_v0;
    d_->n_v += blk.n_v_new;
  }

  switch (blk.kind) {
    case BlockKind::Phi:
      blk.row0 = d_->n_phi;
      d_->n_phi += blk.out_dim;
      break;
    case BlockKind::Psi:
      blk.row0 = d_->n_psi;
      d_->n_psi += blk.out_dim;
      for (const auto& lb : blk.par_labels) {
        check_unique_label(d_->mu_index, lb);
        check_unique_label(d_->nu_index, lb);
        d_->mu_index[lb] = static_cast<int>(d_->mu_labels.size());
        d_->mu_labels.push_back(lb);
      }
      break;
    case BlockKind::Lambda:
      break;  // KLam already resolved by add_lambda
    case BlockKind::Xi:
      blk.row0 = d_->n_xi;
      d_->n_xi += blk.out_dim;
      break;
    case BlockKind::Theta:
      blk.row0 = d_->n_theta;
      d_->n_theta += blk.out_dim;
      for (const auto& lb : blk.par_labels) {
        check_unique_label(d_->mu_index, lb);
        check_unique_label(d_->nu_index, lb);
        d_->nu_index[lb] = static_cast<int>(d_->nu_labels.size());
        d_->nu_labels.push_back(lb);
      }
      break;
  }

  std::string fid = blk.fid;
  d_->block_index[fid] = static_cast<int>(d_->blocks.size());
  d_->blocks.push_back(std::move(blk));
  return fid;
}

std::string AugmentedProblem::add_phi(const std::string& fid, std::vector<int> Ku,
                                      const Vec& new_u0, int out_dim, VecFn eval, MatFn deriv) {
  FunctionBlock blk;
  blk.fid = fid;
  blk.kind = BlockKind::Phi;
  blk.Ku = std::move(Ku);
  blk.out_dim = out_dim;
  blk.eval = std::move(eval);
  blk.deriv = std::move(deriv);
  return add_block(std::move(blk), new_u0, Vec(), Vec());
}

std::string AugmentedProblem::add_phi_sp(const std::string& fid, std::vector<int> Ku,
                                         const Vec& new_u0, int out_dim, VecFn eval,
                                         SpMatFn deriv_sp, std::vector<int> fd_skip) {
  FunctionBlock blk;
  blk.fid = fid;
  blk.kind = BlockKind::Phi;
  blk.Ku = std::move(Ku);
  blk.out_dim = out_dim;
  blk.eval = std::move(eval);
  blk.deriv_sp = std::move(deriv_sp);
  blk.fd_skip = std::move(fd_skip);
  return add_block(std::move(blk), new_u0, Vec(), Vec());
}

std::string AugmentedProblem::add_psi(const std::string& fid, std::vector<int> Ku,
                                      const Vec& new_u0, const std::vector<std::string>& labels,
                                      VecFn eval, MatFn deriv) {
  FunctionBlock blk;
  blk.fid = fid;
  blk.kind = BlockKind::Psi;
  blk.Ku = std::move(Ku);
  blk.out_dim = static_cast<int>(labels.size());
  blk.par_labels = labels;
  blk.eval = std::move(eval);
  blk.deriv = std::move(deriv);
  return add_block(std::move(blk), new_u0, Vec(), Vec());
}

std::string AugmentedProblem::add_lambda(const std::string& fid, std::vector<int> Ku,
                                         const Vec& new_lam0, const std::vector<ColumnRef>& cols,
                                         LamFn lam_eval, LamApplyFn lam_apply,
                                         LamDerivFn lam_deriv, std::vector<int> fd_skip) {
  check_open();
  FunctionBlock blk;
  blk.fid = fid;
  blk.kind = BlockKind::Lambda;
  blk.Ku = std::move(Ku);
  blk.out_dim = static_cast<int>(new_lam0.size());
  blk.lam_eval = std::move(lam_eval);
  blk.lam_apply = std::move(lam_apply);
  blk.lam_deriv = std::move(lam_deriv);
  blk.fd_skip = std::move(fd_skip);
  int block_idx = static_cast<int>(d_->blocks.size());
  for (const auto& c : cols) {
    auto it = d_->column_index.find(c.name);
    if (it != d_->column_index.end()) {
      if (it->second.count != c.count)
        throw std::invalid_argument("column range size mismatch: " + c.name);
      for (int i = 0; i < c.count; ++i) blk.KLam.push_back(it->second.start + i);
    } else {
      int start = static_cast<int>(d_->columns.size());
      for (int i = 0; i < c.count; ++i) {
        double w = c.weights.size() ? c.weights[i] : 1.0;
        d_->columns.push_back(ColumnInfo{c.name, w, c.is_variation, block_idx});
        blk.KLam.push_back(start + i);
      }
      d_->column_index[c.name] = ColumnRange{start, c.count};
    }
  }
  return add_block(std::move(blk), Vec(), new_lam0, Vec());
}

std::string AugmentedProblem::add_xi(const std::string& fid, std::vector<int> Ku,
                                     std::vector<int> Klam, std::vector<int> Kv,
                                     const Vec& new_v0, int out_dim, VecFn3 eval, MatFn3 deriv) {
  FunctionBlock blk;
  blk.fid = fid;
  blk.kind = BlockKind::Xi;
  blk.Ku = std::move(Ku);
  blk.Klam = std::move(Klam);
  blk.Kv = std::move(Kv);
  blk.out_dim = out_dim;
  blk.eval3 = std::move(eval);
  blk.deriv3 = std::move(deriv);
  return add_block(std::move(blk), Vec(), Vec(), new_v0);
}

std::string AugmentedProblem::add_theta(const std::string& fid, std::vector<int> Ku,
                                        std::vector<int> Klam, std::vector<int> Kv,
                                        const Vec& new_v0,
                                        const std::vector<std::string>& labels, VecFn3 eval,
                                        MatFn3 deriv) {
  FunctionBlock blk;
  blk.fid = fid;
  blk.kind = BlockKind::Theta;
  blk.Ku = std::move(Ku);
  blk.Klam = std::move(Klam);
  blk.Kv = std::move(Kv);
  blk.out_dim = static_cast<int>(labels.size());
  blk.par_labels = labels;
  blk.eval3 = std::move(eval);
  blk.deriv3 = std::move(deriv);
  return add_block(std::move(blk), Vec(), Vec(), new_v0);
}

ProblemHandle AugmentedProblem::close() {
  check_open();
  if (d_->blocks.empty()) throw std::logic_error("empty problem");
  closed_ = true;
  return ProblemHandle(d_);
}

Vec eval_mu(const ProblemHandle& h, const Vec& u) {
  const auto& d = h.data();
  Vec mu(d.mu_labels.size());
  int at = 0;
  for (const auto& blk : d.blocks) {
    if (blk.kind != BlockKind::Psi) continue;
    Vec val = blk.eval(gather(u, blk.Ku));
    if (val.size() != blk.out_dim) throw std::runtime_error("psi block dimension mismatch: " + blk.fid);
    mu.segment(at, blk.out_dim) = val;
    at += blk.out_dim;
  }
  return mu;
}

Vec eval_nu(const ProblemHandle& h, const Vec& u, const Vec& lam, const Vec& v) {
  const auto& d = h.data();
  Vec nu(d.nu_labels.size());
  int at = 0;
  for (const auto& blk : d.blocks) {
    if (blk.kind != BlockKind::Theta) continue;
    Vec val = blk.eval3(gather(u, blk.Ku), gather(lam, blk.Klam), gather(v, blk.Kv));
    if (val.size() != blk.out_dim) throw std::runtime_error("theta block dimension mismatch: " + blk.fid);
    nu.segment(at, blk.out_dim) = val;
    at += blk.out_dim;
  }
  return nu;
}

Point initial_point(const ProblemHandle& h) {
  const auto& d = h.data();
  Point p;
  p.u = d.u0;
  p.lam = d.lam0;
  p.v = d.v0;
  p.mu = eval_mu(h, p.u);
  p.nu = eval_nu(h, p.u, p.lam, p.v);
  return p;
}

Vec residual(const ProblemHandle& h, const Point& p) {
  const auto& d = h.data();
  if (p.u.size() != d.n_u || p.lam.size() != d.n_lam || p.v.size() != d.n_v ||
      p.mu.size() != static_cast<Eigen::Index>(d.mu_labels.size()) ||
      p.nu.size() != static_cast<Eigen::Index>(d.nu_labels.size()))
    throw std::invalid_argument("point dimension mismatch");

  Vec r = Vec::Zero(d.residual_dim());
  const int off_psi = d.n_phi;
  const int off_lam = off_psi + d.n_psi;
  const int off_xi = off_lam + d.n_Lambda();
  const int off_theta = off_xi + d.n_xi;

  for (const auto& blk : d.blocks) {
    switch (blk.kind) {
      case BlockKind::Phi: {
        Vec val = blk.eval(gather(p.u, blk.Ku));
        if (val.size() != blk.out_dim)
          throw std::runtime_error("phi block dimension mismatch: " + blk.fid);
        r.segment(blk.row0, blk.out_dim) = val;
        break;
      }
      case BlockKind::Psi: {
        Vec val = blk.eval(gather(p.u, blk.Ku));
        for (int i = 0; i < blk.out_dim; ++i) {
          int j = d.mu_index.at(blk.par_labels[i]);
          r[off_psi + blk.row0 + i] = val[i] - p.mu[j];
        }
        break;
      }
      case BlockKind::Lambda: {
        Vec lam_rows = p.lam.segment(blk.lam_new0, blk.n_lam_new);
        Vec contrib;
        Vec usub = gather(p.u, blk.Ku);
        if (blk.lam_apply) {
          contrib = blk.lam_apply(usub, lam_rows);
        } else {
          SpMat L = blk.lam_eval(usub);
          contrib = L.transpose() * lam_rows;
        }
        if (contrib.size() != static_cast<Eigen::Index>(blk.KLam.size()))
          throw std::runtime_error("lambda block dimension mismatch: " + blk.fid);
        for (size_t c = 0; c < blk.KLam.size(); ++c)
          r[off_lam + blk.KLam[c]] += contrib[static_cast<Eigen::Index>(c)];
        break;
      }
      case BlockKind::Xi: {
        Vec val = blk.eval3(gather(p.u, blk.Ku), gather(p.lam, blk.Klam), gather(p.v, blk.Kv));
        r.segment(off_xi + blk.row0, blk.out_dim) = val;
        break;
      }
      case BlockKind::Theta: {
        Vec val = blk.eval3(gather(p.u, blk.Ku), gather(p.lam, blk.Klam), gather(p.v, blk.Kv));
        for (int i = 0; i < blk.out_dim; ++i) {
          int j = d.nu_index.at(blk.par_labels[i]);
          r[off_theta + blk.row0 + i] = val[i] - p.nu[j];
        }
        break;
      }
    }
  }
  return r;
}

Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x,
                const std::vector<int>& skip) {
  const double sq = std::sqrt(std::numeric_limits<double>::epsilon());
  Vec f0 = f(x);
  Mat J = Mat::Zero(f0.size(), x.size());
  std::vector<bool> skipped(x.size(), false);
  for (int s : skip) skipped[s] = true;
  Vec xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (skipped[i]) continue;
    double h = sq * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + h;
    Vec fp = f(xp);
    xp[i] = x[i] - h;
    Vec fm = f(xp);
    xp[i] = x[i];
    J.col(i) = (fp - fm) / (2.0 * h);
  }
  return J;
}

SpMat adjoint_matrix(const ProblemHandle& h, const Vec& u) {
  const auto& d = h.data();
  std::vector<Triplet> trips;
  for (const auto& blk : d.blocks) {
    if (blk.kind != BlockKind::Lambda) continue;
    SpMat L = blk.lam_eval(gather(u, blk.Ku));
    if (L.rows() != blk.n_lam_new || L.cols() != static_cast<Eigen::Index>(blk.KLam.size()))
      throw std::runtime_error("lambda block shape mismatch: " + blk.fid);
    for (int k = 0; k < L.outerSize(); ++k)
      for (SpMat::InnerIterator it(L, k); it; ++it)
        trips.emplace_back(blk.KLam[it.col()], blk.lam_new0 + it.row(), it.value());
  }
  SpMat A(d.n_Lambda(), d.n_lam);
  A.setFromTriplets(trips.begin(), trips.end());
  return A;
}

SpMat jacobian(const ProblemHandle& h, const Point& p) {
  const auto& d = h.data();
  const int off_psi = d.n_phi;
  const int off_lam = off_psi + d.n_psi;
  const int off_xi = off_lam + d.n_Lambda();
  const int off_theta = off_xi + d.n_xi;
  const int cu = 0, clam = d.n_u, cv = d.n_u + d.n_lam;
  const int cmu = cv + d.n_v;
  const int cnu = cmu + static_cast<int>(d.mu_labels.size());
  const int ncols = cnu + static_cast<int>(d.nu_labels.size());

  std::vector<Triplet> trips;
  auto add_dense = [&trips](int r0, const std::vector<int>& colmap, const Mat& J, int c0 = 0) {
    for (Eigen::Index i = 0; i < J.rows(); ++i)
      for (Eigen::Index j = 0; j < J.cols(); ++j)
        if (J(i, j) != 0.0) trips.emplace_back(r0 + static_cast<int>(i),
                                               colmap[c0 + static_cast<size_t>(j)],
                                               J(i, j));
  };

  for (const auto& blk : d.blocks) {
    Vec usub = gather(p.u, blk.Ku);
    switch (blk.kind) {
      case BlockKind::Phi:
      case BlockKind::Psi: {
        std::vector<int> cmap(blk.Ku.size());
        for (size_t j = 0; j < blk.Ku.size(); ++j) cmap[j] = cu + blk.Ku[j];
        int r0 = (blk.kind == BlockKind::Phi) ? blk.row0 : off_psi + blk.row0;
        if (blk.deriv_sp) {
          SpMat Js = blk.deriv_sp(usub);
          for (int k = 0; k < Js.outerSize(); ++k)
            for (SpMat::InnerIterator it(Js, k); it; ++it)
              trips.emplace_back(r0 + static_cast<int>(it.row()), cmap[it.col()], it.value());
        } else {
          Mat J = blk.deriv ? blk.deriv(usub)
                            : fd_jacobian([&](const Vec& s) { return blk.eval(s); }, usub,
                                          blk.fd_skip);
          add_dense(r0, cmap, J);
        }
        if (blk.kind == BlockKind::Psi) {
          for (int i = 0; i < blk.out_dim; ++i) {
            int j = d.mu_index.at(blk.par_labels[i]);
            trips.emplace_back(off_psi + blk.row0 + i, cmu + j, -1.0);
          }
        }
        break;
      }
      case BlockKind::Lambda: {
        Vec lam_rows = p.lam.segment(blk.lam_new0, blk.n_lam_new);
        // d/dlam: Lambda^T entries (exact)
        SpMat L = blk.lam_eval(usub);
        for (int k = 0; k < L.outerSize(); ++k)
          for (SpMat::InnerIterator it(L, k); it; ++it)
            trips.emplace_back(off_lam + blk.KLam[it.col()], clam + blk.lam_new0 + it.row(),
                               it.value());
        // d/du: analytic when given, else FD on the contribution map; the
        // contribution is linear-homogeneous in lam so it vanishes when the
        // block's multipliers are all zero.
        if (lam_rows.size() > 0 && lam_rows.cwiseAbs().maxCoeff() > 0.0) {
          Mat Ju;
          if (blk.lam_deriv) {
            Ju = blk.lam_deriv(usub, lam_rows);
          } else if (blk.lam_apply) {
            Ju = fd_jacobian([&](const Vec& s) { return blk.lam_apply(s, lam_rows); }, usub,
                             blk.fd_skip);
          } else {
            Ju = fd_jacobian(
                [&](const Vec& s) { return Vec(blk.lam_eval(s).transpose() * lam_rows); }, usub,
                blk.fd_skip);
          }
          for (Eigen::Index i = 0; i < Ju.rows(); ++i)
            for (Eigen::Index j = 0; j < Ju.cols(); ++j)
              if (Ju(i, j) != 0.0)
                trips.emplace_back(off_lam + blk.KLam[static_cast<size_t>(i)],
                                   cu + blk.Ku[static_cast<size_t>(j)], Ju(i, j));
        }
        break;
      }
      case BlockKind::Xi:
      case BlockKind::Theta: {
        Vec lsub = gather(p.lam, blk.Klam);
        Vec vsub = gather(p.v, blk.Kv);
        Mat J;
        if (blk.deriv3) {
          J = blk.deriv3(usub, lsub, vsub);
        } else {
          Vec x0(usub.size() + lsub.size() + vsub.size());
          x0 << usub, lsub, vsub;
          auto f = [&](const Vec& x) {
            return blk.eval3(x.head(usub.size()), x.segment(usub.size(), lsub.size()),
                             x.tail(vsub.size()));
          };
          J = fd_jacobian(f, x0);
        }
        std::vector<int> cmap;
        cmap.reserve(blk.Ku.size() + blk.Klam.size() + blk.Kv.size());
        for (int k : blk.Ku) cmap.push_back(cu + k);
        for (int k : blk.Klam) cmap.push_back(clam + k);
        for (int k : blk.Kv) cmap.push_back(cv + k);
        int r0 = (blk.kind == BlockKind::Xi) ? off_xi + blk.row0 : off_theta + blk.row0;
        add_dense(r0, cmap, J);
        if (blk.kind == BlockKind::Theta) {
          for (int i = 0; i < blk.out_dim; ++i) {
            int j = d.nu_index.at(blk.par_labels[i]);
            trips.emplace_back(off_theta + blk.row0 + i, cnu + j, -1.0);
          }
        }
        break;
      }
    }
  }
  SpMat J(d.residual_dim(), ncols);
  J.setFromTriplets(trips.begin(), trips.end());
  return J;
}

int deficit(const ProblemHandle& h, const Restriction& r) {
  const auto& d = h.data();
  for (const auto& [k, v] : r.fixed_mu) (void)h.mu_index(k);
  for (const auto& [k, v] : r.fixed_nu) (void)h.nu_index(k);
  return d.n_u + d.n_lam + d.n_v - d.n_phi - d.n_Lambda() - d.n_xi -
         static_cast<int>(r.fixed_mu.size()) - static_cast<int>(r.fixed_nu.size());
}

RestrictedProblem::RestrictedProblem(ProblemHandle h, Restriction r)
    : h_(std::move(h)), r_(std::move(r)) {
  const auto& d = h_.data();
  for (size_t i = 0; i < d.mu_labels.size(); ++i) {
    if (!r_.fixed_mu.count(d.mu_labels[i])) {
      free_mu_.push_back(d.mu_labels[i]);
      free_mu_idx_.push_back(static_cast<int>(i));
    }
  }
  for (size_t i = 0; i < d.nu_labels.size(); ++i) {
    if (!r_.fixed_nu.count(d.nu_labels[i])) {
      free_nu_.push_back(d.nu_labels[i]);
      free_nu_idx_.push_back(static_cast<int>(i));
    }
  }
  for (const auto& [k, v] : r_.fixed_mu) (void)h_.mu_index(k);
  for (const auto& [k, v] : r_.fixed_nu) (void)h_.nu_index(k);
  dim_ = d.n_u + d.n_lam + d.n_v + static_cast<int>(free_mu_.size()) +
         static_cast<int>(free_nu_.size());
}

Vec RestrictedProblem::pack(const Point& p) const {
  const auto& d = h_.data();
  Vec x(dim_);
  x.head(d.n_u) = p.u;
  x.segment(d.n_u, d.n_lam) = p.lam;
  x.segment(d.n_u + d.n_lam, d.n_v) = p.v;
  int at = d.n_u + d.n_lam + d.n_v;
  for (size_t i = 0; i < free_mu_idx_.size(); ++i) x[at + static_cast<int>(i)] = p.mu[free_mu_idx_[i]];
  at += static_cast<int>(free_mu_idx_.size());
  for (size_t i = 0; i < free_nu_idx_.size(); ++i) x[at + static_cast<int>(i)] = p.nu[free_nu_idx_[i]];
  return x;
}

Point RestrictedProblem::unpack(const Vec& x) const {
  const auto& d = h_.data();
  Point p;
  p.u = x.head(d.n_u);
  p.lam = x.segment(d.n_u, d.n_lam);
  p.v = x.segment(d.n_u + d.n_lam, d.n_v);
  p.mu.resize(d.mu_labels.size());
  p.nu.resize(d.nu_labels.size());
  for (const auto& [k, v] : r_.fixed_mu) p.mu[h_.mu_index(k)] = v;
  for (const auto& [k, v] : r_.fixed_nu) p.nu[h_.nu_index(k)] = v;
  int at = d.n_u + d.n_lam + d.n_v;
  for (size_t i = 0; i < free_mu_idx_.size(); ++i) p.mu[free_mu_idx_[i]] = x[at + static_cast<int>(i)];
  at += static_cast<int>(free_mu_idx_.size());
  for (size_t i = 0; i < free_nu_idx_.size(); ++i) p.nu[free_nu_idx_[i]] = x[at + static_cast<int>(i)];
  return p;
}

Vec RestrictedProblem::residual(const Vec& x) const { return acp::residual(h_, unpack(x)); }

SpMat RestrictedProblem::jacobian(const Vec& x) const {
  const auto& d = h_.data();
  SpMat Jfull = acp::jacobian(h_, unpack(x));
  // keep u, lam, v columns; remap free mu/nu columns, drop fixed ones
  const int base = d.n_u + d.n_lam + d.n_v;
  std::vector<int> colmap(Jfull.cols(), -1);
  for (int i = 0; i < base; ++i) colmap[i] = i;
  for (size_t i = 0; i < free_mu_idx_.size(); ++i)
    colmap[base + free_mu_idx_[i]] = base + static_cast<int>(i);
  const int base_nu = base + static_cast<int>(d.mu_labels.size());
  for (size_t i = 0; i < free_nu_idx_.size(); ++i)
    colmap[base_nu + free_nu_idx_[i]] = base + static_cast<int>(free_mu_idx_.size()) + static_cast<int>(i);

  std::vector<Triplet> trips;
  trips.reserve(static_cast<size_t>(Jfull.nonZeros()));
  for (int k = 0; k < Jfull.outerSize(); ++k)
    for (SpMat::InnerIterator it(Jfull, k); it; ++it)
      if (colmap[it.col()] >= 0) trips.emplace_back(static_cast<int>(it.row()), colmap[it.col()], it.value());
  SpMat J(Jfull.rows(), dim_);
  J.setFromTriplets(trips.begin(), trips.end());
  return J;
}

int RestrictedProblem::mu_position(const std::string& label) const {
  const auto& d = h_.data();
  (void)h_.mu_index(label);
  for (size_t i = 0; i < free_mu_.size(); ++i)
    if (free_mu_[i] == label) return d.n_u + d.n_lam + d.n_v + static_cast<int>(i);
  return -1;
}

int RestrictedProblem::nu_position(const std::string& label) const {
  const auto& d = h_.data();
  (void)h_.nu_index(label);
  for (size_t i = 0; i < free_nu_.size(); ++i)
    if (free_nu_[i] == label)
      return d.n_u + d.n_lam + d.n_v + static_cast<int>(free_mu_.size()) + static_cast<int>(i);
  return -1;
}

std::string add_transpose_adjoint(AugmentedProblem& prob, const std::string& fid) {
  const auto& d = prob.data();
  auto it = d.block_index.find(fid);
  if (it == d.block_index.end()) throw std::invalid_argument("unknown block: " + fid);
  const FunctionBlock& blk = d.blocks[it->second];
  if (blk.kind != BlockKind::Phi && blk.kind != BlockKind::Psi)
    throw std::invalid_argument("add_transpose_adjoint: phi/psi blocks only");
  if (!blk.deriv) throw std::invalid_argument("add_transpose_adjoint: analytic derivative required");
  std::vector<ColumnRef> cols;
  cols.reserve(blk.Ku.size());
  for (int k : blk.Ku) cols.push_back(ColumnRef("du" + std::to_string(k)));
  MatFn deriv = blk.deriv;
  auto lam_eval = [deriv](const Vec& u) {
    Mat J = deriv(u);
    SpMat L(J.rows(), J.cols());
    std::vector<Triplet> trips;
    for (Eigen::Index r = 0; r < J.rows(); ++r)
      for (Eigen::Index c = 0; c < J.cols(); ++c)
        if (J(r, c) != 0.0)
          trips.emplace_back(static_cast<int>(r), static_cast<int>(c), J(r, c));
    L.setFromTriplets(trips.begin(), trips.end());
    return L;
  };
  return prob.add_lambda("adj." + fid, blk.Ku, Vec::Zero(blk.out_dim), cols, lam_eval);
}

}  // namespace contbox::acp
