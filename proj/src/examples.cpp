#include "contbox/examples.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "contbox/examples_detail.hpp"
#include "contbox/io.hpp"

namespace contbox::examples {

std::vector<std::string> registry() {
  return {"linosc-inflection", "linosc-sensitivity", "data-assim",      "connecting",
          "mackey-prc",        "duffing-delay",      "optimal-control", "quasi-torus"};
}

namespace detail {

double scan_svmin(const acp::ProblemHandle& h, const acp::Point& p,
                  const std::vector<int>& drop_u_cols,
                  const std::vector<std::pair<std::string, double>>& extra_row_monitors,
                  const std::function<void(Mat&)>& postprocess) {
  const auto& d = h.data();
  Mat Jfull = Mat(acp::jacobian(h, p));
  std::vector<bool> keep(d.n_u, true);
  for (int c : drop_u_cols) keep[c] = false;
  std::vector<int> cols;
  for (int c = 0; c < d.n_u; ++c)
    if (keep[c]) cols.push_back(c);
  Mat J = Mat::Zero(d.n_phi + static_cast<int>(extra_row_monitors.size()),
                    static_cast<int>(cols.size()));
  for (size_t c = 0; c < cols.size(); ++c)
    J.col(static_cast<int>(c)).head(d.n_phi) = Jfull.col(cols[c]).head(d.n_phi);
  int at = d.n_phi;
  for (const auto& [label, scale] : extra_row_monitors) {
    std::string fid = d.block_index.count("mon." + label) ? "mon." + label : label;
    const auto& blk = h.block(fid);
    Vec usub(blk.Ku.size());
    for (size_t k = 0; k < blk.Ku.size(); ++k)
      usub[static_cast<Eigen::Index>(k)] = p.u[blk.Ku[k]];
    Mat g = blk.deriv ? blk.deriv(usub)
                      : acp::fd_jacobian([&](const Vec& s) { return blk.eval(s); }, usub);
    Vec row = Vec::Zero(d.n_u);
    for (size_t k = 0; k < blk.Ku.size(); ++k) row[blk.Ku[k]] = g(0, static_cast<int>(k));
    for (size_t c = 0; c < cols.size(); ++c) J(at, static_cast<int>(c)) = scale * row[cols[c]];
    ++at;
  }
  if (postprocess) postprocess(J);
  Eigen::BDCSVD<Mat> svd(J);
  return svd.singularValues().minCoeff();
}

}  // namespace detail

namespace {

namespace fs = std::filesystem;

std::string out_path(const ExampleConfig& cfg, const std::string& file) {
  fs::create_directories(cfg.out_dir);
  return (fs::path(cfg.out_dir) / file).string();
}

double par_or(const ExampleConfig& cfg, const std::string& key, double dflt) {
  auto it = cfg.pars.find(key);
  return it == cfg.pars.end() ? dflt : it->second;
}

RunResult run_linosc_inflection(const ExampleConfig& cfg) {
  auto res = detail::run_inflection(par_or(cfg, "zeta", 0.3), par_or(cfg, "eps", 1e-3),
                                    par_or(cfg, "om_start", 0.5));
  RunResult out;
  out.summary["omega1"] = res.omega1;
  out.summary["omega2"] = res.omega2;
  out.summary["poly_residual"] = res.poly_residual;
  out.summary["oracle_root"] = res.oracle_root;
  out.summary["eta_obj"] = res.eta_obj;
  for (int k = 0; k < 7; ++k) {
    out.summary["lambda" + std::to_string(k + 1)] = res.lambdas[k];
    out.summary["lambda" + std::to_string(k + 1) + "_closed"] = res.lambdas_closed[k];
  }
  io::write_summary(out.summary, out_path(cfg, "summary.json"));
  out.files = {out_path(cfg, "summary.json")};
  return out;
}

RunResult run_linosc_sensitivity(const ExampleConfig& cfg) {
  double zeta = par_or(cfg, "zeta", 5e-3);
  auto scan = detail::run_linosc_sensitivity(zeta, {"fix-ab", "fix-amp", "fix-b", "free"});
  RunResult out;
  std::string path = out_path(cfg, "svd_scan.csv");
  std::ofstream fout(path);
  fout << "phase,fix-ab,fix-amp,fix-b,free\n";
  for (size_t k = 0; k < scan.phase.size(); ++k) {
    fout << io::format_g17(scan.phase[k]);
    for (const char* s : {"fix-ab", "fix-amp", "fix-b", "free"})
      fout << "," << io::format_g17(scan.svmin[s][k]);
    fout << "\n";
  }
  out.summary["zeta"] = zeta;
  out.summary["svmin_fixab_peak"] =
      *std::min_element(scan.svmin["fix-ab"].begin(), scan.svmin["fix-ab"].end());
  out.summary["svmin_closed_at_peak"] = detail::linosc_sigma_min_closed(zeta, 1.0);
  io::write_summary(out.summary, out_path(cfg, "summary.json"));
  out.files = {path, out_path(cfg, "summary.json")};
  return out;
}

}  // namespace

RunResult run_example(const ExampleConfig& cfg) {
  if (cfg.name == "linosc-inflection") return run_linosc_inflection(cfg);
  if (cfg.name == "linosc-sensitivity") return run_linosc_sensitivity(cfg);
  std::string names;
  for (const auto& n : registry()) names += (names.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown example '" + cfg.name + "'; registry: " + names);
}

RunResult svd_scan(const std::string& example, const std::vector<std::string>& scenarios,
                   const ExampleConfig& cfg, bool scale_delta_cols) {
  (void)scenarios;
  (void)scale_delta_cols;
  if (example == "linosc-sensitivity") return run_linosc_sensitivity(cfg);
  throw std::invalid_argument("svd_scan: unsupported example " + example);
}

}  // namespace contbox::examples
