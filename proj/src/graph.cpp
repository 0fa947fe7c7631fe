#include "contbox/graph.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace contbox::graph {

std::vector<int> DelayGraph::predecessors(int i) const {
  std::vector<int> out;
  for (const auto& e : edges)
    if (e.from == i) out.push_back(e.to);
  return out;
}

const Edge* DelayGraph::edge(int from, int to) const {
  for (const auto& e : edges)
    if (e.from == from && e.to == to) return &e;
  return nullptr;
}

namespace {
constexpr int kDepthCap = 32;

void dfs_histories(const DelayGraph& g, int i, std::vector<int>& path, double acc,
                   std::vector<History>& out) {
  const double alpha = g.nodes[i].alpha.value;
  int cur = path.back();
  if (static_cast<int>(path.size()) > kDepthCap) return;
  for (int pre : g.predecessors(cur)) {
    double acc2 = acc + g.nodes[pre].T.value;
    path.push_back(pre);
    if (acc < alpha && alpha <= acc2) {
      History h;
      h.kappa = path;
      h.ell = static_cast<int>(path.size());
      out.push_back(h);
    } else if (acc2 < alpha) {
      dfs_histories(g, i, path, acc2, out);
    }
    path.pop_back();
  }
}

}  // namespace

std::vector<History> enumerate_histories(const DelayGraph& g, int i) {
  if (i < 0 || i >= static_cast<int>(g.nodes.size()))
    throw std::out_of_range("enumerate_histories: node index");
  std::vector<History> out;
  const double alpha = g.nodes[i].alpha.value;
  if (alpha <= 0.0) return out;
  std::vector<int> path{i};
  dfs_histories(g, i, path, 0.0, out);
  // iota: smallest index with alpha_i < T_i + sum_{j=2}^{iota} T
  for (auto& h : out) {
    double Ti = g.nodes[i].T.value;
    double acc = 0.0;
    h.iota = h.ell;  // fallback
    for (int idx = 1; idx <= h.ell; ++idx) {
      if (idx >= 2) acc += g.nodes[h.kappa[idx - 1]].T.value;
      if (alpha < Ti + acc) {
        h.iota = idx;
        break;
      }
    }
    // internal boundaries alpha - sum_{j=2}^{ell-k} T, k = 1..ell-iota
    for (int k = 1; k <= h.ell - h.iota; ++k) {
      double s = 0.0;
      for (int j = 2; j <= h.ell - k; ++j) s += g.nodes[h.kappa[j - 1]].T.value;
      h.boundaries.push_back(alpha - s);
    }
  }
  return out;
}

Report validate(const DelayGraph& g) {
  Report rep;
  auto err = [&rep](const std::string& m) { rep.errors.push_back({m}); };
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    if (g.nodes[i].T.value <= 0.0)
      err("node " + g.nodes[i].id + ": duration must be positive");
    if (g.nodes[i].alpha.value < 0.0)
      err("node " + g.nodes[i].id + ": delay must be non-negative");
  }
  for (const auto& e : g.edges) {
    if (e.from < 0 || e.from >= static_cast<int>(g.nodes.size()) || e.to < 0 ||
        e.to >= static_cast<int>(g.nodes.size())) {
      err("edge references unknown node");
      continue;
    }
    int ni = g.nodes[e.from].n, nj = g.nodes[e.to].n;
    if (e.B.rows() != ni || e.B.cols() != nj) {
      std::ostringstream os;
      os << "edge (" << e.from << "," << e.to << "): B is " << e.B.rows() << "x" << e.B.cols()
         << ", expected " << ni << "x" << nj;
      err(os.str());
    }
  }
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    if (g.nodes[i].alpha.value > 0.0) {
      auto hs = enumerate_histories(g, static_cast<int>(i));
      if (hs.empty()) {
        err("node " + g.nodes[i].id + ": delay unreachable (no history exists)");
        continue;
      }
      // all histories must share the duration sequence
      for (size_t h = 1; h < hs.size(); ++h) {
        if (hs[h].ell != hs[0].ell) {
          err("node " + g.nodes[i].id + ": histories with differing duration sequences");
          break;
        }
        bool same = true;
        for (int j = 2; j <= hs[0].ell; ++j)
          if (g.nodes[hs[h].kappa[j - 1]].T.value != g.nodes[hs[0].kappa[j - 1]].T.value)
            same = false;
        if (!same) {
          err("node " + g.nodes[i].id + ": histories with differing duration sequences");
          break;
        }
      }
    }
  }
  return rep;
}

namespace {

struct ParTable {
  std::vector<std::string> labels;
  std::vector<double> vals;
  int index(const Quantity& q) {
    if (!q.is_par()) return -1;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == q.par) return static_cast<int>(i);
    labels.push_back(q.par);
    vals.push_back(q.value);
    return static_cast<int>(labels.size()) - 1;
  }
};

// term for "value or parameter" with a sign
void push_quantity(ddecoll::AlgebraicLink& link, const Quantity& q, double sign, ParTable& pars) {
  if (q.is_par()) {
    link.terms.push_back({sign, ddecoll::Ref::par(pars.index(q)), ddecoll::Ref::one()});
  } else {
    link.rhs -= sign * q.value;
  }
}

}  // namespace

Compiled compile(const DelayGraph& g, bool slack_branches) {
  Report rep = validate(g);
  if (!rep.ok()) throw std::invalid_argument("compile: invalid graph: " + rep.errors[0].message);
  const int M = static_cast<int>(g.nodes.size());
  Compiled out;
  out.couplings.resize(M);
  ParTable pars;

  // Durations and initial times of every node are pinned first so the links
  // referencing them below stay well-posed.
  for (int i = 0; i < M; ++i) {
    ddecoll::AlgebraicLink lT;
    lT.name = g.nodes[i].id + ".T";
    lT.terms.push_back({1.0, ddecoll::Ref::t(i), ddecoll::Ref::one()});
    push_quantity(lT, g.nodes[i].T, -1.0, pars);
    out.links.push_back(lT);
    ddecoll::AlgebraicLink lT0;
    lT0.name = g.nodes[i].id + ".T0";
    lT0.terms.push_back({1.0, ddecoll::Ref::t0(i), ddecoll::Ref::one()});
    out.links.push_back(lT0);
  }

  for (int i = 0; i < M; ++i) {
    auto preds = g.predecessors(i);
    if (!preds.empty()) {
      ddecoll::BoundaryCondition bc;
      bc.segment = i;
      for (int j : preds) {
        const Edge* e = g.edge(i, j);
        ddecoll::ParMatrix B;
        B.value = e->B;
        bc.terms.emplace_back(j, B);
      }
      out.bcs.push_back(bc);
    }

    const double alpha = g.nodes[i].alpha.value;
    const double Ti = g.nodes[i].T.value;
    if (alpha <= 0.0) continue;  // no coupling needed unless alpha > 0

    auto hists = enumerate_histories(g, i);
    if (slack_branches) {
      // extend every history by one extra predecessor level where possible;
      // the extra condition has an empty interval at the current parameters.
      std::vector<History> ext;
      for (const auto& h : hists) {
        auto more = g.predecessors(h.kappa.back());
        if (more.empty()) {
          ext.push_back(h);
          continue;
        }
        for (int pre : more) {
          History h2 = h;
          h2.kappa.push_back(pre);
          h2.ell = h.ell + 1;
          h2.iota = h.iota;
          h2.boundaries = h.boundaries;
          h2.boundaries.insert(h2.boundaries.begin(), 0.0);
          ext.push_back(h2);
        }
      }
      hists = ext;
    }
    const History& h0 = hists[0];
    const int C = h0.ell - h0.iota + 1;

    // boundaries ascending; blocks k = 1..C
    std::vector<double> bnd = h0.boundaries;
    std::vector<ddecoll::CouplingBlock> blocks(C);
    for (int k = 1; k <= C; ++k) {
      auto& blk = blocks[k - 1];
      double lo = (k == 1) ? 0.0 : bnd[k - 2];
      double hi = (k == C) ? Ti : bnd[k - 1];
      lo = std::max(0.0, lo);
      blk.gamma_b0 = lo / Ti;
      blk.gamma_e0 = hi / Ti;
      // distinct expansion-prefixes of depth ell-k+1; composite matrices are
      // the products along the prefix (empty product = identity)
      std::map<std::vector<int>, Mat> prefixes;
      int depth = h0.ell - k + 1;
      for (const auto& h : hists) {
        std::vector<int> pre(h.kappa.begin(), h.kappa.begin() + depth);
        if (prefixes.count(pre)) continue;
        Mat A = Mat::Identity(g.nodes[i].n, g.nodes[i].n);
        for (int f = 0; f + 1 < depth; ++f) A = A * g.edge(pre[f], pre[f + 1])->B;
        prefixes[pre] = A;
      }
      double shift_sum = 0.0;  // sum_{j=2}^{ell-k+1} T
      for (int j = 2; j <= h0.ell - k + 1; ++j) shift_sum += g.nodes[h0.kappa[j - 1]].T.value;
      blk.delta0 = (alpha - shift_sum) / Ti;
      int src = h0.kappa[depth - 1];
      blk.target_duration = src;
      for (auto& [pre, A] : prefixes) {
        ddecoll::Summand s;
        s.A.value = A;
        s.source = pre.back();
        blk.summands.push_back(s);
      }
    }
    out.couplings[i] = blocks;

    // One supplement pins the remaining degree of freedom: the delay of the
    // last block, Delta_C * T_i = alpha - sum_{j=2}^{iota} T.
    ddecoll::AlgebraicLink pin;
    pin.name = g.nodes[i].id + ".delta";
    pin.terms.push_back({1.0, ddecoll::Ref::delta(i, 0, C - 1), ddecoll::Ref::t(i)});
    push_quantity(pin, g.nodes[i].alpha, -1.0, pars);
    for (int j = 2; j <= h0.iota; ++j)
      pin.terms.push_back({1.0, ddecoll::Ref::t(h0.kappa[j - 1]), ddecoll::Ref::one()});
    out.links.push_back(pin);
  }

  out.p_labels = pars.labels;
  out.p0 = Eigen::Map<Vec>(pars.vals.data(), static_cast<Eigen::Index>(pars.vals.size()));
  return out;
}

DelayGraph parse_graph(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  DelayGraph g;
  auto quantity = [](const nlohmann::json& v) {
    Quantity q;
    if (v.is_string())
      q.par = v.get<std::string>();
    else
      q.value = v.get<double>();
    return q;
  };
  for (const auto& nd : j.at("nodes")) {
    Node n;
    n.id = nd.value("id", std::string("node") + std::to_string(g.nodes.size()));
    n.n = nd.value("n", 1);
    n.T = quantity(nd.at("T"));
    n.alpha = quantity(nd.at("alpha"));
    n.field = nd.value("field", std::string());
    g.nodes.push_back(n);
  }
  for (const auto& ed : j.at("edges")) {
    Edge e;
    e.from = ed.at("from").get<int>();
    e.to = ed.at("to").get<int>();
    auto b = ed.at("B");
    int nf = g.nodes[e.from].n, nt = g.nodes[e.to].n;
    e.B.resize(nf, nt);
    int idx = 0;
    for (const auto& val : b) {
      if (idx >= nf * nt) throw std::invalid_argument("graph edge matrix too long");
      e.B(idx / nt, idx % nt) = val.get<double>();
      ++idx;
    }
    if (idx != nf * nt) throw std::invalid_argument("graph edge matrix too short");
    g.edges.push_back(e);
  }
  return g;
}

DelayGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_graph(ss.str());
}

}  // namespace contbox::graph
