#pragma once

#include <optional>
#include <string>
#include <vector>

#include "contbox/ddecoll.hpp"

namespace contbox::graph {

/// Duration/delay entries are either fixed numbers or named parameters.
struct Quantity {
  double value = 0.0;
  std::string par;  // non-empty: value is the parameter's initial value
  bool is_par() const { return !par.empty(); }
};

struct Node {
  std::string id;
  int n = 1;
  Quantity T;      // duration, > 0
  Quantity alpha;  // delay, >= 0
  std::string field;  // field id, informational
};

struct Edge {
  int from = 0, to = 0;  // `to` is a predecessor of `from`
  Mat B;                 // n_from x n_to
};

struct DelayGraph {
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::vector<int> predecessors(int i) const;
  const Edge* edge(int from, int to) const;
};

struct History {
  std::vector<int> kappa;  // (kappa_1 = i, ..., kappa_ell)
  int ell = 0, iota = 0;   // 1-based as in the defining inequalities
  std::vector<double> boundaries;  // internal boundaries alpha_i - sum T
};

/// Depth-first enumeration of predecessor paths whose cumulative duration
/// covers the segment's delay; depth capped at 32.
std::vector<History> enumerate_histories(const DelayGraph& g, int i);

struct Diagnostic {
  std::string message;
};

struct Report {
  std::vector<Diagnostic> errors;
  bool ok() const { return errors.empty(); }
};

Report validate(const DelayGraph& g);

/// Compiled fragments: coupling blocks per segment (one y column each),
/// boundary conditions from the predecessor structure, and per-segment
/// supplements pinning durations, initial times and the remaining coupling
/// degree of freedom.
struct Compiled {
  std::vector<std::vector<ddecoll::CouplingBlock>> couplings;  // per segment
  std::vector<ddecoll::BoundaryCondition> bcs;
  std::vector<ddecoll::AlgebraicLink> links;
  std::vector<std::string> p_labels;
  Vec p0;
};

/// `slack_branches` keeps one redundant coupling condition on each side so a
/// sweep may cross alpha/T thresholds; the matching redundant continuity is
/// dropped by construction of the interval partition.
Compiled compile(const DelayGraph& g, bool slack_branches = false);

/// JSON graph file: {"nodes":[{id,n,T,alpha,field}], "edges":[{from,to,B}]}
/// where T/alpha are numbers or parameter-name strings and B is row-major.
DelayGraph load_graph(const std::string& path);
DelayGraph parse_graph(const std::string& json_text);

}  // namespace contbox::graph
