#include "contbox/io.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace contbox::io {

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

ChartRecord record_of(const acp::ProblemHandle& h, const atlas::Chart& c) {
  ChartRecord r;
  r.branch = c.branch_id;
  r.pt = c.point_id;
  const auto& d = h.data();
  for (size_t i = 0; i < d.mu_labels.size(); ++i) r.pars[d.mu_labels[i]] = c.point.mu[i];
  for (size_t i = 0; i < d.nu_labels.size(); ++i) r.pars[d.nu_labels[i]] = c.point.nu[i];
  r.norm = c.point.u.norm();
  r.labels = c.labels;
  r.sv_min = c.sv_min;
  return r;
}

void export_jsonl(const std::vector<ChartRecord>& recs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("unwritable path: " + path);
  for (const auto& r : recs) {
    // hand-rolled object so numeric fields keep the 17-digit text form
    out << "{\"branch\":" << r.branch << ",\"pt\":" << r.pt << ",\"pars\":{";
    bool first = true;
    for (const auto& [k, v] : r.pars) {
      if (!first) out << ",";
      first = false;
      out << nlohmann::json(k).dump() << ":" << format_g17(v);
    }
    out << "},\"norm\":" << format_g17(r.norm) << ",\"labels\":" << nlohmann::json(r.labels).dump();
    if (r.sv_min >= 0.0) out << ",\"sv_min\":" << format_g17(r.sv_min);
    out << "}\n";
  }
}

std::vector<ChartRecord> import_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<ChartRecord> recs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    ChartRecord r;
    r.branch = j.at("branch").get<int>();
    r.pt = j.at("pt").get<int>();
    for (auto& [k, v] : j.at("pars").items()) r.pars[k] = v.get<double>();
    r.norm = j.at("norm").get<double>();
    if (j.contains("labels"))
      for (const auto& l : j["labels"]) r.labels.push_back(l.get<std::string>());
    if (j.contains("sv_min")) r.sv_min = j["sv_min"].get<double>();
    recs.push_back(r);
  }
  return recs;
}

void export_csv(const std::vector<ChartRecord>& recs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("unwritable path: " + path);
  if (recs.empty()) return;
  out << "branch,pt";
  for (const auto& [k, v] : recs.front().pars) out << "," << k;
  out << ",norm\n";
  for (const auto& r : recs) {
    out << r.branch << "," << r.pt;
    for (const auto& [k, v] : r.pars) out << "," << format_g17(v);
    out << "," << format_g17(r.norm) << "\n";
  }
}

std::vector<ChartRecord> import_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<ChartRecord> recs;
  std::string header;
  if (!std::getline(in, header)) return recs;
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    ChartRecord r;
    size_t at = 0;
    while (std::getline(ss, cell, ',')) {
      if (cols[at] == "branch")
        r.branch = std::stoi(cell);
      else if (cols[at] == "pt")
        r.pt = std::stoi(cell);
      else if (cols[at] == "norm")
        r.norm = std::stod(cell);
      else
        r.pars[cols[at]] = std::stod(cell);
      ++at;
    }
    recs.push_back(r);
  }
  return recs;
}

void write_summary(const std::map<std::string, double>& values, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("unwritable path: " + path);
  out << "{\n";
  bool first = true;
  for (const auto& [k, v] : values) {
    if (!first) out << ",\n";
    first = false;
    out << "  " << nlohmann::json(k).dump() << ": " << format_g17(v);
  }
  out << "\n}\n";
}

}  // namespace contbox::io
