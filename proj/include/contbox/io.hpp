#pragma once

#include <map>
#include <string>
#include <vector>

#include "contbox/atlas.hpp"

namespace contbox::io {

/// Flat chart record for export; numeric fields round-trip bit-exactly
/// through the 17-significant-digit text forms.
struct ChartRecord {
  int branch = 0, pt = 0;
  std::map<std::string, double> pars;
  double norm = 0.0;
  std::vector<std::string> labels;
  double sv_min = -1.0;  // emitted only when >= 0
};

ChartRecord record_of(const acp::ProblemHandle& h, const atlas::Chart& c);

void export_jsonl(const std::vector<ChartRecord>& recs, const std::string& path);
std::vector<ChartRecord> import_jsonl(const std::string& path);

void export_csv(const std::vector<ChartRecord>& recs, const std::string& path);
std::vector<ChartRecord> import_csv(const std::string& path);

/// Deterministic summary JSON: keys sorted, numbers at 17 significant digits.
void write_summary(const std::map<std::string, double>& values, const std::string& path);

std::string format_g17(double v);

}  // namespace contbox::io
