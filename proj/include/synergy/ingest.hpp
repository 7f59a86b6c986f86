#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "synergy/common.hpp"

namespace synergy {

struct SynergyRecord {
  std::uint64_t row_id = 0;
  std::string drug1;
  std::string drug2;
  std::string cell_line;
  std::string tissue;
  double ri1 = 0.0;
  double ri2 = 0.0;
  double loewe = 0.0;
};

// Loewe scores are accepted in [kLoeweMin, kLoeweMax]; anything above
// kLoeweWarn is kept but reported.
inline constexpr double kLoeweMin = -100.0;
inline constexpr double kLoeweMax = 100.0;
inline constexpr double kLoeweWarn = 75.0;

struct LabeledExample {
  SynergyRecord record;
  int label = 0;
};

// Source column for each record field. `row_id` may be empty, in which case
// the 1-based physical line number of the row is used.
struct ColumnMapping {
  std::string drug1 = "drug_row";
  std::string drug2 = "drug_col";
  std::string cell_line = "cell_line_name";
  std::string tissue = "tissue_name";
  std::string ri1 = "ri_row";
  std::string ri2 = "ri_col";
  std::string loewe = "synergy_loewe";
  std::string row_id;
  char delimiter = ',';

  // Mapping for the normalized CSV written by write_records().
  static ColumnMapping normalized() {
    ColumnMapping m;
    m.drug1 = "drug1";
    m.drug2 = "drug2";
    m.cell_line = "cell_line";
    m.tissue = "tissue";
    m.ri1 = "ri1";
    m.ri2 = "ri2";
    m.loewe = "loewe";
    m.row_id = "row_id";
    return m;
  }
};

struct Rejection {
  std::size_t line = 0;
  std::string reason;
};

struct ParseResult {
  std::vector<SynergyRecord> records;
  std::vector<Rejection> rejections;
  std::vector<Rejection> warnings;
};

inline void write_rejections(std::ostream& os, const std::vector<Rejection>& rs) {
  for (const auto& r : rs) os << "line=" << r.line << " reason=" << r.reason << '\n';
}

namespace csv {

// Reads one logical row (RFC 4180 quoting). Returns false at end of input.
// `line` is advanced by the number of physical lines consumed.
inline bool read_row(std::istream& in, char delim, std::vector<std::string>& fields,
                     std::size_t& line) {
  fields.clear();
  if (in.peek() == std::char_traits<char>::eof()) return false;
  std::string field;
  bool quoted = false;
  bool any = false;
  ++line;
  for (int ch = in.get(); ch != std::char_traits<char>::eof(); ch = in.get()) {
    any = true;
    const char c = static_cast<char>(ch);
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

inline std::string quote(const std::string& s, char delim = ',') {
  if (s.find_first_of(std::string{delim, '"', '\n', '\r'}) == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace csv

// Parse delimiter-separated synergy rows. Rows that fail the record
// invariants are reported in `rejections`; a mapped column missing from the
// header is a SchemaError.
inline ParseResult parse_records(std::istream& in, const ColumnMapping& mapping = {}) {
  ParseResult out;
  std::vector<std::string> header;
  std::size_t line = 0;
  if (!csv::read_row(in, mapping.delimiter, header, line)) {
    throw SchemaError("missing header row");
  }
  for (auto& h : header) h = trim(h);
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);

  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("missing mapped column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_d1 = column(mapping.drug1);
  const std::size_t c_d2 = column(mapping.drug2);
  const std::size_t c_cell = column(mapping.cell_line);
  const std::size_t c_tissue = column(mapping.tissue);
  const std::size_t c_ri1 = column(mapping.ri1);
  const std::size_t c_ri2 = column(mapping.ri2);
  const std::size_t c_loewe = column(mapping.loewe);
  const bool has_row_id = !mapping.row_id.empty();
  const std::size_t c_row = has_row_id ? column(mapping.row_id) : 0;

  std::vector<std::string> fields;
  while (true) {
    const std::size_t start_line = line + 1;
    if (!csv::read_row(in, mapping.delimiter, fields, line)) break;
    if (fields.size() == 1 && trim(fields[0]).empty()) continue;  // blank line
    auto reject = [&](std::string reason) {
      out.rejections.push_back({start_line, std::move(reason)});
    };
    if (fields.size() != header.size()) {
      reject("expected " + std::to_string(header.size()) + " fields, got " +
             std::to_string(fields.size()));
      continue;
    }
    SynergyRecord r;
    r.row_id = start_line;
    if (has_row_id) {
      double v;
      if (!parse_real(fields[c_row], v) || v < 0 || v != std::floor(v)) {
        reject("unparseable row_id");
        continue;
      }
      r.row_id = static_cast<std::uint64_t>(v);
    }
    r.drug1 = trim(fields[c_d1]);
    r.drug2 = trim(fields[c_d2]);
    r.cell_line = trim(fields[c_cell]);
    r.tissue = trim(fields[c_tissue]);
    if (r.drug1.empty() || r.drug2.empty() || r.cell_line.empty() || r.tissue.empty()) {
      reject("empty identifier");
      continue;
    }
    struct Numeric {
      const char* name;
      std::size_t col;
      double* dst;
    };
    bool ok = true;
    for (const Numeric& n : {Numeric{"ri1", c_ri1, &r.ri1}, Numeric{"ri2", c_ri2, &r.ri2},
                             Numeric{"loewe", c_loewe, &r.loewe}}) {
      if (!parse_real(fields[n.col], *n.dst)) {
        reject(std::string("unparseable ") + n.name + " '" + trim(fields[n.col]) + "'");
        ok = false;
        break;
      }
      if (!std::isfinite(*n.dst)) {
        reject(std::string("non-finite ") + n.name);
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    if (r.loewe < kLoeweMin || r.loewe > kLoeweMax) {
      reject("loewe " + format_real(r.loewe) + " outside [-100, 100]");
      continue;
    }
    if (r.loewe > kLoeweWarn) {
      out.warnings.push_back({start_line, "loewe " + format_real(r.loewe) + " above 75"});
    }
    out.records.push_back(std::move(r));
  }
  return out;
}

// Shortest text that parses back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Header from `mapping`; the row id column is written only when mapped.
inline void write_records(std::ostream& os, const std::vector<SynergyRecord>& records, const ColumnMapping& mapping) {
  const char d = mapping.delimiter;
  const bool ids = !mapping.row_id.empty();
  if (ids) os << csv::quote(mapping.row_id, d) << d;
  os << csv::quote(mapping.drug1, d) << d << csv::quote(mapping.drug2, d) << d << csv::quote(mapping.cell_line, d) << d
     << csv::quote(mapping.tissue, d) << d << csv::quote(mapping.ri1, d) << d << csv::quote(mapping.ri2, d) << d
     << csv::quote(mapping.loewe, d) << '\n';
  for (const auto& r : records) {
    const auto ri1 = shortest(r.ri1), ri2 = shortest(r.ri2), lw = shortest(r.loewe);
    if (ids) os << r.row_id << d;
    os << csv::quote(r.drug1, d) << d << csv::quote(r.drug2, d) << d << csv::quote(r.cell_line, d) << d
       << csv::quote(r.tissue, d) << d << ri1 << d << ri2 << d << lw << '\n';
  }
}

inline void write_records(std::ostream& os, const std::vector<SynergyRecord>& records) {
  write_records(os, records, ColumnMapping::normalized());
}

// label = 1 iff loewe > threshold (strict).
inline std::vector<LabeledExample> label_examples(const std::vector<SynergyRecord>& records,
                                                  double threshold = 5.0) {
  std::vector<LabeledExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r, r.loewe > threshold ? 1 : 0});
  return out;
}

struct TissuePartition {
  std::map<std::string, std::vector<LabeledExample>> rare;
  std::vector<LabeledExample> common;
  std::size_t rare_threshold = 4000;
};

// Tissues with fewer than `rare_threshold` examples are rare.
inline TissuePartition partition_by_tissue(const std::vector<LabeledExample>& examples,
                                           std::size_t rare_threshold = 4000) {
  std::map<std::string, std::size_t> counts;
  for (const auto& e : examples) ++counts[e.record.tissue];
  TissuePartition p;
  p.rare_threshold = rare_threshold;
  for (const auto& e : examples) {
    if (counts[e.record.tissue] < rare_threshold) {
      p.rare[e.record.tissue].push_back(e);
    } else {
      p.common.push_back(e);
    }
  }
  return p;
}

struct TissueCounts {
  std::size_t n0 = 0;
  std::size_t n1 = 0;
};

struct DatasetSummary {
  std::map<std::string, TissueCounts> tissues;
  std::size_t unique_drugs = 0;
  std::size_t unique_cell_lines = 0;
  std::size_t total_rows = 0;
  // Rows whose (drug1, drug2, cell line) triple occurred earlier; kept.
  std::size_t duplicate_rows = 0;
};

inline DatasetSummary summarize(const std::vector<LabeledExample>& examples) {
  DatasetSummary s;
  std::set<std::string> drugs, cells;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  for (const auto& e : examples) {
    auto& c = s.tissues[e.record.tissue];
    (e.label == 1 ? c.n1 : c.n0)++;
    drugs.insert(e.record.drug1);
    drugs.insert(e.record.drug2);
    cells.insert(e.record.cell_line);
    if (!seen.emplace(e.record.drug1, e.record.drug2, e.record.cell_line).second) {
      ++s.duplicate_rows;
    }
  }
  s.unique_drugs = drugs.size();
  s.unique_cell_lines = cells.size();
  s.total_rows = examples.size();
  return s;
}

inline void write_summary(std::ostream& os, const DatasetSummary& s) {
  os << "tissue,n0,n1\n";
  for (const auto& [tissue, c] : s.tissues) {
    os << csv::quote(tissue) << ',' << c.n0 << ',' << c.n1 << '\n';
  }
}

}  // namespace synergy
