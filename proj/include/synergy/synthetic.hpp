#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "synergy/common.hpp"
#include "synergy/ingest.hpp"

// Synthetic synergy screens used by the tests, the acceptance suite and the
// CLI `synth` subcommand.
namespace synergy::synthetic {

struct TissueCountSpec {
  std::string tissue;
  std::size_t n0 = 0;
  std::size_t n1 = 0;
  std::size_t n_cells = 4;
};

// Label counts of the seven rare tissues of the reference screen.
inline std::vector<TissueCountSpec> rare_tissue_counts() {
  return {{"pancreas", 38, 1, 2},        {"endometrium", 36, 32, 3},   {"liver", 192, 21, 4},
          {"soft tissue", 269, 83, 6},   {"stomach", 1081, 109, 8},    {"urinary tract", 1996, 462, 10},
          {"bone", 3732, 253, 12}};
}

inline const std::vector<std::string>& drug_names() {
  static const std::vector<std::string> names{
      "lonidamine",  "AZD1775",     "AZACITIDINE", "vorinostat",  "bortezomib",  "gemcitabine",
      "paclitaxel",  "docetaxel",   "cisplatin",   "carboplatin", "doxorubicin", "etoposide",
      "topotecan",   "irinotecan",  "sorafenib",   "sunitinib",   "erlotinib",   "gefitinib",
      "lapatinib",   "imatinib",    "dasatinib",   "nilotinib",   "everolimus",  "temsirolimus",
      "olaparib",    "veliparib",   "trametinib",  "dabrafenib",  "vemurafenib", "selumetinib",
      "MK-2206",     "BEZ-235",     "ABT-888",     "SN-38",       "5-FU",        "methotrexate",
      "oxaliplatin", "fludarabine", "decitabine",  "bosutinib"};
  return names;
}

inline std::string drug_name(std::size_t i) {
  const auto& names = drug_names();
  if (i < names.size()) return names[i];
  std::string n = std::to_string(i);
  return "DRUG-" + std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n;
}

inline std::string cell_name(const std::string& tissue, std::size_t i) {
  std::string prefix;
  for (char c : tissue) {
    if (std::isalpha(static_cast<unsigned char>(c)) && prefix.size() < 3) {
      prefix.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
  }
  return prefix + "-" + std::to_string(100 + i);
}

inline double rounded(double v, double scale = 1000.0) { return std::round(v * scale) / scale; }

// Loewe score consistent with the label under the default threshold of 5.
inline double loewe_for(int label, Rng& rng) {
  return label == 1 ? rounded(rng.uniform(5.5, 60.0), 100.0) : rounded(rng.uniform(-60.0, 5.0), 100.0);
}

struct TissueSizeSpec {
  std::string tissue;
  std::size_t rows = 0;
  std::size_t n_cells = 4;
};

// Screen whose label depends only on the first drug, identically in every
// tissue: a pair is synergistic iff the first drug is one of the first
// `n_synergistic` names of its pool. The second drug comes from a separate
// pool of `n_partners` names. `label_noise` flips labels.
struct TransferRule {
  std::size_t n_drugs = 8;
  std::size_t n_synergistic = 4;
  std::size_t n_partners = 8;
  double label_noise = 0.0;
};

inline int transfer_label(const TransferRule& rule, std::size_t drug1) {
  return drug1 < rule.n_synergistic ? 1 : 0;
}

// Screen with exact per-tissue label counts. Without a rule, drugs are
// random; with one, positives take their first drug from the synergistic
// names and negatives from the rest (before label noise), so the same rule
// holds in every tissue.
inline std::vector<SynergyRecord> count_fixture(const std::vector<TissueCountSpec>& tissues, std::size_t n_drugs,
                                                std::uint64_t seed, const TransferRule* rule = nullptr) {
  Rng rng(Rng::derive(seed, "count_fixture"));
  std::vector<SynergyRecord> out;
  std::uint64_t row = 1;
  for (const auto& t : tissues) {
    std::vector<int> labels(t.n0, 0);
    labels.insert(labels.end(), t.n1, 1);
    rng.shuffle(labels);
    for (int y : labels) {
      SynergyRecord r;
      r.row_id = row++;
      if (rule) {
        int shown = y;
        if (rule->label_noise > 0.0 && rng.uniform() < rule->label_noise) shown = 1 - y;
        const std::size_t n_syn = rule->n_synergistic;
        r.drug1 = drug_name(shown ? rng.uniform_index(n_syn) : n_syn + rng.uniform_index(rule->n_drugs - n_syn));
        r.drug2 = drug_name(rule->n_drugs + rng.uniform_index(std::max<std::size_t>(rule->n_partners, 1)));
      } else {
        r.drug1 = drug_name(rng.uniform_index(n_drugs));
        r.drug2 = drug_name(rng.uniform_index(n_drugs));
      }
      r.cell_line = cell_name(t.tissue, rng.uniform_index(std::max<std::size_t>(t.n_cells, 1)));
      r.tissue = t.tissue;
      r.ri1 = rounded(rng.uniform(-20.0, 60.0));
      r.ri2 = rounded(rng.uniform(-20.0, 60.0));
      r.loewe = loewe_for(y, rng);
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline std::vector<SynergyRecord> rare_tissue_fixture(std::uint64_t seed = 7) {
  return count_fixture(rare_tissue_counts(), 40, seed);
}

inline std::vector<SynergyRecord> transfer_fixture(const std::vector<TissueSizeSpec>& tissues,
                                                   const TransferRule& rule, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, "transfer_fixture"));
  std::vector<SynergyRecord> out;
  std::uint64_t row = 1;
  for (const auto& t : tissues) {
    for (std::size_t i = 0; i < t.rows; ++i) {
      const std::size_t d1 = rng.uniform_index(rule.n_drugs);
      const std::size_t d2 = rule.n_drugs + rng.uniform_index(std::max<std::size_t>(rule.n_partners, 1));
      int y = transfer_label(rule, d1);
      if (rule.label_noise > 0.0 && rng.uniform() < rule.label_noise) y = 1 - y;
      SynergyRecord r;
      r.row_id = row++;
      r.drug1 = drug_name(d1);
      r.drug2 = drug_name(d2);
      r.cell_line = cell_name(t.tissue, rng.uniform_index(std::max<std::size_t>(t.n_cells, 1)));
      r.tissue = t.tissue;
      r.ri1 = rounded(rng.uniform(-20.0, 60.0), 10.0);
      r.ri2 = rounded(rng.uniform(-20.0, 60.0), 10.0);
      r.loewe = loewe_for(y, rng);
      out.push_back(std::move(r));
    }
  }
  return out;
}

// The 200-row screen shipped as data/fixture_200.csv.
inline std::vector<TissueCountSpec> fixture200_tissues() {
  return {{"breast", 70, 30, 5}, {"lung", 40, 21, 4}, {"pancreas", 38, 1, 2}};
}

inline std::vector<SynergyRecord> fixture200(std::uint64_t seed = 200) {
  return count_fixture(fixture200_tissues(), 12, seed);
}

// The seven rare tissues with their reference label counts plus one common
// tissue of `common_rows` rows, all following the same drug rule.
inline std::vector<SynergyRecord> study_fixture(std::uint64_t seed = 7, std::size_t common_rows = 4000) {
  TransferRule rule;
  rule.label_noise = 0.05;
  auto tissues = rare_tissue_counts();
  const std::size_t n1 = common_rows * 3 / 20;
  tissues.push_back({"lung", common_rows - n1, n1, 16});
  return count_fixture(tissues, rule.n_drugs, seed, &rule);
}

}  // namespace synergy::synthetic
