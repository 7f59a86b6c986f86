#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "synergy/baselines.hpp"
#include "synergy/common.hpp"
#include "synergy/ingest.hpp"
#include "synergy/lm.hpp"
#include "synergy/metrics.hpp"
#include "synergy/remote.hpp"
#include "synergy/sampler.hpp"
#include "synergy/textualize.hpp"

#ifndef SYNERGY_VERSION
#define SYNERGY_VERSION "0.1.0"
#endif

namespace synergy {

inline constexpr const char* kSoftwareVersion = SYNERGY_VERSION;

// Malformed or inconsistent plan / run directory.
struct ConfigError : Error {
  using Error::Error;
};

enum class Method { gbdt, tabattn, lm_scratch, lm_pretrained, remote };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::gbdt, Method::tabattn, Method::lm_scratch, Method::lm_pretrained,
                                     Method::remote};
  return m;
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::gbdt: return "gbdt";
    case Method::tabattn: return "tabattn";
    case Method::lm_scratch: return "lm_scratch";
    case Method::lm_pretrained: return "lm_pretrained";
    default: return "remote";
  }
}

// Row label used in reports.
inline const char* method_label(Method m) {
  switch (m) {
    case Method::gbdt: return "GBDT";
    case Method::tabattn: return "TabAttn";
    case Method::lm_scratch: return "LM (scratch)";
    case Method::lm_pretrained: return "LM (pretrained)";
    default: return "Remote LM";
  }
}

inline Method parse_method(const std::string& s) {
  for (Method m : all_methods()) {
    if (s == method_name(m) || s == method_label(m)) return m;
  }
  throw ConfigError("unknown method '" + s + "'");
}

inline bool is_lm(Method m) { return m == Method::lm_scratch || m == Method::lm_pretrained; }

enum class GbdtMode { refit, frozen };

// ---------------------------------------------------------------------------
// Plan

struct ExperimentPlan {
  std::string data_path;
  ColumnMapping mapping;
  double loewe_threshold = 5.0;
  std::size_t rare_threshold = 4000;
  double test_fraction = 0.2;
  std::vector<std::size_t> ladder = default_ladder();
  std::vector<Method> methods = all_methods();
  std::vector<std::uint64_t> seeds{0, 1, 2};
  // Empty: every rare tissue.
  std::vector<std::string> tissues;
  PromptTemplate prompt;
  int precision = 3;
  std::string profile = "desk";
  LMConfig lm;
  TrainConfig lm_pretrain;
  TrainConfig lm_finetune;
  double lm_validation_fraction = 0.2;
  bool shared_drug_vocabulary = true;
  GbdtConfig gbdt;
  GbdtMode gbdt_mode = GbdtMode::refit;
  TabAttnConfig tabattn;
  RemoteConfig remote;

  // "full": full-size models and their usual hyperparameters. "desk": small
  // models and larger learning rates sized for one CPU core.
  static ExperimentPlan with_profile(const std::string& profile) {
    ExperimentPlan p;
    p.profile = profile;
    if (profile == "full") return p;
    if (profile != "desk") throw ConfigError("unknown profile '" + profile + "' (expected desk or full)");
    p.lm.n_layers = 2;
    p.lm.n_heads = 2;
    p.lm.d_model = 16;
    p.lm.d_ff = 32;
    p.lm_pretrain.learning_rate = 3e-3;
    p.lm_pretrain.epochs = 4;
    p.lm_pretrain.batch_size = 16;
    p.lm_finetune.learning_rate = 3e-3;
    p.lm_finetune.epochs = 20;
    p.lm_finetune.batch_size = 4;
    p.gbdt = GbdtConfig::desk();
    p.tabattn = TabAttnConfig::desk();
    return p;
  }

  void validate() const {
    if (methods.empty()) throw ConfigError("plan: methods must be non-empty");
    if (seeds.empty()) throw ConfigError("plan: seeds must be non-empty");
    if (std::set<Method>(methods.begin(), methods.end()).size() != methods.size()) {
      throw ConfigError("plan: duplicate method");
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw ConfigError("plan: duplicate seed");
    }
    for (std::size_t i = 0; i < ladder.size(); ++i) {
      if (ladder[i] < 2 || (i > 0 && ladder[i] <= ladder[i - 1])) {
        throw ConfigError("plan: ladder must be strictly increasing with entries >= 2");
      }
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("plan: test_fraction must be in (0, 1)");
    if (rare_threshold < 1) throw ConfigError("plan: rare_threshold must be >= 1");
    try {
      prompt.validate();
      lm.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("plan: ") + e.what());
    }
  }
};

namespace detail {

// Reads known keys from a JSON object and rejects the rest.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  ConfigReader& get(const char* key, T& out) {
    if (!j_.contains(key)) return *this;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
    return *this;
  }

  template <class F>
  ConfigReader& with(const char* key, F&& f) {
    if (!j_.contains(key)) return *this;
    seen_.insert(key);
    f(j_.at(key), where_ + "." + key);
    return *this;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key " + where_ + "." + item.key());
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline nlohmann::json mapping_json(const ColumnMapping& m) {
  return {{"drug1", m.drug1}, {"drug2", m.drug2},     {"cell_line", m.cell_line}, {"tissue", m.tissue},
          {"ri1", m.ri1},     {"ri2", m.ri2},         {"loewe", m.loewe},         {"row_id", m.row_id},
          {"delimiter", std::string(1, m.delimiter)}};
}

inline nlohmann::json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size}};
}

inline void read_train(const nlohmann::json& j, const std::string& where, TrainConfig& c) {
  ConfigReader(j, where)
      .get("epochs", c.epochs)
      .get("learning_rate", c.learning_rate)
      .get("weight_decay", c.weight_decay)
      .get("batch_size", c.batch_size)
      .finish();
}

}  // namespace detail

inline void read_mapping(const nlohmann::json& j, const std::string& where, ColumnMapping& m) {
  std::string delimiter(1, m.delimiter);
  detail::ConfigReader(j, where)
      .get("drug1", m.drug1)
      .get("drug2", m.drug2)
      .get("cell_line", m.cell_line)
      .get("tissue", m.tissue)
      .get("ri1", m.ri1)
      .get("ri2", m.ri2)
      .get("loewe", m.loewe)
      .get("row_id", m.row_id)
      .get("delimiter", delimiter)
      .finish();
  if (delimiter == "\\t" || delimiter == "tab") delimiter = "\t";
  if (delimiter.size() != 1) throw ConfigError(where + ".delimiter: expected a single character");
  m.delimiter = delimiter[0];
}

inline nlohmann::json to_json(const ExperimentPlan& p) {
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : p.methods) methods.push_back(method_name(m));
  return {
      {"profile", p.profile},
      {"data", {{"path", p.data_path}, {"mapping", detail::mapping_json(p.mapping)}, {"loewe_threshold", p.loewe_threshold}}},
      {"rare_threshold", p.rare_threshold},
      {"test_fraction", p.test_fraction},
      {"ladder", p.ladder},
      {"methods", methods},
      {"seeds", p.seeds},
      {"tissues", p.tissues},
      {"template",
       {{"instruction", p.prompt.instruction},
        {"positive_word", p.prompt.positive_word},
        {"negative_word", p.prompt.negative_word},
        {"precision", p.precision}}},
      {"lm",
       {{"n_layers", p.lm.n_layers},
        {"n_heads", p.lm.n_heads},
        {"d_model", p.lm.d_model},
        {"d_ff", p.lm.d_ff},
        {"context_length", p.lm.context_length},
        {"max_vocab_size", p.lm.vocab_size},
        {"validation_fraction", p.lm_validation_fraction},
        {"pretrain", detail::train_json(p.lm_pretrain)},
        {"finetune", detail::train_json(p.lm_finetune)}}},
      {"gbdt",
       {{"mode", p.gbdt_mode == GbdtMode::refit ? "refit" : "frozen"},
        {"n_trees", p.gbdt.n_trees},
        {"max_depth", p.gbdt.max_depth},
        {"shrinkage", p.gbdt.shrinkage},
        {"lambda", p.gbdt.lambda},
        {"min_child_weight", p.gbdt.min_child_weight},
        {"min_split_gain", p.gbdt.min_split_gain}}},
      {"tabattn",
       {{"d_embed", p.tabattn.d_embed},
        {"n_heads", p.tabattn.n_heads},
        {"n_layers", p.tabattn.n_layers},
        {"d_ff", p.tabattn.d_ff},
        {"d_hidden", p.tabattn.d_hidden},
        {"learning_rate", p.tabattn.learning_rate},
        {"weight_decay", p.tabattn.weight_decay},
        {"epochs", p.tabattn.epochs},
        {"finetune_epochs", p.tabattn.finetune_epochs},
        {"batch_size", p.tabattn.batch_size},
        {"validation_fraction", p.tabattn.validation_fraction}}},
      {"shared_drug_vocabulary", p.shared_drug_vocabulary},
      {"remote",
       {{"endpoint", p.remote.endpoint},
        {"base_model", p.remote.base_model},
        {"api_key_env", p.remote.api_key_env},
        {"files_path", p.remote.files_path},
        {"fine_tunes_path", p.remote.fine_tunes_path},
        {"completions_path", p.remote.completions_path},
        {"epochs", p.remote.epochs},
        {"lr_multiplier", p.remote.lr_multiplier ? nlohmann::json(*p.remote.lr_multiplier) : nlohmann::json("auto")},
        {"timeout_seconds", p.remote.timeout_seconds},
        {"max_retries", p.remote.max_retries},
        {"backoff_initial_ms", p.remote.backoff_initial_ms},
        {"poll_initial_ms", p.remote.poll_initial_ms},
        {"poll_max_ms", p.remote.poll_max_ms}}},
  };
}

// Profile defaults first, then every key present in `j`. Unknown keys are
// errors.
inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("plan: expected a JSON object");
  std::string profile = "desk";
  if (j.contains("profile")) profile = j.at("profile").get<std::string>();
  ExperimentPlan p = ExperimentPlan::with_profile(profile);
  using detail::ConfigReader;
  ConfigReader r(j, "plan");
  r.get("profile", p.profile);
  r.with("data", [&](const nlohmann::json& d, const std::string& w) {
    ConfigReader(d, w)
        .get("path", p.data_path)
        .get("loewe_threshold", p.loewe_threshold)
        .with("mapping", [&](const nlohmann::json& m, const std::string& mw) { read_mapping(m, mw, p.mapping); })
        .finish();
  });
  r.get("rare_threshold", p.rare_threshold).get("test_fraction", p.test_fraction).get("ladder", p.ladder);
  r.with("methods", [&](const nlohmann::json& m, const std::string& w) {
    if (!m.is_array()) throw ConfigError(w + ": expected an array");
    p.methods.clear();
    for (const auto& s : m) p.methods.push_back(parse_method(s.get<std::string>()));
  });
  r.get("seeds", p.seeds).get("tissues", p.tissues);
  r.with("template", [&](const nlohmann::json& t, const std::string& w) {
    ConfigReader(t, w)
        .get("instruction", p.prompt.instruction)
        .get("positive_word", p.prompt.positive_word)
        .get("negative_word", p.prompt.negative_word)
        .get("precision", p.precision)
        .finish();
  });
  r.with("lm", [&](const nlohmann::json& l, const std::string& w) {
    ConfigReader(l, w)
        .get("n_layers", p.lm.n_layers)
        .get("n_heads", p.lm.n_heads)
        .get("d_model", p.lm.d_model)
        .get("d_ff", p.lm.d_ff)
        .get("context_length", p.lm.context_length)
        .get("max_vocab_size", p.lm.vocab_size)
        .get("validation_fraction", p.lm_validation_fraction)
        .with("pretrain", [&](const nlohmann::json& t, const std::string& tw) { detail::read_train(t, tw, p.lm_pretrain); })
        .with("finetune", [&](const nlohmann::json& t, const std::string& tw) { detail::read_train(t, tw, p.lm_finetune); })
        .finish();
  });
  r.with("gbdt", [&](const nlohmann::json& g, const std::string& w) {
    std::string mode = p.gbdt_mode == GbdtMode::refit ? "refit" : "frozen";
    ConfigReader(g, w)
        .get("mode", mode)
        .get("n_trees", p.gbdt.n_trees)
        .get("max_depth", p.gbdt.max_depth)
        .get("shrinkage", p.gbdt.shrinkage)
        .get("lambda", p.gbdt.lambda)
        .get("min_child_weight", p.gbdt.min_child_weight)
        .get("min_split_gain", p.gbdt.min_split_gain)
        .finish();
    if (mode != "refit" && mode != "frozen") throw ConfigError(w + ".mode: expected refit or frozen");
    p.gbdt_mode = mode == "refit" ? GbdtMode::refit : GbdtMode::frozen;
  });
  r.with("tabattn", [&](const nlohmann::json& t, const std::string& w) {
    ConfigReader(t, w)
        .get("d_embed", p.tabattn.d_embed)
        .get("n_heads", p.tabattn.n_heads)
        .get("n_layers", p.tabattn.n_layers)
        .get("d_ff", p.tabattn.d_ff)
        .get("d_hidden", p.tabattn.d_hidden)
        .get("learning_rate", p.tabattn.learning_rate)
        .get("weight_decay", p.tabattn.weight_decay)
        .get("epochs", p.tabattn.epochs)
        .get("finetune_epochs", p.tabattn.finetune_epochs)
        .get("batch_size", p.tabattn.batch_size)
        .get("validation_fraction", p.tabattn.validation_fraction)
        .finish();
  });
  r.get("shared_drug_vocabulary", p.shared_drug_vocabulary);
  r.with("remote", [&](const nlohmann::json& rm, const std::string& w) {
    nlohmann::json lr = "auto";
    ConfigReader(rm, w)
        .get("endpoint", p.remote.endpoint)
        .get("base_model", p.remote.base_model)
        .get("api_key_env", p.remote.api_key_env)
        .get("files_path", p.remote.files_path)
        .get("fine_tunes_path", p.remote.fine_tunes_path)
        .get("completions_path", p.remote.completions_path)
        .get("epochs", p.remote.epochs)
        .get("lr_multiplier", lr)
        .get("timeout_seconds", p.remote.timeout_seconds)
        .get("max_retries", p.remote.max_retries)
        .get("backoff_initial_ms", p.remote.backoff_initial_ms)
        .get("poll_initial_ms", p.remote.poll_initial_ms)
        .get("poll_max_ms", p.remote.poll_max_ms)
        .finish();
    if (lr.is_string() && lr.get<std::string>() == "auto") {
      p.remote.lr_multiplier.reset();
    } else if (lr.is_number()) {
      const double v = lr.get<double>();
      if (v != 0.05 && v != 0.1 && v != 0.2) throw ConfigError(w + ".lr_multiplier: expected 0.05, 0.1, 0.2 or \"auto\"");
      p.remote.lr_multiplier = v;
    } else {
      throw ConfigError(w + ".lr_multiplier: expected a number or \"auto\"");
    }
  });
  r.finish();
  p.validate();
  return p;
}

inline ExperimentPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("plan file " + path.string() + ": " + e.what());
  }
  auto plan = plan_from_json(j);
  if (!plan.data_path.empty() && std::filesystem::path(plan.data_path).is_relative()) {
    plan.data_path = (path.parent_path() / plan.data_path).lexically_normal().string();
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Results

struct CellKey {
  std::string tissue;
  Method method = Method::gbdt;
  std::size_t k = 0;
  std::uint64_t seed = 0;

  auto operator<=>(const CellKey&) const = default;
  bool operator==(const CellKey&) const = default;

  std::string id() const {
    return tissue + "/" + method_name(method) + "/k" + std::to_string(k) + "/seed" + std::to_string(seed);
  }
};

enum class CellStatus { ok, skipped, failed };

inline const char* to_string(CellStatus s) {
  switch (s) {
    case CellStatus::ok: return "ok";
    case CellStatus::skipped: return "skipped";
    default: return "failed";
  }
}

inline CellStatus parse_cell_status(const std::string& s) {
  if (s == "ok") return CellStatus::ok;
  if (s == "skipped") return CellStatus::skipped;
  if (s == "failed") return CellStatus::failed;
  throw DataError("unknown cell status '" + s + "'");
}

// Cell flags.
inline constexpr const char* kFlagUninformative = "uninformative-by-construction";
inline constexpr const char* kFlagHardLabels = "hard-label-scores";
inline constexpr const char* kFlagBaseModel = "zero-shot-base-model";
inline constexpr const char* kFlagConstant = "constant-model";

struct CellResult {
  CellKey key;
  CellStatus status = CellStatus::ok;
  std::string reason;
  std::optional<double> auprc;
  std::optional<double> auroc;
  std::size_t n_test = 0;
  double runtime_seconds = 0.0;
  // Checksum of the sorted test row ids.
  std::string test_rows;
  std::vector<std::string> flags;
  nlohmann::json detail = nlohmann::json::object();

  bool has_flag(const std::string& f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }
  bool operator==(const CellResult&) const = default;
};

inline nlohmann::json to_json(const CellResult& c) {
  nlohmann::json j{{"tissue", c.key.tissue},
                   {"method", method_name(c.key.method)},
                   {"k", c.key.k},
                   {"seed", c.key.seed},
                   {"status", to_string(c.status)},
                   {"reason", c.reason},
                   {"auprc", c.auprc ? nlohmann::json(*c.auprc) : nlohmann::json(nullptr)},
                   {"auroc", c.auroc ? nlohmann::json(*c.auroc) : nlohmann::json(nullptr)},
                   {"n_test", c.n_test},
                   {"runtime_seconds", c.runtime_seconds},
                   {"test_rows", c.test_rows},
                   {"flags", c.flags},
                   {"detail", c.detail}};
  return j;
}

inline CellResult cell_from_json(const nlohmann::json& j) {
  CellResult c;
  c.key = {j.at("tissue").get<std::string>(), parse_method(j.at("method").get<std::string>()),
           j.at("k").get<std::size_t>(), j.at("seed").get<std::uint64_t>()};
  c.status = parse_cell_status(j.at("status").get<std::string>());
  c.reason = j.at("reason").get<std::string>();
  if (!j.at("auprc").is_null()) c.auprc = j.at("auprc").get<double>();
  if (!j.at("auroc").is_null()) c.auroc = j.at("auroc").get<double>();
  c.n_test = j.at("n_test").get<std::size_t>();
  c.runtime_seconds = j.at("runtime_seconds").get<double>();
  c.test_rows = j.at("test_rows").get<std::string>();
  c.flags = j.at("flags").get<std::vector<std::string>>();
  c.detail = j.value("detail", nlohmann::json::object());
  return c;
}

struct TissueInfo {
  std::size_t n0 = 0;
  std::size_t n1 = 0;
  bool operator==(const TissueInfo&) const = default;
};

struct Aggregate {
  double auprc = 0.0;
  double auroc = 0.0;
  std::size_t n_seeds = 0;
  std::set<std::string> flags;
};

struct ResultTable {
  std::vector<Method> methods;
  // Requested k values; k = 0 is implicit.
  std::vector<std::size_t> ladder;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, TissueInfo> tissues;
  std::map<CellKey, CellResult> cells;

  bool operator==(const ResultTable&) const = default;

  std::vector<std::size_t> columns() const {
    std::vector<std::size_t> ks{0};
    ks.insert(ks.end(), ladder.begin(), ladder.end());
    return ks;
  }

  // Mean over the seeds whose cell finished; nullopt when none did.
  std::optional<Aggregate> aggregate(const std::string& tissue, Method m, std::size_t k) const {
    Aggregate a;
    for (auto seed : seeds) {
      auto it = cells.find({tissue, m, k, seed});
      if (it == cells.end() || it->second.status != CellStatus::ok) continue;
      a.auprc += *it->second.auprc;
      a.auroc += *it->second.auroc;
      a.flags.insert(it->second.flags.begin(), it->second.flags.end());
      ++a.n_seeds;
    }
    if (a.n_seeds == 0) return std::nullopt;
    a.auprc /= static_cast<double>(a.n_seeds);
    a.auroc /= static_cast<double>(a.n_seeds);
    return a;
  }

  std::size_t count(CellStatus s) const {
    return static_cast<std::size_t>(
        std::count_if(cells.begin(), cells.end(), [&](const auto& kv) { return kv.second.status == s; }));
  }
};

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { markdown, csv };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  if (s == "csv") return ReportFormat::csv;
  throw ConfigError("unknown report format '" + s + "' (expected markdown or csv)");
}

struct ReportOptions {
  bool bold_max = false;
  int precision = 3;
  std::optional<GbdtMode> gbdt_mode;
};

namespace detail {

inline std::string seed_list(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? ", " : "") + std::to_string(seeds[i]);
  return s;
}

inline void markdown_metric(std::ostream& os, const ResultTable& t, bool auprc, const ReportOptions& opt) {
  const auto ks = t.columns();
  for (const auto& [tissue, info] : t.tissues) {
    os << "### " << tissue << " (n0=" << info.n0 << ", n1=" << info.n1 << ")\n\n| Method |";
    for (auto k : ks) os << ' ' << k << " |";
    os << "\n|:--|";
    for (std::size_t i = 0; i < ks.size(); ++i) os << "--:|";
    os << '\n';
    std::map<std::size_t, double> best;
    for (auto k : ks) {
      for (Method m : t.methods) {
        if (auto a = t.aggregate(tissue, m, k)) {
          const double v = auprc ? a->auprc : a->auroc;
          if (!best.count(k) || v > best[k]) best[k] = v;
        }
      }
    }
    for (Method m : t.methods) {
      os << "| " << method_label(m) << " |";
      for (auto k : ks) {
        auto a = t.aggregate(tissue, m, k);
        if (!a) {
          os << " - |";
          continue;
        }
        const double v = auprc ? a->auprc : a->auroc;
        std::string cell = format_real(v, opt.precision);
        const auto dot = cell.find('.');
        const std::size_t digits = dot == std::string::npos ? 0 : cell.size() - dot - 1;
        if (opt.precision > 0 && dot == std::string::npos) cell += '.';
        cell.append(static_cast<std::size_t>(std::max(opt.precision, 0)) - digits, '0');
        if (a->flags.count(kFlagHardLabels)) cell += "*";
        if (opt.bold_max && v == best[k]) cell = "**" + cell + "**";
        os << ' ' << cell << " |";
      }
      os << '\n';
    }
    os << '\n';
  }
}

}  // namespace detail

inline void write_markdown(std::ostream& os, const ResultTable& t, const ReportOptions& opt = {}) {
  os << "# k-shot results\n\n";
  os << "Each value is the mean over " << (t.seeds.size() == 1 ? "seed " : "seeds ") << detail::seed_list(t.seeds)
     << " of the test-set metric. Columns are the number of shots k. \"-\" marks a cell that was not run"
        " (k infeasible for the tissue) or that failed on every seed.\n\n";
  os << "## AUPRC\n\n";
  detail::markdown_metric(os, t, true, opt);
  os << "## AUROC\n\n";
  detail::markdown_metric(os, t, false, opt);

  std::vector<std::string> notes;
  if (opt.gbdt_mode && std::count(t.methods.begin(), t.methods.end(), Method::gbdt)) {
    notes.push_back(*opt.gbdt_mode == GbdtMode::refit
                        ? "GBDT is refit on common-tissue rows plus the k shots for every k."
                        : "GBDT is trained once on common-tissue rows and not updated with shots.");
  }
  std::map<std::string, std::set<std::string>> skips, failures;
  bool hard = false, base_model = false, uninformative = false;
  for (const auto& [key, c] : t.cells) {
    const std::string where = key.tissue + ", " + method_label(key.method);
    if (c.status == CellStatus::skipped) skips[key.tissue].insert(c.reason);
    if (c.status == CellStatus::failed) failures[where + ", k=" + std::to_string(key.k)].insert(c.reason);
    hard |= c.has_flag(kFlagHardLabels);
    base_model |= c.has_flag(kFlagBaseModel);
    uninformative |= c.has_flag(kFlagUninformative);
  }
  if (uninformative) {
    notes.push_back("LM (scratch) at k=0 scores with untrained weights; it is a chance-level reference.");
  }
  if (base_model) notes.push_back("Remote LM at k=0 scores with the base model; no fine-tune exists.");
  if (hard) notes.push_back("* scored without token probabilities (hard labels); AUROC is coarse.");
  for (const auto& [tissue, reasons] : skips) {
    for (const auto& r : reasons) notes.push_back("Skipped in " + tissue + ": " + r + ".");
  }
  for (const auto& [where, reasons] : failures) {
    for (const auto& r : reasons) notes.push_back("Failed (" + where + "): " + r);
  }
  if (!notes.empty()) {
    os << "## Notes\n\n";
    for (const auto& n : notes) os << "- " << n << '\n';
  }
}

inline constexpr const char* kCsvHeader =
    "tissue,n0,n1,method,k,seed,status,auprc,auroc,n_test,runtime_seconds,test_rows,flags,reason,detail";

namespace detail {
inline std::string real17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join(const std::vector<std::string>& xs, char sep) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? std::string(1, sep) : "") + xs[i];
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}
}  // namespace detail

// One row per (tissue, method, k, seed) cell, in table order.
inline void write_csv(std::ostream& os, const ResultTable& t) {
  os << kCsvHeader << '\n';
  std::vector<const CellResult*> rows;
  for (const auto& [tissue, info] : t.tissues) {
    for (Method m : t.methods) {
      for (auto k : t.columns()) {
        for (auto seed : t.seeds) {
          auto it = t.cells.find({tissue, m, k, seed});
          if (it != t.cells.end()) rows.push_back(&it->second);
        }
      }
    }
  }
  for (const auto& [key, c] : t.cells) {
    if (std::find(rows.begin(), rows.end(), &c) == rows.end()) rows.push_back(&c);
  }
  for (const CellResult* c : rows) {
    const auto info = t.tissues.count(c->key.tissue) ? t.tissues.at(c->key.tissue) : TissueInfo{};
    os << csv::quote(c->key.tissue) << ',' << info.n0 << ',' << info.n1 << ',' << method_name(c->key.method) << ','
       << c->key.k << ',' << c->key.seed << ',' << to_string(c->status) << ','
       << (c->auprc ? detail::real17(*c->auprc) : "") << ',' << (c->auroc ? detail::real17(*c->auroc) : "") << ','
       << c->n_test << ',' << detail::real17(c->runtime_seconds) << ',' << c->test_rows << ','
       << csv::quote(detail::join(c->flags, ';')) << ',' << csv::quote(c->reason) << ','
       << csv::quote(c->detail.dump()) << '\n';
  }
}

inline ResultTable parse_csv(std::istream& is) {
  std::vector<std::string> header;
  std::size_t line = 0;
  if (!csv::read_row(is, ',', header, line) || detail::join(header, ',') != kCsvHeader) {
    throw SchemaError("result csv: unexpected header");
  }
  ResultTable t;
  std::set<std::size_t> ks;
  std::vector<std::string> f;
  while (csv::read_row(is, ',', f, line)) {
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != header.size()) throw DataError("result csv line " + std::to_string(line) + ": wrong field count");
    try {
      CellResult c;
      c.key = {f[0], parse_method(f[3]), std::stoul(f[4]), std::stoull(f[5])};
      t.tissues[f[0]] = {std::stoul(f[1]), std::stoul(f[2])};
      c.status = parse_cell_status(f[6]);
      if (!f[7].empty()) c.auprc = std::stod(f[7]);
      if (!f[8].empty()) c.auroc = std::stod(f[8]);
      c.n_test = std::stoul(f[9]);
      c.runtime_seconds = std::stod(f[10]);
      c.test_rows = f[11];
      c.flags = detail::split(f[12], ';');
      c.reason = f[13];
      c.detail = nlohmann::json::parse(f[14]);
      if (std::find(t.methods.begin(), t.methods.end(), c.key.method) == t.methods.end()) {
        t.methods.push_back(c.key.method);
      }
      if (std::find(t.seeds.begin(), t.seeds.end(), c.key.seed) == t.seeds.end()) t.seeds.push_back(c.key.seed);
      if (c.key.k > 0) ks.insert(c.key.k);
      t.cells[c.key] = std::move(c);
    } catch (const std::logic_error& e) {
      throw DataError("result csv line " + std::to_string(line) + ": " + e.what());
    }
  }
  t.ladder.assign(ks.begin(), ks.end());
  return t;
}

inline void emit_report(std::ostream& os, const ResultTable& t, ReportFormat format, const ReportOptions& opt = {}) {
  if (t.cells.empty()) throw DataError("emit_report: empty result table");
  if (format == ReportFormat::csv) {
    write_csv(os, t);
  } else {
    write_markdown(os, t, opt);
  }
}

// Per-tissue metric-vs-k series (tab-separated) for external plotting.
inline void write_series(const std::filesystem::path& dir, const ResultTable& t) {
  std::filesystem::create_directories(dir);
  for (const auto& [tissue, info] : t.tissues) {
    std::string name = tissue;
    std::replace_if(name.begin(), name.end(), [](char c) { return !std::isalnum(static_cast<unsigned char>(c)); }, '_');
    std::ofstream os(dir / (name + ".tsv"));
    os << "method\tk\tauprc\tauroc\tn_seeds\n";
    for (Method m : t.methods) {
      for (auto k : t.columns()) {
        if (auto a = t.aggregate(tissue, m, k)) {
          os << method_name(m) << '\t' << k << '\t' << detail::real17(a->auprc) << '\t' << detail::real17(a->auroc)
             << '\t' << a->n_seeds << '\n';
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Manifest

class Manifest {
 public:
  explicit Manifest(std::filesystem::path path) : path_(std::move(path)) {}

  const std::filesystem::path& path() const { return path_; }

  // One write call per record, opened in append mode.
  void append(const nlohmann::json& record) {
    std::lock_guard<std::mutex> lock(mu_);
    const std::string line = record.dump() + "\n";
    std::ofstream os(path_, std::ios::app | std::ios::binary);
    if (!os) throw Error("cannot append to manifest " + path_.string());
    os.write(line.data(), static_cast<std::streamsize>(line.size()));
    os.flush();
    if (!os) throw Error("write to manifest " + path_.string() + " failed");
  }

  // Drops a torn final record left by an interrupted write, so later
  // appends start on a fresh line. Returns whether anything was cut.
  bool repair() {
    std::lock_guard<std::mutex> lock(mu_);
    std::error_code ec;
    const auto size = std::filesystem::file_size(path_, ec);
    if (ec || size == 0) return false;
    std::ifstream in(path_, std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.back() == '\n') return false;
    const auto keep = text.rfind('\n');
    std::filesystem::resize_file(path_, keep == std::string::npos ? 0 : keep + 1);
    return true;
  }

  // All complete records. A torn final line from an interrupted write is
  // ignored.
  static std::vector<nlohmann::json> read(const std::filesystem::path& path) {
    std::vector<nlohmann::json> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (trim(line).empty()) continue;
      try {
        out.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception&) {
        if (in.peek() != EOF) throw DataError("manifest " + path.string() + " line " + std::to_string(n) + " is corrupt");
      }
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  std::mutex mu_;
};

inline constexpr const char* kManifestName = "manifest.jsonl";

// Rebuilds the result table recorded in a run directory; the last record of
// a cell wins.
inline ResultTable load_results(const std::filesystem::path& run_dir) {
  const auto records = Manifest::read(run_dir / kManifestName);
  ResultTable t;
  bool have_run = false;
  for (const auto& r : records) {
    const auto type = r.value("type", "");
    if (type == "run") {
      const auto plan = plan_from_json(r.at("plan"));
      t.methods = plan.methods;
      t.ladder = plan.ladder;
      t.seeds = plan.seeds;
      have_run = true;
    } else if (type == "tissue") {
      t.tissues[r.at("tissue").get<std::string>()] = {r.at("n0").get<std::size_t>(), r.at("n1").get<std::size_t>()};
    } else if (type == "cell") {
      auto c = cell_from_json(r.at("cell"));
      t.cells[c.key] = std::move(c);
    }
  }
  if (!have_run) throw DataError("no run record in " + (run_dir / kManifestName).string());
  return t;
}

// ---------------------------------------------------------------------------
// Runner

inline std::string row_set_checksum(const std::vector<LabeledExample>& xs) {
  std::vector<std::uint64_t> ids;
  for (const auto& x : xs) ids.push_back(x.record.row_id);
  std::sort(ids.begin(), ids.end());
  std::string s;
  for (auto id : ids) s += std::to_string(id) + ",";
  return hex64(fnv1a64(s));
}

// A tissue whose split is infeasible keeps only k = 0, evaluated on every row.
inline KShotPlan plan_tissue(const std::vector<LabeledExample>& tissue_examples, const std::string& tissue,
                             const std::vector<std::size_t>& ladder, double test_fraction, std::uint64_t seed) {
  try {
    auto split = stratified_split(tissue_examples, SplitSpec{test_fraction, seed});
    return build_kshot_plan(std::move(split.train), std::move(split.test), ladder, seed, tissue);
  } catch (const DataError& e) {
    if (!dynamic_cast<const SplitInfeasible*>(&e) && !dynamic_cast<const PlanInfeasible*>(&e)) throw;
    KShotPlan plan;
    plan.tissue = tissue;
    plan.seed = seed;
    plan.requested_ladder = ladder;
    plan.test_set = tissue_examples;
    plan.shots[0] = {};
    plan.warnings.push_back(std::string("InsufficientPositives: ") + e.what());
    return plan;
  }
}

inline std::string error_kind(const std::exception& e) {
  if (auto* r = dynamic_cast<const RemoteError*>(&e)) return r->kind;
  if (dynamic_cast<const PretrainDataMissing*>(&e)) return "PretrainDataMissing";
  if (dynamic_cast<const EmptyTrainingSet*>(&e)) return "EmptyTrainingSet";
  if (dynamic_cast<const SequenceTooLong*>(&e)) return "SequenceTooLong";
  if (dynamic_cast<const MetricUndefined*>(&e)) return "MetricUndefined";
  if (dynamic_cast<const NumericalError*>(&e)) return "NumericalError";
  if (dynamic_cast<const ShapeError*>(&e)) return "ShapeError";
  if (dynamic_cast<const DataError*>(&e)) return "DataError";
  if (dynamic_cast<const Error*>(&e)) return "Error";
  return "InternalError";
}

struct RunOptions {
  std::filesystem::path run_dir;
  bool resume = false;
  std::size_t jobs = 1;
  std::function<void(const std::string&)> log;
  // Remote credential; read from the plan's environment variable when unset.
  std::optional<std::string> api_key;
};

struct RunSummary {
  std::size_t planned = 0;
  std::size_t computed = 0;
  std::size_t reused = 0;
  std::size_t ok = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::size_t models_trained = 0;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const RunSummary& s) {
  return {{"planned", s.planned}, {"computed", s.computed}, {"reused", s.reused},
          {"ok", s.ok},           {"skipped", s.skipped},   {"failed", s.failed},
          {"models_trained", s.models_trained}, {"seconds", s.seconds}};
}

inline std::vector<LabeledExample> load_examples(const ExperimentPlan& plan, std::size_t* rejected = nullptr) {
  if (plan.data_path.empty()) throw ConfigError("plan: data.path is not set");
  std::ifstream in(plan.data_path, std::ios::binary);
  if (!in) throw DataError("cannot open data file " + plan.data_path);
  auto parsed = parse_records(in, plan.mapping);
  if (rejected) *rejected = parsed.rejections.size();
  return label_examples(parsed.records, plan.loewe_threshold);
}

class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentPlan plan, std::vector<LabeledExample> examples, RunOptions options)
      : plan_(std::move(plan)),
        examples_(std::move(examples)),
        opt_(std::move(options)),
        manifest_(opt_.run_dir / kManifestName) {
    plan_.validate();
    if (opt_.run_dir.empty()) throw ConfigError("run directory is not set");
    std::filesystem::create_directories(opt_.run_dir / "checkpoints");
    prepare();
  }

  const ExperimentPlan& plan() const { return plan_; }
  const TissuePartition& partition() const { return partition_; }
  const std::vector<std::string>& targets() const { return targets_; }
  const RunSummary& summary() const { return summary_; }
  std::size_t models_trained() const { return models_trained_.load(); }

  const KShotPlan& tissue_plan(const std::string& tissue, std::uint64_t seed) const {
    auto it = plans_.find({tissue, seed});
    if (it == plans_.end()) throw ConfigError("no plan for tissue '" + tissue + "' seed " + std::to_string(seed));
    return it->second;
  }

  // Every planned cell in run order: tissue, seed, method, then k.
  std::vector<CellKey> planned_cells() const {
    std::vector<CellKey> keys;
    for (const auto& tissue : targets_) {
      for (auto seed : plan_.seeds) {
        for (Method m : plan_.methods) {
          keys.push_back({tissue, m, 0, seed});
          for (auto k : plan_.ladder) keys.push_back({tissue, m, k, seed});
        }
      }
    }
    return keys;
  }

  // Computes one cell and appends it to the manifest. Failures are returned
  // as failed cells, never thrown.
  CellResult run_cell(const CellKey& key) {
    const auto start = std::chrono::steady_clock::now();
    CellResult c;
    c.key = key;
    const KShotPlan& kp = tissue_plan(key.tissue, key.seed);
    c.n_test = kp.test_set.size();
    c.test_rows = row_set_checksum(kp.test_set);
    if (!kp.has_k(key.k)) {
      c.status = CellStatus::skipped;
      c.reason = skip_reason(kp);
    } else {
      try {
        compute(c, kp);
        c.status = CellStatus::ok;
      } catch (const std::exception& e) {
        c.status = CellStatus::failed;
        c.auprc.reset();
        c.auroc.reset();
        c.reason = error_kind(e) + ": " + scrubbed(e.what());
        if (auto* r = dynamic_cast<const RemoteError*>(&e)) c.detail["retries"] = r->retries;
        log("cell " + key.id() + " failed: " + c.reason);
      }
    }
    c.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest_.append({{"type", "cell"}, {"cell", to_json(c)}});
    return c;
  }

  // Attempts every planned cell; with resume, cells already in the manifest
  // (ok or skipped) are reused.
  ResultTable run_all() {
    const auto start = std::chrono::steady_clock::now();
    summary_ = {};
    const std::size_t trained_before = models_trained_.load();
    ResultTable table = empty_table();
    std::vector<CellKey> pending;
    for (const auto& key : planned_cells()) {
      auto it = recorded_.find(key);
      if (it != recorded_.end() && it->second.status != CellStatus::failed) {
        table.cells[key] = it->second;
        ++summary_.reused;
      } else {
        pending.push_back(key);
      }
    }
    summary_.planned = pending.size() + summary_.reused;

    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&] {
      for (;;) {
        CellKey key;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next == pending.size()) return;
          key = pending[next++];
        }
        auto c = run_cell(key);
        std::lock_guard<std::mutex> lock(mu);
        table.cells[key] = std::move(c);
      }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(opt_.jobs, pending.size()));
    if (n_workers == 1) {
      worker();
    } else {
      std::vector<std::thread> threads;
      for (std::size_t i = 0; i < n_workers; ++i) threads.emplace_back(worker);
      for (auto& t : threads) t.join();
    }
    for (const auto& [key, c] : table.cells) recorded_[key] = c;

    summary_.computed = pending.size();
    summary_.ok = table.count(CellStatus::ok);
    summary_.skipped = table.count(CellStatus::skipped);
    summary_.failed = table.count(CellStatus::failed);
    summary_.models_trained = models_trained_.load() - trained_before;
    summary_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest_.append({{"type", "summary"}, {"summary", to_json(summary_)}});
    log("run finished: " + std::to_string(summary_.ok) + " ok, " + std::to_string(summary_.skipped) + " skipped, " +
        std::to_string(summary_.failed) + " failed, " + std::to_string(summary_.models_trained) + " models trained");
    return table;
  }

  ResultTable empty_table() const {
    ResultTable t;
    t.methods = plan_.methods;
    t.ladder = plan_.ladder;
    t.seeds = plan_.seeds;
    for (const auto& tissue : targets_) {
      std::size_t n1 = 0;
      const auto& xs = partition_.rare.at(tissue);
      for (const auto& x : xs) n1 += x.label;
      t.tissues[tissue] = {xs.size() - n1, n1};
    }
    return t;
  }

  // Base model trained on common tissues (or restored from its checkpoint).
  void ensure_base(Method m, std::uint64_t seed) {
    switch (m) {
      case Method::gbdt: gbdt_base(seed); break;
      case Method::tabattn: tabattn_base(seed); break;
      case Method::lm_pretrained: lm_base(seed); break;
      default: break;
    }
  }

 private:
  template <class T>
  struct Slot {
    std::mutex mu;
    std::shared_ptr<const T> value;
  };

  template <class T, class Build>
  std::shared_ptr<const T> lazy(std::map<std::uint64_t, std::unique_ptr<Slot<T>>>& slots, std::uint64_t seed,
                                Build&& build) {
    Slot<T>* slot;
    {
      std::lock_guard<std::mutex> lock(slots_mu_);
      auto& s = slots[seed];
      if (!s) s = std::make_unique<Slot<T>>();
      slot = s.get();
    }
    std::lock_guard<std::mutex> lock(slot->mu);
    if (!slot->value) slot->value = std::make_shared<const T>(build());
    return slot->value;
  }

  void log(const std::string& msg) const {
    if (!opt_.log) return;
    std::lock_guard<std::mutex> lock(log_mu_);
    opt_.log(scrubbed(msg));
  }

  std::string scrubbed(const std::string& s) const { return api_key_ ? scrub(s, *api_key_) : s; }

  static std::string skip_reason(const KShotPlan& kp) {
    if (kp.ladder.empty() && kp.train_pool.empty()) return "insufficient positives";
    const std::string max_k = kp.ladder.empty() ? "0" : std::to_string(kp.ladder.back());
    return "k infeasible (ladder truncated at k=" + max_k + ")";
  }

  void prepare() {
    partition_ = partition_by_tissue(examples_, plan_.rare_threshold);
    if (plan_.tissues.empty()) {
      for (const auto& [tissue, xs] : partition_.rare) targets_.push_back(tissue);
    } else {
      for (const auto& t : plan_.tissues) {
        if (!partition_.rare.count(t)) throw ConfigError("tissue '" + t + "' is not a rare tissue in the data");
        targets_.push_back(t);
      }
      std::sort(targets_.begin(), targets_.end());
      targets_.erase(std::unique(targets_.begin(), targets_.end()), targets_.end());
    }
    if (std::count(plan_.methods.begin(), plan_.methods.end(), Method::remote)) {
      if (opt_.api_key) {
        api_key_ = opt_.api_key;
      } else if (const char* v = std::getenv(plan_.remote.api_key_env.c_str()); v && *v) {
        api_key_ = std::string(v);
      }
    }

    if (manifest_.repair()) log("dropped a torn final record from " + manifest_.path().string());
    const auto records = Manifest::read(manifest_.path());
    const nlohmann::json plan_json = to_json(plan_);
    bool have_run = false;
    std::map<std::string, nlohmann::json> recorded_plans;
    for (const auto& r : records) {
      const auto type = r.value("type", "");
      if (type == "run") {
        if (r.at("plan") != plan_json) {
          throw ConfigError("run directory " + opt_.run_dir.string() + " was created with a different plan");
        }
        have_run = true;
      } else if (type == "cell") {
        auto c = cell_from_json(r.at("cell"));
        recorded_[c.key] = std::move(c);
      } else if (type == "checkpoint") {
        checkpoints_[{r.at("method").get<std::string>(), r.at("seed").get<std::uint64_t>()}] = r;
      } else if (type == "kshot_plan") {
        recorded_plans[r.at("tissue").get<std::string>() + "/" + std::to_string(r.at("seed").get<std::uint64_t>())] =
            r;
      } else if (type == "tokenizer") {
        recorded_tokenizer_ = r.at("checksum").get<std::string>();
      }
    }
    // A directory holding only base-model checkpoints (from `pretrain`) may be
    // run without resuming.
    if (have_run && !opt_.resume && !recorded_.empty()) {
      throw ConfigError("run directory " + opt_.run_dir.string() + " already holds results; resume it or pick another");
    }
    if (!have_run) {
      recorded_.clear();
      checkpoints_.clear();
      std::size_t n1 = 0;
      for (const auto& x : examples_) n1 += x.label;
      std::string ids;
      for (const auto& x : examples_) ids += serialize_record(x) + "|" + std::to_string(x.label) + "\n";
      manifest_.append({{"type", "run"},
                        {"software_version", kSoftwareVersion},
                        {"rng", std::string(kRngName)},
                        {"plan", plan_json}});
      manifest_.append({{"type", "data"},
                        {"rows", examples_.size()},
                        {"positives", n1},
                        {"checksum", hex64(fnv1a64(ids))},
                        {"common_rows", partition_.common.size()}});
    }

    for (const auto& tissue : targets_) {
      if (!have_run) {
        std::size_t n1 = 0;
        for (const auto& x : partition_.rare.at(tissue)) n1 += x.label;
        manifest_.append({{"type", "tissue"},
                          {"tissue", tissue},
                          {"n0", partition_.rare.at(tissue).size() - n1},
                          {"n1", n1}});
      }
      for (auto seed : plan_.seeds) {
        auto kp = plan_tissue(partition_.rare.at(tissue), tissue, plan_.ladder, plan_.test_fraction, seed);
        nlohmann::json lines = nlohmann::json::array();
        std::istringstream is(serialize_plan(kp));
        for (std::string line; std::getline(is, line);) lines.push_back(nlohmann::json::parse(line));
        nlohmann::json rec{{"type", "kshot_plan"},
                           {"tissue", tissue},
                           {"seed", seed},
                           {"test_rows", row_set_checksum(kp.test_set)},
                           {"plan", lines}};
        auto it = recorded_plans.find(tissue + "/" + std::to_string(seed));
        if (it == recorded_plans.end()) {
          manifest_.append(rec);
        } else if (it->second.at("plan") != rec.at("plan")) {
          throw ConfigError("k-shot plan for " + tissue + " seed " + std::to_string(seed) +
                            " differs from the manifest; the data changed since the run started");
        }
        for (const auto& w : kp.warnings) log(tissue + " seed " + std::to_string(seed) + ": " + w);
        plans_.emplace(std::make_pair(tissue, seed), std::move(kp));
      }
    }

    if (std::any_of(plan_.methods.begin(), plan_.methods.end(), is_lm)) {
      tokenizer_ = Tokenizer::build(prompt_corpus(examples_, plan_.prompt, plan_.precision), plan_.lm.vocab_size);
      const std::string checksum = hex64(tokenizer_.checksum());
      if (recorded_tokenizer_ && *recorded_tokenizer_ != checksum) {
        throw ConfigError("tokenizer checksum differs from the manifest");
      }
      if (!recorded_tokenizer_) {
        std::ofstream os(opt_.run_dir / "tokenizer.tsv");
        tokenizer_.save(os);
        manifest_.append({{"type", "tokenizer"}, {"path", "tokenizer.tsv"}, {"checksum", checksum},
                          {"size", tokenizer_.size()}});
      }
    }
  }

  LMConfig lm_config(std::uint64_t seed) const {
    LMConfig c = plan_.lm;
    c.vocab_size = tokenizer_.size();
    c.seed = Rng::derive(seed, "lm_init");
    return c;
  }

  std::vector<TokenizedExample> tokenize(const std::vector<LabeledExample>& xs) const {
    return tokenize_examples(xs, plan_.prompt, tokenizer_, plan_.lm.context_length, plan_.precision);
  }

  std::filesystem::path checkpoint_path(Method m, std::uint64_t seed, const char* ext) const {
    return opt_.run_dir / "checkpoints" / (std::string(method_name(m)) + "-seed" + std::to_string(seed) + ext);
  }

  // Restores a manifested checkpoint and returns its record, or nullopt
  // when there is none.
  template <class Load>
  std::optional<nlohmann::json> restore(Method m, std::uint64_t seed, Load&& load) {
    nlohmann::json rec;
    {
      std::lock_guard<std::mutex> lock(slots_mu_);
      auto it = checkpoints_.find({method_name(m), seed});
      if (it == checkpoints_.end()) return std::nullopt;
      rec = it->second;
    }
    const auto path = opt_.run_dir / rec.at("path").get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing checkpoint " + path.string());
    const std::string checksum = load(in);
    if (checksum != rec.at("checksum").get<std::string>()) {
      throw DataError("checkpoint " + path.string() + " does not match its manifest checksum");
    }
    return rec;
  }

  void record_checkpoint(Method m, std::uint64_t seed, const std::filesystem::path& path, const std::string& checksum,
                         nlohmann::json detail) {
    nlohmann::json rec{{"type", "checkpoint"},
                       {"method", method_name(m)},
                       {"seed", seed},
                       {"path", std::filesystem::relative(path, opt_.run_dir).generic_string()},
                       {"checksum", checksum},
                       {"detail", std::move(detail)}};
    manifest_.append(rec);
    std::lock_guard<std::mutex> lock(slots_mu_);
    checkpoints_[{method_name(m), seed}] = rec;
  }

  FeatureVocabularies base_vocab() const {
    return build_feature_vocabularies(partition_.common, plan_.shared_drug_vocabulary);
  }

  struct GbdtBase {
    GbdtModel model;
    bool constant = false;
  };

  std::shared_ptr<const GbdtBase> gbdt_base(std::uint64_t seed) {
    return lazy(gbdt_bases_, seed, [&] {
      GbdtBase b;
      const auto path = checkpoint_path(Method::gbdt, seed, ".txt");
      if (auto rec = restore(Method::gbdt, seed, [&](std::istream& in) {
            std::stringstream ss;
            ss << in.rdbuf();
            b.model = load_gbdt(ss);
            return hex64(fnv1a64(ss.str()));
          })) {
        b.constant = rec->at("detail").value("constant", false);
        return b;
      }
      auto fit = fit_gbdt(partition_.common, seed);
      b.model = std::move(fit.first);
      b.constant = fit.second;
      std::ostringstream os;
      save_gbdt(os, b.model);
      std::ofstream(path, std::ios::binary) << os.str();
      record_checkpoint(Method::gbdt, seed, path, hex64(fnv1a64(os.str())),
                        {{"constant", b.constant}, {"trees", b.model.trees.size()}});
      return b;
    });
  }

  // Fits on `rows` with vocabularies from the same rows. Empty or
  // single-label data yields a constant model.
  std::pair<GbdtModel, bool> fit_gbdt(const std::vector<LabeledExample>& train, std::uint64_t seed) {
    if (train.empty()) return {GbdtModel{}, true};
    const auto vocab = build_feature_vocabularies(train, plan_.shared_drug_vocabulary);
    ++models_trained_;
    try {
      return {gbdt_fit(encode_rows(train, vocab), plan_.gbdt, seed), false};
    } catch (const DegenerateFit& e) {
      return {e.model, true};
    }
  }

  struct TabAttnBase {
    FeatureVocabularies vocab;
    std::optional<TabAttnModel> model;
  };

  TabAttnConfig tabattn_config(std::uint64_t seed) const {
    TabAttnConfig c = plan_.tabattn;
    c.seed = Rng::derive(seed, "tabattn");
    return c;
  }

  std::shared_ptr<const TabAttnBase> tabattn_base(std::uint64_t seed) {
    return lazy(tabattn_bases_, seed, [&] {
      TabAttnBase b;
      b.vocab = base_vocab();
      const auto cfg = tabattn_config(seed);
      const auto path = checkpoint_path(Method::tabattn, seed, ".ckpt");
      if (restore(Method::tabattn, seed, [&](std::istream& in) {
            b.model.emplace(make_tabattn(cfg, b.vocab));
            load_tabattn(in, *b.model);
            return hex64(tabattn_checksum(*b.model));
          })) {
        return b;
      }
      if (partition_.common.empty()) throw PretrainDataMissing("tabattn needs common-tissue examples");
      ++models_trained_;
      auto fit = tabattn_fit(encode_rows(partition_.common, b.vocab), b.vocab, cfg);
      b.model.emplace(std::move(fit.model));
      {
        std::ofstream os(path, std::ios::binary);
        save_tabattn(os, *b.model);
      }
      nlohmann::json history = nlohmann::json::array();
      for (const auto& e : fit.history) {
        history.push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"validation_loss", e.validation_loss},
                           {"validation_auroc", e.validation_auroc}});
      }
      record_checkpoint(Method::tabattn, seed, path, hex64(tabattn_checksum(*b.model)),
                        {{"best_epoch", fit.best_epoch}, {"history", history}});
      return b;
    });
  }

  std::shared_ptr<const TransformerClassifier> lm_base(std::uint64_t seed) {
    return lazy(lm_bases_, seed, [&] {
      TransformerClassifier model(lm_config(seed));
      const auto path = checkpoint_path(Method::lm_pretrained, seed, ".ckpt");
      if (restore(Method::lm_pretrained, seed, [&](std::istream& in) {
            load_model(in, model);
            return hex64(checkpoint_checksum(model.parameters()));
          })) {
        return model;
      }
      if (partition_.common.empty()) throw PretrainDataMissing("lm_pretrained needs common-tissue examples");
      TrainConfig cfg = plan_.lm_pretrain;
      cfg.seed = Rng::derive(seed, "lm_pretrain");
      ++models_trained_;
      auto result = pretrain_common(model, tokenize(partition_.common), cfg, plan_.lm_validation_fraction);
      {
        std::ofstream os(path, std::ios::binary);
        save_model(os, model);
      }
      nlohmann::json validation = nlohmann::json::array();
      for (const auto& v : result.validation) {
        validation.push_back({{"epoch", v.epoch}, {"loss", v.loss}, {"auroc", v.auroc}, {"auprc", v.auprc}});
      }
      record_checkpoint(Method::lm_pretrained, seed, path, hex64(checkpoint_checksum(model.parameters())),
                        {{"epoch_mean_loss", result.train.epoch_mean_loss},
                         {"validation", validation},
                         {"n_train", result.n_train},
                         {"n_validation", result.n_validation}});
      return model;
    });
  }

  std::uint64_t finetune_seed(const CellKey& key, const char* what) const {
    return Rng::derive(key.seed, std::string(what) + "/" + key.tissue + "/k" + std::to_string(key.k));
  }

  void compute(CellResult& c, const KShotPlan& kp) {
    const CellKey& key = c.key;
    const auto& shots = kp.shots.at(key.k);
    const auto& test = kp.test_set;
    std::vector<int> labels;
    for (const auto& x : test) labels.push_back(x.label);
    std::vector<double> scores;

    switch (key.method) {
      case Method::gbdt: {
        GbdtModel model;
        bool constant;
        std::vector<LabeledExample> train;
        if (key.k == 0 || plan_.gbdt_mode == GbdtMode::frozen) {
          auto base = gbdt_base(key.seed);
          model = base->model;
          constant = base->constant;
          train = partition_.common;
        } else {
          train = partition_.common;
          train.insert(train.end(), shots.begin(), shots.end());
          std::tie(model, constant) = fit_gbdt(train, key.seed);
        }
        if (constant) c.flags.push_back(kFlagConstant);
        const auto vocab = build_feature_vocabularies(train, plan_.shared_drug_vocabulary);
        scores = gbdt_predict(model, encode_rows(test, vocab));
        c.detail["trees"] = model.trees.size();
        break;
      }
      case Method::tabattn: {
        auto base = tabattn_base(key.seed);
        const auto test_rows = encode_rows(test, base->vocab);
        if (key.k == 0) {
          scores = tabattn_predict(*base->model, test_rows);
        } else {
          TabAttnConfig cfg = tabattn_config(key.seed);
          cfg.seed = finetune_seed(key, "tabattn_finetune");
          ++models_trained_;
          scores = tabattn_predict(tabattn_finetune(*base->model, encode_rows(shots, base->vocab), cfg), test_rows);
        }
        break;
      }
      case Method::lm_scratch:
      case Method::lm_pretrained: {
        std::optional<TransformerClassifier> model;
        if (key.method == Method::lm_pretrained) {
          model.emplace(lm_base(key.seed)->clone());
        } else {
          model.emplace(lm_config(key.seed));
          if (key.k == 0) c.flags.push_back(kFlagUninformative);
        }
        if (key.k > 0) {
          TrainConfig cfg = plan_.lm_finetune;
          cfg.seed = finetune_seed(key, "lm_finetune");
          ++models_trained_;
          auto r = train(*model, tokenize(shots), cfg);
          c.detail["epoch_mean_loss"] = r.epoch_mean_loss;
        }
        scores = predict_positive_probabilities(*model, tokenize(test));
        break;
      }
      case Method::remote: {
        if (!api_key_) throw AuthError("environment variable " + plan_.remote.api_key_env + " is not set");
        RemoteClient client(plan_.remote, *api_key_, [this](const std::string& m) { log(m); });
        std::string model_id = plan_.remote.base_model;
        if (key.k == 0) {
          c.flags.push_back(kFlagBaseModel);
        } else {
          FineTuneRequest req;
          req.records = training_records(shots, plan_.prompt, plan_.precision);
          req.base_model = plan_.remote.base_model;
          req.epochs = plan_.remote.epochs;
          req.lr_multiplier = plan_.remote.lr_multiplier;
          ++models_trained_;
          const auto job = client.submit_and_await(req);
          model_id = job.model_id;
          c.detail["job_id"] = job.id;
          c.detail["lr_multiplier"] = job.lr_multiplier;
          c.detail["polls"] = job.polls;
        }
        c.detail["model_id"] = model_id;
        std::size_t hard = 0, unparseable = 0;
        for (const auto& x : test) {
          const auto r = client.classify(model_id, build_prompt(serialize_record(x, plan_.precision), plan_.prompt),
                                         plan_.prompt);
          scores.push_back(r.score);
          hard += !r.used_probabilities;
          unparseable += r.unparseable;
        }
        c.detail["retries"] = client.total_retries();
        c.detail["unparseable"] = unparseable;
        if (hard) c.flags.push_back(kFlagHardLabels);
        break;
      }
    }
    c.auroc = auroc(scores, labels);
    c.auprc = auprc(scores, labels);
  }

  ExperimentPlan plan_;
  std::vector<LabeledExample> examples_;
  RunOptions opt_;
  Manifest manifest_;
  TissuePartition partition_;
  std::vector<std::string> targets_;
  std::map<std::pair<std::string, std::uint64_t>, KShotPlan> plans_;
  Tokenizer tokenizer_;
  std::optional<std::string> recorded_tokenizer_;
  std::optional<std::string> api_key_;
  std::map<CellKey, CellResult> recorded_;
  std::map<std::pair<std::string, std::uint64_t>, nlohmann::json> checkpoints_;
  std::mutex slots_mu_;
  mutable std::mutex log_mu_;
  std::map<std::uint64_t, std::unique_ptr<Slot<GbdtBase>>> gbdt_bases_;
  std::map<std::uint64_t, std::unique_ptr<Slot<TabAttnBase>>> tabattn_bases_;
  std::map<std::uint64_t, std::unique_ptr<Slot<TransformerClassifier>>> lm_bases_;
  std::atomic<std::size_t> models_trained_{0};
  RunSummary summary_;
};

// Loads the plan's data and runs every cell.
inline ResultTable run_all(const ExperimentPlan& plan, const RunOptions& options, RunSummary* summary = nullptr) {
  ExperimentRunner runner(plan, load_examples(plan), options);
  auto table = runner.run_all();
  if (summary) *summary = runner.summary();
  return table;
}

}  // namespace synergy
