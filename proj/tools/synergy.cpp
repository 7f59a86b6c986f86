#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "synergy/experiment.hpp"
#include "synergy/synthetic.hpp"

namespace fs = std::filesystem;
using namespace synergy;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

// One line on stderr: "error <kind>: <message>".
int fail(int code, const std::string& kind, std::string message) {
  for (char& c : message) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error " << kind << ": " << message << '\n';
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
std::vector<T> parse_list(const std::string& s, T (*convert)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(convert(item));
  }
  return out;
}

std::uint64_t to_u64(const std::string& s) {
  std::size_t used = 0;
  const auto v = std::stoull(s, &used);
  if (used != s.size()) throw ConfigError("not an unsigned integer: '" + s + "'");
  return v;
}
std::string to_string_id(const std::string& s) { return s; }

ColumnMapping load_mapping(const std::string& path) {
  ColumnMapping m;
  if (path.empty()) return m;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(slurp(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("mapping file " + path + ": " + e.what());
  }
  read_mapping(j, "mapping", m);
  return m;
}

void print_summary(std::ostream& os, const DatasetSummary& s, std::size_t rare_threshold) {
  os << "tissue\tn0\tn1\trows\tgroup\n";
  for (const auto& [tissue, c] : s.tissues) {
    const auto rows = c.n0 + c.n1;
    os << tissue << '\t' << c.n0 << '\t' << c.n1 << '\t' << rows << '\t' << (rows < rare_threshold ? "rare" : "common")
       << '\n';
  }
  os << "total rows " << s.total_rows << ", unique drugs " << s.unique_drugs << ", unique cell lines "
     << s.unique_cell_lines << ", repeated triples " << s.duplicate_rows << '\n';
}

struct Common {
  std::string plan;
  std::string run_dir;
  std::string data;
  std::string profile;
  std::string seeds;
  std::string methods;
  std::string tissues;
  bool quiet = false;
};

// Flags override the plan file, which overrides the profile defaults.
ExperimentPlan effective_plan(const Common& c) {
  ExperimentPlan plan;
  if (!c.plan.empty()) {
    plan = load_plan(c.plan);
  } else {
    plan = ExperimentPlan::with_profile(c.profile.empty() ? "desk" : c.profile);
  }
  if (!c.plan.empty() && !c.profile.empty() && c.profile != plan.profile) {
    auto j = to_json(plan);
    j["profile"] = c.profile;
    plan = plan_from_json(j);
  }
  if (!c.data.empty()) plan.data_path = c.data;
  if (!c.seeds.empty()) plan.seeds = parse_list<std::uint64_t>(c.seeds, to_u64);
  if (!c.methods.empty()) plan.methods = parse_list<Method>(c.methods, [](const std::string& s) { return parse_method(s); });
  if (!c.tissues.empty()) plan.tissues = parse_list<std::string>(c.tissues, to_string_id);
  plan.validate();
  return plan;
}

fs::path run_dir_for(const Common& c) {
  if (!c.run_dir.empty()) return c.run_dir;
  if (!c.plan.empty()) return fs::path("runs") / fs::path(c.plan).stem();
  return fs::path("runs") / "default";
}

RunOptions run_options(const Common& c) {
  RunOptions opt;
  opt.run_dir = run_dir_for(c);
  if (!c.quiet) opt.log = [](const std::string& m) { std::cerr << "[synergy] " << m << '\n'; };
  return opt;
}

void add_plan_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("--plan,--config", c.plan, "Plan file (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--run-dir", c.run_dir, "Run directory (default runs/<plan name>)");
  cmd->add_option("--data", c.data, "Override the plan's data path");
  cmd->add_option("--profile", c.profile, "Hyperparameter profile: desk or full")
      ->check(CLI::IsMember({"desk", "full"}));
  cmd->add_option("--seeds", c.seeds, "Comma-separated seeds");
  cmd->add_option("--methods", c.methods, "Comma-separated methods: gbdt,tabattn,lm_scratch,lm_pretrained,remote");
  cmd->add_option("--tissues", c.tissues, "Comma-separated rare tissues (default all)");
  cmd->add_flag("--quiet", c.quiet, "Suppress progress messages");
}

void write_reports(const fs::path& dir, const ResultTable& table, const ExperimentPlan& plan) {
  ReportOptions opt;
  opt.gbdt_mode = plan.gbdt_mode;
  std::ofstream md(dir / "report.md");
  emit_report(md, table, ReportFormat::markdown, opt);
  std::ofstream csv(dir / "results.csv");
  emit_report(csv, table, ReportFormat::csv, opt);
}

std::atomic<StubServer*> g_stub{nullptr};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot drug-pair synergy prediction: data ingest, k-shot plans, model training and reports.",
               "synergy"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kSoftwareVersion));
  app.footer(
      "Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 runtime error.\n"
      "Remote credentials are read from the environment variable named in the plan (default " +
      std::string(kApiKeyEnv) + ").");

  // ingest
  std::string ingest_csv, ingest_mapping, ingest_out;
  double ingest_threshold = 5.0;
  std::size_t ingest_rare = 4000;
  auto* ingest = app.add_subcommand("ingest", "Parse, validate and label a synergy CSV; print per-tissue counts");
  ingest->add_option("csv", ingest_csv, "Input CSV")->required()->check(CLI::ExistingFile);
  ingest->add_option("--mapping", ingest_mapping, "Column mapping file (JSON)")->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_out, "Output directory for records.csv, summary.csv and rejections.txt");
  ingest->add_option("--threshold", ingest_threshold, "Loewe threshold; label 1 iff loewe > threshold");
  ingest->add_option("--rare-threshold", ingest_rare, "Tissues with fewer rows are rare");

  // split
  Common split_c;
  std::string split_tissue, split_out;
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "Build and print the k-shot plan of one tissue");
  add_plan_flags(split, split_c);
  split->add_option("--tissue", split_tissue, "Rare tissue")->required();
  split->add_option("--seed", split_seed, "Split and shot seed");
  split->add_option("--out", split_out, "Write the plan (JSON lines) here instead of standard output");

  // pretrain
  Common pre_c;
  std::string pre_method;
  auto* pretrain = app.add_subcommand("pretrain", "Train common-tissue base models into a run directory");
  add_plan_flags(pretrain, pre_c);
  pretrain->add_option("--method", pre_method, "Base model: lm or tabattn")
      ->required()
      ->check(CLI::IsMember({"lm", "tabattn", "gbdt"}));

  // run
  Common run_c;
  bool run_resume = false;
  std::size_t run_jobs = 1;
  auto* run = app.add_subcommand("run", "Run every (tissue, method, k, seed) cell of a plan");
  add_plan_flags(run, run_c);
  run->add_flag("--resume", run_resume, "Continue a run directory, reusing manifested cells");
  run->add_option("--jobs", run_jobs, "Worker threads")->check(CLI::PositiveNumber);

  // report
  std::string rep_dir, rep_format = "markdown", rep_out, rep_series;
  bool rep_bold = false;
  auto* report = app.add_subcommand("report", "Render the results recorded in a run directory");
  report->add_option("--run-dir", rep_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--format", rep_format, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));
  report->add_option("--out", rep_out, "Output file (default standard output)");
  report->add_flag("--bold-max", rep_bold, "Bold the best method in each column (markdown)");
  report->add_option("--series", rep_series, "Also write per-tissue metric-vs-k files into this directory");

  // stub-server
  std::string stub_host = "127.0.0.1", stub_key_env = kApiKeyEnv;
  int stub_port = 8089;
  std::uint64_t stub_seed = 0;
  auto* stub = app.add_subcommand("stub-server", "Serve the bundled fine-tune/completion stub");
  stub->add_option("--port", stub_port, "Port")->check(CLI::Range(1, 65535));
  stub->add_option("--host", stub_host, "Bind address");
  stub->add_option("--seed", stub_seed, "Seed of the base-model scores");
  stub->add_option("--api-key-env", stub_key_env, "Environment variable holding the accepted key (unset: any)");

  // synth
  std::string synth_kind = "study", synth_out;
  std::uint64_t synth_seed = 7;
  std::size_t synth_common = 4000;
  auto* synth = app.add_subcommand("synth", "Write a synthetic screen in the default column layout");
  synth->add_option("--kind", synth_kind, "study, rare7 or fixture200")
      ->check(CLI::IsMember({"study", "rare7", "fixture200"}));
  synth->add_option("--out", synth_out, "Output CSV")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--common-rows", synth_common, "Rows of the common tissue (study only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    return fail(kUsage, "UsageError", e.what());
  }

  try {
    if (*ingest) {
      const auto mapping = load_mapping(ingest_mapping);
      std::ifstream in(ingest_csv, std::ios::binary);
      if (!in) throw DataError("cannot open " + ingest_csv);
      const auto parsed = parse_records(in, mapping);
      const auto examples = label_examples(parsed.records, ingest_threshold);
      const auto summary = summarize(examples);
      print_summary(std::cout, summary, ingest_rare);
      std::cout << "rejected rows " << parsed.rejections.size() << ", warnings " << parsed.warnings.size() << '\n';
      if (!ingest_out.empty()) {
        fs::create_directories(ingest_out);
        std::ofstream rec(fs::path(ingest_out) / "records.csv");
        write_records(rec, parsed.records);
        std::ofstream sum(fs::path(ingest_out) / "summary.csv");
        write_summary(sum, summary);
        std::ofstream rej(fs::path(ingest_out) / "rejections.txt");
        write_rejections(rej, parsed.rejections);
        write_rejections(rej, parsed.warnings);
      }
      return kOk;
    }

    if (*split) {
      const auto plan = effective_plan(split_c);
      const auto examples = load_examples(plan);
      const auto part = partition_by_tissue(examples, plan.rare_threshold);
      auto it = part.rare.find(split_tissue);
      if (it == part.rare.end()) throw ConfigError("'" + split_tissue + "' is not a rare tissue in the data");
      const auto kp = plan_tissue(it->second, split_tissue, plan.ladder, plan.test_fraction, split_seed);
      std::cerr << split_tissue << " seed " << split_seed << ": train pool " << kp.train_pool.size() << ", test "
                << kp.test_set.size() << ", feasible k";
      for (auto k : kp.ladder) std::cerr << ' ' << k;
      std::cerr << '\n';
      for (const auto& w : kp.warnings) std::cerr << "warning " << w << '\n';
      if (split_out.empty()) {
        std::cout << serialize_plan(kp);
      } else {
        std::ofstream(split_out) << serialize_plan(kp);
      }
      return kOk;
    }

    if (*pretrain) {
      const auto plan = effective_plan(pre_c);
      auto opt = run_options(pre_c);
      opt.resume = true;
      ExperimentRunner runner(plan, load_examples(plan), opt);
      const Method m =
          pre_method == "lm" ? Method::lm_pretrained : (pre_method == "tabattn" ? Method::tabattn : Method::gbdt);
      for (auto seed : plan.seeds) runner.ensure_base(m, seed);
      std::cout << "models_trained=" << runner.models_trained() << " run_dir=" << opt.run_dir.string() << '\n';
      return kOk;
    }

    if (*run) {
      const auto plan = effective_plan(run_c);
      auto opt = run_options(run_c);
      opt.resume = run_resume;
      opt.jobs = run_jobs;
      ExperimentRunner runner(plan, load_examples(plan), opt);
      const auto table = runner.run_all();
      write_reports(opt.run_dir, table, plan);
      const auto& s = runner.summary();
      std::cout << "planned=" << s.planned << " computed=" << s.computed << " reused=" << s.reused << " ok=" << s.ok
                << " skipped=" << s.skipped << " failed=" << s.failed << " models_trained=" << s.models_trained
                << " seconds=" << format_real(s.seconds, 1) << " run_dir=" << opt.run_dir.string() << '\n';
      return kOk;
    }

    if (*report) {
      const auto table = load_results(rep_dir);
      ReportOptions opt;
      opt.bold_max = rep_bold;
      for (const auto& r : Manifest::read(fs::path(rep_dir) / kManifestName)) {
        if (r.value("type", "") == "run") opt.gbdt_mode = plan_from_json(r.at("plan")).gbdt_mode;
      }
      const auto format = parse_report_format(rep_format);
      if (rep_out.empty()) {
        emit_report(std::cout, table, format, opt);
      } else {
        std::ofstream os(rep_out);
        emit_report(os, table, format, opt);
      }
      if (!rep_series.empty()) write_series(rep_series, table);
      return kOk;
    }

    if (*stub) {
      StubOptions so;
      so.seed = stub_seed;
      if (const char* v = std::getenv(stub_key_env.c_str())) so.api_key = v;
      StubServer server(so);
      g_stub = &server;
      std::signal(SIGINT, [](int) {
        if (auto* s = g_stub.load()) s->stop();
      });
      std::signal(SIGTERM, [](int) {
        if (auto* s = g_stub.load()) s->stop();
      });
      std::cout << "listening on http://" << stub_host << ':' << stub_port << std::endl;
      server.run(stub_host, stub_port);
      g_stub = nullptr;
      return kOk;
    }

    if (*synth) {
      std::vector<SynergyRecord> records;
      if (synth_kind == "study") {
        records = synthetic::study_fixture(synth_seed, synth_common);
      } else if (synth_kind == "rare7") {
        records = synthetic::rare_tissue_fixture(synth_seed);
      } else {
        records = synthetic::fixture200(synth_seed);
      }
      if (fs::path(synth_out).has_parent_path()) fs::create_directories(fs::path(synth_out).parent_path());
      std::ofstream os(synth_out);
      write_records(os, records, ColumnMapping{});
      if (!os) throw Error("cannot write " + synth_out);
      std::cout << "wrote " << records.size() << " rows to " << synth_out << '\n';
      return kOk;
    }
  } catch (const ConfigError& e) {
    return fail(kUsage, "ConfigError", e.what());
  } catch (const CLI::Error& e) {
    return fail(kUsage, "UsageError", e.what());
  } catch (const RemoteError& e) {
    return fail(kRuntime, e.kind, e.what());
  } catch (const DataError& e) {
    return fail(kData, error_kind(e), e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, error_kind(e), e.what());
  }
  return kOk;
}
