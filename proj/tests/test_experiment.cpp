#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "synergy/experiment.hpp"
#include "synergy/synthetic.hpp"

namespace fs = std::filesystem;
using namespace synergy;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("synergy_experiment_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One common tissue plus two rare tissues sharing the first-drug rule.
std::vector<LabeledExample> small_study(std::size_t common_rows = 600) {
  synthetic::TransferRule rule;
  return label_examples(synthetic::transfer_fixture(
      {{"lung", common_rows, 8}, {"bone", 120, 4}, {"liver", 80, 3}}, rule, 11));
}

ExperimentPlan small_plan(std::vector<Method> methods) {
  auto p = ExperimentPlan::with_profile("desk");
  p.rare_threshold = 200;
  p.ladder = {2, 4, 8};
  p.methods = std::move(methods);
  p.seeds = {0};
  p.lm_pretrain.epochs = 2;
  p.lm_finetune.epochs = 3;
  p.tabattn.epochs = 4;
  p.gbdt.n_trees = 20;
  p.gbdt.max_depth = 3;
  return p;
}

std::vector<LabeledExample> rare_examples() { return label_examples(synthetic::rare_tissue_fixture()); }

ExperimentPlan rare_plan(std::vector<Method> methods) {
  auto p = small_plan(std::move(methods));
  p.rare_threshold = 4000;
  return p;
}

}  // namespace

TEST(Plan, JsonRoundTripIsExact) {
  auto p = ExperimentPlan::with_profile("desk");
  p.data_path = "data/x.csv";
  p.methods = {Method::lm_pretrained, Method::gbdt};
  p.seeds = {4, 9};
  p.gbdt_mode = GbdtMode::frozen;
  p.remote.lr_multiplier = 0.1;
  p.mapping.delimiter = '\t';
  const auto j = to_json(p);
  const auto back = plan_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.mapping.delimiter, '\t');
  EXPECT_EQ(back.methods, p.methods);
  EXPECT_EQ(*back.remote.lr_multiplier, 0.1);
}

TEST(Plan, ProfilesCarryTheirHyperparameters) {
  const auto full = ExperimentPlan::with_profile("full");
  EXPECT_EQ(full.gbdt.n_trees, 1000u);
  EXPECT_EQ(full.gbdt.max_depth, 20u);
  EXPECT_DOUBLE_EQ(full.gbdt.shrinkage, 0.3);
  EXPECT_DOUBLE_EQ(full.tabattn.learning_rate, 1e-4);
  EXPECT_EQ(full.tabattn.epochs, 50u);
  EXPECT_EQ(full.lm_finetune.epochs, 4u);
  const auto desk = plan_from_json({{"profile", "desk"}});
  EXPECT_EQ(desk.gbdt.n_trees, 200u);
  EXPECT_EQ(desk.lm.d_model, 16u);
  EXPECT_EQ(desk.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_THROW(ExperimentPlan::with_profile("huge"), ConfigError);
}

TEST(Plan, RejectsUnknownKeysAndInvalidValues) {
  EXPECT_THROW(plan_from_json({{"profile", "desk"}, {"ladderr", {2}}}), ConfigError);
  EXPECT_THROW(plan_from_json({{"lm", {{"d_model", 16}, {"dropout", 0.1}}}}), ConfigError);
  EXPECT_THROW(plan_from_json({{"methods", {"xgboost"}}}), ConfigError);
  EXPECT_THROW(plan_from_json({{"methods", nlohmann::json::array()}}), ConfigError);
  EXPECT_THROW(plan_from_json({{"seeds", nlohmann::json::array()}}), ConfigError);
  EXPECT_THROW(plan_from_json({{"ladder", {4, 2}}}), ConfigError);
  EXPECT_THROW(plan_from_json({{"remote", {{"lr_multiplier", 0.3}}}}), ConfigError);
  EXPECT_THROW(plan_from_json({{"template", {{"instruction", "no slot"}}}}), ConfigError);
}

TEST(Plan, RelativeDataPathResolvesAgainstThePlanFile) {
  const auto dir = fresh_dir("plan_path");
  fs::create_directories(dir / "configs");
  std::ofstream(dir / "configs" / "p.json") << R"({"data": {"path": "../data/x.csv"}})";
  const auto p = load_plan(dir / "configs" / "p.json");
  EXPECT_EQ(fs::path(p.data_path), (dir / "data" / "x.csv").lexically_normal());
  fs::remove_all(dir);
}

TEST(Runner, OneTissueOneMethodOneRungIsTwoCells) {
  auto plan = small_plan({Method::gbdt});
  plan.ladder = {2};
  plan.tissues = {"liver"};
  const auto dir = fresh_dir("two_cells");
  ExperimentRunner runner(plan, small_study(), {dir});
  const auto cells = runner.planned_cells();
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_EQ(cells[0].k, 0u);
  EXPECT_EQ(cells[1].k, 2u);
  const auto table = runner.run_all();
  EXPECT_EQ(table.cells.size(), 2u);
  EXPECT_EQ(table.count(CellStatus::ok), 2u);
  fs::remove_all(dir);
}

TEST(Runner, PancreasKeepsOnlyZeroShotAndEndometriumStopsAt32) {
  auto plan = rare_plan({Method::gbdt});
  plan.ladder = default_ladder();
  const auto dir = fresh_dir("rare7");
  ExperimentRunner runner(plan, rare_examples(), {dir});
  const auto table = runner.run_all();
  for (auto k : default_ladder()) {
    const auto& c = table.cells.at({"pancreas", Method::gbdt, k, 0});
    EXPECT_EQ(c.status, CellStatus::skipped);
    EXPECT_EQ(c.reason, "insufficient positives");
  }
  EXPECT_EQ(table.cells.at({"pancreas", Method::gbdt, 0, 0}).status, CellStatus::ok);
  EXPECT_EQ(table.cells.at({"pancreas", Method::gbdt, 0, 0}).n_test, 39u);
  EXPECT_EQ(table.cells.at({"endometrium", Method::gbdt, 32, 0}).status, CellStatus::ok);
  EXPECT_EQ(table.cells.at({"endometrium", Method::gbdt, 64, 0}).status, CellStatus::skipped);
  EXPECT_EQ(table.cells.at({"endometrium", Method::gbdt, 128, 0}).status, CellStatus::skipped);
  EXPECT_EQ(table.cells.at({"bone", Method::gbdt, 128, 0}).status, CellStatus::ok);
  fs::remove_all(dir);
}

TEST(Runner, GbdtWithoutCommonDataIsAConstantModelAtZeroShot) {
  auto plan = rare_plan({Method::gbdt});
  const auto dir = fresh_dir("no_common");
  ExperimentRunner runner(plan, rare_examples(), {dir});
  ASSERT_TRUE(runner.partition().common.empty());
  const auto c = runner.run_cell({"liver", Method::gbdt, 0, 0});
  EXPECT_EQ(c.status, CellStatus::ok);
  EXPECT_EQ(*c.auroc, 0.5);
  EXPECT_TRUE(c.has_flag(kFlagConstant));
  fs::remove_all(dir);
}

TEST(Runner, MissingBaseDataFailsCellsWithoutAbortingTheRun) {
  auto plan = rare_plan({Method::gbdt, Method::tabattn, Method::lm_pretrained});
  plan.tissues = {"liver"};
  const auto dir = fresh_dir("no_base");
  ExperimentRunner runner(plan, rare_examples(), {dir});
  const auto table = runner.run_all();
  const auto& lm = table.cells.at({"liver", Method::lm_pretrained, 0, 0});
  EXPECT_EQ(lm.status, CellStatus::failed);
  EXPECT_EQ(lm.reason.rfind("PretrainDataMissing", 0), 0u) << lm.reason;
  EXPECT_EQ(table.cells.at({"liver", Method::tabattn, 2, 0}).status, CellStatus::failed);
  EXPECT_EQ(table.cells.at({"liver", Method::gbdt, 2, 0}).status, CellStatus::ok);
  fs::remove_all(dir);
}

TEST(Runner, SkipAccountingAndTestSetConstancy) {
  auto plan = small_plan({Method::gbdt, Method::tabattn, Method::lm_scratch});
  plan.ladder = {2, 4, 8, 16, 32, 64, 128};
  plan.seeds = {0, 1};
  const auto dir = fresh_dir("accounting");
  ExperimentRunner runner(plan, small_study(), {dir});
  const auto table = runner.run_all();
  const auto planned = runner.planned_cells();
  const auto& s = runner.summary();
  EXPECT_EQ(planned.size(), 2u * 3u * 8u * 2u);
  EXPECT_EQ(table.cells.size(), planned.size());
  EXPECT_EQ(s.planned, s.ok + s.skipped + s.failed);
  EXPECT_GT(s.skipped, 0u);
  for (const auto& [key, c] : table.cells) {
    if (c.status == CellStatus::skipped) {
      EXPECT_FALSE(c.reason.empty());
      EXPECT_FALSE(c.auroc.has_value());
    }
    const auto& reference = table.cells.at({key.tissue, Method::gbdt, 0, key.seed});
    EXPECT_EQ(c.test_rows, reference.test_rows) << key.id();
    EXPECT_EQ(c.n_test, reference.n_test);
    if (c.status == CellStatus::ok) {
      EXPECT_GE(*c.auroc, 0.0);
      EXPECT_LE(*c.auroc, 1.0);
      EXPECT_GE(*c.auprc, 0.0);
      EXPECT_LE(*c.auprc, 1.0);
    }
  }
  EXPECT_TRUE(table.cells.at({"bone", Method::lm_scratch, 0, 0}).has_flag(kFlagUninformative));
  EXPECT_EQ(row_set_checksum(runner.tissue_plan("bone", 1).test_set), table.cells.at({"bone", Method::gbdt, 0, 1}).test_rows);
  fs::remove_all(dir);
}

TEST(Runner, ReplayGivesIdenticalMetricsForLocalMethods) {
  auto plan = small_plan({Method::gbdt, Method::tabattn, Method::lm_scratch, Method::lm_pretrained});
  plan.tissues = {"liver"};
  const auto dir = fresh_dir("replay");
  ExperimentRunner runner(plan, small_study(300), {dir});
  for (Method m : plan.methods) {
    for (std::size_t k : {0u, 4u}) {
      const auto a = runner.run_cell({"liver", m, k, 0});
      const auto b = runner.run_cell({"liver", m, k, 0});
      ASSERT_EQ(a.status, CellStatus::ok) << a.reason;
      EXPECT_EQ(*a.auroc, *b.auroc) << method_name(m) << " k=" << k;
      EXPECT_EQ(*a.auprc, *b.auprc);
    }
  }
  const auto dir2 = fresh_dir("replay2");
  ExperimentRunner other(plan, small_study(300), {dir2});
  for (Method m : plan.methods) {
    EXPECT_EQ(*runner.run_cell({"liver", m, 8, 0}).auroc, *other.run_cell({"liver", m, 8, 0}).auroc)
        << method_name(m);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Runner, WorkerPoolMatchesSerialRun) {
  auto plan = small_plan({Method::gbdt, Method::tabattn, Method::lm_pretrained});
  const auto d1 = fresh_dir("serial"), d2 = fresh_dir("parallel");
  ExperimentRunner serial(plan, small_study(300), {d1});
  RunOptions opt{d2};
  opt.jobs = 3;
  ExperimentRunner parallel(plan, small_study(300), opt);
  const auto a = serial.run_all(), b = parallel.run_all();
  ASSERT_EQ(a.cells.size(), b.cells.size());
  for (const auto& [key, c] : a.cells) {
    const auto& o = b.cells.at(key);
    EXPECT_EQ(c.status, o.status);
    EXPECT_EQ(c.auroc, o.auroc) << key.id();
    EXPECT_EQ(c.auprc, o.auprc);
  }
  EXPECT_EQ(serial.summary().models_trained, parallel.summary().models_trained);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Runner, ResumeRecomputesNothingAlreadyManifested) {
  auto plan = small_plan({Method::gbdt, Method::tabattn, Method::lm_scratch, Method::lm_pretrained});
  const auto dir = fresh_dir("resume");
  ResultTable first;
  {
    ExperimentRunner runner(plan, small_study(300), {dir});
    first = runner.run_all();
    EXPECT_GT(runner.summary().models_trained, 0u);
  }
  RunOptions opt{dir};
  opt.resume = true;
  ExperimentRunner again(plan, small_study(300), opt);
  const auto second = again.run_all();
  EXPECT_EQ(again.summary().models_trained, 0u);
  EXPECT_EQ(again.summary().computed, 0u);
  EXPECT_EQ(again.summary().reused, again.summary().planned);
  EXPECT_EQ(second, first);
  EXPECT_EQ(load_results(dir), first);
  fs::remove_all(dir);
}

TEST(Runner, ResumeAfterInterruptFinishesOnlyTheRest) {
  auto plan = small_plan({Method::gbdt, Method::lm_pretrained});
  const auto dir = fresh_dir("interrupt");
  std::size_t done = 0;
  {
    ExperimentRunner runner(plan, small_study(300), {dir});
    const auto cells = runner.planned_cells();
    for (std::size_t i = 0; i < cells.size() / 2; ++i, ++done) runner.run_cell(cells[i]);
  }
  // A record torn mid-write.
  std::ofstream(dir / kManifestName, std::ios::app) << R"({"type":"cell","cell":{"tiss)";
  RunOptions opt{dir};
  opt.resume = true;
  ExperimentRunner runner(plan, small_study(300), opt);
  const auto table = runner.run_all();
  EXPECT_EQ(runner.summary().reused, done);
  EXPECT_EQ(runner.summary().computed, runner.planned_cells().size() - done);
  EXPECT_EQ(table.cells.size(), runner.planned_cells().size());
  RunOptions third{dir};
  third.resume = true;
  ExperimentRunner last(plan, small_study(300), third);
  last.run_all();
  EXPECT_EQ(last.summary().computed, 0u);
  EXPECT_EQ(last.summary().models_trained, 0u);
  fs::remove_all(dir);
}

TEST(Runner, RefusesToMixRunsInOneDirectory) {
  auto plan = small_plan({Method::gbdt});
  const auto dir = fresh_dir("mix");
  { ExperimentRunner(plan, small_study(300), {dir}).run_all(); }
  EXPECT_THROW(ExperimentRunner(plan, small_study(300), {dir}), ConfigError);
  RunOptions opt{dir};
  opt.resume = true;
  plan.seeds = {5};
  EXPECT_THROW(ExperimentRunner(plan, small_study(300), opt), ConfigError);
  fs::remove_all(dir);
}

TEST(Runner, FrozenGbdtIgnoresShots) {
  auto plan = small_plan({Method::gbdt});
  plan.gbdt_mode = GbdtMode::frozen;
  plan.tissues = {"bone"};
  const auto dir = fresh_dir("frozen");
  ExperimentRunner runner(plan, small_study(300), {dir});
  const auto t = runner.run_all();
  const auto& zero = t.cells.at({"bone", Method::gbdt, 0, 0});
  for (auto k : plan.ladder) {
    EXPECT_EQ(t.cells.at({"bone", Method::gbdt, k, 0}).auroc, zero.auroc);
  }
  EXPECT_EQ(runner.summary().models_trained, 1u);
  fs::remove_all(dir);
}

TEST(Runner, PretrainedBeatsScratchAtZeroShotOnASharedRule) {
  synthetic::TransferRule rule;
  const auto examples =
      label_examples(synthetic::transfer_fixture({{"lung", 1000, 8}, {"bone", 400, 4}}, rule, 3));
  auto plan = small_plan({Method::lm_scratch, Method::lm_pretrained});
  plan.ladder = {};
  plan.rare_threshold = 500;
  plan.lm_pretrain.epochs = 4;
  const auto dir = fresh_dir("transfer");
  ExperimentRunner runner(plan, examples, {dir});
  const auto t = runner.run_all();
  const double pretrained = *t.cells.at({"bone", Method::lm_pretrained, 0, 0}).auroc;
  const double scratch = *t.cells.at({"bone", Method::lm_scratch, 0, 0}).auroc;
  EXPECT_GE(pretrained - scratch, 0.2) << "pretrained " << pretrained << " scratch " << scratch;
  fs::remove_all(dir);
}

TEST(Runner, RemoteCellsRunAgainstTheStub) {
  StubOptions so;
  so.api_key = "sk-test-7d1f00";
  StubServer stub(so);
  const int port = stub.start();
  auto plan = small_plan({Method::remote, Method::gbdt});
  plan.tissues = {"liver"};
  plan.remote.endpoint = "http://127.0.0.1:" + std::to_string(port);
  plan.remote.poll_initial_ms = 1;
  const auto dir = fresh_dir("remote");
  RunOptions opt{dir};
  opt.api_key = so.api_key;
  std::string logs;
  opt.log = [&](const std::string& m) { logs += m + "\n"; };
  ExperimentRunner runner(plan, small_study(300), opt);
  const auto t = runner.run_all();
  for (std::size_t k : {0u, 2u, 4u, 8u}) {
    const auto& c = t.cells.at({"liver", Method::remote, k, 0});
    ASSERT_EQ(c.status, CellStatus::ok) << c.reason;
    EXPECT_EQ(c.n_test, t.cells.at({"liver", Method::gbdt, k, 0}).n_test);
    if (k == 0) {
      EXPECT_TRUE(c.has_flag(kFlagBaseModel));
    } else {
      EXPECT_EQ(c.detail.at("lr_multiplier").get<double>(), 0.05);
      EXPECT_FALSE(c.detail.at("job_id").get<std::string>().empty());
    }
  }
  stub.stop();
  EXPECT_EQ(slurp(dir / kManifestName).find(so.api_key), std::string::npos);
  EXPECT_EQ(logs.find(so.api_key), std::string::npos);
  fs::remove_all(dir);
}

TEST(Runner, RemoteWithoutCredentialsFailsOnlyRemoteCells) {
  auto plan = small_plan({Method::gbdt, Method::remote});
  plan.tissues = {"liver"};
  plan.remote.api_key_env = "SYNERGY_TEST_UNSET_KEY";
  ::unsetenv("SYNERGY_TEST_UNSET_KEY");
  const auto dir = fresh_dir("nokey");
  ExperimentRunner runner(plan, small_study(300), {dir});
  const auto t = runner.run_all();
  for (const auto& [key, c] : t.cells) {
    if (key.method == Method::remote) {
      EXPECT_EQ(c.status, CellStatus::failed);
      EXPECT_EQ(c.reason.rfind("AuthError", 0), 0u);
    } else {
      EXPECT_EQ(c.status, CellStatus::ok);
    }
  }
  fs::remove_all(dir);
}

namespace {

ResultTable synthetic_table() {
  ResultTable t;
  t.methods = {Method::gbdt, Method::remote};
  t.ladder = {2, 4};
  t.seeds = {0, 1};
  t.tissues = {{"pancreas", {38, 1}}, {"soft tissue", {269, 83}}};
  auto put = [&](std::string tissue, Method m, std::size_t k, std::uint64_t seed, std::optional<double> pr,
                 std::optional<double> roc) {
    CellResult c;
    c.key = {tissue, m, k, seed};
    c.status = pr ? CellStatus::ok : CellStatus::skipped;
    c.reason = pr ? "" : "insufficient positives, see plan";
    c.auprc = pr;
    c.auroc = roc;
    c.n_test = 8;
    c.runtime_seconds = 0.1 + 1e-17 * static_cast<double>(k);
    c.test_rows = "00ff00ff00ff00ff";
    if (m == Method::remote) {
      c.flags = {kFlagHardLabels, kFlagBaseModel};
      c.detail = {{"job_id", "ft-1"}, {"lr_multiplier", 0.05}};
    }
    t.cells[c.key] = c;
  };
  for (std::uint64_t s : {0u, 1u}) {
    for (Method m : t.methods) {
      put("pancreas", m, 0, s, 0.1 + 0.01 * s, 0.5);
      put("pancreas", m, 2, s, std::nullopt, std::nullopt);
      put("pancreas", m, 4, s, std::nullopt, std::nullopt);
      for (std::size_t k : {0u, 2u, 4u}) put("soft tissue", m, k, s, 1.0 / 3.0 + 0.1 * k, 0.6 + 0.01 * s);
    }
  }
  return t;
}

}  // namespace

TEST(Report, CsvRoundTripsExactly) {
  const auto t = synthetic_table();
  std::ostringstream os;
  emit_report(os, t, ReportFormat::csv);
  std::istringstream is(os.str());
  EXPECT_EQ(parse_csv(is), t);
}

TEST(Report, MarkdownBlocksAndDashes) {
  const auto t = synthetic_table();
  std::ostringstream os;
  emit_report(os, t, ReportFormat::markdown);
  const auto md = os.str();
  EXPECT_NE(md.find("### pancreas (n0=38, n1=1)"), std::string::npos);
  EXPECT_NE(md.find("### soft tissue (n0=269, n1=83)"), std::string::npos);
  EXPECT_NE(md.find("| Method | 0 | 2 | 4 |"), std::string::npos);
  EXPECT_NE(md.find("| GBDT | 0.105 | - | - |"), std::string::npos) << md;
  EXPECT_NE(md.find("| Remote LM | 0.105* | - | - |"), std::string::npos);
  EXPECT_NE(md.find("| GBDT | 0.333 | 0.533 | 0.733 |"), std::string::npos);
  EXPECT_NE(md.find("| GBDT | 0.605 | 0.605 | 0.605 |"), std::string::npos);
  EXPECT_LT(md.find("## AUPRC"), md.find("## AUROC"));
  EXPECT_NE(md.find("mean over seeds 0, 1"), std::string::npos);
  EXPECT_EQ(md.find("**"), std::string::npos);

  std::ostringstream bold;
  ReportOptions opt;
  opt.bold_max = true;
  emit_report(bold, t, ReportFormat::markdown, opt);
  EXPECT_NE(bold.str().find("| GBDT | **0.333** |"), std::string::npos);
}

TEST(Report, EmptyTableIsAnError) {
  std::ostringstream os;
  EXPECT_THROW(emit_report(os, ResultTable{}, ReportFormat::markdown), DataError);
}

TEST(Report, SeriesFilesPerTissue) {
  const auto dir = fresh_dir("series");
  write_series(dir, synthetic_table());
  const auto s = slurp(dir / "soft_tissue.tsv");
  EXPECT_EQ(s.rfind("method\tk\tauprc\tauroc\tn_seeds\n", 0), 0u);
  EXPECT_NE(s.find("gbdt\t4\t"), std::string::npos);
  EXPECT_EQ(slurp(dir / "pancreas.tsv").find("\t2\t"), std::string::npos);
  fs::remove_all(dir);
}
