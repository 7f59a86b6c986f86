// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Set SYNERGY_UPDATE_GOLDEN=1 to rewrite the golden report.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "synergy/baselines.hpp"
#include "synergy/experiment.hpp"
#include "synergy/lm.hpp"
#include "synergy/metrics.hpp"
#include "synergy/remote.hpp"
#include "synergy/sampler.hpp"
#include "synergy/synthetic.hpp"

namespace fs = std::filesystem;
using namespace synergy;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Collects failed conditions and measurements for one criterion.
struct Verdict {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
  void fail(const std::string& what) { failures.push_back(what); }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("synergy_acceptance_" + name);
  fs::remove_all(dir);
  return dir;
}

int failures = 0;

void criterion(int id, const std::string& title, const std::function<void(Verdict&)>& body) {
  Verdict v;
  const auto t0 = Clock::now();
  try {
    body(v);
  } catch (const std::exception& e) {
    v.fail(std::string("exception: ") + e.what());
  }
  const double secs = seconds_since(t0);
  const bool ok = v.failures.empty();
  if (!ok) ++failures;
  std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << id << ": " << title << " [" << fmt(secs, 3) << " s]";
  for (const auto& n : v.notes) std::cout << "; " << n;
  for (const auto& f : v.failures) std::cout << "; FAILED: " << f;
  std::cout << std::endl;
}

// ---------------------------------------------------------------------------

void metric_oracles(Verdict& v) {
  const auto t0 = Clock::now();
  Rng rng(20240611);
  double worst_roc = 0.0, worst_pr = 0.0;
  std::size_t tied_sets = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(49);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform();
      y[i] = rng.uniform() < 0.4 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    // Tie injection: copy scores onto other positions, sometimes across labels.
    const std::size_t ties = trial % 3 == 0 ? n : rng.uniform_index(n / 2 + 1);
    for (std::size_t t = 0; t < ties; ++t) s[rng.uniform_index(n)] = s[rng.uniform_index(n)];
    if (trial % 7 == 0) {
      for (auto& x : s) x = std::round(x * 4.0) / 4.0;
    }
    if (std::set<double>(s.begin(), s.end()).size() < n) ++tied_sets;
    worst_roc = std::max(worst_roc, std::abs(auroc(s, y) - oracle::auroc_pairs(s, y)));
    worst_pr = std::max(worst_pr, std::abs(auprc(s, y) - oracle::auprc_curve(s, y)));
  }
  const double secs = seconds_since(t0);
  v.note("max |auroc - pairs| = " + fmt(worst_roc) + ", max |auprc - curve| = " + fmt(worst_pr) + ", " +
         std::to_string(tied_sets) + "/500 sets with ties");
  v.require(worst_roc <= 1e-12, "auroc differs from pair counting by " + fmt(worst_roc));
  v.require(worst_pr <= 1e-12, "auprc differs from curve enumeration by " + fmt(worst_pr));
  v.require(tied_sets >= 250, "too few tied sets");
  v.require(secs < 5.0, "runtime " + fmt(secs) + " s >= 5 s");
}

void metric_anchors(Verdict& v) {
  for (auto [p, n] : {std::pair<int, int>{1, 9}, {3, 7}, {5, 5}}) {
    std::vector<int> y;
    for (int i = 0; i < n; ++i) y.push_back(0);
    for (int i = 0; i < p; ++i) y.push_back(1);
    const std::vector<double> constant(y.size(), 0.37);
    const double roc = auroc(constant, y);
    const double pr = auprc(constant, y);
    const double prevalence = static_cast<double>(p) / static_cast<double>(p + n);
    v.require(roc == 0.5, "constant AUROC " + fmt(roc, 17) + " for P=" + std::to_string(p));
    v.require(pr == prevalence, "constant AUPRC " + fmt(pr, 17) + " != prevalence " + fmt(prevalence, 17));
    std::vector<double> perfect;
    for (int label : y) perfect.push_back(label ? 0.9 : 0.1);
    v.require(auroc(perfect, y) == 1.0, "perfect AUROC != 1");
    v.require(auprc(perfect, y) == 1.0, "perfect AUPRC != 1");
  }
  v.note("constant AUROC 0.5, perfect 1.0, constant AUPRC = prevalence for (1,9), (3,7), (5,5); exact equality");
}

// ---------------------------------------------------------------------------

LMConfig tiny_lm(std::size_t vocab, std::uint64_t seed) {
  LMConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.context_length = 32;
  c.vocab_size = vocab;
  c.seed = seed;
  return c;
}

void lm_gradients(Verdict& v) {
  const auto t0 = Clock::now();
  const std::size_t vocab = 24;
  double worst = 0.0;
  std::size_t checked = 0, significant = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TransformerClassifier model(tiny_lm(vocab, seed));
    Rng rng(Rng::derive(seed, "gradient_check"));
    std::vector<TokenizedExample> batch(3);
    std::vector<int> labels;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto& ex = batch[b];
      const std::size_t pad = b;  // rows with 0, 1 and 2 left pads
      const std::size_t len = 10;
      for (std::size_t i = 0; i < len; ++i) {
        const bool real = i >= pad;
        ex.ids.push_back(real ? 2 + static_cast<int>(rng.uniform_index(vocab - 2)) : Tokenizer::kPadId);
        ex.mask.push_back(real ? 1 : 0);
      }
      ex.label = static_cast<int>(b % 2);
      labels.push_back(ex.label);
    }
    auto loss_value = [&] {
      Tape off(false);
      return cross_entropy(off, model.forward(off, batch), labels).item();
    };
    Tape tape;
    zero_grads(model.parameters());
    Tensor loss = cross_entropy(tape, model.forward(tape, batch), labels);
    tape.backward(loss);

    // Every parameter tensor gets samples; within a tensor the entries are
    // random.
    auto& params = model.parameters();
    const std::size_t per_tensor = 100 / params.size() + 1;
    std::size_t taken = 0;
    for (auto& [name, t] : params) {
      const std::vector<double> analytic(t.grad().begin(), t.grad().end());
      for (std::size_t j = 0; j < per_tensor && taken < 100; ++j, ++taken) {
        std::size_t i = rng.uniform_index(t.size());
        if (name == "wte") i = static_cast<std::size_t>(batch[0].ids[9]) * 16 + rng.uniform_index(16);
        const double numeric = oracle::central_difference(loss_value, t.values()[i], 1e-5);
        worst = std::max(worst, oracle::relative_error(analytic[i], numeric, 1e-6));
        significant += std::max(std::abs(analytic[i]), std::abs(numeric)) >= 1e-6;
        ++checked;
      }
    }
  }
  const double secs = seconds_since(t0);
  v.note(std::to_string(checked) + " parameters over 3 seeds (" + std::to_string(significant) +
         " with |gradient| >= 1e-6), max relative error " + fmt(worst) + " (denominator floor 1e-6)");
  v.require(significant >= 200, "fewer than 200 parameters with a non-negligible gradient");
  v.require(worst < 1e-4, "max relative error " + fmt(worst));
  v.require(secs < 30.0, "runtime " + fmt(secs) + " s >= 30 s");
}

void lm_causality(Verdict& v) {
  std::size_t comparisons = 0;
  bool identical = true;
  for (std::uint64_t seed : {4u, 5u}) {
    TransformerClassifier model(tiny_lm(30, seed));
    Rng rng(seed);
    TokenizedExample ex;
    for (int i = 0; i < 16; ++i) {
      ex.ids.push_back(2 + static_cast<int>(rng.uniform_index(28)));
      ex.mask.push_back(1);
    }
    const auto base = model.trace({ex});
    for (std::size_t cut = 0; cut + 1 < ex.ids.size(); ++cut) {
      for (std::size_t j = cut + 1; j < ex.ids.size(); ++j) {
        auto changed = ex;
        changed.ids[j] = changed.ids[j] == 2 ? 3 : 2;
        const auto other = model.trace({changed});
        for (std::size_t h = 0; h < base.hidden.size(); ++h) {
          for (std::size_t pos = 0; pos <= cut; ++pos) {
            for (std::size_t c = 0; c < 16; ++c) {
              identical &= base.hidden[h][pos * 16 + c] == other.hidden[h][pos * 16 + c];
              ++comparisons;
            }
          }
        }
      }
    }
  }
  v.require(identical, "a future-token change altered an earlier hidden state");

  double worst = 0.0;
  synthetic::TransferRule rule;
  const auto xs = label_examples(synthetic::transfer_fixture({{"bone", 12, 3}}, rule, 9));
  PromptTemplate tpl;
  const auto tok = build_vocabulary(prompt_corpus(xs, tpl), 512);
  LMConfig c = tiny_lm(tok.size(), 6);
  c.context_length = 96;
  TransformerClassifier model(c);
  for (const auto& x : xs) {
    const auto prompt = build_prompt(serialize_record(x), tpl);
    const std::size_t n = tok.ids(prompt).size();
    const auto ref = forward(model, {tok.encode(prompt, n)});
    for (std::size_t pad = 1; pad <= 8; ++pad) {
      const auto padded = forward(model, {tok.encode(prompt, n + pad)});
      worst = std::max({worst, std::abs(padded[0] - ref[0]), std::abs(padded[1] - ref[1])});
    }
  }
  v.note(std::to_string(comparisons) + " earlier hidden values bit-identical under future perturbation");
  v.note("max logit difference over pad counts 0-8: " + fmt(worst));
  v.require(worst < 1e-9, "padding changed logits by " + fmt(worst));
}

// ---------------------------------------------------------------------------

std::vector<LabeledExample> random_tissue(std::size_t n0, std::size_t n1, std::uint64_t first_id) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n0 + n1; ++i) {
    LabeledExample e;
    e.record.row_id = first_id + i;
    e.record.tissue = "t";
    e.label = i < n0 ? 0 : 1;
    out.push_back(e);
  }
  return out;
}

std::vector<std::uint64_t> ids_of(const std::vector<LabeledExample>& xs) {
  std::vector<std::uint64_t> out;
  for (const auto& x : xs) out.push_back(x.record.row_id);
  return out;
}

void kshot_protocol(Verdict& v) {
  const auto t0 = Clock::now();
  std::size_t plans = 0, shot_sets = 0;
  for (std::uint64_t trial = 0; trial < 1000 && v.failures.empty(); ++trial) {
    Rng rng(Rng::derive(trial, "acceptance_kshot"));
    const std::size_t n0 = 2 + rng.uniform_index(400);
    const std::size_t n1 = 2 + rng.uniform_index(120);
    auto data = random_tissue(n0, n1, 1 + rng.uniform_index(1000));
    rng.shuffle(data);
    const std::uint64_t seed = rng.next();
    const auto split = stratified_split(data, {0.2, seed});
    const auto plan = build_kshot_plan(split.train, split.test, default_ladder(), seed);
    ++plans;
    std::set<std::uint64_t> test_ids;
    for (const auto& x : plan.test_set) test_ids.insert(x.record.row_id);
    std::vector<std::uint64_t> prev;
    for (const auto& [k, shot] : plan.shots) {
      ++shot_sets;
      if (shot.size() != k) v.fail("|shots[" + std::to_string(k) + "]| = " + std::to_string(shot.size()));
      std::vector<std::uint64_t> cur;
      std::size_t pos = 0;
      for (const auto& x : shot) {
        cur.push_back(x.record.row_id);
        pos += x.label;
      }
      if (!std::equal(prev.begin(), prev.end(), cur.begin())) v.fail("shots not nested at k=" + std::to_string(k));
      if (std::set<std::uint64_t>(cur.begin(), cur.end()).size() != cur.size()) v.fail("repeated row in a shot set");
      if (k >= 2 && (pos < 1 || pos > k - 1)) v.fail("shot set at k=" + std::to_string(k) + " lacks a label");
      for (auto id : cur) {
        if (test_ids.count(id)) v.fail("shot row " + std::to_string(id) + " is in the test set");
      }
      prev = cur;
    }
    // The test set does not depend on which k values are requested.
    const auto prefix = build_kshot_plan(split.train, split.test, {2, 4}, seed);
    if (ids_of(prefix.test_set) != ids_of(plan.test_set)) v.fail("test set changes with the ladder");
    for (const auto& [k, shot] : prefix.shots) {
      if (ids_of(shot) != ids_of(plan.shots.at(k))) v.fail("shots[k] changes with the ladder");
    }
    // Replay from the seed.
    const auto again = stratified_split(data, {0.2, seed});
    if (serialize_plan(build_kshot_plan(again.train, again.test, default_ladder(), seed)) != serialize_plan(plan)) {
      v.fail("replay differs");
    }
  }
  const double secs = seconds_since(t0);
  v.note(std::to_string(plans) + " plans, " + std::to_string(shot_sets) + " shot sets checked");
  v.require(secs < 10.0, "runtime " + fmt(secs) + " s >= 10 s");
}

void label_fidelity(Verdict& v) {
  const auto examples = label_examples(synthetic::rare_tissue_fixture());
  const auto summary = summarize(examples);
  for (const auto& t : synthetic::rare_tissue_counts()) {
    auto it = summary.tissues.find(t.tissue);
    if (it == summary.tissues.end()) {
      v.fail(t.tissue + " missing from summary");
      continue;
    }
    v.require(it->second.n0 == t.n0 && it->second.n1 == t.n1,
              t.tissue + " counts " + std::to_string(it->second.n0) + "/" + std::to_string(it->second.n1));
  }
  v.require(summary.tissues.size() == 7, "summary has " + std::to_string(summary.tissues.size()) + " tissues");
  const auto part = partition_by_tissue(examples, 4000);
  v.require(part.rare.size() == 7 && part.common.empty(), "not all seven tissues are rare");
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto plan = plan_tissue(part.rare.at("pancreas"), "pancreas", default_ladder(), 0.2, seed);
    v.require(plan.ladder.empty() && plan.shots.size() == 1 && plan.has_k(0), "pancreas offers k > 0");
    v.require(plan.test_set.size() == 39, "pancreas zero-shot test set is not the whole tissue");
  }
  v.note("38/1, 36/32, 192/21, 269/83, 1081/109, 1996/462, 3732/253 reproduced; 7/7 rare; pancreas k=0 only");
}

// ---------------------------------------------------------------------------

void learnability(Verdict& v) {
  const auto t0 = Clock::now();
  synthetic::TransferRule rule;
  const auto examples = label_examples(synthetic::transfer_fixture({{"lung", 1000, 8}, {"bone", 400, 4}}, rule, 3));
  auto plan = ExperimentPlan::with_profile("desk");
  plan.rare_threshold = 500;
  plan.ladder = {32};
  plan.methods = {Method::lm_scratch, Method::lm_pretrained};
  plan.seeds = {0, 1, 2};
  const auto dir = scratch("learnability");
  RunOptions opt;
  opt.run_dir = dir;
  ExperimentRunner runner(plan, examples, opt);
  const auto table = runner.run_all();
  auto mean = [&](Method m, std::size_t k) {
    const auto a = table.aggregate("bone", m, k);
    if (!a || a->n_seeds != 3) throw std::runtime_error(std::string(method_name(m)) + " lacks 3 ok seeds");
    return a->auroc;
  };
  const double pre0 = mean(Method::lm_pretrained, 0);
  const double scr0 = mean(Method::lm_scratch, 0);
  const double scr32 = mean(Method::lm_scratch, 32);
  const double secs = seconds_since(t0);
  v.note("mean AUROC over 3 seeds: pretrained k=0 " + fmt(pre0) + ", scratch k=0 " + fmt(scr0) + ", scratch k=32 " +
         fmt(scr32) + " (gain " + fmt(scr32 - scr0) + ")");
  v.require(pre0 >= 0.9, "pretrained zero-shot AUROC " + fmt(pre0) + " < 0.9");
  v.require(scr0 <= 0.6, "scratch zero-shot AUROC " + fmt(scr0) + " > 0.6");
  v.require(scr32 - scr0 >= 0.15, "k=32 gain " + fmt(scr32 - scr0) + " < 0.15");
  v.require(secs < 300.0, "runtime " + fmt(secs) + " s >= 300 s");
  fs::remove_all(dir);
}

LabeledExample row(std::string d1, std::string d2, int label) {
  SynergyRecord r;
  r.drug1 = std::move(d1);
  r.drug2 = std::move(d2);
  r.cell_line = "C1";
  r.tissue = "breast";
  r.ri1 = 1.0;
  r.ri2 = 2.0;
  r.loewe = label ? 20.0 : 0.0;
  return {r, label};
}

void baseline_sanity(Verdict& v) {
  std::vector<LabeledExample> xor_rows;
  auto put = [&](const char* d1, const char* d2, std::size_t n) {
    const int y = (std::string(d1) == "A") != (std::string(d2) == "A") ? 1 : 0;
    for (std::size_t i = 0; i < n; ++i) xor_rows.push_back(row(d1, d2, y));
  };
  put("A", "A", 3);
  put("A", "B", 5);
  put("B", "A", 4);
  put("B", "B", 6);
  const auto rows = encode_rows(xor_rows, build_feature_vocabularies(xor_rows));
  for (const auto& cfg : {GbdtConfig::desk(), GbdtConfig{}}) {
    const auto model = gbdt_fit(rows, cfg);
    const auto p = gbdt_predict(model, rows);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) correct += (p[i] > 0.5) == (rows[i].label == 1);
    v.require(correct == rows.size(), "GBDT XOR training accuracy " + std::to_string(correct) + "/18");
  }

  // Every TabAttn fit below returns the checkpoint of its lowest validation
  // loss, earliest on ties.
  std::size_t fits = 0;
  synthetic::TransferRule rule;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    rule.label_noise = seed % 2 ? 0.1 : 0.0;
    const auto xs = label_examples(synthetic::transfer_fixture({{"lung", 150 + 40 * seed, 4}}, rule, seed));
    const auto vocab = build_feature_vocabularies(xs);
    const auto encoded = encode_rows(xs, vocab);
    auto cfg = TabAttnConfig::desk();
    cfg.epochs = 6 + seed;
    cfg.seed = seed;
    cfg.learning_rate = seed < 3 ? 3e-3 : 3e-2;
    const auto fit = tabattn_fit(encoded, vocab, cfg);
    ++fits;
    std::size_t best = 0;
    for (std::size_t e = 1; e < fit.history.size(); ++e) {
      if (fit.history[e].validation_loss < fit.history[best].validation_loss) best = e;
    }
    v.require(fit.best_epoch == best, "fit " + std::to_string(seed) + " selected epoch " +
                                          std::to_string(fit.best_epoch) + " not " + std::to_string(best));
    std::vector<int> labels;
    for (const auto& r : encoded) labels.push_back(r.label);
    const auto held = stratified_holdout(labels, cfg.validation_fraction, Rng::derive(cfg.seed, "tabattn_split"));
    std::vector<EncodedRow> validation;
    for (std::size_t i = 0; i < encoded.size(); ++i) {
      if (held[i]) validation.push_back(encoded[i]);
    }
    v.require(tabattn_loss(fit.model, validation) == fit.history[best].validation_loss,
              "fit " + std::to_string(seed) + " returned a model other than its best checkpoint");
  }
  v.note("GBDT XOR training accuracy 18/18 (desk and default configs); " + std::to_string(fits) +
         " TabAttn fits keep their best-validation checkpoint");
}

// ---------------------------------------------------------------------------

fs::path golden_path() { return fs::path(SYNERGY_TEST_DATA_DIR) / "golden_report.md"; }

void report_structure(Verdict& v) {
  auto plan = ExperimentPlan::with_profile("desk");
  plan.ladder = default_ladder();
  plan.methods = {Method::gbdt, Method::lm_scratch};
  plan.seeds = {0};
  plan.lm_finetune.epochs = 2;
  plan.gbdt.n_trees = 20;
  plan.gbdt.max_depth = 3;
  const auto dir = scratch("report");
  RunOptions opt;
  opt.run_dir = dir;
  ExperimentRunner runner(plan, label_examples(synthetic::rare_tissue_fixture()), opt);
  const auto table = runner.run_all();
  std::ostringstream md;
  emit_report(md, table, ReportFormat::markdown, {});
  const std::string text = md.str();

  v.require(text.find("| Method | 0 | 2 | 4 | 8 | 16 | 32 | 64 | 128 |") != std::string::npos, "k header missing");
  std::size_t blocks = 0;
  for (const auto& t : synthetic::rare_tissue_counts()) {
    const std::string head = "### " + t.tissue + " (n0=" + std::to_string(t.n0) + ", n1=" + std::to_string(t.n1) + ")";
    for (std::size_t at = text.find(head); at != std::string::npos; at = text.find(head, at + 1)) ++blocks;
  }
  v.require(blocks == 14, "expected 7 tissue blocks per metric, found " + std::to_string(blocks));
  auto row_of = [&](const std::string& tissue, const std::string& label) {
    const auto block = text.find("### " + tissue + " (");
    const auto at = text.find("| " + label + " |", block);
    return text.substr(at, text.find('\n', at) - at);
  };
  auto dashes = [](const std::string& r) { return static_cast<std::size_t>(std::count(r.begin(), r.end(), '-')); };
  v.require(dashes(row_of("pancreas", "GBDT")) == 7, "pancreas row is not k=0 only: " + row_of("pancreas", "GBDT"));
  v.require(dashes(row_of("endometrium", "GBDT")) == 2, "endometrium row does not stop at k=32");
  v.require(dashes(row_of("bone", "GBDT")) == 0, "bone row has gaps");
  for (const auto& [key, c] : table.cells) {
    const auto& ref = table.cells.at({key.tissue, key.method, 0, key.seed});
    if (c.test_rows != ref.test_rows) v.fail("test set differs across k for " + key.id());
  }

  if (std::getenv("SYNERGY_UPDATE_GOLDEN")) {
    std::ofstream(golden_path()) << text;
    v.note("golden file rewritten");
  }
  std::ifstream in(golden_path());
  std::stringstream golden;
  golden << in.rdbuf();
  v.require(!golden.str().empty(), "golden file " + golden_path().string() + " missing");
  v.require(golden.str() == text, "report differs from " + golden_path().filename().string());
  v.note("7 tissue blocks x 2 metrics, k columns 0..128, pancreas beyond 0 and endometrium beyond 32 are '-'; "
         "matches golden file");
  fs::remove_all(dir);
}

void remote_path(Verdict& v) {
  const std::string secret = "sk-acceptance-5f2e91c4";
  StubOptions so;
  so.api_key = secret;
  StubServer stub(so);
  stub.start();

  synthetic::TransferRule rule;
  const auto examples =
      label_examples(synthetic::transfer_fixture({{"lung", 300, 8}, {"liver", 80, 3}}, rule, 11));
  auto plan = ExperimentPlan::with_profile("desk");
  plan.rare_threshold = 200;
  plan.ladder = {2, 4, 8};
  plan.methods = {Method::remote};
  plan.seeds = {0};
  plan.remote.endpoint = stub.endpoint();
  plan.remote.poll_initial_ms = 1;
  plan.remote.backoff_initial_ms = 1;
  const auto dir = scratch("remote");
  RunOptions opt;
  opt.run_dir = dir;
  opt.api_key = secret;
  std::string logs;
  opt.log = [&](const std::string& m) { logs += m + "\n"; };
  stub.rate_limit_next(2);
  ExperimentRunner runner(plan, examples, opt);
  const auto table = runner.run_all();
  std::size_t ok = 0, retries = 0;
  for (std::size_t k : {0u, 2u, 4u, 8u}) {
    const auto& c = table.cells.at({"liver", Method::remote, k, 0});
    if (c.status != CellStatus::ok) {
      v.fail("remote k=" + std::to_string(k) + ": " + c.reason);
      continue;
    }
    ++ok;
    if (c.detail.contains("retries")) retries += c.detail.at("retries").get<std::size_t>();
  }
  v.require(table.aggregate("liver", Method::remote, 8).has_value(), "result table row not populated");
  v.require(retries >= 2, "rate-limited requests were not retried");

  // Timeouts surface as their own error.
  StubOptions slow;
  slow.running_polls = 1000000;
  StubServer stuck(slow);
  stuck.start();
  RemoteConfig rc;
  rc.endpoint = stuck.endpoint();
  rc.poll_initial_ms = 1;
  rc.poll_max_ms = 2;
  RemoteClient client(rc, secret);
  FineTuneRequest req;
  req.records = {{"a", "Positive"}, {"b", "Not positive"}};
  bool timed_out = false;
  try {
    client.submit_and_await(req, 0.05);
  } catch (const Timeout&) {
    timed_out = true;
  }
  v.require(timed_out, "a stuck job did not time out");

  std::ifstream manifest(dir / kManifestName);
  std::stringstream ms;
  ms << manifest.rdbuf();
  v.require(stub.authorization_headers().back() == "Bearer " + secret, "credential not sent");
  v.require(logs.find(secret) == std::string::npos, "credential appears in the log");
  v.require(ms.str().find(secret) == std::string::npos, "credential appears in the manifest");
  v.note(std::to_string(ok) + "/4 remote cells ok, " + std::to_string(retries) +
         " retries after 429, stuck job timed out, key absent from logs and manifest");
  fs::remove_all(dir);
}

}  // namespace

int main() {
  std::cout << std::unitbuf;
  criterion(1, "metric oracle equivalence", metric_oracles);
  criterion(2, "trivial metric anchors", metric_anchors);
  criterion(3, "gradient correctness", lm_gradients);
  criterion(4, "causality and padding", lm_causality);
  criterion(5, "k-shot protocol", kshot_protocol);
  criterion(6, "label and partition fidelity", label_fidelity);
  criterion(7, "learnability", learnability);
  criterion(8, "baseline sanity", baseline_sanity);
  criterion(9, "report structure", report_structure);
  criterion(10, "remote path", remote_path);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << '\n';
  return failures == 0 ? 0 : 1;
}
