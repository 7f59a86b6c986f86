#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "synergy/common.hpp"
#include "synergy/ingest.hpp"

namespace synergy {

struct SplitSpec {
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
};

inline std::size_t round_half_up(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

// Per-label proportional assignment to the held-out side. Each label
// contributes round(fraction * n_label) rows, clamped so both sides keep at
// least one row of that label. Returns the held-out mask.
inline std::vector<bool> stratified_holdout(const std::vector<int>& labels, double fraction,
                                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> by_label[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i] == 1 ? 1 : 0].push_back(i);
  if (labels.size() < 5) {
    throw SplitInfeasible("stratified split needs at least 5 examples, got " +
                          std::to_string(labels.size()));
  }
  for (int label : {0, 1}) {
    if (by_label[label].size() < 2) {
      throw SplitInfeasible("stratified split needs at least 2 examples with label " +
                            std::to_string(label) + ", got " +
                            std::to_string(by_label[label].size()));
    }
  }
  Rng rng(Rng::derive(seed, "stratified_split"));
  std::vector<bool> held_out(labels.size(), false);
  for (int label : {0, 1}) {
    auto idx = by_label[label];
    const std::size_t n = idx.size();
    const std::size_t t =
        std::clamp<std::size_t>(round_half_up(fraction * static_cast<double>(n)), 1, n - 1);
    rng.shuffle(idx);
    for (std::size_t i = 0; i < t; ++i) held_out[idx[i]] = true;
  }
  return held_out;
}

inline Split stratified_split(const std::vector<LabeledExample>& examples,
                              const SplitSpec& spec) {
  std::vector<int> labels;
  labels.reserve(examples.size());
  for (const auto& e : examples) labels.push_back(e.label);
  const auto in_test = stratified_holdout(labels, spec.test_fraction, spec.seed);
  Split out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    (in_test[i] ? out.test : out.train).push_back(examples[i]);
  }
  return out;
}

inline const std::vector<std::size_t>& default_ladder() {
  static const std::vector<std::size_t> ladder{2, 4, 8, 16, 32, 64, 128};
  return ladder;
}

struct KShotPlan {
  std::string tissue;
  std::uint64_t seed = 0;
  std::vector<std::size_t> requested_ladder;
  // Feasible prefix of the requested ladder.
  std::vector<std::size_t> ladder;
  std::vector<LabeledExample> train_pool;
  std::vector<LabeledExample> test_set;
  // k -> shot set; always contains k = 0 (empty).
  std::map<std::size_t, std::vector<LabeledExample>> shots;
  std::vector<std::string> warnings;

  bool truncated() const { return ladder.size() < requested_ladder.size(); }
  bool has_k(std::size_t k) const { return shots.count(k) != 0; }
};

inline std::size_t positives_for(std::size_t k, double prevalence) {
  if (k < 2) return 0;
  return std::clamp<std::size_t>(round_half_up(static_cast<double>(k) * prevalence), 1, k - 1);
}

// Nested, label-balanced k-shot sets. Positive and negative pools are
// shuffled once; shots[k] takes a prefix of each, so every larger set keeps
// the smaller set and adds fresh draws without replacement.
inline KShotPlan build_kshot_plan(std::vector<LabeledExample> train,
                                  std::vector<LabeledExample> test,
                                  const std::vector<std::size_t>& ladder,
                                  std::uint64_t seed, std::string tissue = {}) {
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    if (ladder[i] < 2) throw PlanInfeasible("ladder entries must be >= 2");
    if (i > 0 && ladder[i] <= ladder[i - 1]) {
      throw PlanInfeasible("ladder must be strictly increasing");
    }
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < train.size(); ++i) {
    (train[i].label == 1 ? pos : neg).push_back(i);
  }
  if (pos.empty() || neg.empty()) {
    throw PlanInfeasible("training pool lacks " + std::string(pos.empty() ? "positive" : "negative") +
                         " examples");
  }
  const double prevalence = static_cast<double>(pos.size()) / static_cast<double>(train.size());

  KShotPlan plan;
  plan.tissue = std::move(tissue);
  plan.seed = seed;
  plan.requested_ladder = ladder;
  plan.shots[0] = {};

  Rng rng(Rng::derive(seed, "kshot_plan"));
  rng.shuffle(pos);
  rng.shuffle(neg);

  std::size_t prev_pos = 0, prev_neg = 0;
  for (std::size_t k : ladder) {
    if (k > train.size()) {
      plan.warnings.push_back("LadderTruncated: k=" + std::to_string(k) + " exceeds training pool of " +
                              std::to_string(train.size()));
      break;
    }
    const std::size_t n_pos = positives_for(k, prevalence);
    const std::size_t n_neg = k - n_pos;
    if (n_pos > pos.size() || n_neg > neg.size()) {
      plan.warnings.push_back("LadderTruncated: k=" + std::to_string(k) + " needs " +
                              std::to_string(n_pos) + " positives and " + std::to_string(n_neg) +
                              " negatives");
      break;
    }
    if (n_pos < prev_pos || n_neg < prev_neg) {
      throw PlanInfeasible("label counts shrink between ladder entries at k=" + std::to_string(k));
    }
    auto shot = plan.shots.rbegin()->second;
    for (std::size_t i = prev_pos; i < n_pos; ++i) shot.push_back(train[pos[i]]);
    for (std::size_t i = prev_neg; i < n_neg; ++i) shot.push_back(train[neg[i]]);
    plan.shots[k] = std::move(shot);
    plan.ladder.push_back(k);
    prev_pos = n_pos;
    prev_neg = n_neg;
  }
  plan.train_pool = std::move(train);
  plan.test_set = std::move(test);
  return plan;
}

namespace detail {
inline nlohmann::json row_ids(const std::vector<LabeledExample>& xs) {
  auto a = nlohmann::json::array();
  for (const auto& x : xs) a.push_back(x.record.row_id);
  return a;
}
}  // namespace detail

// Line-delimited manifest: a header line, then one line per example set.
inline std::string serialize_plan(const KShotPlan& plan) {
  std::ostringstream os;
  nlohmann::json head{{"tissue", plan.tissue},
                      {"seed", plan.seed},
                      {"rng", std::string(kRngName)},
                      {"requested_ladder", plan.requested_ladder},
                      {"ladder", plan.ladder},
                      {"warnings", plan.warnings}};
  os << head.dump() << '\n';
  os << nlohmann::json{{"set", "train_pool"}, {"rows", detail::row_ids(plan.train_pool)}}.dump() << '\n';
  os << nlohmann::json{{"set", "test"}, {"rows", detail::row_ids(plan.test_set)}}.dump() << '\n';
  for (const auto& [k, shot] : plan.shots) {
    os << nlohmann::json{{"set", "shots"}, {"k", k}, {"rows", detail::row_ids(shot)}}.dump() << '\n';
  }
  return os.str();
}

// Rebuild a plan from its manifest; `examples` must contain every row id.
inline KShotPlan restore_plan(const std::string& manifest,
                              const std::vector<LabeledExample>& examples) {
  std::unordered_map<std::uint64_t, const LabeledExample*> by_id;
  for (const auto& e : examples) by_id.emplace(e.record.row_id, &e);
  auto resolve = [&](const nlohmann::json& rows) {
    std::vector<LabeledExample> out;
    for (const auto& id : rows) {
      auto it = by_id.find(id.get<std::uint64_t>());
      if (it == by_id.end()) throw DataError("plan references unknown row id " + id.dump());
      out.push_back(*it->second);
    }
    return out;
  };
  std::istringstream is(manifest);
  std::string line;
  KShotPlan plan;
  bool have_head = false;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (!have_head) {
      plan.tissue = j.at("tissue").get<std::string>();
      plan.seed = j.at("seed").get<std::uint64_t>();
      plan.requested_ladder = j.at("requested_ladder").get<std::vector<std::size_t>>();
      plan.ladder = j.at("ladder").get<std::vector<std::size_t>>();
      plan.warnings = j.at("warnings").get<std::vector<std::string>>();
      have_head = true;
      continue;
    }
    const auto set = j.at("set").get<std::string>();
    if (set == "train_pool") {
      plan.train_pool = resolve(j.at("rows"));
    } else if (set == "test") {
      plan.test_set = resolve(j.at("rows"));
    } else if (set == "shots") {
      plan.shots[j.at("k").get<std::size_t>()] = resolve(j.at("rows"));
    }
  }
  if (!have_head) throw DataError("empty plan manifest");
  return plan;
}

}  // namespace synergy
