#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "synergy/common.hpp"
#include "synergy/ingest.hpp"
#include "synergy/metrics.hpp"
#include "synergy/sampler.hpp"
#include "synergy/tensor.hpp"

namespace synergy {

// ---------------------------------------------------------------------------
// Categorical encoding

// String -> index map with index 0 reserved for categories not seen when the
// vocabulary was built.
class CategoryVocab {
 public:
  static constexpr std::size_t kUnknown = 0;

  void add(const std::string& value) {
    if (index_.count(value)) return;
    index_.emplace(value, values_.size() + 1);
    values_.push_back(value);
  }

  std::size_t index(const std::string& value) const {
    auto it = index_.find(value);
    return it == index_.end() ? kUnknown : it->second;
  }

  // Distinct categories plus the unknown slot.
  std::size_t size() const { return values_.size() + 1; }
  const std::vector<std::string>& values() const { return values_; }

 private:
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> values_;
};

struct FeatureVocabularies {
  // When set, drug1 and drug2 share one index space.
  bool shared_drugs = true;
  CategoryVocab drug1;
  CategoryVocab drug2;
  CategoryVocab cell;

  const CategoryVocab& drug2_vocab() const { return shared_drugs ? drug1 : drug2; }
};

// Categories are added in first-seen order, so indices are deterministic in
// the order of `train`.
inline FeatureVocabularies build_feature_vocabularies(const std::vector<LabeledExample>& train,
                                                      bool shared_drugs = true) {
  FeatureVocabularies v;
  v.shared_drugs = shared_drugs;
  for (const auto& e : train) {
    v.drug1.add(e.record.drug1);
    (shared_drugs ? v.drug1 : v.drug2).add(e.record.drug2);
    v.cell.add(e.record.cell_line);
  }
  return v;
}

struct EncodedRow {
  std::size_t drug1 = 0;
  std::size_t drug2 = 0;
  std::size_t cell = 0;
  double ri1 = 0.0;
  double ri2 = 0.0;
  int label = 0;
};

inline std::vector<EncodedRow> encode_rows(const std::vector<LabeledExample>& examples,
                                           const FeatureVocabularies& v) {
  std::vector<EncodedRow> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    out.push_back({v.drug1.index(e.record.drug1), v.drug2_vocab().index(e.record.drug2),
                   v.cell.index(e.record.cell_line), e.record.ri1, e.record.ri2, e.label});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-boosted trees

inline constexpr std::size_t kTreeFeatures = 5;
inline constexpr const char* kTreeFeatureNames[kTreeFeatures] = {"drug1", "drug2", "cell", "ri1", "ri2"};

inline bool is_categorical_feature(std::size_t f) { return f < 3; }

inline double tree_feature(const EncodedRow& r, std::size_t f) {
  switch (f) {
    case 0: return static_cast<double>(r.drug1);
    case 1: return static_cast<double>(r.drug2);
    case 2: return static_cast<double>(r.cell);
    case 3: return r.ri1;
    default: return r.ri2;
  }
}

struct GbdtConfig {
  std::size_t n_trees = 1000;
  std::size_t max_depth = 20;
  double shrinkage = 0.3;
  double lambda = 1.0;
  double min_child_weight = 1e-6;
  double min_split_gain = 1e-12;

  static GbdtConfig desk() {
    GbdtConfig c;
    c.n_trees = 200;
    c.max_depth = 6;
    return c;
  }
};

// A node either splits or is a leaf. Categorical splits send rows whose
// category equals `value` left; continuous splits send rows with
// feature < value left.
struct TreeNode {
  bool leaf = true;
  std::size_t feature = 0;
  double value = 0.0;
  std::size_t left = 0;
  std::size_t right = 0;
  double weight = 0.0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  std::size_t leaf_index(const EncodedRow& r) const {
    std::size_t i = 0;
    while (!nodes[i].leaf) {
      const auto& n = nodes[i];
      const double x = tree_feature(r, n.feature);
      const bool go_left = is_categorical_feature(n.feature) ? x == n.value : x < n.value;
      i = go_left ? n.left : n.right;
    }
    return i;
  }

  double output(const EncodedRow& r) const { return nodes[leaf_index(r)].weight; }

  std::size_t depth() const { return depth_from(0); }

 private:
  std::size_t depth_from(std::size_t i) const {
    if (nodes[i].leaf) return 0;
    return 1 + std::max(depth_from(nodes[i].left), depth_from(nodes[i].right));
  }
};

struct GbdtModel {
  double base_score = 0.0;
  double shrinkage = 0.3;
  std::vector<RegressionTree> trees;

  double margin(const EncodedRow& r) const {
    double m = base_score;
    for (const auto& t : trees) m += shrinkage * t.output(r);
    return m;
  }
};

// Raised for single-label training data; carries the constant model at the
// base rate so callers can still score.
struct DegenerateFit : DataError {
  DegenerateFit(const std::string& msg, GbdtModel m) : DataError(msg), model(std::move(m)) {}
  GbdtModel model;
};

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double logistic_loss(double margin, int label) {
  // log(1 + e^m) - y*m, written to avoid overflow.
  const double softplus = margin > 0 ? margin + std::log1p(std::exp(-margin)) : std::log1p(std::exp(margin));
  return softplus - (label == 1 ? margin : 0.0);
}

inline double gbdt_training_loss(const GbdtModel& model, const std::vector<EncodedRow>& rows) {
  double total = 0.0;
  for (const auto& r : rows) total += logistic_loss(model.margin(r), r.label);
  return total / static_cast<double>(rows.size());
}

inline std::vector<double> gbdt_predict(const GbdtModel& model, const std::vector<EncodedRow>& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(sigmoid(model.margin(r)));
  return out;
}

namespace detail {

struct SplitChoice {
  double gain = 0.0;
  std::size_t feature = 0;
  double value = 0.0;
  bool found = false;
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<EncodedRow>& rows, const std::vector<double>& g, const std::vector<double>& h,
              const GbdtConfig& cfg)
      : rows_(rows), g_(g), h_(h), cfg_(cfg) {
    for (const auto& r : rows) {
      n_categories_ = std::max({n_categories_, r.drug1 + 1, r.drug2 + 1, r.cell + 1});
    }
  }

  RegressionTree build(std::vector<std::size_t> idx) {
    tree_.nodes.clear();
    tree_.nodes.emplace_back();
    leaf_rows_.clear();
    Sorted sorted;
    for (std::size_t c = 0; c < 2; ++c) {
      sorted[c] = idx;
      std::stable_sort(sorted[c].begin(), sorted[c].end(), [&](std::size_t a, std::size_t b) {
        return tree_feature(rows_[a], 3 + c) < tree_feature(rows_[b], 3 + c);
      });
    }
    grow(0, std::move(idx), std::move(sorted), 0);
    return tree_;
  }

  // Rows reaching each leaf, in node order.
  const std::map<std::size_t, std::vector<std::size_t>>& leaf_rows() const { return leaf_rows_; }

 private:
  // Node rows ordered by each continuous feature.
  using Sorted = std::array<std::vector<std::size_t>, 2>;

  double score(double G, double H) const { return G * G / (H + cfg_.lambda); }

  SplitChoice best_split(const std::vector<std::size_t>& idx, const Sorted& sorted, double G, double H) {
    SplitChoice best;
    const double parent = score(G, H);
    auto consider = [&](std::size_t f, double value, double GL, double HL) {
      const double GR = G - GL, HR = H - HL;
      if (HL < cfg_.min_child_weight || HR < cfg_.min_child_weight) return;
      const double gain = 0.5 * (score(GL, HL) + score(GR, HR) - parent);
      // Strict improvement keeps the earliest feature/value on ties.
      if (gain > cfg_.min_split_gain && (!best.found || gain > best.gain)) best = {gain, f, value, true};
    };
    for (std::size_t f = 0; f < 3; ++f) {
      sum_g_.assign(n_categories_, 0.0);
      sum_h_.assign(n_categories_, 0.0);
      count_.assign(n_categories_, 0);
      std::size_t distinct = 0;
      for (auto i : idx) {
        const auto v = static_cast<std::size_t>(tree_feature(rows_[i], f));
        distinct += count_[v]++ == 0;
        sum_g_[v] += g_[i];
        sum_h_[v] += h_[i];
      }
      if (distinct < 2) continue;
      for (std::size_t v = 0; v < n_categories_; ++v) {
        if (count_[v]) consider(f, static_cast<double>(v), sum_g_[v], sum_h_[v]);
      }
    }
    for (std::size_t c = 0; c < 2; ++c) {
      const std::size_t f = 3 + c;
      const auto& order = sorted[c];
      double GL = 0.0, HL = 0.0;
      for (std::size_t j = 0; j + 1 < order.size(); ++j) {
        GL += g_[order[j]];
        HL += h_[order[j]];
        const double a = tree_feature(rows_[order[j]], f), b = tree_feature(rows_[order[j + 1]], f);
        if (a == b) continue;
        consider(f, a + (b - a) / 2.0, GL, HL);
      }
    }
    return best;
  }

  void grow(std::size_t node, std::vector<std::size_t> idx, Sorted sorted, std::size_t depth) {
    double G = 0.0, H = 0.0;
    for (auto i : idx) {
      G += g_[i];
      H += h_[i];
    }
    SplitChoice s;
    if (depth < cfg_.max_depth && idx.size() >= 2) s = best_split(idx, sorted, G, H);
    if (!s.found) {
      tree_.nodes[node].leaf = true;
      tree_.nodes[node].weight = -G / (H + cfg_.lambda);
      leaf_rows_[node] = std::move(idx);
      return;
    }
    auto goes_left = [&](std::size_t i) {
      const double x = tree_feature(rows_[i], s.feature);
      return is_categorical_feature(s.feature) ? x == s.value : x < s.value;
    };
    std::vector<std::size_t> left, right;
    for (auto i : idx) (goes_left(i) ? left : right).push_back(i);
    Sorted sl, sr;
    for (std::size_t c = 0; c < 2; ++c) {
      for (auto i : sorted[c]) (goes_left(i) ? sl[c] : sr[c]).push_back(i);
    }
    const std::size_t l = tree_.nodes.size();
    tree_.nodes.emplace_back();
    const std::size_t r = tree_.nodes.size();
    tree_.nodes.emplace_back();
    TreeNode& n = tree_.nodes[node];
    n.leaf = false;
    n.feature = s.feature;
    n.value = s.value;
    n.left = l;
    n.right = r;
    grow(l, std::move(left), std::move(sl), depth + 1);
    grow(r, std::move(right), std::move(sr), depth + 1);
  }

  const std::vector<EncodedRow>& rows_;
  const std::vector<double>& g_;
  const std::vector<double>& h_;
  const GbdtConfig& cfg_;
  std::size_t n_categories_ = 1;
  std::vector<double> sum_g_, sum_h_;
  std::vector<std::size_t> count_;
  RegressionTree tree_;
  std::map<std::size_t, std::vector<std::size_t>> leaf_rows_;
};

}  // namespace detail

inline double clamped_logit(double p) {
  p = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return std::log(p / (1.0 - p));
}

// Second-order boosting on logistic loss with exact greedy splits. A leaf
// whose Newton step would raise the loss of the rows it holds is halved
// until it does not (or zeroed), so training loss never increases.
// `seed` is recorded for interface symmetry; the exact greedy search draws
// no randomness.
inline GbdtModel gbdt_fit(const std::vector<EncodedRow>& rows, const GbdtConfig& cfg, std::uint64_t seed = 0) {
  (void)seed;
  if (rows.empty()) throw EmptyTrainingSet("gbdt_fit: no rows");
  if (!(cfg.shrinkage > 0.0)) throw std::invalid_argument("gbdt_fit: shrinkage must be positive");
  std::size_t pos = 0;
  for (const auto& r : rows) pos += r.label == 1;
  GbdtModel model;
  model.shrinkage = cfg.shrinkage;
  model.base_score = clamped_logit(static_cast<double>(pos) / static_cast<double>(rows.size()));
  if (pos == 0 || pos == rows.size()) {
    throw DegenerateFit("gbdt_fit: training rows carry a single label", model);
  }
  std::vector<double> margin(rows.size(), model.base_score), g(rows.size()), h(rows.size());
  std::vector<std::size_t> all(rows.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t t = 0; t < cfg.n_trees; ++t) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double p = sigmoid(margin[i]);
      g[i] = p - rows[i].label;
      h[i] = p * (1.0 - p);
    }
    detail::TreeBuilder builder(rows, g, h, cfg);
    RegressionTree tree = builder.build(all);
    for (const auto& [leaf, members] : builder.leaf_rows()) {
      double& w = tree.nodes[leaf].weight;
      auto loss_with = [&](double weight) {
        double s = 0.0;
        for (auto i : members) s += logistic_loss(margin[i] + cfg.shrinkage * weight, rows[i].label);
        return s;
      };
      const double before = loss_with(0.0);
      int halvings = 0;
      while (w != 0.0 && loss_with(w) > before && halvings < 60) {
        w *= 0.5;
        ++halvings;
      }
      if (loss_with(w) > before) w = 0.0;
    }
    for (std::size_t i = 0; i < rows.size(); ++i) margin[i] += cfg.shrinkage * tree.output(rows[i]);
    model.trees.push_back(std::move(tree));
  }
  return model;
}

// Structured-text forest:
//   gbdt 1
//   base_score <v>
//   shrinkage <v>
//   trees <n>
//   tree <t> <node count>
//   split <feature> <value> <left> <right> | leaf <weight>   (one per node)
inline void save_gbdt(std::ostream& os, const GbdtModel& m) {
  auto real = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "gbdt 1\nbase_score " << real(m.base_score) << "\nshrinkage " << real(m.shrinkage) << "\ntrees "
     << m.trees.size() << '\n';
  for (std::size_t t = 0; t < m.trees.size(); ++t) {
    os << "tree " << t << ' ' << m.trees[t].nodes.size() << '\n';
    for (const auto& n : m.trees[t].nodes) {
      if (n.leaf) {
        os << "leaf " << real(n.weight) << '\n';
      } else {
        os << "split " << kTreeFeatureNames[n.feature] << ' ' << real(n.value) << ' ' << n.left << ' ' << n.right
           << '\n';
      }
    }
  }
}

inline GbdtModel load_gbdt(std::istream& is) {
  auto fail = [](const std::string& why) { return DataError("gbdt model: " + why); };
  std::string word;
  int version = 0;
  if (!(is >> word >> version) || word != "gbdt" || version != 1) throw fail("bad header");
  GbdtModel m;
  std::size_t n_trees = 0;
  if (!(is >> word >> m.base_score) || word != "base_score") throw fail("missing base_score");
  if (!(is >> word >> m.shrinkage) || word != "shrinkage") throw fail("missing shrinkage");
  if (!(is >> word >> n_trees) || word != "trees") throw fail("missing tree count");
  for (std::size_t t = 0; t < n_trees; ++t) {
    std::size_t id = 0, n_nodes = 0;
    if (!(is >> word >> id >> n_nodes) || word != "tree" || id != t || n_nodes == 0) throw fail("bad tree header");
    RegressionTree tree;
    for (std::size_t k = 0; k < n_nodes; ++k) {
      TreeNode n;
      if (!(is >> word)) throw fail("truncated tree");
      if (word == "leaf") {
        if (!(is >> n.weight)) throw fail("bad leaf");
      } else if (word == "split") {
        std::string feature;
        if (!(is >> feature >> n.value >> n.left >> n.right)) throw fail("bad split");
        auto it = std::find(std::begin(kTreeFeatureNames), std::end(kTreeFeatureNames), feature);
        if (it == std::end(kTreeFeatureNames)) throw fail("unknown feature " + feature);
        n.feature = static_cast<std::size_t>(it - std::begin(kTreeFeatureNames));
        n.leaf = false;
        if (n.left >= n_nodes || n.right >= n_nodes || n.left <= k || n.right <= k) throw fail("bad child index");
      } else {
        throw fail("unknown node kind " + word);
      }
      tree.nodes.push_back(n);
    }
    m.trees.push_back(std::move(tree));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Attention over categorical embeddings

struct TabAttnConfig {
  std::size_t d_embed = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
  std::size_t d_hidden = 64;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  std::size_t epochs = 50;
  std::size_t finetune_epochs = 1;
  std::size_t batch_size = 32;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  static TabAttnConfig desk() {
    TabAttnConfig c;
    c.d_embed = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.d_ff = 32;
    c.d_hidden = 32;
    c.learning_rate = 3e-3;
    c.epochs = 30;
    return c;
  }
};

// Rows are a three-token sequence (drug1, drug2, cell). Each token is the sum
// of its category embedding and a learned column embedding; pre-norm
// attention blocks contextualize the tokens, and the flattened result is
// concatenated with the standardized sensitivities before an MLP head.
class TabAttnModel {
 public:
  TabAttnModel(const TabAttnConfig& cfg, std::size_t n_drug1, std::size_t n_drug2, std::size_t n_cell,
               bool shared_drugs)
      : cfg_(cfg), n_drug1_(n_drug1), n_drug2_(n_drug2), n_cell_(n_cell), shared_(shared_drugs) {
    if (!cfg.d_embed || !cfg.n_heads || cfg.d_embed % cfg.n_heads) {
      throw std::invalid_argument("TabAttnConfig: d_embed must be a positive multiple of n_heads");
    }
    Rng rng(Rng::derive(cfg.seed, "tabattn_init"));
    const std::size_t d = cfg.d_embed;
    params_.emplace_back("embed", Tensor::normal({table_rows(), d}, 0.1, rng));
    params_.emplace_back("column", Tensor::normal({3, d}, 0.1, rng));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "b" + std::to_string(l) + ".";
      params_.emplace_back(p + "ln1.g", Tensor::filled({d}, 1.0, true));
      params_.emplace_back(p + "ln1.b", Tensor::zeros({d}, true));
      params_.emplace_back(p + "attn.w", Tensor::normal({d, 3 * d}, 0.1, rng));
      params_.emplace_back(p + "attn.b", Tensor::zeros({3 * d}, true));
      params_.emplace_back(p + "proj.w", Tensor::normal({d, d}, 0.1, rng));
      params_.emplace_back(p + "proj.b", Tensor::zeros({d}, true));
      params_.emplace_back(p + "ln2.g", Tensor::filled({d}, 1.0, true));
      params_.emplace_back(p + "ln2.b", Tensor::zeros({d}, true));
      params_.emplace_back(p + "fc.w", Tensor::normal({d, cfg.d_ff}, 0.1, rng));
      params_.emplace_back(p + "fc.b", Tensor::zeros({cfg.d_ff}, true));
      params_.emplace_back(p + "fc2.w", Tensor::normal({cfg.d_ff, d}, 0.1, rng));
      params_.emplace_back(p + "fc2.b", Tensor::zeros({d}, true));
    }
    const std::size_t flat = 3 * d + 2;
    params_.emplace_back("mlp.w", Tensor::normal({flat, cfg.d_hidden}, 1.0 / std::sqrt(double(flat)), rng));
    params_.emplace_back("mlp.b", Tensor::zeros({cfg.d_hidden}, true));
    params_.emplace_back("out.w", Tensor::normal({cfg.d_hidden, 2}, 1.0 / std::sqrt(double(cfg.d_hidden)), rng));
    params_.emplace_back("out.b", Tensor::zeros({2}, true));
  }

  const TabAttnConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  // Standardization of the two sensitivities, fixed from the fit data.
  void set_standardization(const std::vector<EncodedRow>& rows) {
    for (int c = 0; c < 2; ++c) {
      double mean = 0.0, var = 0.0;
      for (const auto& r : rows) mean += c ? r.ri2 : r.ri1;
      mean /= static_cast<double>(rows.size());
      for (const auto& r : rows) {
        const double x = (c ? r.ri2 : r.ri1) - mean;
        var += x * x;
      }
      mean_[c] = mean;
      scale_[c] = 1.0 / std::sqrt(var / static_cast<double>(rows.size()) + 1e-8);
    }
  }

  std::array<double, 4> standardization() const { return {mean_[0], scale_[0], mean_[1], scale_[1]}; }
  void set_standardization(const std::array<double, 4>& s) {
    mean_[0] = s[0];
    scale_[0] = s[1];
    mean_[1] = s[2];
    scale_[1] = s[3];
  }

  TabAttnModel clone() const {
    TabAttnModel copy = *this;
    for (auto& [name, t] : copy.params_) t = t.clone();
    return copy;
  }

  Tensor forward(Tape& tape, const std::vector<const EncodedRow*>& batch) const {
    const std::size_t n = batch.size(), d = cfg_.d_embed;
    if (n == 0) throw ShapeError("tabattn forward: empty batch");
    std::vector<int> ids(3 * n), cols(3 * n);
    std::vector<double> cont(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = *batch[i];
      if (r.drug1 >= n_drug1_ || r.drug2 >= n_drug2_ || r.cell >= n_cell_) {
        throw ShapeError("tabattn forward: category index outside vocabulary");
      }
      ids[3 * i] = static_cast<int>(r.drug1);
      ids[3 * i + 1] = static_cast<int>((shared_ ? 0 : n_drug1_) + r.drug2);
      ids[3 * i + 2] = static_cast<int>(drug_rows() + r.cell);
      for (int c = 0; c < 3; ++c) cols[3 * i + c] = c;
      cont[2 * i] = (r.ri1 - mean_[0]) * scale_[0];
      cont[2 * i + 1] = (r.ri2 - mean_[1]) * scale_[1];
    }
    std::size_t p = 0;
    const Tensor& embed = params_[p++].second;
    const Tensor& column = params_[p++].second;
    Tensor x = add(tape, embedding(tape, embed, ids), embedding(tape, column, cols));
    const std::vector<int> mask(3 * n, 1);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      auto P = [&](std::size_t k) -> const Tensor& { return params_[p + k].second; };
      Tensor h = layer_norm(tape, x, P(0), P(1));
      Tensor a = attention(tape, linear(tape, h, P(2), P(3)), mask, n, 3, cfg_.n_heads, /*causal=*/false);
      x = add(tape, x, linear(tape, a, P(4), P(5)));
      Tensor h2 = layer_norm(tape, x, P(6), P(7));
      x = add(tape, x, linear(tape, gelu(tape, linear(tape, h2, P(8), P(9))), P(10), P(11)));
      p += 12;
    }
    Tensor flat = concat_cols(tape, reshape(tape, x, {n, 3 * d}), Tensor::from({n, 2}, std::move(cont)));
    Tensor hidden = relu(tape, linear(tape, flat, params_[p].second, params_[p + 1].second));
    return linear(tape, hidden, params_[p + 2].second, params_[p + 3].second);
  }

 private:
  std::size_t drug_rows() const { return shared_ ? n_drug1_ : n_drug1_ + n_drug2_; }
  std::size_t table_rows() const { return drug_rows() + n_cell_; }

  TabAttnConfig cfg_;
  std::size_t n_drug1_, n_drug2_, n_cell_;
  bool shared_;
  double mean_[2] = {0.0, 0.0};
  double scale_[2] = {1.0, 1.0};
  ParameterList params_;
};

inline TabAttnModel make_tabattn(const TabAttnConfig& cfg, const FeatureVocabularies& v) {
  return TabAttnModel(cfg, v.drug1.size(), v.drug2_vocab().size(), v.cell.size(), v.shared_drugs);
}

inline std::vector<double> tabattn_predict(const TabAttnModel& model, const std::vector<EncodedRow>& rows,
                                           std::size_t batch_size = 256) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    std::vector<const EncodedRow*> batch;
    for (std::size_t i = start; i < std::min(rows.size(), start + batch_size); ++i) batch.push_back(&rows[i]);
    Tape tape(false);
    Tensor logits = model.forward(tape, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(sigmoid(logits[2 * i + 1] - logits[2 * i]));
  }
  return out;
}

inline double tabattn_loss(const TabAttnModel& model, const std::vector<EncodedRow>& rows) {
  const auto p = tabattn_predict(model, rows);
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    total -= std::log(std::max(rows[i].label == 1 ? p[i] : 1.0 - p[i], 1e-300));
  }
  return total / static_cast<double>(rows.size());
}

namespace detail {
inline double tabattn_epoch(TabAttnModel& model, const std::vector<EncodedRow>& rows, OptimizerState& opt,
                            std::uint64_t seed, std::size_t epoch, std::size_t batch_size) {
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, "tabattn_epoch/" + std::to_string(epoch)));
  rng.shuffle(order);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<const EncodedRow*> batch;
    std::vector<int> labels;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      batch.push_back(&rows[order[i]]);
      labels.push_back(rows[order[i]].label);
    }
    Tape tape;
    zero_grads(model.parameters());
    Tensor loss = cross_entropy(tape, model.forward(tape, batch), labels);
    tape.backward(loss);
    adamw_step(model.parameters(), opt);
    total += loss.item();
    ++batches;
  }
  zero_grads(model.parameters());
  return total / static_cast<double>(batches);
}
}  // namespace detail

struct TabAttnEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_auroc = 0.0;
};

struct TabAttnFit {
  TabAttnModel model;
  std::vector<TabAttnEpoch> history;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0.0;
};

// Trains on a stratified split of `rows` and returns the checkpoint of the
// epoch with the lowest validation loss (earliest on ties).
inline TabAttnFit tabattn_fit(const std::vector<EncodedRow>& rows, const FeatureVocabularies& vocab,
                              const TabAttnConfig& cfg) {
  if (rows.empty()) throw EmptyTrainingSet("tabattn_fit: no rows");
  if (cfg.epochs < 1) throw std::invalid_argument("tabattn_fit: epochs must be >= 1");
  std::vector<int> labels;
  for (const auto& r : rows) labels.push_back(r.label);
  const auto held_out = stratified_holdout(labels, cfg.validation_fraction, Rng::derive(cfg.seed, "tabattn_split"));
  std::vector<EncodedRow> train_rows, validation;
  for (std::size_t i = 0; i < rows.size(); ++i) (held_out[i] ? validation : train_rows).push_back(rows[i]);

  TabAttnModel model = make_tabattn(cfg, vocab);
  model.set_standardization(train_rows);
  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  TabAttnFit fit{model.clone(), {}, 0, 0.0};
  std::vector<int> val_labels;
  for (const auto& r : validation) val_labels.push_back(r.label);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    TabAttnEpoch e;
    e.epoch = epoch;
    e.train_loss = detail::tabattn_epoch(model, train_rows, opt, cfg.seed, epoch, cfg.batch_size);
    e.validation_loss = tabattn_loss(model, validation);
    e.validation_auroc = auroc(tabattn_predict(model, validation), val_labels);
    fit.history.push_back(e);
    if (epoch == 0 || e.validation_loss < fit.best_validation_loss) {
      fit.best_validation_loss = e.validation_loss;
      fit.best_epoch = epoch;
      fit.model = model.clone();
    }
  }
  return fit;
}

// Continues training on a k-shot set for cfg.finetune_epochs epochs at the
// fit learning rate and decay; the input model is left untouched.
inline TabAttnModel tabattn_finetune(const TabAttnModel& model, const std::vector<EncodedRow>& shots,
                                     const TabAttnConfig& cfg) {
  TabAttnModel tuned = model.clone();
  if (shots.empty()) return tuned;
  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    detail::tabattn_epoch(tuned, shots, opt, Rng::derive(cfg.seed, "tabattn_finetune"), epoch, cfg.batch_size);
  }
  return tuned;
}

// Standardization line, then the parameter checkpoint.
inline void save_tabattn(std::ostream& os, const TabAttnModel& m) {
  const auto s = m.standardization();
  char buf[128];
  std::snprintf(buf, sizeof buf, "tabattn 1 %.17g %.17g %.17g %.17g\n", s[0], s[1], s[2], s[3]);
  os << buf;
  save_checkpoint(os, m.parameters());
}

// `m` must have been built with the same config and vocabulary sizes.
inline void load_tabattn(std::istream& is, TabAttnModel& m) {
  std::string line;
  std::getline(is, line);
  std::istringstream ls(line);
  std::string magic;
  int version = 0;
  std::array<double, 4> s{};
  if (!(ls >> magic >> version >> s[0] >> s[1] >> s[2] >> s[3]) || magic != "tabattn" || version != 1) {
    throw DataError("tabattn checkpoint: bad header");
  }
  m.set_standardization(s);
  load_checkpoint(is, m.parameters());
}

inline std::uint64_t tabattn_checksum(const TabAttnModel& m) {
  std::ostringstream os;
  save_tabattn(os, m);
  return fnv1a64(os.str());
}

}  // namespace synergy
