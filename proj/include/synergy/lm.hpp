#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "synergy/common.hpp"
#include "synergy/metrics.hpp"
#include "synergy/sampler.hpp"
#include "synergy/tensor.hpp"
#include "synergy/textualize.hpp"

namespace synergy {

struct LMConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t context_length = 96;
  std::size_t vocab_size = 4096;
  std::uint64_t seed = 0;

  void validate() const {
    if (!n_layers || !n_heads || !d_model || !d_ff || !context_length || !vocab_size) {
      throw std::invalid_argument("LMConfig: all sizes must be positive");
    }
    if (d_model % n_heads != 0) throw std::invalid_argument("LMConfig: d_model must be divisible by n_heads");
  }
};

// GPT-2 style pre-norm causal transformer with a two-way linear head on the
// hidden state of the final position.
//
// Positions are right-aligned: the last token of a sequence of length T gets
// position context_length - 1, so prompts keep the same positional encoding
// however much left padding they carry. Pad keys are never attended to.
class TransformerClassifier {
 public:
  explicit TransformerClassifier(const LMConfig& config) : config_(config) {
    config_.validate();
    Rng rng(Rng::derive(config_.seed, "transformer_init"));
    const std::size_t d = config_.d_model;
    const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
    register_param("wte", Tensor::normal({config_.vocab_size, d}, 0.02, rng));
    register_param("wpe", Tensor::normal({config_.context_length, d}, 0.01, rng));
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      register_param(p + "ln1.g", Tensor::filled({d}, 1.0, true));
      register_param(p + "ln1.b", Tensor::zeros({d}, true));
      register_param(p + "attn.w", Tensor::normal({d, 3 * d}, 0.02, rng));
      register_param(p + "attn.b", Tensor::zeros({3 * d}, true));
      register_param(p + "proj.w", Tensor::normal({d, d}, proj_std, rng));
      register_param(p + "proj.b", Tensor::zeros({d}, true));
      register_param(p + "ln2.g", Tensor::filled({d}, 1.0, true));
      register_param(p + "ln2.b", Tensor::zeros({d}, true));
      register_param(p + "fc.w", Tensor::normal({d, config_.d_ff}, 0.02, rng));
      register_param(p + "fc.b", Tensor::zeros({config_.d_ff}, true));
      register_param(p + "fc2.w", Tensor::normal({config_.d_ff, d}, proj_std, rng));
      register_param(p + "fc2.b", Tensor::zeros({d}, true));
    }
    register_param("lnf.g", Tensor::filled({d}, 1.0, true));
    register_param("lnf.b", Tensor::zeros({d}, true));
    register_param("head.w", Tensor::normal({d, 2}, 0.02, rng));
    register_param("head.b", Tensor::zeros({2}, true));
  }

  const LMConfig& config() const { return config_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  TransformerClassifier clone() const {
    TransformerClassifier copy = *this;
    for (auto& [name, t] : copy.params_) t = t.clone();
    return copy;
  }

  struct Trace {
    Tensor logits;
    // Residual stream after the embeddings and after each block, then the
    // final layer-norm output; each [batch*seq x d_model].
    std::vector<Tensor> hidden;
    std::size_t seq = 0;
  };

  Tensor forward(Tape& tape, const std::vector<const TokenizedExample*>& batch) const {
    return run(tape, batch, nullptr);
  }

  Tensor forward(Tape& tape, const std::vector<TokenizedExample>& batch) const {
    return forward(tape, pointers(batch));
  }

  Trace trace(const std::vector<TokenizedExample>& batch) const {
    Tape tape(false);
    Trace t;
    t.logits = run(tape, pointers(batch), &t);
    return t;
  }

 private:
  static std::vector<const TokenizedExample*> pointers(const std::vector<TokenizedExample>& batch) {
    std::vector<const TokenizedExample*> out;
    out.reserve(batch.size());
    for (const auto& e : batch) out.push_back(&e);
    return out;
  }

  void register_param(std::string name, Tensor t) { params_.emplace_back(std::move(name), std::move(t)); }
  const Tensor& param(std::size_t index) const { return params_[index].second; }

  Tensor run(Tape& tape, const std::vector<const TokenizedExample*>& batch, Trace* trace) const {
    if (batch.empty()) throw ShapeError("forward: empty batch");
    const std::size_t len = batch.front()->ids.size();
    std::size_t longest = 0;
    for (const auto* ex : batch) {
      if (ex->ids.size() != len || ex->mask.size() != len) throw ShapeError("forward: ragged batch");
      if (len == 0 || !ex->mask.back()) throw ShapeError("forward: final position must be a real token");
      std::size_t real = 0;
      for (std::size_t i = 0; i < len; ++i) {
        if (ex->mask[i]) {
          ++real;
        } else if (real != 0) {
          throw ShapeError("forward: padding must precede all real tokens");
        }
      }
      longest = std::max(longest, real);
    }
    if (longest > config_.context_length) throw SequenceTooLong(longest, config_.context_length);

    // Columns that are padding in every row cannot influence any real
    // position, so the batch is cut to its longest prompt.
    const std::size_t seq = longest;
    const std::size_t skip = len - seq;
    const std::size_t bsz = batch.size();
    std::vector<int> ids(bsz * seq), mask(bsz * seq), positions(bsz * seq);
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t i = 0; i < seq; ++i) {
        const int id = batch[b]->ids[skip + i];
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
          throw ShapeError("forward: token id " + std::to_string(id) + " outside vocabulary");
        }
        ids[b * seq + i] = id;
        mask[b * seq + i] = batch[b]->mask[skip + i];
        positions[b * seq + i] = static_cast<int>(config_.context_length - seq + i);
      }
    }

    std::size_t p = 0;
    const Tensor& wte = param(p++);
    const Tensor& wpe = param(p++);
    Tensor x = add(tape, embedding(tape, wte, ids), embedding(tape, wpe, positions));
    if (trace) trace->hidden.push_back(x);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const Tensor &ln1g = param(p), &ln1b = param(p + 1), &aw = param(p + 2), &ab = param(p + 3),
                   &pw = param(p + 4), &pb = param(p + 5), &ln2g = param(p + 6), &ln2b = param(p + 7),
                   &fw = param(p + 8), &fb = param(p + 9), &f2w = param(p + 10), &f2b = param(p + 11);
      p += 12;
      Tensor h = layer_norm(tape, x, ln1g, ln1b);
      Tensor qkv = linear(tape, h, aw, ab);
      Tensor a = attention(tape, qkv, mask, bsz, seq, config_.n_heads, /*causal=*/true);
      x = add(tape, x, linear(tape, a, pw, pb));
      Tensor h2 = layer_norm(tape, x, ln2g, ln2b);
      Tensor ff = linear(tape, gelu(tape, linear(tape, h2, fw, fb)), f2w, f2b);
      x = add(tape, x, ff);
      if (trace) trace->hidden.push_back(x);
    }
    Tensor hf = layer_norm(tape, x, param(p), param(p + 1));
    p += 2;
    if (trace) {
      trace->hidden.push_back(hf);
      trace->seq = seq;
    }
    std::vector<std::size_t> last(bsz);
    for (std::size_t b = 0; b < bsz; ++b) last[b] = b * seq + seq - 1;
    return linear(tape, gather_rows(tape, hf, last), param(p), param(p + 1));
  }

  LMConfig config_;
  ParameterList params_;
};

inline double positive_probability(double logit_neg, double logit_pos) {
  return 1.0 / (1.0 + std::exp(logit_neg - logit_pos));
}

inline Tensor forward(const TransformerClassifier& model, const std::vector<TokenizedExample>& batch) {
  Tape tape(false);
  return model.forward(tape, batch);
}

inline double predict_positive_probability(const TransformerClassifier& model, const TokenizedExample& ex) {
  Tape tape(false);
  Tensor logits = model.forward(tape, std::vector<const TokenizedExample*>{&ex});
  return positive_probability(logits[0], logits[1]);
}

inline std::vector<double> predict_positive_probabilities(const TransformerClassifier& model,
                                                          const std::vector<TokenizedExample>& examples,
                                                          std::size_t batch_size = 64) {
  std::vector<double> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<const TokenizedExample*> batch;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) {
      batch.push_back(&examples[i]);
    }
    Tape tape(false);
    Tensor logits = model.forward(tape, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(positive_probability(logits[2 * i], logits[2 * i + 1]));
  }
  return out;
}

struct TrainConfig {
  std::size_t epochs = 4;
  double learning_rate = 5e-5;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> steps;
  std::vector<double> epoch_mean_loss;
};

inline void write_loss_trace(std::ostream& os, const std::vector<LossRecord>& trace) {
  for (const auto& r : trace) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", r.loss);
    os << "{\"epoch\":" << r.epoch << ",\"step\":" << r.step << ",\"loss\":" << buf << "}\n";
  }
}

// Mini-batch AdamW over cross-entropy; the order is reshuffled every epoch
// from `seed`. The weights after the final epoch are kept.
// `on_epoch_end(epoch)` runs after each epoch.
inline TrainResult train(TransformerClassifier& model, const std::vector<TokenizedExample>& examples,
                         const TrainConfig& cfg,
                         const std::function<void(std::size_t)>& on_epoch_end = {}) {
  if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (examples.empty()) throw EmptyTrainingSet("train: no examples");
  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  TrainResult result;
  std::vector<std::size_t> order(examples.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(Rng::derive(cfg.seed, "epoch/" + std::to_string(epoch)));
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const TokenizedExample*> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        batch.push_back(&examples[order[i]]);
        labels.push_back(examples[order[i]].label);
      }
      try {
        Tape tape;
        zero_grads(model.parameters());
        Tensor loss = cross_entropy(tape, model.forward(tape, batch), labels);
        tape.backward(loss);
        adamw_step(model.parameters(), opt);
        result.steps.push_back({epoch, step, loss.item()});
        total += loss.item();
      } catch (const NumericalError& e) {
        throw NumericalError(e.op_name + " at step " + std::to_string(step));
      }
      ++batches;
      ++step;
    }
    result.epoch_mean_loss.push_back(total / static_cast<double>(batches));
    if (on_epoch_end) on_epoch_end(epoch);
  }
  zero_grads(model.parameters());
  return result;
}

struct ValidationRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double auroc = 0.0;
  double auprc = 0.0;
};

struct PretrainResult {
  TrainResult train;
  std::vector<ValidationRecord> validation;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
};

inline double mean_cross_entropy(const TransformerClassifier& model, const std::vector<TokenizedExample>& xs) {
  const auto probs = predict_positive_probabilities(model, xs);
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double p = xs[i].label == 1 ? probs[i] : 1.0 - probs[i];
    total -= std::log(std::max(p, 1e-300));
  }
  return total / static_cast<double>(xs.size());
}

// Common-tissue stage: stratified 80/20 train/validation split, then train()
// with validation metrics logged after every epoch.
inline PretrainResult pretrain_common(TransformerClassifier& model,
                                      const std::vector<TokenizedExample>& common_examples,
                                      const TrainConfig& cfg, double validation_fraction = 0.2) {
  if (common_examples.empty()) throw PretrainDataMissing("pretraining needs common-tissue examples");
  std::vector<int> labels;
  for (const auto& e : common_examples) labels.push_back(e.label);
  const auto held_out = stratified_holdout(labels, validation_fraction, Rng::derive(cfg.seed, "pretrain_split"));
  std::vector<TokenizedExample> train_set, validation;
  for (std::size_t i = 0; i < common_examples.size(); ++i) {
    (held_out[i] ? validation : train_set).push_back(common_examples[i]);
  }
  PretrainResult out;
  out.n_train = train_set.size();
  out.n_validation = validation.size();
  out.train = train(model, train_set, cfg, [&](std::size_t epoch) {
    const auto probs = predict_positive_probabilities(model, validation);
    std::vector<int> ys;
    for (const auto& v : validation) ys.push_back(v.label);
    out.validation.push_back({epoch, mean_cross_entropy(model, validation), auroc(probs, ys), auprc(probs, ys)});
  });
  return out;
}

inline void save_model(std::ostream& os, const TransformerClassifier& model) {
  save_checkpoint(os, model.parameters());
}

inline void load_model(std::istream& is, TransformerClassifier& model) {
  load_checkpoint(is, model.parameters());
}

}  // namespace synergy
