#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "synergy/tensor.hpp"

using namespace synergy;

namespace {

Tensor random_param(Shape shape, Rng& rng, double stddev = 1.0) { return Tensor::normal(std::move(shape), stddev, rng); }

// Reduces an op output to a scalar with fixed random weights so every output
// element contributes a distinct gradient.
Tensor weighted_sum(Tape& tape, const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = Tensor::normal(y.shape(), 1.0, rng);
  w.set_requires_grad(false);
  return sum(tape, mul(tape, y, w));
}

// Compares the tape gradient of every input against central differences.
void check_gradients(const std::function<Tensor(Tape&)>& loss_fn, std::vector<Tensor> inputs, double tol = 1e-6) {
  Tape tape;
  Tensor loss = loss_fn(tape);
  for (auto& t : inputs) t.zero_grad();
  tape.backward(loss);
  for (auto& t : inputs) {
    auto analytic = std::vector<double>(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      double& x = t.values()[i];
      const double numeric = oracle::central_difference(
          [&] {
            Tape off(false);
            return loss_fn(off).item();
          },
          x);
      EXPECT_LT(oracle::relative_error(analytic[i], numeric, 1e-6), tol)
          << "element " << i << " analytic " << analytic[i] << " numeric " << numeric;
    }
  }
}

}  // namespace

TEST(Tensor, ShapeValidation) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  Tape tape;
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  EXPECT_THROW(matmul(tape, a, b), ShapeError);
  EXPECT_THROW(add(tape, a, Tensor::zeros({3, 2})), ShapeError);
}

TEST(Tensor, MatmulMatchesNaiveLoop) {
  Rng rng(1);
  auto a = random_param({5, 7}, rng);
  auto b = random_param({7, 3}, rng);
  Tape tape(false);
  auto c = matmul(tape, a, b);
  auto expect = oracle::matmul({a.values().begin(), a.values().end()}, {b.values().begin(), b.values().end()}, 5, 7, 3);
  ASSERT_EQ(c.shape(), (Shape{5, 3}));
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(c[i], expect[i], 1e-12);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Rng rng(2);
  auto x = random_param({4, 6}, rng, 30.0);
  Tape tape(false);
  auto y = softmax(tape, x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_GE(y[r * 6 + c], 0.0);
      s += y[r * 6 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto big = Tensor::from({1, 2}, {1000.0, 0.0});
  auto p = softmax(tape, big, 1);
  EXPECT_NEAR(p[0], 1.0, 1e-12);
}

TEST(Tensor, LayerNormStatistics) {
  Rng rng(3);
  auto x = random_param({3, 8}, rng, 5.0);
  Tape tape(false);
  auto y = layer_norm(tape, x, Tensor::filled({8}, 1.0), Tensor::zeros({8}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += y[r * 8 + c];
    mean /= 8;
    for (std::size_t c = 0; c < 8; ++c) var += (y[r * 8 + c] - mean) * (y[r * 8 + c] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var / 8, 1.0, 1e-4);
  }
}

TEST(Tensor, CrossEntropyMatchesOracle) {
  Rng rng(4);
  auto logits = random_param({6, 2}, rng, 3.0);
  std::vector<int> labels{0, 1, 1, 0, 1, 0};
  Tape tape(false);
  auto loss = cross_entropy(tape, logits, labels);
  EXPECT_NEAR(loss.item(), oracle::cross_entropy({logits.values().begin(), logits.values().end()}, labels, 2), 1e-12);
  auto extreme = Tensor::from({1, 2}, {800.0, -800.0});
  EXPECT_NEAR(cross_entropy(tape, extreme, {1}).item(), 1600.0, 1e-9);
  EXPECT_THROW(cross_entropy(tape, logits, {0, 1}), ShapeError);
}

TEST(Tensor, GeluReference) {
  Tape tape(false);
  auto y = gelu(tape, Tensor::from({3}, {-1.0, 0.0, 2.0}));
  auto ref = [](double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  };
  EXPECT_NEAR(y[0], ref(-1.0), 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], ref(2.0), 1e-15);
}

TEST(Gradients, Matmul) {
  Rng rng(10);
  auto a = random_param({3, 4}, rng);
  auto b = random_param({4, 2}, rng);
  check_gradients([&](Tape& t) { return weighted_sum(t, matmul(t, a, b)); }, {a, b});
}

TEST(Gradients, LinearAndBias) {
  Rng rng(11);
  auto x = random_param({3, 4}, rng);
  auto w = random_param({4, 5}, rng);
  auto b = random_param({5}, rng);
  check_gradients([&](Tape& t) { return weighted_sum(t, linear(t, x, w, b)); }, {x, w, b});
}

TEST(Gradients, ElementwiseOps) {
  Rng rng(12);
  auto a = random_param({2, 3}, rng);
  auto b = random_param({2, 3}, rng);
  check_gradients([&](Tape& t) { return weighted_sum(t, scale(t, mul(t, add(t, a, b), a), 1.7)); }, {a, b});
}

TEST(Gradients, Gelu) {
  Rng rng(13);
  auto x = random_param({3, 5}, rng, 2.0);
  check_gradients([&](Tape& t) { return weighted_sum(t, gelu(t, x)); }, {x});
}

TEST(Gradients, Relu) {
  auto x = Tensor::from({1, 4}, {-1.3, -0.2, 0.4, 2.0}, true);
  check_gradients([&](Tape& t) { return weighted_sum(t, relu(t, x)); }, {x});
}

TEST(Gradients, LayerNorm) {
  Rng rng(14);
  auto x = random_param({3, 6}, rng, 2.0);
  auto g = random_param({6}, rng);
  auto b = random_param({6}, rng);
  check_gradients([&](Tape& t) { return weighted_sum(t, layer_norm(t, x, g, b)); }, {x, g, b}, 1e-5);
}

TEST(Gradients, Softmax) {
  Rng rng(15);
  auto x = random_param({3, 4}, rng);
  check_gradients([&](Tape& t) { return weighted_sum(t, softmax(t, x, 1)); }, {x});
}

TEST(Gradients, CrossEntropy) {
  Rng rng(16);
  auto x = random_param({5, 2}, rng, 2.0);
  check_gradients([&](Tape& t) { return cross_entropy(t, x, {1, 0, 0, 1, 1}); }, {x});
}

TEST(Gradients, EmbeddingAndGather) {
  Rng rng(17);
  auto table = random_param({6, 3}, rng);
  check_gradients(
      [&](Tape& t) {
        auto e = embedding(t, table, {2, 0, 2, 5});
        return weighted_sum(t, gather_rows(t, e, {3, 0, 0}));
      },
      {table});
}

TEST(Gradients, ReshapeAndConcat) {
  Rng rng(18);
  auto a = random_param({2, 6}, rng);
  auto b = random_param({4, 2}, rng);
  check_gradients([&](Tape& t) { return weighted_sum(t, concat_cols(t, reshape(t, a, {4, 3}), b)); }, {a, b});
}

TEST(Gradients, CausalMaskedAttention) {
  Rng rng(19);
  const std::size_t batch = 2, seq = 4, heads = 2, d = 4;
  auto qkv = random_param({batch * seq, 3 * d}, rng);
  std::vector<int> mask{0, 1, 1, 1, 1, 1, 1, 1};
  check_gradients([&](Tape& t) { return weighted_sum(t, attention(t, qkv, mask, batch, seq, heads, true)); }, {qkv});
}

TEST(Attention, PadQueryRowIsZeroAndFutureIsIgnored) {
  Rng rng(20);
  const std::size_t seq = 3, d = 4;
  auto qkv = random_param({seq, 3 * d}, rng);
  Tape tape(false);
  auto out = attention(tape, qkv, {0, 1, 1}, 1, seq, 2, true);
  for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(out[c], 0.0);
  // Changing the last position leaves earlier outputs unchanged.
  auto other = qkv.clone();
  for (std::size_t c = 0; c < 3 * d; ++c) other.values()[2 * 3 * d + c] += 1.0;
  auto out2 = attention(tape, other, {0, 1, 1}, 1, seq, 2, true);
  for (std::size_t c = 0; c < 2 * d; ++c) EXPECT_EQ(out[c], out2[c]);
}

TEST(Tape, BackwardErrors) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  Tape tape;
  auto y = scale(tape, x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
  auto s = sum(tape, y);
  tape.backward(s);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_THROW(tape.backward(s), Error);
}

TEST(Tape, DisabledTapeRecordsNothing) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  Tape tape(false);
  sum(tape, scale(tape, x, 2.0));
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, NonFiniteOutputNamesOp) {
  Tape tape(false);
  auto x = Tensor::from({1, 2}, {1e300, 1e300});
  try {
    mul(tape, x, x);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.op_name, "mul");
  }
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // With bias correction the first step is lr * g / (|g| + eps) = lr * sign(g).
  ParameterList params{{"w", Tensor::from({3}, {1.0, -2.0, 0.5}, true)}};
  params[0].second.grad()[0] = 0.3;
  params[0].second.grad()[1] = -4.0;
  params[0].second.grad()[2] = 0.0;
  OptimizerState st;
  st.learning_rate = 0.1;
  st.weight_decay = 0.0;
  adamw_step(params, st);
  EXPECT_NEAR(params[0].second[0], 0.9, 1e-6);
  EXPECT_NEAR(params[0].second[1], -1.9, 1e-6);
  EXPECT_DOUBLE_EQ(params[0].second[2], 0.5);
}

TEST(AdamW, DecoupledDecayAndZeroLearningRate) {
  ParameterList params{{"w", Tensor::from({1}, {2.0}, true)}};
  params[0].second.grad()[0] = 0.0;
  OptimizerState st;
  st.learning_rate = 0.5;
  st.weight_decay = 0.1;
  adamw_step(params, st);
  EXPECT_DOUBLE_EQ(params[0].second[0], 2.0 * (1.0 - 0.05));

  ParameterList frozen{{"w", Tensor::from({2}, {2.0, 3.0}, true)}};
  frozen[0].second.grad()[0] = 5.0;
  frozen[0].second.grad()[1] = -1.0;
  OptimizerState zero;
  zero.learning_rate = 0.0;
  adamw_step(frozen, zero);
  EXPECT_EQ(frozen[0].second[0], 2.0);
  EXPECT_EQ(frozen[0].second[1], 3.0);
}

TEST(AdamW, MissingGradientThrows) {
  ParameterList params{{"w", Tensor::from({1}, {2.0}, true)}};
  OptimizerState st;
  EXPECT_THROW(adamw_step(params, st), Error);
}

TEST(AdamW, MinimizesQuadratic) {
  ParameterList params{{"w", Tensor::from({2}, {3.0, -4.0}, true)}};
  OptimizerState st;
  st.learning_rate = 0.05;
  st.weight_decay = 0.0;
  for (int i = 0; i < 500; ++i) {
    Tape tape;
    auto& w = params[0].second;
    w.zero_grad();
    auto loss = sum(tape, mul(tape, w, w));
    tape.backward(loss);
    adamw_step(params, st);
  }
  EXPECT_NEAR(params[0].second[0], 0.0, 0.05);
  EXPECT_NEAR(params[0].second[1], 0.0, 0.05);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(30);
  ParameterList params{{"a", random_param({3, 2}, rng)}, {"b.bias", random_param({5}, rng)}};
  std::stringstream ss;
  save_checkpoint(ss, params);
  auto back = read_checkpoint(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t p = 0; p < 2; ++p) {
    EXPECT_EQ(back[p].first, params[p].first);
    EXPECT_EQ(back[p].second.shape(), params[p].second.shape());
    for (std::size_t i = 0; i < params[p].second.size(); ++i) EXPECT_EQ(back[p].second[i], params[p].second[i]);
  }
  EXPECT_EQ(checkpoint_checksum(back), checkpoint_checksum(params));

  ParameterList target{{"a", Tensor::zeros({3, 2}, true)}, {"b.bias", Tensor::zeros({5}, true)}};
  std::stringstream again;
  save_checkpoint(again, params);
  load_checkpoint(again, target);
  EXPECT_EQ(checkpoint_checksum(target), checkpoint_checksum(params));

  ParameterList wrong{{"a", Tensor::zeros({2, 3}, true)}, {"b.bias", Tensor::zeros({5}, true)}};
  std::stringstream third;
  save_checkpoint(third, params);
  EXPECT_THROW(load_checkpoint(third, wrong), DataError);

  std::stringstream junk("NOTACKPT");
  EXPECT_THROW(read_checkpoint(junk), DataError);
}

TEST(Checkpoint, ManifestListsEveryTensor) {
  ParameterList params{{"a", Tensor::filled({2, 2}, 1.5)}};
  std::ostringstream os;
  write_checkpoint_manifest(os, params);
  EXPECT_EQ(os.str(), "a\t[2x2]\t" + hex64(tensor_checksum(params[0].second)) + "\n");
}
