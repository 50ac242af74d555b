#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <random>

#include "pktrack/nn/checkpoint.hpp"
#include "pktrack/nn/layers.hpp"
#include "pktrack/nn/optim.hpp"

using namespace pktrack;
using namespace pktrack::nn;

namespace {

Mat random_mat(int r, int c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  return Mat::NullaryExpr(r, c, [&] { return n(rng); });
}

// Checks d f / d x for every entry of every input by central differences.
void check_gradients(std::vector<Tensor> inputs, const std::function<Tensor()>& f, double tol = 1e-6) {
  for (auto& x : inputs) x.zero_grad();
  f().backward();
  std::vector<Mat> analytic;
  for (const auto& x : inputs) analytic.push_back(x.grad());
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Mat& v = inputs[k].mutable_value();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double orig = v(i);
      v(i) = orig + h;
      const double fp = f().item();
      v(i) = orig - h;
      const double fm = f().item();
      v(i) = orig;
      const double fd = (fp - fm) / (2 * h);
      const double a = analytic[k](i);
      EXPECT_NEAR(a, fd, tol * std::max(1.0, std::abs(fd))) << "input " << k << " entry " << i;
    }
  }
}

// Scalarizes a matrix output with fixed random weights so every entry matters.
Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, Tensor(random_mat(static_cast<int>(y.rows()), static_cast<int>(y.cols()), rng))));
}

}  // namespace

TEST(Autograd, MatmulTransposeAddSub) {
  std::mt19937_64 rng(1);
  Tensor a(random_mat(3, 4, rng), true), b(random_mat(4, 2, rng), true), c(random_mat(3, 2, rng), true);
  check_gradients({a, b, c}, [&] { return project(sub(add(matmul(a, b), c), transpose(transpose(c))), 7); });
  check_gradients({a, b}, [&] { return project(matmul(transpose(b), transpose(a)), 8); });
}

TEST(Autograd, BroadcastMulScale) {
  std::mt19937_64 rng(2);
  Tensor a(random_mat(5, 3, rng), true), b(random_mat(1, 3, rng), true), c(random_mat(5, 3, rng), true);
  check_gradients({a, b, c}, [&] { return project(scale(mul(add_row(a, b), c), -1.7), 3); });
  check_gradients({a}, [&] { return mean(add_scalar(mul(a, a), 2.0)); });
}

TEST(Autograd, Nonlinearities) {
  std::mt19937_64 rng(3);
  Tensor a(random_mat(4, 4, rng, 2.0), true);
  check_gradients({a}, [&] { return project(sigmoid(a), 1); });
  check_gradients({a}, [&] { return project(gelu(a), 2); });
  check_gradients({a}, [&] { return project(abs(a), 3); });
  Tensor p((random_mat(3, 3, rng).array().abs() + 0.5).matrix(), true);
  check_gradients({p}, [&] { return project(log(p), 4); });
}

TEST(Autograd, SliceConcatGather) {
  std::mt19937_64 rng(4);
  Tensor a(random_mat(6, 4, rng), true), b(random_mat(2, 4, rng), true), t(random_mat(5, 4, rng), true);
  check_gradients({a, b, t}, [&] {
    const Tensor r = concat_rows({slice_rows(a, 1, 3), b, gather_rows(t, {0, 4, 4, 2})});
    const Tensor c = concat_cols({slice_cols(r, 0, 1), slice_cols(r, 2, 2)});
    return project(c, 5);
  });
}

TEST(Autograd, LayerNormAndSoftmax) {
  std::mt19937_64 rng(5);
  Tensor x(random_mat(4, 6, rng, 3.0), true), g(random_mat(1, 6, rng), true), b(random_mat(1, 6, rng), true);
  check_gradients({x, g, b}, [&] { return project(layer_norm(x, g, b), 6); });
  Tensor s(random_mat(3, 5, rng, 2.0), true);
  check_gradients({s}, [&] { return project(softmax_rows(s), 7); });
  const std::vector<bool> valid{true, false, true, true, false};
  check_gradients({s}, [&] { return project(softmax_rows(s, valid), 8); });
}

TEST(Autograd, MaskedSoftmaxIgnoresMaskedKeys) {
  Tensor s(Mat::Random(2, 4), false);
  const Mat y = softmax_rows(s, {true, false, true, false}).value();
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_EQ(y(1, 3), 0.0);
  EXPECT_NEAR(y.row(0).sum(), 1.0, 1e-15);
}

TEST(Autograd, BceWithLogitsMatchesScalarFormula) {
  std::mt19937_64 rng(6);
  Tensor z(random_mat(8, 1, rng, 3.0), true);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat y = Mat::NullaryExpr(8, 1, [&] { return u(rng); });
  Mat m = Mat::Ones(8, 1);
  m(2) = 0.0;
  double ref = 0.0;
  for (int i = 0; i < 8; ++i) {
    if (i == 2) continue;
    const double p = 1.0 / (1.0 + std::exp(-z.value()(i)));
    ref += -(y(i) * std::log(p) + (1 - y(i)) * std::log(1 - p));
  }
  EXPECT_NEAR(bce_with_logits(z, y, m).item(), ref / 7.0, 1e-12);
  check_gradients({z}, [&] { return bce_with_logits(z, y, m); });
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  Tensor a(Mat::Constant(1, 1, 3.0), true);
  const Tensor b = mul(a, a);
  sum(add(b, b)).backward();
  EXPECT_DOUBLE_EQ(a.grad()(0, 0), 12.0);
}

TEST(Autograd, DetachBlocksGradient) {
  Tensor a(Mat::Constant(1, 1, 2.0), true);
  const Tensor b = mul(a, a);
  sum(add(b.detach(), a)).backward();
  EXPECT_DOUBLE_EQ(a.grad()(0, 0), 1.0);
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
  Tensor a(Mat::Constant(1, 1, 1.0), true);
  Tensor x = a;
  for (int i = 0; i < 200000; ++i) x = add_scalar(x, 0.0);
  x.backward();
  EXPECT_DOUBLE_EQ(a.grad()(0, 0), 1.0);
}

TEST(Layers, EncoderGradientMatchesFiniteDifferences) {
  ParamStore store(11);
  Encoder enc(store, "enc", EncoderConfig{2, 8, 12, 2}, "encoder");
  MlpHead head(store, "head", 8, 8, 2, "head");
  std::mt19937_64 rng(12);
  const Tensor x(random_mat(5, 8, rng), false);
  const std::vector<bool> valid{true, true, true, false, true};
  std::vector<Tensor> params;
  for (auto& p : store.params()) params.push_back(p.tensor);
  check_gradients(params, [&] { return project(head(enc(x, valid)), 13); }, 1e-5);
}

TEST(Layers, MaskedKeysDoNotInfluenceValidRows) {
  ParamStore store(3);
  Encoder enc(store, "enc", EncoderConfig{2, 8, 8, 2}, "encoder");
  std::mt19937_64 rng(4);
  Mat x = random_mat(4, 8, rng);
  const std::vector<bool> valid{true, true, false, false};
  const Mat y1 = enc(Tensor(x), valid).value();
  x.row(2).setConstant(100.0);
  x.row(3).setConstant(-5.0);
  const Mat y2 = enc(Tensor(x), valid).value();
  EXPECT_LT((y1.topRows(2) - y2.topRows(2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Optim, AdamFitsLinearRegression) {
  ParamStore store(5);
  Linear lin(store, "lin", 3, 1, "all");
  std::mt19937_64 rng(6);
  const Mat x = random_mat(64, 3, rng);
  Mat w_true(3, 1);
  w_true << 1.5, -2.0, 0.5;
  const Mat y = x * w_true;
  AdamConfig cfg;
  cfg.default_lr = 0.05;
  Adam opt(store, cfg);
  double loss = 0;
  for (int it = 0; it < 500; ++it) {
    const Tensor r = sub(lin(Tensor(x)), Tensor(y));
    const Tensor l = mean(mul(r, r));
    loss = l.item();
    l.backward();
    opt.step();
  }
  EXPECT_LT(loss, 1e-6);
  EXPECT_NEAR(lin.w.value()(1, 0), -2.0, 1e-3);
}

TEST(Optim, GroupLearningRatesApply) {
  ParamStore store(1);
  Tensor a = store.zeros("a", 1, 1, "slow");
  Tensor b = store.zeros("b", 1, 1, "fast");
  AdamConfig cfg;
  cfg.group_lr = {{"slow", 1e-3}, {"fast", 1e-1}};
  Adam opt(store, cfg);
  sum(add(a, b)).backward();
  opt.step();
  // First Adam step moves each parameter by its learning rate.
  EXPECT_NEAR(a.value()(0, 0), -1e-3, 1e-9);
  EXPECT_NEAR(b.value()(0, 0), -1e-1, 1e-7);
}

TEST(Checkpoint, RoundTripIsExact) {
  ParamStore store(9);
  Encoder enc(store, "enc", EncoderConfig{1, 4, 4, 1}, "encoder");
  Checkpoint c;
  c.kind = "test";
  c.config = {{"layers", 1}};
  c.seed = 9;
  c.tensors = store.snapshot();
  const auto path = (std::filesystem::temp_directory_path() / "pktrack_ckpt.json").string();
  save_checkpoint(c, path);
  const Checkpoint back = load_checkpoint(path, "test");
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.config, c.config);
  ASSERT_EQ(back.tensors.size(), c.tensors.size());
  for (const auto& [name, m] : c.tensors) EXPECT_EQ(back.tensors.at(name), m);
  ParamStore other(123);
  Encoder enc2(other, "enc", EncoderConfig{1, 4, 4, 1}, "encoder");
  other.load(back.tensors);
  EXPECT_EQ(other.snapshot(), store.snapshot());
  EXPECT_THROW(load_checkpoint(path, "other"), SchemaError);
  std::filesystem::remove(path);
}
