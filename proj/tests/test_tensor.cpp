#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mdcap/rng.hpp"
#include "mdcap/tensor.hpp"

using namespace mdcap;
using D = Tensor<double>;

namespace {

D random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> data(numel(shape));
  for (auto& x : data) x = rng.normal();
  return D::from_values(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("matmul against identity, gradient of sum is all-ones") {
  Rng rng(1);
  auto x = random_tensor({4, 4}, rng, true);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  auto loss = sum(matmul(D::from_values({4, 4}, eye), x));
  backward(loss);
  for (int i = 0; i < 16; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0).epsilon(1e-12));

  auto y = matmul(D::from_values({4, 4}, eye), x);
  for (int i = 0; i < 16; ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
  auto flat = softmax(D::full({8}, 3.25));
  for (double v : flat.values()) CHECK(v == doctest::Approx(0.125).epsilon(1e-12));

  Rng rng(2);
  auto x = random_tensor({17, 9}, rng);
  auto y = softmax(x);
  for (int r = 0; r < 17; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) s += y.values()[r * 9 + c];
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("cross entropy of all-zero logits is ln K") {
  const int k = 23;
  auto nll = cross_entropy(D::zeros({1, k}), {11});
  CHECK(nll.values()[0] == doctest::Approx(std::log(double(k))).epsilon(1e-12));
}

TEST_CASE("shape mismatches name the op and shapes") {
  auto a = D::zeros({2, 3});
  auto b = D::zeros({4, 5});
  try {
    (void)matmul(a, b);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,5)") != std::string::npos);
  }
  CHECK_THROWS_AS((void)add(D::zeros({2, 2}), D::zeros({3, 3})), std::invalid_argument);
  CHECK_THROWS_AS((void)mul(D::zeros({2, 2}), D::zeros({4})), std::invalid_argument);
}

TEST_CASE("gradients accumulate across reuse") {
  auto x = D::from_values({2}, {1.5, -0.5}, true);
  auto loss = sum(add(mul(x, x), x));  // x^2 + x, summed
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2 * 1.5 + 1).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(2 * -0.5 + 1).epsilon(1e-12));
}

TEST_CASE("no-grad mode records nothing") {
  auto x = D::from_values({2}, {1.0, 2.0}, true);
  NoGradGuard ng;
  auto y = mul(x, x);
  CHECK(!y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("gradcheck: closed-form sum of squares") {
  Rng rng(3);
  auto x = random_tensor({12}, rng);
  const double err = gradcheck([](D v) { return sum(mul(v, v)); }, x);
  CHECK(err < 1e-8);
}

TEST_CASE("gradcheck battery over primitives, 20 seeds each") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = Rng::stream(1000, Rng::kGeneric, seed);
    const int m = 2 + int(rng.uniform_below(4));
    const int k = 2 + int(rng.uniform_below(4));
    const int n = 2 + int(rng.uniform_below(4));

    // matmul, both operands
    {
      auto a = random_tensor({m, k}, rng);
      auto b = random_tensor({k, n}, rng);
      CHECK(gradcheck([&](D v) { return sum(matmul(v, b)); }, a) < 1e-4);
      CHECK(gradcheck([&](D v) { return sum(matmul(a, v)); }, b) < 1e-4);
    }
    // batched matmul with a cycling right operand
    {
      auto a = random_tensor({4, m, k}, rng);
      auto b = random_tensor({2, k, n}, rng);
      CHECK(gradcheck([&](D v) { return sum(matmul(v, b)); }, a) < 1e-4);
      CHECK(gradcheck([&](D v) { return sum(matmul(a, v)); }, b) < 1e-4);
    }
    // add (same shape and bias broadcast)
    {
      auto a = random_tensor({m, n}, rng);
      auto b = random_tensor({m, n}, rng);
      auto bias = random_tensor({n}, rng);
      CHECK(gradcheck([&](D v) { return sum(add(v, b)); }, a) < 1e-4);
      CHECK(gradcheck([&](D v) { return sum(add(a, v)); }, bias) < 1e-4);
    }
    // mul, scale
    {
      auto a = random_tensor({m, n}, rng);
      auto b = random_tensor({m, n}, rng);
      CHECK(gradcheck([&](D v) { return sum(mul(v, b)); }, a) < 1e-4);
      CHECK(gradcheck([&](D v) { return mean(scale(v, 2.75)); }, a) < 1e-4);
    }
    // softmax mixed into a non-symmetric readout
    {
      auto a = random_tensor({m, n}, rng);
      auto w = random_tensor({m, n}, rng);
      CHECK(gradcheck([&](D v) { return sum(mul(softmax(v), w)); }, a) < 1e-4);
    }
    // layer_norm: input, gain, bias
    {
      auto x = random_tensor({m, n}, rng);
      auto g = random_tensor({n}, rng);
      auto b = random_tensor({n}, rng);
      auto w = random_tensor({m, n}, rng);
      CHECK(gradcheck([&](D v) { return sum(mul(layer_norm(v, g, b), w)); }, x) < 1e-4);
      CHECK(gradcheck([&](D v) { return sum(mul(layer_norm(x, v, b), w)); }, g) < 1e-4);
      CHECK(gradcheck([&](D v) { return sum(mul(layer_norm(x, g, v), w)); }, b) < 1e-4);
    }
    // gelu
    {
      auto x = random_tensor({m * n}, rng);
      CHECK(gradcheck([](D v) { return sum(gelu(v)); }, x) < 1e-4);
    }
    // embedding gather
    {
      auto table = random_tensor({6, n}, rng);
      std::vector<int> ids;
      for (int i = 0; i < 5; ++i) ids.push_back(int(rng.uniform_below(6)));
      auto w = random_tensor({5, n}, rng);
      CHECK(gradcheck([&](D v) { return sum(mul(embedding(v, ids), w)); }, table) < 1e-4);
    }
    // cross entropy from logits (with an unsupervised row)
    {
      auto logits = random_tensor({4, 7}, rng);
      std::vector<int> targets{1, -1, 6, 3};
      CHECK(gradcheck([&](D v) { return sum(cross_entropy(v, targets)); }, logits) < 1e-4);
    }
    // reshape / permute / reductions
    {
      auto x = random_tensor({2, 3, 4}, rng);
      auto w = random_tensor({4, 6}, rng);
      CHECK(gradcheck([&](D v) { return sum(matmul(reshape(v, {6, 4}), w)); }, x) < 1e-4);
      auto w2 = random_tensor({4, 3, 2}, rng);
      CHECK(gradcheck([&](D v) { return sum(mul(permute(v, {2, 1, 0}), w2)); }, x) < 1e-4);
      CHECK(gradcheck([&](D v) { return mean(v); }, x) < 1e-4);
    }
    // attention mask application
    {
      auto scores = random_tensor({3, 5}, rng);
      auto allowed = std::make_shared<std::vector<uint8_t>>(15, 1);
      (*allowed)[2] = 0;
      (*allowed)[7] = 0;
      auto w = random_tensor({3, 5}, rng);
      CHECK(gradcheck([&](D v) { return sum(mul(softmax(apply_attention_mask(v, allowed)), w)); },
                      scores) < 1e-4);
    }
  }
}

TEST_CASE("gradcheck: a single attention block on a 4x8 input") {
  Rng rng(99);
  auto wq = random_tensor({8, 8}, rng);
  auto wk = random_tensor({8, 8}, rng);
  auto wv = random_tensor({8, 8}, rng);
  auto readout = random_tensor({4, 8}, rng);
  auto x = random_tensor({4, 8}, rng);
  auto block = [&](D v) {
    auto q = matmul(v, wq);
    auto kt = transpose(matmul(v, wk));
    auto scores = scale(matmul(q, kt), 1.0 / std::sqrt(8.0));
    auto attn = softmax(scores);
    return sum(mul(matmul(attn, matmul(v, wv)), readout));
  };
  CHECK(gradcheck(block, x) < 1e-4);
  CHECK(gradcheck([&](D v) {
          auto q = matmul(x, v);
          auto kt = transpose(matmul(x, wk));
          auto attn = softmax(scale(matmul(q, kt), 1.0 / std::sqrt(8.0)));
          return sum(mul(matmul(attn, matmul(x, wv)), readout));
        },
                  wq) < 1e-4);
}

TEST_CASE("attention mask zeroes weights exactly") {
  auto scores = D::from_values({1, 4}, {1.0, 2.0, 3.0, 4.0});
  auto allowed = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{1, 0, 1, 0});
  auto w = softmax(apply_attention_mask(scores, allowed));
  CHECK(w.values()[1] == 0.0);
  CHECK(w.values()[3] == 0.0);
  CHECK(w.values()[0] + w.values()[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("two topological orders agree") {
  Rng rng(5);
  auto x = random_tensor({6, 6}, rng, true);
  auto w = random_tensor({6, 6}, rng, true);
  auto build = [&]() {
    auto h = gelu(matmul(x, w));
    auto g = softmax(add(h, x));
    return sum(mul(g, add(h, h)));  // reuses h so orders can differ
  };
  auto loss = build();
  backward(loss, BackwardOrder::kReverseSerial);
  auto gx = x.grad();
  auto gw = w.grad();
  zero_all_grads(loss);
  backward(loss, BackwardOrder::kDfsPostorder);
  for (size_t i = 0; i < gx.size(); ++i) CHECK(std::abs(gx[i] - x.grad()[i]) <= 1e-10);
  for (size_t i = 0; i < gw.size(); ++i) CHECK(std::abs(gw[i] - w.grad()[i]) <= 1e-10);
}

TEST_CASE("backward requires a scalar") {
  auto x = D::from_values({2}, {1.0, 2.0}, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("float32 ops run too") {
  auto x = Tensor<float>::from_values({2, 2}, {1, 2, 3, 4}, true);
  auto loss = sum(matmul(x, x));
  backward(loss);
  CHECK(loss.item() == doctest::Approx(54.0f));
}
