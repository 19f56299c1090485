#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mmchat/checkpoint.hpp"
#include "mmchat/error.hpp"
#include "mmchat/gradcheck.hpp"
#include "mmchat/optim.hpp"
#include "test_util.hpp"

using namespace mmchat;
using namespace mmchat::nn;

TEST_CASE("softmax of uniform logits is uniform") {
  for (int k : {1, 3, 17}) {
    Var p = softmax_rows(constant(Tensor({2, k}, 0.7f)));
    for (float v : p.value().values()) CHECK(v == doctest::Approx(1.0 / k).epsilon(1e-6));
  }
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 5), n = 1 + static_cast<int>(rng() % 9);
    Var p = softmax_rows(constant(test::random_tensor(m, n, rng, 8.0f)));
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (float v : p.value().row(i)) s += v;
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer norm of a constant vector is zero before the affine part") {
  Var x = constant(Tensor({1, 6}, 3.25f));
  Var y = layer_norm(x, constant(Tensor({1, 6}, 1.0f)), constant(Tensor({1, 6}, 0.0f)));
  for (float v : y.value().values()) CHECK(v == 0.0f);
}

TEST_CASE("matmul against identity is a no-op") {
  std::mt19937_64 rng(3);
  Tensor a = test::random_tensor(4, 5, rng);
  Tensor eye({5, 5});
  for (int i = 0; i < 5; ++i) eye.at(i, i) = 1.0f;
  Var y = matmul(constant(a), constant(eye));
  CHECK(y.value().storage() == a.storage());
}

TEST_CASE("shape errors name the op") {
  Var a = constant(Tensor({2, 3}));
  Var b = constant(Tensor({4, 2}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("non-finite values are rejected") {
  Var a = constant(Tensor({1, 1}, 100.0f));
  CHECK_THROWS_AS(exp_clamped(a, 0.0f, std::numeric_limits<float>::infinity()), NonFiniteError);
}

TEST_CASE("attention single position returns the value row") {
  std::mt19937_64 rng(5);
  Var q = constant(test::random_tensor(1, 8, rng));
  Var k = constant(test::random_tensor(1, 8, rng));
  Var v = constant(test::random_tensor(1, 8, rng));
  Var out = attention(q, k, v, nullptr, 2);
  for (int j = 0; j < 8; ++j) CHECK(out.value()[j] == doctest::Approx(v.value()[j]).epsilon(1e-6));
}

TEST_CASE("attention masked to self returns own value vector") {
  std::mt19937_64 rng(6);
  Var x = constant(test::random_tensor(4, 8, rng));
  AttentionMask self_only(4, 4, false);
  for (int i = 0; i < 4; ++i) self_only.set(i, i, true);
  Var out = attention(x, x, x, &self_only, 4);
  for (std::size_t i = 0; i < out.value().size(); ++i) {
    CHECK(out.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-6));
  }
}

TEST_CASE("unmasked attention output is a convex combination of value rows") {
  std::mt19937_64 rng(7);
  Var q = constant(test::random_tensor(3, 4, rng));
  Var k = constant(test::random_tensor(5, 4, rng));
  Var v = constant(test::random_tensor(5, 4, rng));
  Var out = attention(q, k, v, nullptr, 1);
  for (int j = 0; j < 4; ++j) {
    float lo = 1e9f, hi = -1e9f;
    for (int r = 0; r < 5; ++r) {
      lo = std::min(lo, v.value().at(r, j));
      hi = std::max(hi, v.value().at(r, j));
    }
    for (int i = 0; i < 3; ++i) {
      CHECK(out.value().at(i, j) >= lo - 1e-6f);
      CHECK(out.value().at(i, j) <= hi + 1e-6f);
    }
  }
}

TEST_CASE("causal mask: position 0 receives no gradient from later inputs") {
  std::mt19937_64 rng(8);
  Var x = parameter(test::random_tensor(3, 8, rng));
  const auto mask = AttentionMask::causal(3);
  Var out = attention(x, x, x, &mask, 2);
  Tensor w({3, 8});
  for (int j = 0; j < 8; ++j) w.at(0, j) = 1.0f;  // loss reads only position 0
  backward(weighted_sum(out, w));
  for (int r = 1; r < 3; ++r)
    for (int j = 0; j < 8; ++j) CHECK(x.grad().at(r, j) == 0.0f);
  double row0 = 0.0;
  for (int j = 0; j < 8; ++j) row0 += std::fabs(x.grad().at(0, j));
  CHECK(row0 > 0.0);
}

TEST_CASE("attention rejects bad head counts and mask shapes") {
  Var x = constant(Tensor({3, 6}));
  CHECK_THROWS_AS(attention(x, x, x, nullptr, 4), DimensionError);
  AttentionMask wrong(2, 3);
  CHECK_THROWS_AS(attention(x, x, x, &wrong, 2), DimensionError);
}

TEST_CASE("cross entropy anchors") {
  const int v = 11;
  SUBCASE("uniform logits give ln V") {
    std::vector<int> t{3, 0};
    Var loss = cross_entropy(constant(Tensor({2, v}, 0.25f)), t);
    CHECK(loss.item() == doctest::Approx(std::log(double(v))).epsilon(1e-6));
  }
  SUBCASE("large correct margin gives near zero") {
    Tensor logits({1, v});
    logits[4] = 60.0f;
    std::vector<int> t{4};
    CHECK(cross_entropy(constant(logits), t).item() < 1e-6f);
  }
  SUBCASE("ignored row does not contribute") {
    std::mt19937_64 rng(9);
    Tensor two = test::random_tensor(2, v, rng);
    Tensor one({1, v}, std::vector<float>(two.row(0).begin(), two.row(0).end()));
    std::vector<int> t2{5, kIgnoreIndex}, t1{5};
    CHECK(cross_entropy(constant(two), t2).item() == doctest::Approx(cross_entropy(constant(one), t1).item()));
  }
  SUBCASE("errors") {
    std::vector<int> ignored{kIgnoreIndex};
    std::vector<int> out_of_range{v};
    CHECK_THROWS_AS(cross_entropy(constant(Tensor({1, v})), ignored), ValidationError);
    CHECK_THROWS_AS(cross_entropy(constant(Tensor({1, v})), out_of_range), ValidationError);
  }
}

TEST_CASE("AdamW") {
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    ParameterSet ps;
    ps.add("w", parameter(Tensor({1, 3}, std::vector<float>{0.5f, -1.0f, 2.0f})));
    ps.items()[0].var.grad();  // zero gradient present
    AdamW opt(ps, {.lr = 0.1f, .weight_decay = 0.0f});
    opt.step();
    CHECK(ps.items()[0].var.value().storage() == std::vector<float>{0.5f, -1.0f, 2.0f});
  }
  SUBCASE("decay-only step shrinks by (1 - lr*wd)") {
    ParameterSet ps;
    ps.add("w", parameter(Tensor({1, 2}, std::vector<float>{1.5f, -4.0f})));
    ps.items()[0].var.grad();
    AdamW opt(ps, {.lr = 0.1f, .weight_decay = 0.2f});
    opt.step();
    CHECK(ps.items()[0].var.value()[0] == doctest::Approx(1.5 * (1 - 0.02)).epsilon(1e-7));
    CHECK(ps.items()[0].var.value()[1] == doctest::Approx(-4.0 * (1 - 0.02)).epsilon(1e-7));
  }
  SUBCASE("scalar trajectory matches the reference formula") {
    // Reference evaluated independently in double precision.
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
    const std::vector<double> grads{0.3, -0.7, 0.05, 1.2};
    double w = 0.8, m = 0.0, v = 0.0;
    ParameterSet ps;
    ps.add("w", parameter(Tensor::scalar(0.8f)));
    AdamW opt(ps, {.lr = float(lr), .beta1 = float(b1), .beta2 = float(b2), .eps = float(eps), .weight_decay = float(wd)});
    for (std::size_t t = 1; t <= grads.size(); ++t) {
      const double g = grads[t - 1];
      w -= lr * wd * w;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const double mhat = m / (1 - std::pow(b1, double(t)));
      const double vhat = v / (1 - std::pow(b2, double(t)));
      w -= lr * mhat / (std::sqrt(vhat) + eps);

      ps.items()[0].var.grad()[0] = static_cast<float>(g);
      opt.step();
      ps.zero_grad();
      CHECK(std::fabs(ps.items()[0].var.value()[0] - w) < 1e-7);
    }
    CHECK(opt.step_count() == 4);
  }
  SUBCASE("missing gradient is an error") {
    ParameterSet ps;
    ps.add("w", parameter(Tensor::scalar(1.0f)));
    AdamW opt(ps, {});
    CHECK_THROWS_AS(opt.step(), ValidationError);
  }
}

TEST_CASE("linear learning-rate schedule") {
  LinearSchedule s{.base_lr = 5e-5f, .total_steps = 100};
  CHECK(s.lr(0) == 5e-5f);
  CHECK(s.lr(100) == 0.0f);
  CHECK(s.lr(50) == doctest::Approx(2.5e-5));
  CHECK(s.lr(250) == 0.0f);
  LinearSchedule warm{.base_lr = 1.0f, .total_steps = 10, .warmup_steps = 2};
  CHECK(warm.lr(1) == doctest::Approx(0.5));
  CHECK(warm.lr(2) == doctest::Approx(1.0));
  CHECK(warm.lr(6) == doctest::Approx(0.5));
}

TEST_CASE("finite difference check") {
  std::mt19937_64 rng(21);
  SUBCASE("linear model is exact") {
    ParameterSet ps;
    Initializer init(1);
    Linear lin(5, 3, init);
    lin.register_parameters(ps, "lin");
    const Tensor x = test::random_tensor(4, 5, rng);
    const Tensor w = test::random_tensor(4, 3, rng);
    auto loss = [&] { return weighted_sum(lin(constant(x)), w); };
    // Truncation error vanishes for a linear loss, so a wide step only removes rounding noise.
    auto r = finite_diff_check(loss, ps, {}, {.eps = 0.5f});
    CHECK(r.max_relative_error < 1e-6);
  }
  SUBCASE("frozen parameters are not reported") {
    ParameterSet ps;
    Initializer init(2);
    Linear lin(3, 2, init);
    lin.register_parameters(ps, "lin");
    ps.find("lin.bias")->trainable = false;
    const Tensor x = test::random_tensor(2, 3, rng);
    auto r = finite_diff_check([&] { return weighted_sum(lin(constant(x)), Tensor({2, 2}, 1.0f)); }, ps);
    REQUIRE(r.parameters.size() == 1);
    CHECK(r.parameters[0].parameter == "lin.weight");
  }
  SUBCASE("non-scalar loss is rejected") {
    ParameterSet ps;
    ps.add("w", parameter(Tensor({2, 2}, 1.0f)));
    CHECK_THROWS_AS(finite_diff_check([&] { return ps.items()[0].var; }, ps), DimensionError);
  }
  SUBCASE("two-layer attention block, d=8") {
    ParameterSet ps;
    Initializer init(3, 0.3f);
    TransformerBlock b1({.d_model = 8, .heads = 2, .ff_mult = 2}, init);
    TransformerBlock b2({.d_model = 8, .heads = 2, .ff_mult = 2}, init);
    b1.register_parameters(ps, "b1");
    b2.register_parameters(ps, "b2");
    const Tensor x = test::random_tensor(5, 8, rng);
    const Tensor w = test::random_tensor(5, 8, rng);
    const auto mask = AttentionMask::causal(5);
    auto loss = [&] { return weighted_sum(b2(b1(constant(x), &mask), &mask), w); };
    auto r = finite_diff_check(loss, ps, {}, {.eps = 5e-3f});
    INFO("worst parameter: " << r.worst_parameter);
    CHECK(r.max_relative_error < 1e-3);
  }
}

TEST_CASE("identical seeds give bit-identical losses") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Initializer init(42);
    TransformerBlock block({.d_model = 16, .heads = 4}, init);
    Var x = constant(test::random_tensor(6, 16, rng));
    std::vector<int> targets{1, 2, 3, 4, 5, 6};
    return cross_entropy(block(x, nullptr), targets).item();
  };
  const float a = run();
  const float b = run();
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}

TEST_CASE("checkpoint container round trip") {
  test::TempDir dir;
  std::mt19937_64 rng(4);
  ParameterSet ps;
  ps.add("a", parameter(test::random_tensor(3, 4, rng)));
  ps.add("b", parameter(test::random_tensor(1, 7, rng)));
  write_container(dir.path() / "m.ckpt", snapshot(ps, {{"kind", "toy"}}));
  const Container c = read_container(dir.path() / "m.ckpt");
  CHECK(c.config["kind"] == "toy");
  CHECK(fingerprint(c) == fingerprint(ps));

  ParameterSet other;
  other.add("a", parameter(Tensor({3, 4})));
  other.add("b", parameter(Tensor({1, 7})));
  restore(other, c);
  CHECK(fingerprint(other) == fingerprint(ps));

  ParameterSet wrong;
  wrong.add("a", parameter(Tensor({4, 3})));
  CHECK_THROWS_AS(restore(wrong, c), DimensionError);

  {
    std::ofstream bad(dir.path() / "bad.ckpt", std::ios::binary);
    bad << "NOTACKPT";
  }
  CHECK_THROWS_AS(read_container(dir.path() / "bad.ckpt"), ParseError);

  std::ifstream in(dir.path() / "m.ckpt", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "MMCKPT01");
}
