#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "grad_cases.hpp"
#include "svqa/core/checkpoint.hpp"
#include "svqa/core/nn.hpp"
#include "svqa/core/ops.hpp"
#include "svqa/core/optim.hpp"

using namespace svqa;

TEST_CASE("matmul of ones") {
  Tape t;
  Var c = ops::matmul(t.constant(Array({2, 3}, 1.0)), t.constant(Array({3, 2}, 1.0)));
  CHECK(c.shape() == Shape{2, 2});
  for (double v : c.value().values()) CHECK(v == 3.0);
}

TEST_CASE("softmax of zeros is uniform") {
  Tape t;
  Var y = ops::softmax(t.constant(Array({3}, 0.0)));
  for (double v : y.value().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("cross-entropy of uniform logits over 128 classes is ln 128") {
  Tape t;
  std::vector<int> targets{0, 17, 127};
  Var loss = ops::cross_entropy(t.constant(Array({3, 128}, 0.25)), targets);
  CHECK(loss.value().item() == doctest::Approx(std::log(128.0)).epsilon(1e-12));
  CHECK(loss.value().item() == doctest::Approx(4.852).epsilon(1e-3));
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones") {
    Parameter w("w", Array({2, 3}, 0.5));
    Tape t;
    t.backward(ops::sum(t.param(w)));
    for (double g : w.grad.values()) CHECK(g == 1.0);
  }
  SUBCASE("mse(w, 0) at w = 2 has gradient 4") {
    Parameter w("w", Array({1}, 2.0));
    Tape t;
    Var loss = ops::mse(t.param(w), t.constant(Array({1}, 0.0)));
    CHECK(loss.value().item() == 4.0);
    t.backward(loss);
    CHECK(w.grad[0] == doctest::Approx(4.0));
  }
  SUBCASE("unreachable parameter keeps a zero gradient") {
    Parameter used("a", Array({2}, 1.0));
    Parameter unused("b", Array({2}, 1.0));
    Tape t;
    t.param(unused);
    t.backward(ops::sum(t.param(used)));
    for (double g : unused.grad.values()) CHECK(g == 0.0);
  }
  SUBCASE("non-scalar loss is a contract violation") {
    Tape t;
    Var x = t.input(Array({2}, 1.0));
    CHECK_THROWS_AS(t.backward(ops::scale(x, 2.0)), ContractViolation);
  }
}

TEST_CASE("every primitive matches central finite differences") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    for (const auto& c : testing::primitive_grad_cases(seed)) {
      CAPTURE(c.name);
      CAPTURE(seed);
      CHECK(testing::max_grad_rel_error(c.fn, c.inputs, seed) < 1e-4);
    }
  }
}

TEST_CASE("stop_gradient contracts") {
  SUBCASE("forward identity") {
    Tape t;
    Array a({4}, std::vector<double>{1, -2, 3.5, 0});
    CHECK(ops::stop_gradient(t.input(a)).value() == a);
  }
  SUBCASE("sum(sg(w) * w) at w = 3 gives 3") {
    Parameter w("w", Array({1}, 3.0));
    Tape t;
    Var wv = t.param(w);
    t.backward(ops::sum(ops::mul(ops::stop_gradient(wv), wv)));
    CHECK(w.grad[0] == 3.0);
  }
  SUBCASE("sum(sg(w)) gives 0") {
    Parameter w("w", Array({3}, 1.0));
    Tape t;
    t.backward(ops::sum(ops::stop_gradient(t.param(w))));
    for (double g : w.grad.values()) CHECK(g == 0.0);
  }
}

TEST_CASE("straight_through contracts") {
  Rng rng(4);
  Array q = testing::random_array({3, 4}, rng);
  Array z = testing::random_array({3, 4}, rng);
  Array upstream = testing::random_array({3, 4}, rng);
  Tape t;
  Var qv = t.input(q);
  Var zv = t.input(z);
  Var out = ops::straight_through(qv, zv);
  CHECK(out.value() == q);
  t.backward(ops::sum(ops::mul(out, t.constant(upstream))));
  CHECK(t.grad(zv) == upstream);
  const Array gq = t.grad(qv);
  for (double g : gq.values()) CHECK(g == 0.0);
  CHECK_THROWS_AS(ops::straight_through(t.input(Array({2}, 0.0)), t.input(Array({3}, 0.0))), ContractViolation);
}

TEST_CASE("errors name the offending op") {
  Tape t;
  try {
    ops::matmul(t.constant(Array({2, 3})), t.constant(Array({2, 3})));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
  try {
    ops::exp(t.constant(Array({1}, 1000.0)));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("exp") != std::string::npos);
  }
}

TEST_CASE("forward is pure") {
  Rng rng(11);
  ParameterStore store;
  nn::TransformerBlock block(store, "blk", 8, 2, rng);
  Array x = testing::random_array({2, 5, 8}, rng);
  ops::AttentionMask mask;
  mask.causal = true;
  auto run = [&] {
    Tape t;
    return block(t, t.constant(x), mask).value();
  };
  CHECK(run() == run());
}

TEST_CASE("adam step") {
  SUBCASE("constant unit gradient moves by lr on the first step") {
    Parameter p("p", Array({1}, 0.5));
    p.grad[0] = 1.0;
    Parameter* ps[] = {&p};
    CHECK(adam_step(ps, {.lr = 1e-3}).applied);
    // Reference: m_hat = 1, v_hat = 1, update = lr / (1 + eps).
    CHECK(0.5 - p.value[0] == doctest::Approx(1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
    CHECK(p.step == 1);
  }
  SUBCASE("zero gradient leaves the parameter unchanged") {
    Parameter p("p", Array({3}, 0.25));
    Parameter* ps[] = {&p};
    adam_step(ps, {});
    for (double v : p.value.values()) CHECK(v == 0.25);
  }
  SUBCASE("deterministic") {
    auto run = [] {
      Parameter p("p", Array({2}, std::vector<double>{0.1, -0.3}));
      Parameter* ps[] = {&p};
      for (int i = 0; i < 5; ++i) {
        p.grad[0] = 0.3 * i;
        p.grad[1] = -0.7;
        adam_step(ps, {.lr = 1e-2});
      }
      return p.value;
    };
    CHECK(run() == run());
  }
  SUBCASE("non-finite gradient skips the step") {
    Parameter p("p", Array({2}, 1.0));
    p.grad[1] = std::numeric_limits<double>::quiet_NaN();
    Parameter* ps[] = {&p};
    const auto res = adam_step(ps, {});
    CHECK_FALSE(res.applied);
    CHECK(res.offending == "p");
    CHECK(p.value[0] == 1.0);
    CHECK(p.step == 0);
  }
}

TEST_CASE("checkpoint container") {
  const auto dir = std::filesystem::temp_directory_path() / "svqa_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "a.svqa";
  Checkpoint ck;
  ck.put("enc.w", Array({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6.5}));
  ck.put_scalar("step", 42);
  ck.save(path);

  std::ifstream f(path, std::ios::binary);
  char magic[4];
  f.read(magic, 4);
  CHECK(std::string(magic, 4) == "SVQA");

  Checkpoint back = Checkpoint::load(path);
  CHECK(back.get("enc.w") == ck.get("enc.w"));
  CHECK(back.get_scalar("step") == 42.0);
  CHECK_THROWS_AS(back.get("missing"), CheckpointError);

  SUBCASE("float32 payload rounding") {
    Checkpoint c2;
    c2.put("x", Array({1}, 0.1));
    c2.save(dir / "b.svqa");
    CHECK(Checkpoint::load(dir / "b.svqa").get("x")[0] == static_cast<double>(0.1f));
  }
  SUBCASE("truncated file is rejected") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
    CHECK_THROWS_AS(Checkpoint::load(path), CheckpointError);
  }
  SUBCASE("bad magic is rejected") {
    std::ofstream(dir / "bad.svqa") << "NOPE0000";
    CHECK_THROWS_AS(Checkpoint::load(dir / "bad.svqa"), CheckpointError);
  }
  SUBCASE("parameters with optimizer state") {
    ParameterStore s;
    Rng rng(3);
    nn::Linear lin(s, "enc.fc", 3, 2, rng);
    lin.weight->step = 7;
    Checkpoint c3;
    c3.put_params(s, "enc.", true);
    c3.save(dir / "c.svqa");
    ParameterStore s2;
    Rng rng2(99);
    nn::Linear lin2(s2, "enc.fc", 3, 2, rng2);
    Checkpoint::load(dir / "c.svqa").load_params(s2, "enc.");
    CHECK(lin2.weight->step == 7);
    for (std::size_t i = 0; i < lin.weight->value.size(); ++i) {
      CHECK(lin2.weight->value[i] == static_cast<double>(static_cast<float>(lin.weight->value[i])));
    }
  }
}

TEST_CASE("rng streams are reproducible and split independently") {
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = a.split(1), d = a.split(2);
  CHECK(c.next_u64() != d.next_u64());
  Rng e(5);
  double mean = 0.0;
  for (int i = 0; i < 20000; ++i) mean += e.uniform();
  CHECK(mean / 20000 == doctest::Approx(0.5).epsilon(0.02));
}
