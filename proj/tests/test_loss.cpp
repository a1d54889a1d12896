#include <doctest.h>

#include <cmath>

#include "attnseg/loss.hpp"
#include "attnseg/rng.hpp"
#include "testutil.hpp"

using namespace attnseg;

TEST_SUITE("loss") {
  TEST_CASE("bce known values") {
    CHECK(bce(0.5, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce(0.5, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce(0.9, 1.0) == doctest::Approx(-std::log(0.9)).epsilon(1e-12));
    CHECK(bce(0.9, 1.0) == doctest::Approx(0.105360516).epsilon(1e-7));
  }

  TEST_CASE("bce is finite at the extremes thanks to clamping") {
    CHECK(std::isfinite(bce(0.0, 1.0)));
    CHECK(std::isfinite(bce(1.0, 0.0)));
    CHECK(bce(0.0, 1.0) == doctest::Approx(-std::log(kBceEps)).epsilon(1e-9));
  }

  TEST_CASE("tensor bce averages over pixels") {
    Tensor p({1, 2, 1}), y({1, 2, 1});
    p.v = {0.5, 0.9};
    y.v = {1.0, 1.0};
    const Scalar want = (std::log(2.0) - std::log(0.9)) / 2.0;
    CHECK(bce(p, y) == doctest::Approx(want).epsilon(1e-12));
    Tensor bad({2, 1, 1});
    CHECK_THROWS(bce(p, bad));
  }

  TEST_CASE("joint loss blends with lambda") {
    Tensor p({2, 2, 1}), y({2, 2, 1});
    for (auto& v : p.v) v = 0.5;
    for (auto& v : y.v) v = 1.0;
    LossBreakdown lb = joint_loss(p, y, 0.9, 1.0, 0.6);
    CHECK(lb.seg_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(lb.class_loss == doctest::Approx(-std::log(0.9)).epsilon(1e-12));
    CHECK(lb.total ==
          doctest::Approx(0.6 * std::log(2.0) + 0.4 * -std::log(0.9)).epsilon(1e-12));
    CHECK(lb.lambda == 0.6);
  }

  TEST_CASE("lambda boundaries") {
    Tensor p({1, 1, 1}), y({1, 1, 1});
    p.v = {0.5};
    y.v = {1.0};
    LossBreakdown seg = joint_loss(p, y, 0.9, 1.0, 1.0);
    CHECK(seg.total == doctest::Approx(seg.seg_loss).epsilon(1e-15));
    LossBreakdown cls = joint_loss(p, y, 0.9, 1.0, 0.0);
    CHECK(cls.total == doctest::Approx(cls.class_loss).epsilon(1e-15));
    CHECK_THROWS(joint_loss(p, y, 0.9, 1.0, 1.2));
    CHECK_THROWS(joint_loss(p, y, 0.9, 1.0, -0.1));
  }

  TEST_CASE("seg_only_loss pins lambda to one") {
    Tensor p({1, 1, 1}), y({1, 1, 1});
    p.v = {0.25};
    y.v = {0.0};
    LossBreakdown lb = seg_only_loss(p, y);
    CHECK(lb.lambda == 1.0);
    CHECK(lb.class_loss == 0.0);
    CHECK(lb.total == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  }

  TEST_CASE("bce gradient matches finite differences") {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor p = testutil::random_tensor({3, 4, 1}, rng, 0.05, 0.95);
      Tensor y({3, 4, 1});
      for (auto& v : y.v) v = rng.bernoulli(0.5) ? 1.0 : 0.0;

      Tensor g = bce_grad(p, y);
      auto loss = [&] { return bce(p, y); };
      double worst = testutil::fd_max_rel_error(loss, {{&p, &g}}, rng, 6, 1e-5);
      CHECK(worst < 1e-4);
    }
  }

  TEST_CASE("bce gradient is zero inside the clamp region") {
    Tensor p({1, 1, 1}), y({1, 1, 1});
    p.v = {0.0};
    y.v = {1.0};
    CHECK(bce_grad(p, y).v[0] == 0.0);
    p.v = {1.0};
    y.v = {0.0};
    CHECK(bce_grad(p, y).v[0] == 0.0);
  }

  TEST_CASE("joint loss gradient matches finite differences") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor p = testutil::random_tensor({3, 3, 1}, rng, 0.05, 0.95);
      Tensor y({3, 3, 1});
      for (auto& v : y.v) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
      Tensor cp({1});
      cp.v = {rng.uniform(0.05, 0.95)};
      const Scalar label = rng.bernoulli(0.5) ? 1.0 : 0.0;
      const Scalar lam = rng.uniform(0.1, 0.9);

      // analytic: d(total)/dp = lam * d(seg)/dp; d(total)/dcp = (1-lam) * bce'
      Tensor gp = bce_grad(p, y);
      for (auto& v : gp.v) v *= lam;
      Tensor gcp({1});
      gcp.v = {(1.0 - lam) * bce_grad(cp.v[0], label)};

      auto loss = [&] { return joint_loss(p, y, cp.v[0], label, lam).total; };
      double worst = testutil::fd_max_rel_error(loss, {{&p, &gp}, {&cp, &gcp}}, rng, 5, 1e-5);
      CHECK(worst < 1e-4);
    }
  }
}
