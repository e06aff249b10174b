#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "avflow/flow.hpp"
#include "test_util.hpp"

using namespace avflow;
using testutil::bits_equal;

namespace {

DitConfig tiny_config(Variant v = Variant::AvFlow) {
  DitConfig cfg;
  cfg.blocks = 1;
  cfg.dim = 16;
  cfg.hidden = 32;
  cfg.heads = 2;
  cfg.window = 10;
  cfg.lookahead = 2;
  cfg.face_dim = 4;
  cfg.variant = v;
  cfg.seed = 3;
  return cfg;
}

CfmBatchItem tiny_item(int64_t n, int64_t face_dim, uint64_t seed) {
  Rng rng(seed);
  CfmBatchItem item;
  item.tokens = Tensor::randn({n, 29}, rng);
  item.mel = Tensor::randn({n, 80}, rng);
  item.head = Tensor::randn({n, 8}, rng);
  item.face = Tensor::randn({n, face_dim}, rng);
  return item;
}

}  // namespace

TEST_CASE("path endpoint identities") {
  Rng rng(1);
  Tensor x0 = Tensor::randn({4, 6}, rng);
  Tensor x1 = Tensor::randn({4, 6}, rng);
  double sigma = 1e-6;

  Tensor at0 = ot_path(x0, x1, 0.0, sigma);
  Tensor at1 = ot_path(x0, x1, 1.0, sigma);
  for (int64_t i = 0; i < x0.numel(); ++i) {
    CHECK(std::abs(at0.at(i) - x0.at(i)) < 1e-6);
    CHECK(std::abs(at1.at(i) - (sigma * x0.at(i) + x1.at(i))) < 1e-6);
  }

  SUBCASE("midpoint with zero sigma") {
    Tensor z = Tensor::zeros({1});
    Tensor two = Tensor::full({1}, 2.0f);
    CHECK(ot_path(z, two, 0.5, 0.0).at(0) == doctest::Approx(1.0));
  }

  SUBCASE("t outside the unit interval") {
    try {
      ot_path(x0, x1, 1.5, sigma);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrKind::TOutOfRange);
    }
  }

  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(ot_path(x0, Tensor::zeros({3, 6}), 0.5, sigma), Error);
  }
}

TEST_CASE("target velocity basics and the finite-difference oracle") {
  SUBCASE("identical endpoints give zero velocity at zero sigma") {
    Tensor c = Tensor::full({5}, 1.7f);
    Tensor u = target_velocity(c, c, 0.0);
    for (int64_t i = 0; i < 5; ++i) CHECK(u.at(i) == doctest::Approx(0.0));
  }
  SUBCASE("scalar case") {
    CHECK(target_velocity(Tensor::full({1}, 1.0f), Tensor::full({1}, 3.0f), 0.0).at(0) ==
          doctest::Approx(2.0));
  }
  SUBCASE("velocity equals the time derivative of the path at 5 random t") {
    Rng rng(2);
    Tensor x0 = Tensor::randn({3, 7}, rng);
    Tensor x1 = Tensor::randn({3, 7}, rng);
    double sigma = 1e-3;
    Tensor u = target_velocity(x0, x1, sigma);
    double h = 0.05;
    for (int trial = 0; trial < 5; ++trial) {
      double t = rng.uniform(h, 1.0 - h);
      Tensor fp = ot_path(x0, x1, t + h, sigma);
      Tensor fm = ot_path(x0, x1, t - h, sigma);
      for (int64_t i = 0; i < u.numel(); ++i) {
        double fd = (static_cast<double>(fp.at(i)) - fm.at(i)) / (2.0 * h);
        CHECK(std::abs(fd - u.at(i)) < 1e-4);
      }
    }
  }
}

TEST_CASE("path sample invariants") {
  Rng rng(4);
  Tensor x1 = Tensor::randn({6, 5}, rng);
  PathSample s = make_path_sample(x1, 0.3, 1e-6, rng);
  CHECK(s.x0.shape() == s.x1.shape());
  CHECK(s.x_t.shape() == s.x1.shape());
  CHECK(s.u_target.shape() == s.x1.shape());
}

TEST_CASE("cfm loss is zero for a perfect predictor and positive otherwise") {
  FlowConfig cfg;
  int64_t n = 12, hw = 8, fw = 4;
  Rng rng(5);
  Tensor mel_n = Tensor::randn({n, 80}, rng);
  Tensor head_n = Tensor::randn({n, hw}, rng);
  Tensor face_n = Tensor::randn({n, fw}, rng);
  Tensor x0a = Tensor::randn({n, 80}, rng);
  Tensor x0v = Tensor::randn({n, hw + fw}, rng);
  double tval = 0.37;

  // the stub hands back exactly the conditional target velocity
  VelocityFn perfect = [&](Tape& t, Var, Var, double) -> std::pair<Var, Var> {
    Tensor ua = target_velocity(x0a, mel_n, cfg.sigma_min);
    Tensor x1v({n, hw + fw});
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t k = 0; k < hw; ++k) x1v.at(i * (hw + fw) + k) = head_n.at(i * hw + k);
      for (int64_t k = 0; k < fw; ++k) x1v.at(i * (hw + fw) + hw + k) = face_n.at(i * fw + k);
    }
    Tensor uv = target_velocity(x0v, x1v, cfg.sigma_min);
    return {t.constant(ua), t.constant(uv)};
  };
  Tape tape;
  CfmLossVars vars = cfm_loss_core(tape, perfect, mel_n, head_n, face_n, cfg, tval, x0a, x0v);
  CHECK(tape.val_scalar(vars.total) == 0.0);
  CHECK(tape.val_scalar(vars.ls) == 0.0);
  CHECK(tape.val_scalar(vars.lh) == 0.0);
  CHECK(tape.val_scalar(vars.lf) == 0.0);

  SUBCASE("an imperfect predictor pays a positive loss") {
    VelocityFn off = [&](Tape& t, Var, Var, double) -> std::pair<Var, Var> {
      Rng r2(6);
      return {t.constant(Tensor::randn({n, 80}, r2)),
              t.constant(Tensor::randn({n, hw + fw}, r2))};
    };
    Tape tape2;
    CfmLossVars v2 = cfm_loss_core(tape2, off, mel_n, head_n, face_n, cfg, tval, x0a, x0v);
    CHECK(tape2.val_scalar(v2.total) > 0.0);
  }

  SUBCASE("zero head weight makes the total invariant to head predictions") {
    FlowConfig nohead = cfg;
    nohead.lambda_h = 0.0f;
    auto eval_with_head_pred = [&](float fill) {
      VelocityFn f = [&, fill](Tape& t, Var, Var, double) -> std::pair<Var, Var> {
        Tensor ua = target_velocity(x0a, mel_n, nohead.sigma_min);
        Tensor uv = Tensor::zeros({n, hw + fw});
        for (int64_t i = 0; i < n; ++i)
          for (int64_t k = 0; k < hw; ++k) uv.at(i * (hw + fw) + k) = fill;
        return {t.constant(ua), t.constant(uv)};
      };
      Tape t2;
      CfmLossVars v = cfm_loss_core(t2, f, mel_n, head_n, face_n, nohead, tval, x0a, x0v);
      return t2.val_scalar(v.total);
    };
    CHECK(eval_with_head_pred(0.0f) == eval_with_head_pred(42.0f));
  }
}

TEST_CASE("full cfm loss is deterministic for a fixed seed") {
  AvFlowModel model(tiny_config());
  FlowConfig fc;
  NormStats stats = NormStats::identity(80, 8, 4);
  CfmBatchItem item = tiny_item(20, 4, 7);
  Rng r1(99), r2(99);
  CfmLoss a = cfm_loss(model, item, fc, stats, r1);
  CfmLoss b = cfm_loss(model, item, fc, stats, r2);
  CHECK(a.total == b.total);
  CHECK(a.ls == b.ls);
  CHECK(a.lh == b.lh);
  CHECK(a.lf == b.lf);
  CHECK(a.total > 0.0);
  CHECK(a.total == doctest::Approx(3.0 * a.ls + 0.2 * a.lh + 1.0 * a.lf).epsilon(1e-5));
}

TEST_CASE("cfm loss produces gradients for every trainable parameter") {
  AvFlowModel model(tiny_config());
  FlowConfig fc;
  NormStats stats = NormStats::identity(80, 8, 4);
  CfmBatchItem item = tiny_item(15, 4, 8);
  Rng rng(11);
  std::vector<std::pair<std::string, Tensor>> grads;
  cfm_loss(model, item, fc, stats, rng, &grads);
  CHECK(grads.size() == model.params.size());
  double total_mag = 0.0;
  for (auto& [name, g] : grads)
    for (int64_t i = 0; i < g.numel(); ++i) total_mag += std::abs(g.at(i));
  CHECK(total_mag > 0.0);
}

TEST_CASE("misaligned batch is rejected") {
  AvFlowModel model(tiny_config());
  FlowConfig fc;
  NormStats stats = NormStats::identity(80, 8, 4);
  CfmBatchItem item = tiny_item(10, 4, 9);
  item.mel = Tensor::zeros({12, 80});
  Rng rng(12);
  try {
    cfm_loss(model, item, fc, stats, rng);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::MisalignedBatch);
  }
}

TEST_CASE("euler solver") {
  SUBCASE("one step on a constant field") {
    Tensor x0({3}, {1.0f, -2.0f, 0.5f});
    Tensor c({3}, {0.5f, 1.0f, -0.25f});
    Tensor x1 = euler_solve([&](double, const Tensor&) { return c; }, x0, 1);
    for (int64_t i = 0; i < 3; ++i) CHECK(x1.at(i) == doctest::Approx(x0.at(i) + c.at(i)));
  }

  SUBCASE("eight steps on a constant field are exact") {
    Tensor x0({2}, {0.25f, -1.5f});
    Tensor c({2}, {2.0f, 3.0f});
    Tensor x1 = euler_solve([&](double, const Tensor&) { return c; }, x0, 8);
    for (int64_t i = 0; i < 2; ++i)
      CHECK(x1.at(i) == doctest::Approx(x0.at(i) + c.at(i)).epsilon(1e-6));
  }

  SUBCASE("decaying field matches the closed-form recursion") {
    // v = -x integrated with 8 steps: x1 = (1 - 1/8)^8 x0 = 5764801/16777216 x0
    Tensor x0({4}, {1.0f, -1.0f, 2.0f, 0.125f});
    auto field = [](double, const Tensor& x) {
      Tensor v(x.shape());
      for (int64_t i = 0; i < x.numel(); ++i) v.at(i) = -x.at(i);
      return v;
    };
    Tensor x1 = euler_solve(field, x0, 8);
    double factor = 5764801.0 / 16777216.0;
    for (int64_t i = 0; i < 4; ++i)
      CHECK(std::abs(x1.at(i) - factor * x0.at(i)) < 1e-5);
  }

  SUBCASE("time-dependent field converges at first order") {
    // dx/dt = 2t from 0: exact x(1) = x0 + 1; Euler error is O(1/steps)
    Tensor x0({1}, {0.0f});
    auto field = [](double t, const Tensor& x) {
      Tensor v(x.shape());
      for (int64_t i = 0; i < x.numel(); ++i) v.at(i) = static_cast<float>(2.0 * t);
      return v;
    };
    double e16 = std::abs(euler_solve(field, x0, 16).at(0) - 1.0);
    double e32 = std::abs(euler_solve(field, x0, 32).at(0) - 1.0);
    double e64 = std::abs(euler_solve(field, x0, 64).at(0) - 1.0);
    CHECK(e32 < e16);
    CHECK(e64 < e32);
    double order = std::log2(e16 / e32);
    CHECK(order == doctest::Approx(1.0).epsilon(0.1));
  }

  SUBCASE("richardson order estimate on the decay field") {
    Tensor x0({1}, {1.0f});
    auto field = [](double, const Tensor& x) {
      Tensor v(x.shape());
      for (int64_t i = 0; i < x.numel(); ++i) v.at(i) = -x.at(i);
      return v;
    };
    double exact = std::exp(-1.0);
    double e32 = std::abs(euler_solve(field, x0, 32).at(0) - exact);
    double e64 = std::abs(euler_solve(field, x0, 64).at(0) - exact);
    double order = std::log2(e32 / e64);
    CHECK(order > 0.9);
    CHECK(order < 1.1);
  }

  SUBCASE("diverging state raises") {
    Tensor x0({1}, {1.0f});
    auto field = [](double, const Tensor& x) {
      Tensor v(x.shape());
      v.at(0) = std::numeric_limits<float>::infinity();
      return v;
    };
    try {
      euler_solve(field, x0, 4);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrKind::NonFiniteState);
    }
  }
}

TEST_CASE("sampling emits the three streams with the right shapes and is seeded") {
  AvFlowModel model(tiny_config());
  FlowConfig fc;
  fc.steps = 4;
  NormStats stats = NormStats::identity(80, 8, 4);
  Rng r1(21), r2(21), r3(22);
  Tensor tokens = Tensor::randn({25, 29}, r3);
  SampleOutput a = sample(model, tokens, fc, stats, r1);
  SampleOutput b = sample(model, tokens, fc, stats, r2);
  CHECK(a.mel.shape() == Shape{25, 80});
  CHECK(a.head.shape() == Shape{25, 8});
  CHECK(a.face.shape() == Shape{25, 4});
  CHECK(bits_equal(a.mel, b.mel));
  CHECK(bits_equal(a.head, b.head));
  CHECK(bits_equal(a.face, b.face));
}

TEST_CASE("normalization stats round trip through container entries") {
  Rng rng(31);
  NormStats s;
  s.mel_mean = Tensor::randn({80}, rng);
  s.mel_std = Tensor::full({80}, 2.0f);
  s.head_mean = Tensor::randn({8}, rng);
  s.head_std = Tensor::full({8}, 0.5f);
  s.face_mean = Tensor::randn({4}, rng);
  s.face_std = Tensor::full({4}, 1.5f);
  NormStats t = NormStats::from_entries(s.entries());
  CHECK(bits_equal(t.mel_mean, s.mel_mean));
  CHECK(bits_equal(t.face_std, s.face_std));

  Tensor x = Tensor::randn({10, 80}, rng);
  Tensor back = denormalize_rows(normalize_rows(x, s.mel_mean, s.mel_std), s.mel_mean, s.mel_std);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(back.at(i) == doctest::Approx(x.at(i)).epsilon(1e-5));
}

TEST_CASE("flow config validation") {
  FlowConfig bad;
  bad.sigma_min = 1.5f;
  CHECK_THROWS_AS(bad.validate(), Error);
  FlowConfig bad2;
  bad2.steps = 0;
  CHECK_THROWS_AS(bad2.validate(), Error);
  FlowConfig bad3;
  bad3.solver = "rk4";
  CHECK_THROWS_AS(bad3.validate(), Error);
}
