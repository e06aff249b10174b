#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "avflow/dit.hpp"
#include "test_util.hpp"

using namespace avflow;
using testutil::bits_equal;

namespace {

DitConfig small_config(Variant v = Variant::AvFlow) {
  DitConfig cfg;
  cfg.blocks = 2;
  cfg.dim = 32;
  cfg.hidden = 64;
  cfg.heads = 4;
  cfg.window = 10;
  cfg.lookahead = 2;
  cfg.face_dim = 16;
  cfg.variant = v;
  cfg.seed = 42;
  return cfg;
}

ConditionBundle tokens_only(int64_t n, uint64_t seed, double t = 0.5) {
  Rng rng(seed);
  ConditionBundle cond;
  cond.tokens = Tensor::randn({n, 29}, rng);
  cond.t = t;
  return cond;
}

}  // namespace

TEST_CASE("window mask band rule") {
  Tensor m = window_mask(40, 10, 2);
  // frame 20 attends exactly to [13..22]
  for (int64_t j = 0; j < 40; ++j)
    CHECK(m.at(20 * 40 + j) == ((j >= 13 && j <= 22) ? 1.0f : 0.0f));

  SUBCASE("zero lookahead gives a strictly causal band") {
    Tensor c = window_mask(30, 10, 0);
    for (int64_t i = 0; i < 30; ++i)
      for (int64_t j = 0; j < 30; ++j) {
        bool allowed = j <= i && j >= i - 9;
        CHECK(c.at(i * 30 + j) == (allowed ? 1.0f : 0.0f));
      }
  }

  SUBCASE("short sequences clamp to full attention with the lookahead bound kept") {
    Tensor s = window_mask(5, 10, 2);
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = 0; j < 5; ++j) CHECK(s.at(i * 5 + j) == ((j <= i + 2) ? 1.0f : 0.0f));
  }

  SUBCASE("future reach never exceeds the lookahead") {
    Tensor f = window_mask(25, 10, 2);
    for (int64_t i = 0; i < 25; ++i)
      for (int64_t j = i + 3; j < 25; ++j) CHECK(f.at(i * 25 + j) == 0.0f);
  }
}

TEST_CASE("fusion identities and hand-computed case") {
  SUBCASE("zero parameters reduce to the residual identity") {
    Tape t;
    Rng rng(1);
    Var xa = t.leaf(Tensor::randn({3, 4}, rng));
    Var xv = t.leaf(Tensor::randn({3, 4}, rng));
    auto [ya, yv] = fuse(t, xa, xv, t.leaf(Tensor::zeros({8, 4})), t.leaf(Tensor::zeros({4})),
                         t.leaf(Tensor::zeros({8, 4})), t.leaf(Tensor::zeros({4})));
    for (int64_t i = 0; i < 12; ++i) {
      CHECK(t.val(ya).at(i) == t.val(xa).at(i));
      CHECK(t.val(yv).at(i) == t.val(xv).at(i));
    }
  }

  SUBCASE("d=1 hand evaluation") {
    Tape t;
    Var xa = t.leaf(Tensor({1, 1}, {1.0f}));
    Var xv = t.leaf(Tensor({1, 1}, {2.0f}));
    Var u = t.leaf(Tensor({2, 1}, {1.0f, 1.0f}));
    Var b = t.leaf(Tensor::zeros({1}));
    Var v = t.leaf(Tensor({2, 1}, {0.5f, -0.5f}));
    Var c = t.leaf(Tensor({1}, {0.25f}));
    auto [ya, yv] = fuse(t, xa, xv, u, b, v, c);
    CHECK(t.val(ya).at(0) == doctest::Approx(4.0));  // 1 + (1*1 + 1*2)
    CHECK(t.val(yv).at(0) == doctest::Approx(2.0 - 0.5 + 0.25));
  }

  SUBCASE("cross-modal gradient flows exactly when vision rows are nonzero") {
    auto grad_wrt_xv = [](float u_vision_row) {
      Tape t;
      Rng rng(3);
      Var xa = t.leaf(Tensor::randn({2, 3}, rng), true);
      Var xv = t.leaf(Tensor::randn({2, 3}, rng), true);
      Tensor ut = Tensor::zeros({6, 3});
      for (int64_t j = 0; j < 3; ++j) ut.at((3 + j) * 3 + j) = u_vision_row;
      auto [ya, yv] = fuse(t, xa, xv, t.leaf(ut), t.leaf(Tensor::zeros({3})),
                           t.leaf(Tensor::zeros({6, 3})), t.leaf(Tensor::zeros({3})));
      (void)yv;
      GradMap g = t.backward(t.sum(ya));
      double mag = 0.0;
      const Tensor& gv = g.at(xv.id);
      for (int64_t i = 0; i < gv.numel(); ++i) mag += std::abs(gv.at(i));
      return mag;
    };
    CHECK(grad_wrt_xv(0.0f) == 0.0);
    CHECK(grad_wrt_xv(0.7f) > 0.0);
  }
}

TEST_CASE("rotary embedding properties") {
  SUBCASE("position zero is the identity") {
    Tape t;
    Rng rng(4);
    Tensor x = Tensor::randn({1, 8}, rng);
    Var r = t.rotary(t.leaf(x), {0});
    CHECK(bits_equal(t.val(r), x));
  }

  SUBCASE("pairwise norms are preserved") {
    Tape t;
    Rng rng(5);
    Tensor x = Tensor::randn({6, 8}, rng);
    Var r = t.rotary(t.leaf(x), {0, 3, 7, 11, 100, 1000});
    for (int64_t i = 0; i < 6; ++i)
      for (int64_t j = 0; j < 4; ++j) {
        double before = std::hypot(x.at(i * 8 + 2 * j), x.at(i * 8 + 2 * j + 1));
        double after = std::hypot(t.val(r).at(i * 8 + 2 * j), t.val(r).at(i * 8 + 2 * j + 1));
        CHECK(after == doctest::Approx(before).epsilon(1e-5));
      }
  }

  SUBCASE("dot products depend only on the position offset") {
    Rng rng(6);
    Tensor q = Tensor::randn({1, 8}, rng);
    Tensor k = Tensor::randn({1, 8}, rng);
    auto dot_at = [&](int64_t m, int64_t n) {
      Tape t;
      Var qr = t.rotary(t.leaf(q), {m});
      Var kr = t.rotary(t.leaf(k), {n});
      double acc = 0.0;
      for (int64_t i = 0; i < 8; ++i)
        acc += static_cast<double>(t.val(qr).at(i)) * t.val(kr).at(i);
      return acc;
    };
    CHECK(dot_at(5, 2) == doctest::Approx(dot_at(14, 11)).epsilon(1e-4));
    CHECK(dot_at(9, 9) == doctest::Approx(dot_at(0, 0)).epsilon(1e-4));
    CHECK(dot_at(3, 8) == doctest::Approx(dot_at(20, 25)).epsilon(1e-4));
  }

  SUBCASE("odd head dim is rejected") {
    Tape t;
    Rng rng(7);
    Var x = t.leaf(Tensor::randn({2, 5}, rng));
    try {
      t.rotary(x, {0, 1});
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrKind::OddHeadDim);
    }
  }
}

TEST_CASE("forward emits paper-shaped velocities") {
  DitConfig cfg;  // defaults: 8 blocks, 512/1024, heads 4, face 256
  cfg.seed = 7;
  AvFlowModel model(cfg);
  int64_t n = 12;
  Rng rng(8);
  Tape t;
  ParamBinder p(t, model.params);
  auto [va, vv] = model.forward(t, p, t.leaf(Tensor::randn({n, 80}, rng)),
                                t.leaf(Tensor::randn({n, 264}, rng)), tokens_only(n, 9));
  CHECK(t.val(va).shape() == Shape{n, 80});
  CHECK(t.val(vv).shape() == Shape{n, 264});
}

TEST_CASE("zero fusion equals the separate variant bitwise") {
  DitConfig cfg = small_config(Variant::AvFlow);
  AvFlowModel avflow(cfg);
  AvFlowModel separate(small_config(Variant::Separate));
  // zero the fusion tensors; stream parameters already share the same seed
  for (int l = 0; l < cfg.blocks; ++l) {
    std::string fp = "fusion.block" + std::to_string(l);
    for (const char* suffix : {".U", ".b", ".V", ".c"})
      avflow.params.set(fp + suffix, Tensor::zeros(avflow.params.get(fp + suffix).shape()));
  }
  int64_t n = 25;
  Rng rng(10);
  Tensor na = Tensor::randn({n, 80}, rng);
  Tensor nv = Tensor::randn({n, 24}, rng);
  ConditionBundle cond = tokens_only(n, 11);
  auto [a1, v1] = avflow.forward_values(na, nv, cond);
  auto [a2, v2] = separate.forward_values(na, nv, cond);
  CHECK(bits_equal(a1, a2));
  CHECK(bits_equal(v1, v2));
}

TEST_CASE("nonzero fusion moves audio output when vision input changes") {
  AvFlowModel model(small_config(Variant::AvFlow));
  int64_t n = 10;
  Rng rng(12);
  Tensor na = Tensor::randn({n, 80}, rng);
  Tensor nv = Tensor::randn({n, 24}, rng);
  ConditionBundle cond = tokens_only(n, 13);
  auto [a1, v1] = model.forward_values(na, nv, cond);
  nv.at(5 * 24 + 3) += 1.0f;
  auto [a2, v2] = model.forward_values(na, nv, cond);
  CHECK_FALSE(bits_equal(a1, a2));
}

TEST_CASE("causality: frames outside a chunk cannot influence it") {
  DitConfig cfg = small_config(Variant::AvFlow);
  AvFlowModel model(cfg);
  int64_t n = 34;  // uneven tail chunk included
  Rng rng(14);
  Tensor na = Tensor::randn({n, 80}, rng);
  Tensor nv = Tensor::randn({n, 24}, rng);
  ConditionBundle cond = tokens_only(n, 15);
  auto [a0, v0] = model.forward_values(na, nv, cond);

  Rng probe(16);
  for (int trial = 0; trial < 8; ++trial) {
    int64_t j = probe.uniform_int(0, n - 1);
    ConditionBundle pert = cond;
    pert.tokens = cond.tokens.clone();
    pert.tokens.at(j * 29 + probe.uniform_int(0, 28)) += 2.0f;
    auto [a1, v1] = model.forward_values(na, nv, pert);
    int64_t chunk = j / cfg.window;
    for (int64_t i = 0; i < n; ++i) {
      if (i / cfg.window == chunk) continue;
      bool audio_same = true, vision_same = true;
      for (int64_t c = 0; c < 80; ++c)
        if (a0.at(i * 80 + c) != a1.at(i * 80 + c)) audio_same = false;
      for (int64_t c = 0; c < 24; ++c)
        if (v0.at(i * 24 + c) != v1.at(i * 24 + c)) vision_same = false;
      CHECK_MESSAGE(audio_same, "audio frame ", i, " changed by token frame ", j);
      CHECK_MESSAGE(vision_same, "vision frame ", i, " changed by token frame ", j);
    }
  }

  SUBCASE("the spec probe: i at a window edge, token frame i+3 beyond the lookahead") {
    int64_t i = cfg.window - 1;  // last frame of the first chunk
    ConditionBundle pert = cond;
    pert.tokens = cond.tokens.clone();
    for (int64_t c = 0; c < 29; ++c) pert.tokens.at((i + 3) * 29 + c) += 3.0f;
    auto [a1, v1] = model.forward_values(na, nv, pert);
    for (int64_t c = 0; c < 80; ++c) CHECK(a1.at(i * 80 + c) == a0.at(i * 80 + c));
    for (int64_t c = 0; c < 24; ++c) CHECK(v1.at(i * 24 + c) == v0.at(i * 24 + c));
  }
}

TEST_CASE("structural latency bound: one window of buffering at 86 fps") {
  DitConfig cfg = small_config();
  // emitting a chunk needs exactly its own window of input frames
  double delay_ms = 1000.0 * cfg.window / 86.0;
  CHECK(delay_ms <= 120.0);
  // and the mask itself never looks farther ahead than the lookahead
  Tensor m = window_mask(50, cfg.window, cfg.lookahead);
  for (int64_t i = 0; i < 50; ++i)
    for (int64_t j = 0; j < 50; ++j)
      if (m.at(i * 50 + j) == 1.0f) CHECK(j - i <= cfg.lookahead);
}

TEST_CASE("parameter count follows the documented formula") {
  for (Variant v : {Variant::AvFlow, Variant::Separate, Variant::Shared, Variant::Cascaded}) {
    DitConfig cfg = small_config(v);
    AvFlowModel model(cfg);
    CHECK(model.params.total_elements(true) == AvFlowModel::expected_param_count(cfg));
  }
  SUBCASE("shared weights use strictly fewer parameters than avflow") {
    CHECK(AvFlowModel::expected_param_count(small_config(Variant::Shared)) <
          AvFlowModel::expected_param_count(small_config(Variant::AvFlow)));
  }
}

TEST_CASE("unguided models ignore participant streams bitwise") {
  AvFlowModel model(small_config(Variant::AvFlow));
  int64_t n = 20;
  Rng rng(20);
  Tensor na = Tensor::randn({n, 80}, rng);
  Tensor nv = Tensor::randn({n, 24}, rng);
  ConditionBundle plain = tokens_only(n, 21);
  ConditionBundle with_part = plain;
  with_part.participant_feats = Tensor::randn({n, 56}, rng);
  with_part.participant_tokens = Tensor::randn({n, 29}, rng);
  auto [a1, v1] = model.forward_values(na, nv, plain);
  auto [a2, v2] = model.forward_values(na, nv, with_part);
  CHECK(bits_equal(a1, a2));
  CHECK(bits_equal(v1, v2));
}

TEST_CASE("guided models react to participant streams") {
  DitConfig cfg = small_config(Variant::AvFlow);
  cfg.guidance = Guidance::AudioVisual;
  AvFlowModel model(cfg);
  int64_t n = 20;
  Rng rng(22);
  Tensor na = Tensor::randn({n, 80}, rng);
  Tensor nv = Tensor::randn({n, 24}, rng);
  ConditionBundle cond = tokens_only(n, 23);
  cond.participant_feats = Tensor::randn({n, 56}, rng);
  cond.participant_tokens = Tensor::randn({n, 29}, rng);
  auto [a1, v1] = model.forward_values(na, nv, cond);
  cond.participant_feats.at(4 * 56 + 0) += 1.5f;
  auto [a2, v2] = model.forward_values(na, nv, cond);
  CHECK_FALSE(bits_equal(v1, v2));

  SUBCASE("guidance without streams is an error") {
    ConditionBundle missing = tokens_only(n, 24);
    Tape t;
    ParamBinder pb(t, model.params);
    try {
      model.forward(t, pb, t.leaf(na), t.leaf(nv), missing);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrKind::NoParticipantStreams);
    }
  }
}

TEST_CASE("shared variant splits its joint output") {
  AvFlowModel model(small_config(Variant::Shared));
  int64_t n = 15;
  Rng rng(30);
  auto [a, v] = model.forward_values(Tensor::randn({n, 80}, rng), Tensor::randn({n, 24}, rng),
                                     tokens_only(n, 31));
  CHECK(a.shape() == Shape{n, 80});
  CHECK(v.shape() == Shape{n, 24});
}

TEST_CASE("forward error paths") {
  AvFlowModel model(small_config());
  Rng rng(40);
  Tape t;
  ParamBinder pb(t, model.params);
  Var na = t.leaf(Tensor::randn({10, 80}, rng));
  Var nv = t.leaf(Tensor::randn({10, 24}, rng));

  ConditionBundle bad_frames = tokens_only(12, 41);
  try {
    model.forward(t, pb, na, nv, bad_frames);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::FrameCountMismatch);
  }

  ConditionBundle bad_t = tokens_only(10, 42, 1.5);
  try {
    model.forward(t, pb, na, nv, bad_t);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::TOutOfRange);
  }

  Var wrong_w = t.leaf(Tensor::randn({10, 13}, rng));
  try {
    model.forward(t, pb, na, wrong_w, tokens_only(10, 43));
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::ConfigMismatch);
  }

  SUBCASE("odd head dim is rejected at config level") {
    DitConfig cfg = small_config();
    cfg.dim = 36;  // 36/4 = 9, odd
    try {
      cfg.validate();
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrKind::OddHeadDim);
    }
  }
}
