#include "avflow/flow.hpp"

#include <cmath>

namespace avflow {

void FlowConfig::validate() const {
  if (sigma_min < 0.0f || sigma_min >= 1.0f)
    fail(ErrKind::ConfigInvalid, "sigma_min must lie in [0,1)");
  if (steps < 1) fail(ErrKind::ConfigInvalid, "solver steps must be >= 1");
  if (lambda_s < 0.0f || lambda_h < 0.0f || lambda_f < 0.0f)
    fail(ErrKind::ConfigInvalid, "loss weights must be >= 0");
  if (solver != "euler") fail(ErrKind::ConfigInvalid, "unknown solver '" + solver + "'");
}

Tensor ot_path(const Tensor& x0, const Tensor& x1, double t, double sigma_min) {
  if (!x0.same_shape(x1))
    fail(ErrKind::ShapeMismatch,
         "ot_path " + shape_str(x0.shape()) + " vs " + shape_str(x1.shape()));
  if (t < 0.0 || t > 1.0) fail(ErrKind::TOutOfRange, "t must lie in [0,1]");
  double a = 1.0 - (1.0 - sigma_min) * t;
  Tensor out(x0.shape());
  const float* p0 = x0.data();
  const float* p1 = x1.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = static_cast<float>(a * p0[i] + t * static_cast<double>(p1[i]));
  return out;
}

Tensor target_velocity(const Tensor& x0, const Tensor& x1, double sigma_min) {
  if (!x0.same_shape(x1))
    fail(ErrKind::ShapeMismatch,
         "target_velocity " + shape_str(x0.shape()) + " vs " + shape_str(x1.shape()));
  double a = 1.0 - sigma_min;
  Tensor out(x0.shape());
  const float* p0 = x0.data();
  const float* p1 = x1.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = static_cast<float>(static_cast<double>(p1[i]) - a * p0[i]);
  return out;
}

PathSample make_path_sample(const Tensor& x1, double t, double sigma_min, Rng& rng) {
  PathSample s;
  s.x1 = x1;
  s.t = t;
  s.x0 = Tensor(x1.shape());
  for (int64_t i = 0; i < s.x0.numel(); ++i) s.x0.at(i) = static_cast<float>(rng.normal());
  s.x_t = ot_path(s.x0, x1, t, sigma_min);
  s.u_target = target_velocity(s.x0, x1, sigma_min);
  return s;
}

NormStats NormStats::identity(int64_t mel, int64_t head, int64_t face) {
  NormStats s;
  s.mel_mean = Tensor::zeros({mel});
  s.mel_std = Tensor::full({mel}, 1.0f);
  s.head_mean = Tensor::zeros({head});
  s.head_std = Tensor::full({head}, 1.0f);
  s.face_mean = Tensor::zeros({face});
  s.face_std = Tensor::full({face}, 1.0f);
  return s;
}

std::vector<std::pair<std::string, Tensor>> NormStats::entries() const {
  return {{"norm.mean.s", mel_mean}, {"norm.std.s", mel_std},    {"norm.mean.h", head_mean},
          {"norm.std.h", head_std},  {"norm.mean.f", face_mean}, {"norm.std.f", face_std}};
}

NormStats NormStats::from_entries(const std::vector<std::pair<std::string, Tensor>>& entries) {
  NormStats s;
  for (const auto& [name, t] : entries) {
    if (name == "norm.mean.s") s.mel_mean = t;
    else if (name == "norm.std.s") s.mel_std = t;
    else if (name == "norm.mean.h") s.head_mean = t;
    else if (name == "norm.std.h") s.head_std = t;
    else if (name == "norm.mean.f") s.face_mean = t;
    else if (name == "norm.std.f") s.face_std = t;
  }
  if (!s.mel_mean.defined() || !s.mel_std.defined() || !s.head_mean.defined() ||
      !s.head_std.defined() || !s.face_mean.defined() || !s.face_std.defined())
    fail(ErrKind::StateMismatch, "normalization stats missing from checkpoint");
  return s;
}

Tensor normalize_rows(const Tensor& x, const Tensor& mean, const Tensor& stddev) {
  int64_t w = mean.numel();
  if (x.dim(x.rank() - 1) != w) fail(ErrKind::ShapeMismatch, "normalize width");
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    int64_t c = i % w;
    out.at(i) = static_cast<float>((static_cast<double>(x.at(i)) - mean.at(c)) / stddev.at(c));
  }
  return out;
}

Tensor denormalize_rows(const Tensor& x, const Tensor& mean, const Tensor& stddev) {
  int64_t w = mean.numel();
  if (x.dim(x.rank() - 1) != w) fail(ErrKind::ShapeMismatch, "denormalize width");
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    int64_t c = i % w;
    out.at(i) = static_cast<float>(static_cast<double>(x.at(i)) * stddev.at(c) + mean.at(c));
  }
  return out;
}

namespace {

Tensor join_columns(const Tensor& a, const Tensor& b) {
  int64_t n = a.dim(0), wa = a.dim(1), wb = b.dim(1);
  Tensor out({n, wa + wb});
  for (int64_t i = 0; i < n; ++i) {
    std::copy(a.data() + i * wa, a.data() + (i + 1) * wa, out.mutable_data() + i * (wa + wb));
    std::copy(b.data() + i * wb, b.data() + (i + 1) * wb,
              out.mutable_data() + i * (wa + wb) + wa);
  }
  return out;
}

Tensor take_columns(const Tensor& x, int64_t start, int64_t len) {
  int64_t n = x.dim(0), w = x.dim(1);
  Tensor out({n, len});
  for (int64_t i = 0; i < n; ++i)
    std::copy(x.data() + i * w + start, x.data() + i * w + start + len,
              out.mutable_data() + i * len);
  return out;
}

}  // namespace

CfmLossVars cfm_loss_core(Tape& t, const VelocityFn& velocity, const Tensor& mel_n,
                          const Tensor& head_n, const Tensor& face_n, const FlowConfig& cfg,
                          double tval, const Tensor& x0_audio, const Tensor& x0_vision,
                          StreamSelect select) {
  cfg.validate();
  const bool audio = select != StreamSelect::VisionOnly;
  const bool vision = select != StreamSelect::AudioOnly;

  Var xt_a, xt_v;
  Tensor u_audio, u_vision;
  int64_t hw = 0, fw = 0;
  if (audio) {
    xt_a = t.constant(ot_path(x0_audio, mel_n, tval, cfg.sigma_min));
    u_audio = target_velocity(x0_audio, mel_n, cfg.sigma_min);
  }
  if (vision) {
    if (head_n.dim(0) != face_n.dim(0))
      fail(ErrKind::MisalignedBatch, "head/face frame counts differ");
    hw = head_n.dim(1);
    fw = face_n.dim(1);
    Tensor x1 = join_columns(head_n, face_n);
    xt_v = t.constant(ot_path(x0_vision, x1, tval, cfg.sigma_min));
    u_vision = target_velocity(x0_vision, x1, cfg.sigma_min);
  }

  auto [va, vv] = velocity(t, xt_a, xt_v, tval);

  CfmLossVars out;
  Var zero = t.constant(Tensor::scalar(0.0f));
  out.ls = zero;
  out.lh = zero;
  out.lf = zero;
  if (audio) out.ls = t.l1_loss(va, t.constant(u_audio));
  if (vision) {
    out.lh = t.l1_loss(t.slice(vv, 1, 0, hw), t.constant(take_columns(u_vision, 0, hw)));
    out.lf = t.l1_loss(t.slice(vv, 1, hw, fw), t.constant(take_columns(u_vision, hw, fw)));
  }
  out.total = t.add(t.add(t.scale(out.ls, cfg.lambda_s), t.scale(out.lh, cfg.lambda_h)),
                    t.scale(out.lf, cfg.lambda_f));
  if (!std::isfinite(t.val_scalar(out.total)))
    fail(ErrKind::NonFiniteLoss, "objective is not finite");
  return out;
}

CfmLoss cfm_loss(AvFlowModel& model, const CfmBatchItem& item, const FlowConfig& cfg,
                 const NormStats& stats, Rng& rng,
                 std::vector<std::pair<std::string, Tensor>>* grads_out, StreamSelect select) {
  int64_t n = item.tokens.dim(0);
  if ((item.mel.defined() && item.mel.dim(0) != n) ||
      (item.head.defined() && item.head.dim(0) != n) ||
      (item.face.defined() && item.face.dim(0) != n))
    fail(ErrKind::MisalignedBatch, "streams are not frame-aligned");

  Tensor mel_n, head_n, face_n;
  if (select != StreamSelect::VisionOnly)
    mel_n = normalize_rows(item.mel, stats.mel_mean, stats.mel_std);
  if (select != StreamSelect::AudioOnly) {
    head_n = normalize_rows(item.head, stats.head_mean, stats.head_std);
    face_n = normalize_rows(item.face, stats.face_mean, stats.face_std);
  }

  // one shared t and one noise draw per sequence, covering both streams
  double tval = rng.uniform();
  Tensor x0_audio, x0_vision;
  if (select != StreamSelect::VisionOnly) {
    x0_audio = Tensor({n, model.config.mel_dim});
    for (int64_t i = 0; i < x0_audio.numel(); ++i)
      x0_audio.at(i) = static_cast<float>(rng.normal());
  }
  if (select != StreamSelect::AudioOnly) {
    x0_vision = Tensor({n, model.config.vision_dim()});
    for (int64_t i = 0; i < x0_vision.numel(); ++i)
      x0_vision.at(i) = static_cast<float>(rng.normal());
  }

  ConditionBundle cond;
  cond.tokens = item.tokens;
  cond.participant_feats = item.participant_feats;
  cond.participant_tokens = item.participant_tokens;
  cond.cascade_audio = item.cascade_audio;

  Tape tape;
  ParamBinder binder(tape, model.params);
  VelocityFn velocity = [&](Tape& t, Var xt_a, Var xt_v, double tv) -> std::pair<Var, Var> {
    cond.t = tv;
    switch (select) {
      case StreamSelect::Both:
        return model.forward(t, binder, xt_a, xt_v, cond);
      case StreamSelect::AudioOnly:
        return {model.forward_stream(t, binder, Stream::Audio, xt_a, cond), Var{}};
      case StreamSelect::VisionOnly:
        return {Var{}, model.forward_stream(t, binder, Stream::Vision, xt_v, cond)};
    }
    return {Var{}, Var{}};
  };
  CfmLossVars vars =
      cfm_loss_core(tape, velocity, mel_n, head_n, face_n, cfg, tval, x0_audio, x0_vision, select);

  CfmLoss out;
  out.total = tape.val_scalar(vars.total);
  out.ls = tape.val_scalar(vars.ls);
  out.lh = tape.val_scalar(vars.lh);
  out.lf = tape.val_scalar(vars.lf);
  if (grads_out) {
    GradMap g = tape.backward(vars.total);
    *grads_out = binder.collect(g);
  }
  return out;
}

Tensor euler_solve(const std::function<Tensor(double, const Tensor&)>& field, const Tensor& x0,
                   int steps) {
  if (steps < 1) fail(ErrKind::ConfigInvalid, "steps must be >= 1");
  Tensor x = x0.clone();
  double h = 1.0 / static_cast<double>(steps);
  for (int k = 0; k < steps; ++k) {
    double tk = static_cast<double>(k) * h;
    Tensor v = field(tk, x);
    if (!v.same_shape(x)) fail(ErrKind::ShapeMismatch, "field output shape");
    for (int64_t i = 0; i < x.numel(); ++i)
      x.at(i) = static_cast<float>(static_cast<double>(x.at(i)) + h * v.at(i));
    if (!x.all_finite()) fail(ErrKind::NonFiniteState, "solver state diverged");
  }
  return x;
}

SampleOutput sample(AvFlowModel& model, const Tensor& tokens, const FlowConfig& cfg,
                    const NormStats& stats, Rng& rng, const ConditionBundle& extras) {
  cfg.validate();
  int64_t n = tokens.dim(0);
  const DitConfig& mc = model.config;
  ConditionBundle cond = extras;
  cond.tokens = tokens;

  Tensor xa({n, mc.mel_dim});
  for (int64_t i = 0; i < xa.numel(); ++i) xa.at(i) = static_cast<float>(rng.normal());
  Tensor xv({n, mc.vision_dim()});
  for (int64_t i = 0; i < xv.numel(); ++i) xv.at(i) = static_cast<float>(rng.normal());

  double h = 1.0 / static_cast<double>(cfg.steps);
  auto integrate_both = [&]() {
    for (int k = 0; k < cfg.steps; ++k) {
      cond.t = static_cast<double>(k) * h;
      auto [va, vv] = model.forward_values(xa, xv, cond);
      for (int64_t i = 0; i < xa.numel(); ++i)
        xa.at(i) = static_cast<float>(static_cast<double>(xa.at(i)) + h * va.at(i));
      for (int64_t i = 0; i < xv.numel(); ++i)
        xv.at(i) = static_cast<float>(static_cast<double>(xv.at(i)) + h * vv.at(i));
      if (!xa.all_finite() || !xv.all_finite())
        fail(ErrKind::NonFiniteState, "sampler state diverged");
    }
  };

  if (mc.variant == Variant::Cascaded) {
    // tokens-to-speech first, then speech-to-video on the sampled audio
    for (int k = 0; k < cfg.steps; ++k) {
      cond.t = static_cast<double>(k) * h;
      Tape t;
      ParamBinder p(t, model.params);
      Var va = model.forward_stream(t, p, Stream::Audio, t.leaf(xa), cond);
      const Tensor& v = t.val(va);
      for (int64_t i = 0; i < xa.numel(); ++i)
        xa.at(i) = static_cast<float>(static_cast<double>(xa.at(i)) + h * v.at(i));
    }
    cond.cascade_audio = denormalize_rows(xa, stats.mel_mean, stats.mel_std);
    for (int k = 0; k < cfg.steps; ++k) {
      cond.t = static_cast<double>(k) * h;
      Tape t;
      ParamBinder p(t, model.params);
      Var vv = model.forward_stream(t, p, Stream::Vision, t.leaf(xv), cond);
      const Tensor& v = t.val(vv);
      for (int64_t i = 0; i < xv.numel(); ++i)
        xv.at(i) = static_cast<float>(static_cast<double>(xv.at(i)) + h * v.at(i));
    }
  } else {
    integrate_both();
  }

  SampleOutput out;
  out.mel = denormalize_rows(xa, stats.mel_mean, stats.mel_std);
  Tensor head_n = take_columns(xv, 0, mc.head_latent_dim);
  Tensor face_n = take_columns(xv, mc.head_latent_dim, mc.face_dim);
  out.head = denormalize_rows(head_n, stats.head_mean, stats.head_std);
  out.face = denormalize_rows(face_n, stats.face_mean, stats.face_std);
  return out;
}

}  // namespace avflow
