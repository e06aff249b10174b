#include "avflow/dit.hpp"

#include <cmath>

namespace avflow {

Variant variant_from_string(const std::string& s) {
  if (s == "avflow") return Variant::AvFlow;
  if (s == "separate") return Variant::Separate;
  if (s == "shared") return Variant::Shared;
  if (s == "cascaded") return Variant::Cascaded;
  fail(ErrKind::ConfigInvalid, "unknown variant '" + s + "'");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::AvFlow: return "avflow";
    case Variant::Separate: return "separate";
    case Variant::Shared: return "shared";
    case Variant::Cascaded: return "cascaded";
  }
  return "?";
}

Guidance guidance_from_string(const std::string& s) {
  if (s == "none") return Guidance::None;
  if (s == "audio") return Guidance::Audio;
  if (s == "visual") return Guidance::Visual;
  if (s == "audiovisual") return Guidance::AudioVisual;
  fail(ErrKind::ConfigInvalid, "unknown guidance '" + s + "'");
}

std::string guidance_name(Guidance g) {
  switch (g) {
    case Guidance::None: return "none";
    case Guidance::Audio: return "audio";
    case Guidance::Visual: return "visual";
    case Guidance::AudioVisual: return "audiovisual";
  }
  return "?";
}

void DitConfig::validate() const {
  if (blocks < 1) fail(ErrKind::ConfigInvalid, "blocks must be >= 1");
  if (dim % heads != 0) fail(ErrKind::ConfigInvalid, "dim must be divisible by heads");
  if ((dim / heads) % 2 != 0) fail(ErrKind::OddHeadDim, "head dim must be even for rotary");
  if (window < 1) fail(ErrKind::ConfigInvalid, "window must be >= 1");
  if (lookahead < 0 || lookahead >= window)
    fail(ErrKind::ConfigInvalid, "lookahead must be in [0, window)");
  if (token_dim < 1 || mel_dim < 1 || head_latent_dim < 1 || face_dim < 2)
    fail(ErrKind::ConfigInvalid, "stream widths out of range");
}

Tensor window_mask(int64_t n, int window, int lookahead) {
  if (window < 1 || lookahead < 0 || lookahead >= window)
    fail(ErrKind::Internal, "bad window/lookahead");
  Tensor mask({n, n});
  for (int64_t i = 0; i < n; ++i) {
    int64_t lo = std::max<int64_t>(0, i - (window - 1 - lookahead));
    int64_t hi = std::min<int64_t>(n - 1, i + lookahead);
    for (int64_t j = lo; j <= hi; ++j) mask.at(i * n + j) = 1.0f;
  }
  return mask;
}

std::pair<Var, Var> fuse(Tape& t, Var x_audio, Var x_vision, Var u, Var b, Var v, Var c) {
  const Tensor& ta = t.val(x_audio);
  const Tensor& tv = t.val(x_vision);
  if (ta.shape() != tv.shape())
    fail(ErrKind::DimensionMismatch,
         "fusion streams " + shape_str(ta.shape()) + " vs " + shape_str(tv.shape()));
  int64_t d = ta.dim(ta.rank() - 1);
  if (t.val(u).dim(0) != 2 * d || t.val(u).dim(1) != d || t.val(v).dim(0) != 2 * d ||
      t.val(v).dim(1) != d)
    fail(ErrKind::DimensionMismatch, "fusion matrices must be [2d,d]");
  Var z = t.concat({x_audio, x_vision}, -1);
  Var ya = t.add(t.add(x_audio, t.matmul(z, u)), b);
  Var yv = t.add(t.add(x_vision, t.matmul(z, v)), c);
  return {ya, yv};
}

namespace {

bool all_zero(const Tensor& t) {
  const float* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i)
    if (p[i] != 0.0f) return false;
  return true;
}

std::string block_name(const std::string& stream, int l) {
  return stream + ".block" + std::to_string(l);
}

void create_stream(ParamStore& ps, const std::string& prefix, int64_t in_ch, int64_t out_ch,
                   const DitConfig& cfg, Rng& rng) {
  create_linear(ps, prefix + ".in_proj", in_ch, cfg.dim, rng);
  BlockSpec blk{cfg.dim, cfg.hidden, cfg.heads, true};
  for (int l = 0; l < cfg.blocks; ++l) create_block(ps, block_name(prefix, l), blk, rng);
  create_layernorm(ps, prefix + ".out_ln", cfg.dim);
  create_linear(ps, prefix + ".head", cfg.dim, out_ch, rng);
}

}  // namespace

AvFlowModel::AvFlowModel(DitConfig cfg) : config(cfg) {
  config.validate();
  Rng rng(cfg.seed ^ 0xd17ull);
  int64_t audio_in = cfg.mel_dim + cfg.cond_dim();
  int64_t vision_in = cfg.vision_dim() + cfg.vision_cond_dim();
  switch (cfg.variant) {
    case Variant::Shared:
      create_stream(params, "shared", cfg.mel_dim + cfg.vision_dim() + cfg.cond_dim(),
                    cfg.mel_dim + cfg.vision_dim(), config, rng);
      break;
    case Variant::AvFlow:
      create_stream(params, "audio", audio_in, cfg.mel_dim, config, rng);
      create_stream(params, "vision", vision_in, cfg.vision_dim(), config, rng);
      for (int l = 0; l < cfg.blocks; ++l) {
        std::string fp = "fusion.block" + std::to_string(l);
        params.create(fp + ".U", Tensor::randn({2 * cfg.dim, cfg.dim}, rng, 1e-3f));
        params.create(fp + ".b", Tensor::zeros({cfg.dim}));
        params.create(fp + ".V", Tensor::randn({2 * cfg.dim, cfg.dim}, rng, 1e-3f));
        params.create(fp + ".c", Tensor::zeros({cfg.dim}));
      }
      break;
    case Variant::Separate:
    case Variant::Cascaded:
      create_stream(params, "audio", audio_in, cfg.mel_dim, config, rng);
      create_stream(params, "vision", vision_in, cfg.vision_dim(), config, rng);
      break;
  }
}

int64_t AvFlowModel::expected_param_count(const DitConfig& cfg) {
  auto lin = [](int64_t in, int64_t out) { return in * out + out; };
  int64_t d = cfg.dim;
  int64_t block = 2 * (2 * d)                    // two affine layer norms
                  + 4 * lin(d, d)                // q,k,v,o projections
                  + lin(d, cfg.hidden) + lin(cfg.hidden, d);
  auto stream = [&](int64_t in_ch, int64_t out_ch) {
    return lin(in_ch, d) + cfg.blocks * block + 2 * d + lin(d, out_ch);
  };
  int64_t audio_in = cfg.mel_dim + cfg.cond_dim();
  int64_t vision_in = cfg.vision_dim() + cfg.vision_cond_dim();
  switch (cfg.variant) {
    case Variant::Shared:
      return stream(cfg.mel_dim + cfg.vision_dim() + cfg.cond_dim(),
                    cfg.mel_dim + cfg.vision_dim());
    case Variant::AvFlow:
      return stream(audio_in, cfg.mel_dim) + stream(vision_in, cfg.vision_dim()) +
             cfg.blocks * 2 * (2 * d * d + d);
    case Variant::Separate:
    case Variant::Cascaded:
      return stream(audio_in, cfg.mel_dim) + stream(vision_in, cfg.vision_dim());
  }
  return 0;
}

Tensor AvFlowModel::cond_block(const ConditionBundle& cond, int64_t n, bool vision_stream) const {
  const bool want_feats =
      config.guidance == Guidance::Visual || config.guidance == Guidance::AudioVisual;
  const bool want_ptok =
      config.guidance == Guidance::Audio || config.guidance == Guidance::AudioVisual;
  bool cascaded_vision = vision_stream && config.variant == Variant::Cascaded;
  int64_t base_w = cascaded_vision ? config.mel_dim : config.token_dim;
  int64_t width = base_w + config.participant_dim + config.token_dim;
  Tensor out({n, width});
  const Tensor& base = cascaded_vision ? cond.cascade_audio : cond.tokens;
  if (!base.defined() || base.dim(0) != n || base.dim(1) != base_w)
    fail(cascaded_vision ? ErrKind::ConfigMismatch : ErrKind::FrameCountMismatch,
         cascaded_vision ? "cascaded vision stream needs [n,mel] audio conditioning"
                         : "token conditioning must be [n,token_dim]");
  for (int64_t i = 0; i < n; ++i) {
    float* row = out.mutable_data() + i * width;
    const float* b = base.data() + i * base_w;
    std::copy(b, b + base_w, row);
    if (want_feats) {
      if (!cond.participant_feats.defined())
        fail(ErrKind::NoParticipantStreams, "guidance needs participant features");
      const float* f = cond.participant_feats.data() + i * config.participant_dim;
      std::copy(f, f + config.participant_dim, row + base_w);
    }
    if (want_ptok) {
      if (!cond.participant_tokens.defined())
        fail(ErrKind::NoParticipantStreams, "guidance needs participant tokens");
      const float* f = cond.participant_tokens.data() + i * config.token_dim;
      std::copy(f, f + config.token_dim, row + base_w + config.participant_dim);
    }
  }
  if (want_feats && cond.participant_feats.dim(0) != n)
    fail(ErrKind::FrameCountMismatch, "participant features frame count");
  if (want_ptok && cond.participant_tokens.dim(0) != n)
    fail(ErrKind::FrameCountMismatch, "participant tokens frame count");
  return out;
}

bool AvFlowModel::fusion_all_zero(int block) const {
  std::string fp = "fusion.block" + std::to_string(block);
  return all_zero(params.get(fp + ".U")) && all_zero(params.get(fp + ".b")) &&
         all_zero(params.get(fp + ".V")) && all_zero(params.get(fp + ".c"));
}

std::pair<Var, Var> AvFlowModel::forward(Tape& t, ParamBinder& p, Var noisy_audio,
                                         Var noisy_vision, const ConditionBundle& cond) {
  const Tensor& na = t.val(noisy_audio);
  const Tensor& nv = t.val(noisy_vision);
  if (na.rank() != 2 || nv.rank() != 2)
    fail(ErrKind::ConfigMismatch, "noisy streams must be 2-D");
  int64_t n = na.dim(0);
  if (nv.dim(0) != n || (cond.tokens.defined() && cond.tokens.dim(0) != n))
    fail(ErrKind::FrameCountMismatch, "streams disagree on frame count");
  if (na.dim(1) != config.mel_dim || nv.dim(1) != config.vision_dim())
    fail(ErrKind::ConfigMismatch, "stream widths do not match the config");
  if (cond.t < 0.0 || cond.t > 1.0) fail(ErrKind::TOutOfRange, "t must lie in [0,1]");

  BlockSpec blk{config.dim, config.hidden, config.heads, true};
  Var temb = t.constant(time_embedding(cond.t, config.dim));

  if (config.variant == Variant::Shared) {
    Var x = t.concat({noisy_audio, noisy_vision, t.constant(cond_block(cond, n, false))}, -1);
    Var h = t.add(linear(t, p, "shared.in_proj", x), temb);
    std::vector<Var> chunks;
    for (int64_t start = 0; start < n; start += config.window) {
      int64_t len = std::min<int64_t>(config.window, n - start);
      Var c = t.slice(h, 0, start, len);
      Tensor bias = mask_to_bias(window_mask(len, config.window, config.lookahead));
      std::vector<int64_t> pos(static_cast<size_t>(len));
      for (int64_t i = 0; i < len; ++i) pos[static_cast<size_t>(i)] = start + i;
      for (int l = 0; l < config.blocks; ++l)
        c = transformer_block(t, p, block_name("shared", l), blk, c, pos, bias);
      chunks.push_back(c);
    }
    Var out = chunks.size() == 1 ? chunks[0] : t.concat(chunks, 0);
    out = linear(t, p, "shared.head", layernorm_affine(t, p, "shared.out_ln", out));
    return {t.slice(out, 1, 0, config.mel_dim),
            t.slice(out, 1, config.mel_dim, config.vision_dim())};
  }

  Var xa = t.concat({noisy_audio, t.constant(cond_block(cond, n, false))}, -1);
  Var xv = t.concat({noisy_vision, t.constant(cond_block(cond, n, true))}, -1);
  Var ha = t.add(linear(t, p, "audio.in_proj", xa), temb);
  Var hv = t.add(linear(t, p, "vision.in_proj", xv), temb);

  bool with_fusion = config.variant == Variant::AvFlow;
  std::vector<bool> fusion_live(static_cast<size_t>(config.blocks), false);
  if (with_fusion)
    for (int l = 0; l < config.blocks; ++l)
      fusion_live[static_cast<size_t>(l)] = !fusion_all_zero(l);

  std::vector<Var> achunks, vchunks;
  for (int64_t start = 0; start < n; start += config.window) {
    int64_t len = std::min<int64_t>(config.window, n - start);
    Var ca = t.slice(ha, 0, start, len);
    Var cv = t.slice(hv, 0, start, len);
    Tensor bias = mask_to_bias(window_mask(len, config.window, config.lookahead));
    std::vector<int64_t> pos(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) pos[static_cast<size_t>(i)] = start + i;
    for (int l = 0; l < config.blocks; ++l) {
      ca = transformer_block(t, p, block_name("audio", l), blk, ca, pos, bias);
      cv = transformer_block(t, p, block_name("vision", l), blk, cv, pos, bias);
      if (with_fusion && fusion_live[static_cast<size_t>(l)]) {
        std::string fp = "fusion.block" + std::to_string(l);
        std::tie(ca, cv) = fuse(t, ca, cv, p(fp + ".U"), p(fp + ".b"), p(fp + ".V"), p(fp + ".c"));
      }
    }
    achunks.push_back(ca);
    vchunks.push_back(cv);
  }
  Var oa = achunks.size() == 1 ? achunks[0] : t.concat(achunks, 0);
  Var ov = vchunks.size() == 1 ? vchunks[0] : t.concat(vchunks, 0);
  oa = linear(t, p, "audio.head", layernorm_affine(t, p, "audio.out_ln", oa));
  ov = linear(t, p, "vision.head", layernorm_affine(t, p, "vision.out_ln", ov));
  return {oa, ov};
}

Var AvFlowModel::forward_stream(Tape& t, ParamBinder& p, Stream which, Var noisy,
                                const ConditionBundle& cond) {
  if (config.variant == Variant::AvFlow || config.variant == Variant::Shared)
    fail(ErrKind::ConfigMismatch, "single-stream pass requires uncoupled streams");
  const Tensor& nt = t.val(noisy);
  int64_t n = nt.dim(0);
  if (cond.t < 0.0 || cond.t > 1.0) fail(ErrKind::TOutOfRange, "t must lie in [0,1]");
  bool vision = which == Stream::Vision;
  int64_t want_w = vision ? config.vision_dim() : config.mel_dim;
  if (nt.dim(1) != want_w) fail(ErrKind::ConfigMismatch, "noisy stream width");
  std::string prefix = vision ? "vision" : "audio";
  BlockSpec blk{config.dim, config.hidden, config.heads, true};
  Var temb = t.constant(time_embedding(cond.t, config.dim));
  Var x = t.concat({noisy, t.constant(cond_block(cond, n, vision))}, -1);
  Var h = t.add(linear(t, p, prefix + ".in_proj", x), temb);
  std::vector<Var> chunks;
  for (int64_t start = 0; start < n; start += config.window) {
    int64_t len = std::min<int64_t>(config.window, n - start);
    Var c = t.slice(h, 0, start, len);
    Tensor bias = mask_to_bias(window_mask(len, config.window, config.lookahead));
    std::vector<int64_t> pos(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) pos[static_cast<size_t>(i)] = start + i;
    for (int l = 0; l < config.blocks; ++l)
      c = transformer_block(t, p, block_name(prefix, l), blk, c, pos, bias);
    chunks.push_back(c);
  }
  Var out = chunks.size() == 1 ? chunks[0] : t.concat(chunks, 0);
  return linear(t, p, prefix + ".head", layernorm_affine(t, p, prefix + ".out_ln", out));
}

std::pair<Tensor, Tensor> AvFlowModel::forward_values(const Tensor& noisy_audio,
                                                      const Tensor& noisy_vision,
                                                      const ConditionBundle& cond) {
  Tape t;
  ParamBinder p(t, params);
  auto [a, v] = forward(t, p, t.leaf(noisy_audio), t.leaf(noisy_vision), cond);
  return {t.val(a), t.val(v)};
}

}  // namespace avflow
