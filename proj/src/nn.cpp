#include "avflow/nn.hpp"

#include <cmath>

namespace avflow {

void create_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng) {
  float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(in)));
  ps.create(prefix + ".w", Tensor::randn({in, out}, rng, scale));
  ps.create(prefix + ".b", Tensor::zeros({out}));
}

Var linear(Tape& t, ParamBinder& p, const std::string& prefix, Var x) {
  return t.add(t.matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

void create_layernorm(ParamStore& ps, const std::string& prefix, int64_t dim) {
  ps.create(prefix + ".gain", Tensor::full({dim}, 1.0f));
  ps.create(prefix + ".bias", Tensor::zeros({dim}));
}

Var layernorm_affine(Tape& t, ParamBinder& p, const std::string& prefix, Var x) {
  return t.add(t.mul(t.layernorm(x), p(prefix + ".gain")), p(prefix + ".bias"));
}

void create_attention(ParamStore& ps, const std::string& prefix, const AttentionSpec& spec,
                      Rng& rng) {
  create_linear(ps, prefix + ".wq", spec.dim, spec.dim, rng);
  create_linear(ps, prefix + ".wk", spec.dim, spec.dim, rng);
  create_linear(ps, prefix + ".wv", spec.dim, spec.dim, rng);
  create_linear(ps, prefix + ".wo", spec.dim, spec.dim, rng);
}

Var self_attention(Tape& t, ParamBinder& p, const std::string& prefix, const AttentionSpec& spec,
                   Var x, const std::vector<int64_t>& positions, const Tensor& mask_bias) {
  const int64_t dim = spec.dim;
  const int64_t dh = dim / spec.heads;
  if (dim % spec.heads != 0)
    fail(ErrKind::ConfigMismatch, "attention dim not divisible by heads");
  Var q = linear(t, p, prefix + ".wq", x);
  Var k = linear(t, p, prefix + ".wk", x);
  Var v = linear(t, p, prefix + ".wv", x);
  Var bias;
  if (mask_bias.defined()) bias = t.constant(mask_bias);
  float inv_sqrt_dh = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Var> heads;
  heads.reserve(static_cast<size_t>(spec.heads));
  for (int h = 0; h < spec.heads; ++h) {
    Var qh = t.slice(q, 1, h * dh, dh);
    Var kh = t.slice(k, 1, h * dh, dh);
    Var vh = t.slice(v, 1, h * dh, dh);
    if (spec.rope) {
      qh = t.rotary(qh, positions);
      kh = t.rotary(kh, positions);
    }
    Var scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt_dh);
    if (bias.valid()) scores = t.add(scores, bias);
    heads.push_back(t.matmul(t.softmax(scores), vh));
  }
  return linear(t, p, prefix + ".wo", t.concat(heads, -1));
}

void create_block(ParamStore& ps, const std::string& prefix, const BlockSpec& spec, Rng& rng) {
  create_layernorm(ps, prefix + ".ln1", spec.dim);
  create_attention(ps, prefix + ".attn", {spec.dim, spec.heads, spec.rope}, rng);
  create_layernorm(ps, prefix + ".ln2", spec.dim);
  create_linear(ps, prefix + ".mlp.w1", spec.dim, spec.hidden, rng);
  create_linear(ps, prefix + ".mlp.w2", spec.hidden, spec.dim, rng);
}

Var transformer_block(Tape& t, ParamBinder& p, const std::string& prefix, const BlockSpec& spec,
                      Var x, const std::vector<int64_t>& positions, const Tensor& mask_bias) {
  Var h = layernorm_affine(t, p, prefix + ".ln1", x);
  x = t.add(x, self_attention(t, p, prefix + ".attn", {spec.dim, spec.heads, spec.rope}, h,
                              positions, mask_bias));
  Var m = layernorm_affine(t, p, prefix + ".ln2", x);
  m = linear(t, p, prefix + ".mlp.w2", t.gelu(linear(t, p, prefix + ".mlp.w1", m)));
  return t.add(x, m);
}

Tensor time_embedding(double tval, int64_t dim) {
  Tensor e({dim});
  int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    double a = tval * freq * 1000.0;  // spread t in [0,1] over distinct phases
    e.at(i) = static_cast<float>(std::sin(a));
    e.at(half + i) = static_cast<float>(std::cos(a));
  }
  if (dim % 2 == 1) e.at(dim - 1) = static_cast<float>(tval);
  return e;
}

Tensor mask_to_bias(const Tensor& mask01) {
  Tensor bias(mask01.shape());
  for (int64_t i = 0; i < mask01.numel(); ++i)
    bias.at(i) = mask01.at(i) > 0.5f ? 0.0f : kMaskedBias;
  return bias;
}

}  // namespace avflow
