#include "avflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace avflow {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// b broadcasts against a when its shape equals a trailing slice of a's shape.
bool trailing_broadcast(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); ++i)
    if (a[off + i] != b[i]) return false;
  return true;
}

int64_t axis_block(const Shape& shape, int axis, int64_t* outer, int64_t* inner) {
  int64_t o = 1, in = 1;
  for (int i = 0; i < axis; ++i) o *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) in *= shape[i];
  *outer = o;
  *inner = in;
  return shape[static_cast<size_t>(axis)];
}

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, int64_t n, int64_t k, int64_t m,
             bool accumulate) {
  std::vector<double> row(static_cast<size_t>(m));
  for (int64_t i = 0; i < n; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    const float* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      double av = static_cast<double>(ai[p]);
      const float* bp = b + p * m;
      for (int64_t j = 0; j < m; ++j) row[static_cast<size_t>(j)] += av * bp[j];
    }
    float* ci = c + i * m;
    if (accumulate) {
      for (int64_t j = 0; j < m; ++j) ci[j] += static_cast<float>(row[static_cast<size_t>(j)]);
    } else {
      for (int64_t j = 0; j < m; ++j) ci[j] = static_cast<float>(row[static_cast<size_t>(j)]);
    }
  }
}

void gemm_nt(const float* a, const float* b, float* c, int64_t n, int64_t k, int64_t m,
             bool accumulate) {
  for (int64_t i = 0; i < n; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * m;
    for (int64_t j = 0; j < m; ++j) {
      const float* bj = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += static_cast<double>(ai[p]) * bj[p];
      if (accumulate)
        ci[j] += static_cast<float>(acc);
      else
        ci[j] = static_cast<float>(acc);
    }
  }
}

void gemm_tn(const float* a, const float* b, float* c, int64_t n, int64_t k, int64_t m,
             bool accumulate) {
  // a is [k,n], b is [k,m], c is [n,m]
  std::vector<double> buf(static_cast<size_t>(n * m), 0.0);
  for (int64_t p = 0; p < k; ++p) {
    const float* ap = a + p * n;
    const float* bp = b + p * m;
    for (int64_t i = 0; i < n; ++i) {
      double av = static_cast<double>(ap[i]);
      double* bi = buf.data() + i * m;
      for (int64_t j = 0; j < m; ++j) bi[j] += av * bp[j];
    }
  }
  for (int64_t i = 0; i < n * m; ++i) {
    if (accumulate)
      c[i] += static_cast<float>(buf[static_cast<size_t>(i)]);
    else
      c[i] = static_cast<float>(buf[static_cast<size_t>(i)]);
  }
}

Var Tape::push(Tensor value, std::vector<int32_t> inputs, BackwardFn fn, const char* op_name) {
  check_finite(value, op_name);
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  for (int32_t in : n.inputs)
    if (nodes_[static_cast<size_t>(in)].needs_grad) n.needs_grad = true;
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  grads_.emplace_back();
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  check_finite(value, "leaf");
  Node n;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  n.is_param = requires_grad;
  nodes_.push_back(std::move(n));
  grads_.emplace_back();
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::val(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
    fail(ErrKind::Internal, "invalid var");
  return nodes_[static_cast<size_t>(v.id)].value;
}

double Tape::val_scalar(Var v) const {
  const Tensor& t = val(v);
  if (t.numel() != 1) fail(ErrKind::NotScalar, "val_scalar on " + shape_str(t.shape()));
  auto it = scalar64_.find(v.id);
  return it != scalar64_.end() ? it->second : static_cast<double>(t.at(0));
}

Tensor& Tape::grad_buf(int32_t id) {
  Tensor& g = grads_[static_cast<size_t>(id)];
  if (!g.defined()) g = Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape());
  return g;
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
    fail(ErrKind::ShapeMismatch,
         "matmul " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  int64_t n = ta.dim(0), k = ta.dim(1), m = tb.dim(1);
  Tensor out({n, m});
  gemm_nn(ta.data(), tb.data(), out.mutable_data(), n, k, m, false);
  return push(std::move(out), {a.id, b.id},
              [n, k, m](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0], ib = nd.inputs[1];
                const Tensor& A = t.nodes_[static_cast<size_t>(ia)].value;
                const Tensor& B = t.nodes_[static_cast<size_t>(ib)].value;
                if (t.nodes_[static_cast<size_t>(ia)].needs_grad)
                  gemm_nt(g.data(), B.data(), t.grad_buf(ia).mutable_data(), n, m, k, true);
                if (t.nodes_[static_cast<size_t>(ib)].needs_grad)
                  gemm_tn(A.data(), g.data(), t.grad_buf(ib).mutable_data(), k, n, m, true);
              },
              "matmul");
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!trailing_broadcast(ta.shape(), tb.shape()))
    fail(ErrKind::ShapeMismatch, "add " + shape_str(ta.shape()) + " + " + shape_str(tb.shape()));
  Tensor out(ta.shape());
  int64_t nb = tb.numel();
  const float* pa = ta.data();
  const float* pb = tb.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < ta.numel(); ++i) po[i] = pa[i] + pb[i % nb];
  return push(std::move(out), {a.id, b.id},
              [nb](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0], ib = nd.inputs[1];
                if (t.nodes_[static_cast<size_t>(ia)].needs_grad) {
                  float* ga = t.grad_buf(ia).mutable_data();
                  const float* pg = g.data();
                  for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i];
                }
                if (t.nodes_[static_cast<size_t>(ib)].needs_grad) {
                  Tensor& gbuf = t.grad_buf(ib);
                  std::vector<double> acc(static_cast<size_t>(nb), 0.0);
                  const float* pg = g.data();
                  for (int64_t i = 0; i < g.numel(); ++i)
                    acc[static_cast<size_t>(i % nb)] += pg[i];
                  float* gb = gbuf.mutable_data();
                  for (int64_t i = 0; i < nb; ++i) gb[i] += static_cast<float>(acc[static_cast<size_t>(i)]);
                }
              },
              "add");
}

Var Tape::sub(Var a, Var b) { return add(a, scale(b, -1.0f)); }

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!trailing_broadcast(ta.shape(), tb.shape()))
    fail(ErrKind::ShapeMismatch, "mul " + shape_str(ta.shape()) + " * " + shape_str(tb.shape()));
  Tensor out(ta.shape());
  int64_t nb = tb.numel();
  const float* pa = ta.data();
  const float* pb = tb.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < ta.numel(); ++i) po[i] = pa[i] * pb[i % nb];
  return push(std::move(out), {a.id, b.id},
              [nb](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0], ib = nd.inputs[1];
                const Tensor& A = t.nodes_[static_cast<size_t>(ia)].value;
                const Tensor& B = t.nodes_[static_cast<size_t>(ib)].value;
                const float* pg = g.data();
                if (t.nodes_[static_cast<size_t>(ia)].needs_grad) {
                  float* ga = t.grad_buf(ia).mutable_data();
                  const float* pb2 = B.data();
                  for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] * pb2[i % nb];
                }
                if (t.nodes_[static_cast<size_t>(ib)].needs_grad) {
                  Tensor& gbuf = t.grad_buf(ib);
                  std::vector<double> acc(static_cast<size_t>(nb), 0.0);
                  const float* pa2 = A.data();
                  for (int64_t i = 0; i < g.numel(); ++i)
                    acc[static_cast<size_t>(i % nb)] +=
                        static_cast<double>(pg[i]) * static_cast<double>(pa2[i]);
                  float* gb = gbuf.mutable_data();
                  for (int64_t i = 0; i < nb; ++i) gb[i] += static_cast<float>(acc[static_cast<size_t>(i)]);
                }
              },
              "mul");
}

Var Tape::scale(Var a, float s) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < ta.numel(); ++i) po[i] = pa[i] * s;
  return push(std::move(out), {a.id},
              [s](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                float* ga = t.grad_buf(ia).mutable_data();
                const float* pg = g.data();
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] * s;
              },
              "scale");
}

Var Tape::concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) fail(ErrKind::ShapeMismatch, "concat of zero tensors");
  const Shape& s0 = val(parts[0]).shape();
  if (axis < 0) axis = static_cast<int>(s0.size()) - 1;
  if (axis >= static_cast<int>(s0.size())) fail(ErrKind::ShapeMismatch, "concat axis out of range");
  Shape out_shape = s0;
  int64_t total = 0;
  for (Var p : parts) {
    const Shape& sp = val(p).shape();
    if (sp.size() != s0.size()) fail(ErrKind::ShapeMismatch, "concat rank mismatch");
    for (size_t i = 0; i < sp.size(); ++i)
      if (static_cast<int>(i) != axis && sp[i] != s0[i])
        fail(ErrKind::ShapeMismatch, "concat " + shape_str(sp) + " vs " + shape_str(s0));
    total += sp[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out(out_shape);
  int64_t outer, inner;
  axis_block(out_shape, axis, &outer, &inner);
  std::vector<int64_t> widths;
  std::vector<int32_t> ids;
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& tp = val(p);
    int64_t w = tp.dim(static_cast<size_t>(axis)) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.mutable_data() + o * total * inner + off, tp.data() + o * w,
                  static_cast<size_t>(w) * sizeof(float));
    widths.push_back(w);
    ids.push_back(p.id);
    off += w;
  }
  return push(std::move(out), std::move(ids),
              [widths, outer, total, inner](Tape& t, const Node& nd, const Tensor& g) {
                int64_t off2 = 0;
                for (size_t pi = 0; pi < nd.inputs.size(); ++pi) {
                  int32_t id = nd.inputs[pi];
                  int64_t w = widths[pi];
                  if (t.nodes_[static_cast<size_t>(id)].needs_grad) {
                    float* gp = t.grad_buf(id).mutable_data();
                    for (int64_t o = 0; o < outer; ++o) {
                      const float* src = g.data() + o * total * inner + off2;
                      float* dst = gp + o * w;
                      for (int64_t i = 0; i < w; ++i) dst[i] += src[i];
                    }
                  }
                  off2 += w;
                }
              },
              "concat");
}

Var Tape::slice(Var a, int axis, int64_t start, int64_t len) {
  const Tensor& ta = val(a);
  if (axis < 0) axis = static_cast<int>(ta.rank()) - 1;
  if (axis >= static_cast<int>(ta.rank())) fail(ErrKind::ShapeMismatch, "slice axis out of range");
  int64_t dim = ta.dim(static_cast<size_t>(axis));
  if (start < 0 || len < 0 || start + len > dim)
    fail(ErrKind::ShapeMismatch, "slice [" + std::to_string(start) + "," +
                                     std::to_string(start + len) + ") of dim " + std::to_string(dim));
  Shape out_shape = ta.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out(out_shape);
  int64_t outer, inner;
  axis_block(ta.shape(), axis, &outer, &inner);
  int64_t src_w = dim * inner, dst_w = len * inner, off = start * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.mutable_data() + o * dst_w, ta.data() + o * src_w + off,
                static_cast<size_t>(dst_w) * sizeof(float));
  return push(std::move(out), {a.id},
              [outer, src_w, dst_w, off](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                float* gp = t.grad_buf(ia).mutable_data();
                for (int64_t o = 0; o < outer; ++o) {
                  const float* src = g.data() + o * dst_w;
                  float* dst = gp + o * src_w + off;
                  for (int64_t i = 0; i < dst_w; ++i) dst[i] += src[i];
                }
              },
              "slice");
}

Var Tape::transpose(Var a) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2) fail(ErrKind::ShapeMismatch, "transpose needs 2-D, got " + shape_str(ta.shape()));
  int64_t n = ta.dim(0), m = ta.dim(1);
  Tensor out({m, n});
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) po[j * n + i] = pa[i * m + j];
  return push(std::move(out), {a.id},
              [n, m](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                float* gp = t.grad_buf(ia).mutable_data();
                const float* pg = g.data();
                for (int64_t j = 0; j < m; ++j)
                  for (int64_t i = 0; i < n; ++i) gp[i * m + j] += pg[j * n + i];
              },
              "transpose");
}

Var Tape::softmax(Var a) {
  const Tensor& ta = val(a);
  if (ta.rank() < 1) fail(ErrKind::ShapeMismatch, "softmax on scalarless tensor");
  int64_t width = ta.dim(ta.rank() - 1);
  int64_t rows = ta.numel() / width;
  Tensor out(ta.shape());
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = pa + r * width;
    float* y = po + r * width;
    double mx = x[0];
    for (int64_t i = 1; i < width; ++i) mx = std::max(mx, static_cast<double>(x[i]));
    double z = 0.0;
    for (int64_t i = 0; i < width; ++i) z += std::exp(static_cast<double>(x[i]) - mx);
    for (int64_t i = 0; i < width; ++i)
      y[i] = static_cast<float>(std::exp(static_cast<double>(x[i]) - mx) / z);
  }
  return push(std::move(out), {a.id},
              [rows, width](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                const float* y = nd.value.data();
                const float* pg = g.data();
                float* gp = t.grad_buf(ia).mutable_data();
                for (int64_t r = 0; r < rows; ++r) {
                  const float* yr = y + r * width;
                  const float* gr = pg + r * width;
                  float* or_ = gp + r * width;
                  double dot = 0.0;
                  for (int64_t i = 0; i < width; ++i)
                    dot += static_cast<double>(gr[i]) * static_cast<double>(yr[i]);
                  for (int64_t i = 0; i < width; ++i)
                    or_[i] += static_cast<float>((static_cast<double>(gr[i]) - dot) *
                                                 static_cast<double>(yr[i]));
                }
              },
              "softmax");
}

Var Tape::layernorm(Var a, float eps) {
  const Tensor& ta = val(a);
  int64_t width = ta.dim(ta.rank() - 1);
  int64_t rows = ta.numel() / width;
  Tensor out(ta.shape());
  std::vector<float> inv_std(static_cast<size_t>(rows));
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = pa + r * width;
    float* y = po + r * width;
    double mu = 0.0;
    for (int64_t i = 0; i < width; ++i) mu += x[i];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (int64_t i = 0; i < width; ++i) {
      double d = static_cast<double>(x[i]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(width);
    double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[static_cast<size_t>(r)] = static_cast<float>(is);
    for (int64_t i = 0; i < width; ++i)
      y[i] = static_cast<float>((static_cast<double>(x[i]) - mu) * is);
  }
  return push(std::move(out), {a.id},
              [rows, width, inv_std](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                const float* y = nd.value.data();
                const float* pg = g.data();
                float* gp = t.grad_buf(ia).mutable_data();
                for (int64_t r = 0; r < rows; ++r) {
                  const float* yr = y + r * width;
                  const float* gr = pg + r * width;
                  float* or_ = gp + r * width;
                  double gm = 0.0, gy = 0.0;
                  for (int64_t i = 0; i < width; ++i) {
                    gm += gr[i];
                    gy += static_cast<double>(gr[i]) * static_cast<double>(yr[i]);
                  }
                  gm /= static_cast<double>(width);
                  gy /= static_cast<double>(width);
                  double is = inv_std[static_cast<size_t>(r)];
                  for (int64_t i = 0; i < width; ++i)
                    or_[i] += static_cast<float>(
                        is * (static_cast<double>(gr[i]) - gm - static_cast<double>(yr[i]) * gy));
                }
              },
              "layernorm");
}

Var Tape::gelu(Var a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < ta.numel(); ++i) {
    double x = pa[i];
    po[i] = static_cast<float>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  return push(std::move(out), {a.id},
              [](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                const Tensor& A = t.nodes_[static_cast<size_t>(ia)].value;
                const float* pa2 = A.data();
                const float* pg = g.data();
                float* gp = t.grad_buf(ia).mutable_data();
                for (int64_t i = 0; i < g.numel(); ++i) {
                  double x = pa2[i];
                  double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                  double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                  gp[i] += static_cast<float>(pg[i] * (cdf + x * pdf));
                }
              },
              "gelu");
}

Var Tape::sigmoid(Var a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < ta.numel(); ++i)
    po[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(pa[i]))));
  return push(std::move(out), {a.id},
              [](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                const float* y = nd.value.data();
                const float* pg = g.data();
                float* gp = t.grad_buf(ia).mutable_data();
                for (int64_t i = 0; i < g.numel(); ++i) {
                  double yi = y[i];
                  gp[i] += static_cast<float>(pg[i] * yi * (1.0 - yi));
                }
              },
              "sigmoid");
}

Var Tape::exp(Var a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < ta.numel(); ++i) po[i] = std::exp(pa[i]);
  return push(std::move(out), {a.id},
              [](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                const float* y = nd.value.data();
                const float* pg = g.data();
                float* gp = t.grad_buf(ia).mutable_data();
                for (int64_t i = 0; i < g.numel(); ++i) gp[i] += pg[i] * y[i];
              },
              "exp");
}

Var Tape::log(Var a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const float* pa = ta.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < ta.numel(); ++i) po[i] = std::log(pa[i]);
  return push(std::move(out), {a.id},
              [](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                const Tensor& A = t.nodes_[static_cast<size_t>(ia)].value;
                const float* pa2 = A.data();
                const float* pg = g.data();
                float* gp = t.grad_buf(ia).mutable_data();
                for (int64_t i = 0; i < g.numel(); ++i) gp[i] += pg[i] / pa2[i];
              },
              "log");
}

Var Tape::mean(Var a) {
  const Tensor& ta = val(a);
  double acc = 0.0;
  const float* pa = ta.data();
  for (int64_t i = 0; i < ta.numel(); ++i) acc += pa[i];
  int64_t n = ta.numel();
  double value64 = acc / static_cast<double>(n);
  Tensor out({1});
  out.at(0) = static_cast<float>(value64);
  Var v = push(std::move(out), {a.id},
              [n](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                float gv = g.at(0) / static_cast<float>(n);
                float* gp = t.grad_buf(ia).mutable_data();
                int64_t cnt = t.nodes_[static_cast<size_t>(ia)].value.numel();
                for (int64_t i = 0; i < cnt; ++i) gp[i] += gv;
              },
              "mean");
  scalar64_[v.id] = value64;
  return v;
}

Var Tape::sum(Var a) {
  const Tensor& ta = val(a);
  double acc = 0.0;
  const float* pa = ta.data();
  for (int64_t i = 0; i < ta.numel(); ++i) acc += pa[i];
  Tensor out({1});
  out.at(0) = static_cast<float>(acc);
  Var v = push(std::move(out), {a.id},
              [](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0];
                float gv = g.at(0);
                float* gp = t.grad_buf(ia).mutable_data();
                int64_t cnt = t.nodes_[static_cast<size_t>(ia)].value.numel();
                for (int64_t i = 0; i < cnt; ++i) gp[i] += gv;
              },
              "sum");
  scalar64_[v.id] = acc;
  return v;
}

Var Tape::l1_loss(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb))
    fail(ErrKind::ShapeMismatch,
         "l1_loss " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  double acc = 0.0;
  const float* pa = ta.data();
  const float* pb = tb.data();
  int64_t n = ta.numel();
  for (int64_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(pa[i]) - pb[i]);
  double value64 = acc / static_cast<double>(n);
  Tensor out({1});
  out.at(0) = static_cast<float>(value64);
  Var vout = push(std::move(out), {a.id, b.id},
              [n](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0], ib = nd.inputs[1];
                const float* pa2 = t.nodes_[static_cast<size_t>(ia)].value.data();
                const float* pb2 = t.nodes_[static_cast<size_t>(ib)].value.data();
                float gv = g.at(0) / static_cast<float>(n);
                bool na = t.nodes_[static_cast<size_t>(ia)].needs_grad;
                bool nb = t.nodes_[static_cast<size_t>(ib)].needs_grad;
                float* ga = na ? t.grad_buf(ia).mutable_data() : nullptr;
                float* gb = nb ? t.grad_buf(ib).mutable_data() : nullptr;
                for (int64_t i = 0; i < n; ++i) {
                  float d = pa2[i] - pb2[i];
                  float s = (d > 0.0f) ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
                  if (na) ga[i] += gv * s;
                  if (nb) gb[i] -= gv * s;
                }
              },
              "l1_loss");
  scalar64_[vout.id] = value64;
  return vout;
}

Var Tape::l2_loss(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb))
    fail(ErrKind::ShapeMismatch,
         "l2_loss " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  double acc = 0.0;
  const float* pa = ta.data();
  const float* pb = tb.data();
  int64_t n = ta.numel();
  for (int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(pa[i]) - pb[i];
    acc += d * d;
  }
  double value64 = acc / static_cast<double>(n);
  Tensor out({1});
  out.at(0) = static_cast<float>(value64);
  Var vout = push(std::move(out), {a.id, b.id},
              [n](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ia = nd.inputs[0], ib = nd.inputs[1];
                const float* pa2 = t.nodes_[static_cast<size_t>(ia)].value.data();
                const float* pb2 = t.nodes_[static_cast<size_t>(ib)].value.data();
                float gv = 2.0f * g.at(0) / static_cast<float>(n);
                bool na = t.nodes_[static_cast<size_t>(ia)].needs_grad;
                bool nb = t.nodes_[static_cast<size_t>(ib)].needs_grad;
                float* ga = na ? t.grad_buf(ia).mutable_data() : nullptr;
                float* gb = nb ? t.grad_buf(ib).mutable_data() : nullptr;
                for (int64_t i = 0; i < n; ++i) {
                  float d = pa2[i] - pb2[i];
                  if (na) ga[i] += gv * d;
                  if (nb) gb[i] -= gv * d;
                }
              },
              "l2_loss");
  scalar64_[vout.id] = value64;
  return vout;
}

Var Tape::embedding(Var table, const std::vector<int64_t>& ids) {
  const Tensor& tt = val(table);
  if (tt.rank() != 2) fail(ErrKind::ShapeMismatch, "embedding table must be 2-D");
  int64_t vocab = tt.dim(0), width = tt.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= vocab) fail(ErrKind::ShapeMismatch, "embedding id out of range");
  int64_t n = static_cast<int64_t>(ids.size());
  Tensor out({n, width});
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(out.mutable_data() + i * width, tt.data() + ids[static_cast<size_t>(i)] * width,
                static_cast<size_t>(width) * sizeof(float));
  return push(std::move(out), {table.id},
              [ids, width](Tape& t, const Node& nd, const Tensor& g) {
                int32_t it = nd.inputs[0];
                float* gt = t.grad_buf(it).mutable_data();
                const float* pg = g.data();
                for (size_t i = 0; i < ids.size(); ++i) {
                  float* row = gt + ids[i] * width;
                  const float* src = pg + static_cast<int64_t>(i) * width;
                  for (int64_t j = 0; j < width; ++j) row[j] += src[j];
                }
              },
              "embedding");
}

Var Tape::rotary(Var x, const std::vector<int64_t>& positions, float base) {
  const Tensor& tx = val(x);
  if (tx.rank() != 2) fail(ErrKind::ShapeMismatch, "rotary input must be 2-D");
  int64_t n = tx.dim(0), d = tx.dim(1);
  if (d % 2 != 0) fail(ErrKind::OddHeadDim, "rotary head dim " + std::to_string(d) + " is odd");
  if (static_cast<int64_t>(positions.size()) != n)
    fail(ErrKind::ShapeMismatch, "rotary positions length != rows");
  int64_t half = d / 2;
  // Angles are recomputed in backward; cache cos/sin once and share.
  auto trig = std::make_shared<std::vector<float>>(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < half; ++j) {
      double freq = std::pow(static_cast<double>(base),
                             -2.0 * static_cast<double>(j) / static_cast<double>(d));
      double theta = static_cast<double>(positions[static_cast<size_t>(i)]) * freq;
      (*trig)[static_cast<size_t>(i * d + 2 * j)] = static_cast<float>(std::cos(theta));
      (*trig)[static_cast<size_t>(i * d + 2 * j + 1)] = static_cast<float>(std::sin(theta));
    }
  }
  Tensor out(tx.shape());
  const float* px = tx.data();
  float* po = out.mutable_data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < half; ++j) {
      float c = (*trig)[static_cast<size_t>(i * d + 2 * j)];
      float s = (*trig)[static_cast<size_t>(i * d + 2 * j + 1)];
      float x0 = px[i * d + 2 * j], x1 = px[i * d + 2 * j + 1];
      po[i * d + 2 * j] = x0 * c - x1 * s;
      po[i * d + 2 * j + 1] = x0 * s + x1 * c;
    }
  }
  return push(std::move(out), {x.id},
              [trig, n, d, half](Tape& t, const Node& nd, const Tensor& g) {
                int32_t ix = nd.inputs[0];
                float* gx = t.grad_buf(ix).mutable_data();
                const float* pg = g.data();
                for (int64_t i = 0; i < n; ++i) {
                  for (int64_t j = 0; j < half; ++j) {
                    float c = (*trig)[static_cast<size_t>(i * d + 2 * j)];
                    float s = (*trig)[static_cast<size_t>(i * d + 2 * j + 1)];
                    float g0 = pg[i * d + 2 * j], g1 = pg[i * d + 2 * j + 1];
                    gx[i * d + 2 * j] += g0 * c + g1 * s;
                    gx[i * d + 2 * j + 1] += -g0 * s + g1 * c;
                  }
                }
              },
              "rotary");
}

GradMap Tape::backward(Var loss) {
  if (!loss.valid() || static_cast<size_t>(loss.id) >= nodes_.size())
    fail(ErrKind::Internal, "backward on invalid var");
  const Tensor& lv = nodes_[static_cast<size_t>(loss.id)].value;
  if (lv.numel() != 1) fail(ErrKind::NotScalar, "loss has shape " + shape_str(lv.shape()));
  disconnected_.clear();
  grad_buf(loss.id).at(0) = 1.0f;
  for (int32_t id = loss.id; id >= 0; --id) {
    Node& nd = nodes_[static_cast<size_t>(id)];
    if (!nd.needs_grad || !has_grad(id)) continue;
    if (nd.backward) nd.backward(*this, nd, grads_[static_cast<size_t>(id)]);
  }
  GradMap out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].is_param) continue;
    int32_t id = static_cast<int32_t>(i);
    if (has_grad(id)) {
      out.emplace(id, grads_[i]);
    } else {
      out.emplace(id, Tensor::zeros(nodes_[i].value.shape()));
      if (debug_) disconnected_.push_back("param var " + std::to_string(id));
    }
  }
  // Clear buffers so a second backward starts fresh.
  for (auto& g : grads_) g = Tensor();
  return out;
}

const char* err_kind_name(ErrKind k) {
  switch (k) {
    case ErrKind::ShapeMismatch: return "ShapeMismatch";
    case ErrKind::NonFinite: return "NonFinite";
    case ErrKind::NotScalar: return "NotScalar";
    case ErrKind::StateMismatch: return "StateMismatch";
    case ErrKind::NotARotation: return "NotARotation";
    case ErrKind::InsufficientData: return "InsufficientData";
    case ErrKind::ModelNotLoaded: return "ModelNotLoaded";
    case ErrKind::DimensionMismatch: return "DimensionMismatch";
    case ErrKind::FrameCountMismatch: return "FrameCountMismatch";
    case ErrKind::ConfigMismatch: return "ConfigMismatch";
    case ErrKind::OddHeadDim: return "OddHeadDim";
    case ErrKind::TOutOfRange: return "TOutOfRange";
    case ErrKind::MisalignedBatch: return "MisalignedBatch";
    case ErrKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrKind::BadLexicon: return "BadLexicon";
    case ErrKind::Io: return "Io";
    case ErrKind::CorruptRecord: return "CorruptRecord";
    case ErrKind::UnknownSymbol: return "UnknownSymbol";
    case ErrKind::EmptyText: return "EmptyText";
    case ErrKind::LengthMismatch: return "LengthMismatch";
    case ErrKind::DegenerateCovariance: return "DegenerateCovariance";
    case ErrKind::TooFewSamples: return "TooFewSamples";
    case ErrKind::NoMotionBeats: return "NoMotionBeats";
    case ErrKind::EmptyInput: return "EmptyInput";
    case ErrKind::ConfigInvalid: return "ConfigInvalid";
    case ErrKind::CorpusUnreadable: return "CorpusUnreadable";
    case ErrKind::DivergedLoss: return "DivergedLoss";
    case ErrKind::MissingVariant: return "MissingVariant";
    case ErrKind::NoParticipantStreams: return "NoParticipantStreams";
    case ErrKind::MissingCheckpoint: return "MissingCheckpoint";
    case ErrKind::NonFiniteState: return "NonFiniteState";
    case ErrKind::Internal: return "Internal";
  }
  return "Unknown";
}

}  // namespace avflow
