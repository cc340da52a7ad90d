#include "dhen/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dhen {

namespace {

[[noreturn]] void shape_error(OpKind op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

[[noreturn]] void shape_error(OpKind op, const Shape& a, const Shape& b) {
  shape_error(op, "incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void check_axis(OpKind op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw AxisError(std::string(op_name(op)) + ": axis " + std::to_string(axis) +
                    " out of range for shape " + shape_string(shape));
  }
}

// Extents before, at and after an axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C[p,r] += op(A)[p,q] * op(B)[q,r]; A is stored [q,p] when trans_a and B is
// stored [r,q] when trans_b.
void gemm(const double* a, const double* b, double* c, std::size_t p, std::size_t q,
          std::size_t r, bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < p; ++i) {
    double* c_row = c + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double a_ik = trans_a ? a[k * p + i] : a[i * q + k];
      if (a_ik == 0.0) continue;
      if (trans_b) {
        for (std::size_t j = 0; j < r; ++j) c_row[j] += a_ik * b[j * q + k];
      } else {
        const double* b_row = b + k * r;
        for (std::size_t j = 0; j < r; ++j) c_row[j] += a_ik * b_row[j];
      }
    }
  }
}

enum class MatMulForm { kPlain, kBatchedShared, kBatched };

struct MatMulDims {
  MatMulForm form = MatMulForm::kPlain;
  std::size_t batch = 1, p = 0, q = 0, r = 0;
};

MatMulDims matmul_dims(const Shape& a, const Shape& b) {
  MatMulDims d;
  if (a.size() == 2 && b.size() == 2) {
    d.form = MatMulForm::kPlain;
    d.p = a[0], d.q = a[1], d.r = b[1];
    if (b[0] != d.q) shape_error(OpKind::kMatMul, a, b);
  } else if (a.size() == 3 && b.size() == 2) {
    d.form = MatMulForm::kBatchedShared;
    d.batch = a[0], d.p = a[1], d.q = a[2], d.r = b[1];
    if (b[0] != d.q) shape_error(OpKind::kMatMul, a, b);
  } else if (a.size() == 3 && b.size() == 3) {
    d.form = MatMulForm::kBatched;
    d.batch = a[0], d.p = a[1], d.q = a[2], d.r = b[2];
    if (b[0] != d.batch || b[1] != d.q) shape_error(OpKind::kMatMul, a, b);
  } else {
    shape_error(OpKind::kMatMul, a, b);
  }
  return d;
}

Shape matmul_out_shape(const MatMulDims& d) {
  if (d.form == MatMulForm::kPlain) return {d.p, d.r};
  return {d.batch, d.p, d.r};
}

bool is_last_axis_vector(const Shape& a, const Shape& b) {
  return b.size() == 1 && b[0] == a.back();
}

void check_elementwise(OpKind op, const Shape& a, const Shape& b) {
  if (a != b && !is_last_axis_vector(a, b)) shape_error(op, a, b);
}

struct Forward {
  Tensor value;
  Tensor saved;
  std::uint64_t macs = 0;
};

Forward forward_op(OpKind op, const OpAttrs& attrs, const std::vector<const Tensor*>& in) {
  Forward out;
  switch (op) {
    case OpKind::kConstant:
    case OpKind::kParam:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const MatMulDims d = matmul_dims(a.shape(), b.shape());
      out.value = Tensor(matmul_out_shape(d), 0.0);
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      double* pc = out.value.data().data();
      for (std::size_t n = 0; n < d.batch; ++n) {
        const double* bn = d.form == MatMulForm::kBatched ? pb + n * d.q * d.r : pb;
        gemm(pa + n * d.p * d.q, bn, pc + n * d.p * d.r, d.p, d.q, d.r, false, false);
      }
      out.macs = static_cast<std::uint64_t>(d.batch) * d.p * d.q * d.r;
      break;
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      out.value = a;
      auto y = out.value.data();
      auto bv = b.data();
      const std::size_t period = bv.size();
      if (op == OpKind::kAdd) {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % period];
      } else {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i % period];
      }
      break;
    }
    case OpKind::kTranspose: {
      const Tensor& x = *in[0];
      const Shape& s = x.shape();
      const std::size_t rows = s[s.size() - 2];
      const std::size_t cols = s.back();
      const std::size_t batch = x.size() / (rows * cols);
      Shape os = s;
      std::swap(os[os.size() - 2], os.back());
      out.value = Tensor(os, 0.0);
      auto xv = x.data();
      auto y = out.value.data();
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t base = n * rows * cols;
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) y[base + j * rows + i] = xv[base + i * cols + j];
        }
      }
      break;
    }
    case OpKind::kConcat: {
      Shape os = in[0]->shape();
      std::size_t total = 0;
      for (const Tensor* t : in) total += t->shape()[attrs.axis];
      os[attrs.axis] = total;
      out.value = Tensor(os, 0.0);
      const AxisSplit full = split_at(os, attrs.axis);
      auto y = out.value.data();
      std::size_t offset = 0;
      for (const Tensor* t : in) {
        const std::size_t ext = t->shape()[attrs.axis];
        auto xv = t->data();
        for (std::size_t o = 0; o < full.outer; ++o) {
          std::copy_n(xv.begin() + o * ext * full.inner, ext * full.inner,
                      y.begin() + (o * full.extent + offset) * full.inner);
        }
        offset += ext;
      }
      break;
    }
    case OpKind::kSlice: {
      const Tensor& x = *in[0];
      const AxisSplit s = split_at(x.shape(), attrs.axis);
      Shape os = x.shape();
      const std::size_t ext = attrs.end - attrs.begin;
      os[attrs.axis] = ext;
      out.value = Tensor(os, 0.0);
      auto xv = x.data();
      auto y = out.value.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(xv.begin() + (o * s.extent + attrs.begin) * s.inner, ext * s.inner,
                    y.begin() + o * ext * s.inner);
      }
      break;
    }
    case OpKind::kRelu: {
      out.value = *in[0];
      for (double& v : out.value.data()) v = v > 0.0 ? v : 0.0;
      break;
    }
    case OpKind::kSigmoid: {
      out.value = *in[0];
      for (double& v : out.value.data()) {
        v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      }
      break;
    }
    case OpKind::kSoftmax: {
      const Tensor& x = *in[0];
      const AxisSplit s = split_at(x.shape(), attrs.axis);
      out.value = x;
      auto y = out.value.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          double top = y[base];
          for (std::size_t k = 1; k < s.extent; ++k) top = std::max(top, y[base + k * s.inner]);
          double total = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) {
            double& v = y[base + k * s.inner];
            v = std::exp(v - top);
            total += v;
          }
          for (std::size_t k = 0; k < s.extent; ++k) y[base + k * s.inner] /= total;
        }
      }
      break;
    }
    case OpKind::kLayerNorm: {
      const Tensor& x = *in[0];
      const std::size_t n = x.shape().back();
      const std::size_t rows = x.size() / n;
      out.value = x;
      out.saved = Tensor({rows}, 0.0);
      auto y = out.value.data();
      auto inv = out.saved.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double* row = y.data() + r * n;
        double mu = 0.0;
        for (std::size_t k = 0; k < n; ++k) mu += row[k];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t k = 0; k < n; ++k) var += (row[k] - mu) * (row[k] - mu);
        var /= static_cast<double>(n);
        inv[r] = 1.0 / std::sqrt(var + attrs.scalar);
        for (std::size_t k = 0; k < n; ++k) row[k] = (row[k] - mu) * inv[r];
      }
      break;
    }
    case OpKind::kMean: {
      const Tensor& x = *in[0];
      const AxisSplit s = split_at(x.shape(), attrs.axis);
      out.value = Tensor(attrs.shape, 0.0);
      auto xv = x.data();
      auto y = out.value.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.extent; ++k) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            y[o * s.inner + i] += xv[(o * s.extent + k) * s.inner + i];
          }
        }
      }
      const double inv_n = 1.0 / static_cast<double>(s.extent);
      for (double& v : y) v *= inv_n;
      break;
    }
    case OpKind::kReshape: {
      out.value = Tensor(attrs.shape, in[0]->values());
      break;
    }
    case OpKind::kSum: {
      double total = 0.0;
      for (double v : in[0]->data()) total += v;
      out.value = Tensor::scalar(total);
      break;
    }
    case OpKind::kScale: {
      out.value = *in[0];
      for (double& v : out.value.data()) v *= attrs.scalar;
      break;
    }
    case OpKind::kScaleBy: {
      out.value = *in[0];
      const double f = in[1]->item();
      for (double& v : out.value.data()) v *= f;
      break;
    }
    case OpKind::kConv2d: {
      const Tensor& x = *in[0];
      const Tensor& f = *in[1];
      const std::size_t batch = x.dim(0), h = x.dim(1), w = x.dim(2);
      const std::size_t channels = f.dim(0), kh = f.dim(1), kw = f.dim(2);
      const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
      const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
      out.value = Tensor({batch, channels, h, w}, 0.0);
      auto xv = x.data();
      auto fv = f.data();
      auto y = out.value.data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
          double* plane = y.data() + (b * channels + c) * h * w;
          for (std::size_t u = 0; u < kh; ++u) {
            for (std::size_t v = 0; v < kw; ++v) {
              const double weight = fv[(c * kh + u) * kw + v];
              const std::ptrdiff_t du = static_cast<std::ptrdiff_t>(u) - ph;
              const std::ptrdiff_t dv = static_cast<std::ptrdiff_t>(v) - pw;
              for (std::size_t i = 0; i < h; ++i) {
                const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + du;
                if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t j = 0; j < w; ++j) {
                  const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dv;
                  if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
                  plane[i * w + j] += weight * xv[(b * h + si) * w + sj];
                }
              }
            }
          }
        }
      }
      out.macs = static_cast<std::uint64_t>(batch) * channels * h * w * kh * kw;
      break;
    }
    case OpKind::kGather: {
      const Tensor& x = *in[0];
      const std::size_t batch = x.dim(0);
      const std::size_t block = x.size() / batch;
      const std::size_t n = attrs.indices.size();
      out.value = Tensor({batch, n}, 0.0);
      auto xv = x.data();
      auto y = out.value.data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < n; ++k) y[b * n + k] = xv[b * block + attrs.indices[k]];
      }
      break;
    }
    case OpKind::kEmbeddingBag: {
      const Tensor& table = *in[0];
      const std::size_t d = table.dim(1);
      const IdBags& bags = *attrs.bags;
      out.value = Tensor({bags.size(), d}, 0.0);
      auto tv = table.data();
      auto y = out.value.data();
      for (std::size_t b = 0; b < bags.size(); ++b) {
        for (std::size_t id : bags[b]) {
          for (std::size_t k = 0; k < d; ++k) y[b * d + k] += tv[id * d + k];
        }
      }
      break;
    }
    case OpKind::kLogLoss: {
      auto p = in[0]->data();
      auto y = in[1]->data();
      double total = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double pc = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
        total -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
      }
      out.value = Tensor::scalar(total / static_cast<double>(p.size()));
      break;
    }
  }
  return out;
}

// Adds into each input gradient that is non-null.
void backward_op(const TapeEntry& e, const std::vector<const Tensor*>& in, const Tensor& gy,
                 const std::vector<Tensor*>& gx) {
  auto dy = gy.data();
  switch (e.op) {
    case OpKind::kConstant:
    case OpKind::kParam:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const MatMulDims d = matmul_dims(a.shape(), b.shape());
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      for (std::size_t n = 0; n < d.batch; ++n) {
        const double* g = dy.data() + n * d.p * d.r;
        const std::size_t b_off = d.form == MatMulForm::kBatched ? n * d.q * d.r : 0;
        if (gx[0]) gemm(g, pb + b_off, gx[0]->data().data() + n * d.p * d.q, d.p, d.r, d.q, false, true);
        if (gx[1]) gemm(pa + n * d.p * d.q, g, gx[1]->data().data() + b_off, d.q, d.p, d.r, true, false);
      }
      break;
    }
    case OpKind::kAdd: {
      if (gx[0]) {
        auto g = gx[0]->data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (gx[1]) {
        auto g = gx[1]->data();
        const std::size_t period = g.size();
        for (std::size_t i = 0; i < dy.size(); ++i) g[i % period] += dy[i];
      }
      break;
    }
    case OpKind::kMul: {
      auto av = in[0]->data();
      auto bv = in[1]->data();
      const std::size_t period = bv.size();
      if (gx[0]) {
        auto g = gx[0]->data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * bv[i % period];
      }
      if (gx[1]) {
        auto g = gx[1]->data();
        for (std::size_t i = 0; i < dy.size(); ++i) g[i % period] += dy[i] * av[i];
      }
      break;
    }
    case OpKind::kTranspose: {
      if (!gx[0]) break;
      const Shape& s = in[0]->shape();
      const std::size_t rows = s[s.size() - 2];
      const std::size_t cols = s.back();
      const std::size_t batch = in[0]->size() / (rows * cols);
      auto g = gx[0]->data();
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t base = n * rows * cols;
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) g[base + i * cols + j] += dy[base + j * rows + i];
        }
      }
      break;
    }
    case OpKind::kConcat: {
      const AxisSplit full = split_at(e.value.shape(), e.attrs.axis);
      std::size_t offset = 0;
      for (std::size_t t = 0; t < in.size(); ++t) {
        const std::size_t ext = in[t]->shape()[e.attrs.axis];
        if (gx[t]) {
          auto g = gx[t]->data();
          for (std::size_t o = 0; o < full.outer; ++o) {
            const std::size_t src = (o * full.extent + offset) * full.inner;
            const std::size_t dst = o * ext * full.inner;
            for (std::size_t k = 0; k < ext * full.inner; ++k) g[dst + k] += dy[src + k];
          }
        }
        offset += ext;
      }
      break;
    }
    case OpKind::kSlice: {
      if (!gx[0]) break;
      const AxisSplit s = split_at(in[0]->shape(), e.attrs.axis);
      const std::size_t ext = e.attrs.end - e.attrs.begin;
      auto g = gx[0]->data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        const std::size_t dst = (o * s.extent + e.attrs.begin) * s.inner;
        const std::size_t src = o * ext * s.inner;
        for (std::size_t k = 0; k < ext * s.inner; ++k) g[dst + k] += dy[src + k];
      }
      break;
    }
    case OpKind::kRelu: {
      if (!gx[0]) break;
      auto xv = in[0]->data();
      auto g = gx[0]->data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0) g[i] += dy[i];
      }
      break;
    }
    case OpKind::kSigmoid: {
      if (!gx[0]) break;
      auto y = e.value.data();
      auto g = gx[0]->data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case OpKind::kSoftmax: {
      if (!gx[0]) break;
      const AxisSplit s = split_at(e.value.shape(), e.attrs.axis);
      auto y = e.value.data();
      auto g = gx[0]->data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) {
            dot += dy[base + k * s.inner] * y[base + k * s.inner];
          }
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t at = base + k * s.inner;
            g[at] += y[at] * (dy[at] - dot);
          }
        }
      }
      break;
    }
    case OpKind::kLayerNorm: {
      if (!gx[0]) break;
      const std::size_t n = e.value.shape().back();
      const std::size_t rows = e.value.size() / n;
      const double dn = static_cast<double>(n);
      auto xhat = e.value.data();
      auto inv = e.saved.data();
      auto g = gx[0]->data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = xhat.data() + r * n;
        const double* dr = dy.data() + r * n;
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          sum_dy += dr[k];
          sum_dy_xhat += dr[k] * yr[k];
        }
        for (std::size_t k = 0; k < n; ++k) {
          g[r * n + k] += inv[r] / dn * (dn * dr[k] - sum_dy - yr[k] * sum_dy_xhat);
        }
      }
      break;
    }
    case OpKind::kMean: {
      if (!gx[0]) break;
      const AxisSplit s = split_at(in[0]->shape(), e.attrs.axis);
      const double inv_n = 1.0 / static_cast<double>(s.extent);
      auto g = gx[0]->data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.extent; ++k) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            g[(o * s.extent + k) * s.inner + i] += dy[o * s.inner + i] * inv_n;
          }
        }
      }
      break;
    }
    case OpKind::kReshape: {
      if (!gx[0]) break;
      auto g = gx[0]->data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      break;
    }
    case OpKind::kSum: {
      if (!gx[0]) break;
      for (double& v : gx[0]->data()) v += dy[0];
      break;
    }
    case OpKind::kScale: {
      if (!gx[0]) break;
      auto g = gx[0]->data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * e.attrs.scalar;
      break;
    }
    case OpKind::kScaleBy: {
      const double f = in[1]->item();
      auto xv = in[0]->data();
      if (gx[0]) {
        auto g = gx[0]->data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * f;
      }
      if (gx[1]) {
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) acc += dy[i] * xv[i];
        (*gx[1])[0] += acc;
      }
      break;
    }
    case OpKind::kConv2d: {
      const Tensor& x = *in[0];
      const Tensor& f = *in[1];
      const std::size_t batch = x.dim(0), h = x.dim(1), w = x.dim(2);
      const std::size_t channels = f.dim(0), kh = f.dim(1), kw = f.dim(2);
      const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
      const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
      auto xv = x.data();
      auto fv = f.data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
          const double* plane = dy.data() + (b * channels + c) * h * w;
          for (std::size_t u = 0; u < kh; ++u) {
            for (std::size_t v = 0; v < kw; ++v) {
              const std::size_t fi = (c * kh + u) * kw + v;
              const std::ptrdiff_t du = static_cast<std::ptrdiff_t>(u) - ph;
              const std::ptrdiff_t dv = static_cast<std::ptrdiff_t>(v) - pw;
              double df = 0.0;
              for (std::size_t i = 0; i < h; ++i) {
                const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + du;
                if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t j = 0; j < w; ++j) {
                  const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dv;
                  if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
                  const std::size_t xi = (b * h + si) * w + sj;
                  df += plane[i * w + j] * xv[xi];
                  if (gx[0]) (*gx[0])[xi] += plane[i * w + j] * fv[fi];
                }
              }
              if (gx[1]) (*gx[1])[fi] += df;
            }
          }
        }
      }
      break;
    }
    case OpKind::kGather: {
      if (!gx[0]) break;
      const std::size_t batch = in[0]->dim(0);
      const std::size_t block = in[0]->size() / batch;
      const std::size_t n = e.attrs.indices.size();
      auto g = gx[0]->data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < n; ++k) g[b * block + e.attrs.indices[k]] += dy[b * n + k];
      }
      break;
    }
    case OpKind::kEmbeddingBag: {
      if (!gx[0]) break;
      const std::size_t d = in[0]->dim(1);
      const IdBags& bags = *e.attrs.bags;
      auto g = gx[0]->data();
      for (std::size_t b = 0; b < bags.size(); ++b) {
        for (std::size_t id : bags[b]) {
          for (std::size_t k = 0; k < d; ++k) g[id * d + k] += dy[b * d + k];
        }
      }
      break;
    }
    case OpKind::kLogLoss: {
      if (!gx[0]) break;
      auto p = in[0]->data();
      auto y = in[1]->data();
      auto g = gx[0]->data();
      const double inv_n = 1.0 / static_cast<double>(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < kProbClamp || p[i] > 1.0 - kProbClamp) continue;
        g[i] += dy[0] * inv_n * (-(y[i] / p[i]) + (1.0 - y[i]) / (1.0 - p[i]));
      }
      break;
    }
  }
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParam: return "param";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kMean: return "mean";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSum: return "sum";
    case OpKind::kScale: return "scale";
    case OpKind::kScaleBy: return "scale_by";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kGather: return "gather";
    case OpKind::kEmbeddingBag: return "embedding_bag";
    case OpKind::kLogLoss: return "log_loss";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  TapeEntry e;
  e.op = OpKind::kConstant;
  e.value = std::move(value);
  entries_.push_back(std::move(e));
  return Var(this, entries_.size() - 1);
}

Var Tape::param(Param& p) {
  TapeEntry e;
  e.op = OpKind::kParam;
  e.value = p.value;
  e.param = &p;
  entries_.push_back(std::move(e));
  return Var(this, entries_.size() - 1);
}

Var Tape::record(OpKind op, std::vector<NodeId> inputs, OpAttrs attrs) {
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (NodeId id : inputs) in.push_back(&entry(id).value);
  Forward f = forward_op(op, attrs, in);
  multiply_adds_ += f.macs;
  TapeEntry e;
  e.op = op;
  e.inputs = std::move(inputs);
  e.attrs = std::move(attrs);
  e.value = std::move(f.value);
  e.saved = std::move(f.saved);
  entries_.push_back(std::move(e));
  return Var(this, entries_.size() - 1);
}

const TapeEntry& Tape::entry(NodeId id) const {
  if (id >= entries_.size()) {
    throw std::out_of_range("node " + std::to_string(id) + " is not on the tape (size " +
                            std::to_string(entries_.size()) + ")");
  }
  return entries_[id];
}

void Tape::backward(NodeId loss) {
  const TapeEntry& last = entry(loss);
  if (last.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_string(last.value.shape()));
  }
  // A node needs a gradient only if some parameter lies below it.
  std::vector<bool> needs(loss + 1, false);
  for (NodeId id = 0; id <= loss; ++id) {
    const TapeEntry& e = entries_[id];
    if (e.op == OpKind::kParam) {
      needs[id] = true;
      continue;
    }
    for (NodeId in : e.inputs) {
      if (needs[in]) {
        needs[id] = true;
        break;
      }
    }
  }
  if (!needs[loss]) return;

  std::vector<Tensor> grads(loss + 1);
  grads[loss] = Tensor(last.value.shape(), 1.0);
  std::vector<const Tensor*> in;
  std::vector<Tensor*> gx;
  for (NodeId id = loss + 1; id-- > 0;) {
    if (grads[id].size() == 0) continue;
    const TapeEntry& e = entries_[id];
    if (e.op == OpKind::kParam) {
      auto g = e.param->grad.data();
      auto d = grads[id].data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
      continue;
    }
    in.clear();
    gx.clear();
    for (NodeId input : e.inputs) {
      in.push_back(&entries_[input].value);
      if (needs[input]) {
        if (grads[input].size() == 0) grads[input] = Tensor(entries_[input].value.shape(), 0.0);
        gx.push_back(&grads[input]);
      } else {
        gx.push_back(nullptr);
      }
    }
    backward_op(e, in, grads[id], gx);
    grads[id] = Tensor();
  }
}

std::vector<Tensor> Tape::replay() const {
  std::vector<Tensor> values;
  values.reserve(entries_.size());
  std::vector<const Tensor*> in;
  for (const TapeEntry& e : entries_) {
    if (e.op == OpKind::kConstant || e.op == OpKind::kParam) {
      values.push_back(e.value);
      continue;
    }
    in.clear();
    for (NodeId id : e.inputs) in.push_back(&values[id]);
    values.push_back(forward_op(e.op, e.attrs, in).value);
  }
  return values;
}

// ---------------------------------------------------------------------------
// Op constructors: shape checks live here so forward_op can assume validity.

Var matmul(Var a, Var b) {
  matmul_dims(a.shape(), b.shape());
  return a.tape().record(OpKind::kMatMul, {a.id(), b.id()}, {});
}

Var add(Var a, Var b) {
  check_elementwise(OpKind::kAdd, a.shape(), b.shape());
  return a.tape().record(OpKind::kAdd, {a.id(), b.id()}, {});
}

Var mul(Var a, Var b) {
  check_elementwise(OpKind::kMul, a.shape(), b.shape());
  return a.tape().record(OpKind::kMul, {a.id(), b.id()}, {});
}

Var transpose(Var x) {
  if (x.shape().size() < 2) shape_error(OpKind::kTranspose, "needs rank >= 2, got " + shape_string(x.shape()));
  return x.tape().record(OpKind::kTranspose, {x.id()}, {});
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) shape_error(OpKind::kConcat, "no inputs");
  const Shape& first = parts[0].shape();
  check_axis(OpKind::kConcat, first, axis);
  std::vector<NodeId> ids;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) shape_error(OpKind::kConcat, first, s);
    ids.push_back(p.id());
  }
  OpAttrs attrs;
  attrs.axis = axis;
  return parts[0].tape().record(OpKind::kConcat, std::move(ids), std::move(attrs));
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis(OpKind::kSlice, x.shape(), axis);
  if (begin >= end || end > x.shape()[axis]) {
    shape_error(OpKind::kSlice, "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") invalid for axis " + std::to_string(axis) + " of " +
                                    shape_string(x.shape()));
  }
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return x.tape().record(OpKind::kSlice, {x.id()}, std::move(attrs));
}

Var relu(Var x) { return x.tape().record(OpKind::kRelu, {x.id()}, {}); }

Var sigmoid(Var x) { return x.tape().record(OpKind::kSigmoid, {x.id()}, {}); }

Var softmax(Var x, std::size_t axis) {
  check_axis(OpKind::kSoftmax, x.shape(), axis);
  OpAttrs attrs;
  attrs.axis = axis;
  return x.tape().record(OpKind::kSoftmax, {x.id()}, std::move(attrs));
}

Var layer_norm(Var x, double epsilon) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("layer_norm: epsilon must be non-negative");
  OpAttrs attrs;
  attrs.scalar = epsilon;
  return x.tape().record(OpKind::kLayerNorm, {x.id()}, std::move(attrs));
}

Var mean(Var x, std::size_t axis) {
  check_axis(OpKind::kMean, x.shape(), axis);
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.shape = x.shape();
  attrs.shape.erase(attrs.shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (attrs.shape.empty()) attrs.shape = {1};
  return x.tape().record(OpKind::kMean, {x.id()}, std::move(attrs));
}

Var reshape(Var x, Shape shape) {
  if (shape.empty() || shape_numel(shape) != x.value().size()) {
    shape_error(OpKind::kReshape, x.shape(), shape);
  }
  for (auto extent : shape) {
    if (extent == 0) shape_error(OpKind::kReshape, x.shape(), shape);
  }
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return x.tape().record(OpKind::kReshape, {x.id()}, std::move(attrs));
}

Var sum(Var x) { return x.tape().record(OpKind::kSum, {x.id()}, {}); }

Var scale(Var x, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return x.tape().record(OpKind::kScale, {x.id()}, std::move(attrs));
}

Var scale_by(Var x, Var factor) {
  if (factor.value().size() != 1) shape_error(OpKind::kScaleBy, x.shape(), factor.shape());
  return x.tape().record(OpKind::kScaleBy, {x.id(), factor.id()}, {});
}

Var conv2d(Var x, Var filters) {
  const Shape& xs = x.shape();
  const Shape& fs = filters.shape();
  if (xs.size() != 3 || fs.size() != 3) shape_error(OpKind::kConv2d, xs, fs);
  if (fs[1] % 2 == 0 || fs[2] % 2 == 0) {
    shape_error(OpKind::kConv2d, "kernel extents must be odd, got " + shape_string(fs));
  }
  return x.tape().record(OpKind::kConv2d, {x.id(), filters.id()}, {});
}

Var gather(Var x, std::vector<std::size_t> flat_indices) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) shape_error(OpKind::kGather, "needs rank >= 2, got " + shape_string(xs));
  if (flat_indices.empty()) shape_error(OpKind::kGather, "empty index list");
  const std::size_t block = x.value().size() / xs[0];
  for (auto i : flat_indices) {
    if (i >= block) {
      throw AxisError("gather: index " + std::to_string(i) + " out of range for block of " +
                      std::to_string(block));
    }
  }
  OpAttrs attrs;
  attrs.indices = std::move(flat_indices);
  return x.tape().record(OpKind::kGather, {x.id()}, std::move(attrs));
}

Var embedding_bag(Var table, std::shared_ptr<const IdBags> bags) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) shape_error(OpKind::kEmbeddingBag, "table must be rank 2, got " + shape_string(ts));
  if (!bags || bags->empty()) shape_error(OpKind::kEmbeddingBag, "no bags");
  for (const auto& bag : *bags) {
    for (auto id : bag) {
      if (id >= ts[0]) {
        throw std::out_of_range("embedding_bag: id " + std::to_string(id) + " out of range [0," +
                                std::to_string(ts[0]) + ")");
      }
    }
  }
  OpAttrs attrs;
  attrs.bags = std::move(bags);
  return table.tape().record(OpKind::kEmbeddingBag, {table.id()}, std::move(attrs));
}

Var log_loss(Var probs, Var labels) {
  if (probs.value().size() != labels.value().size()) {
    shape_error(OpKind::kLogLoss, probs.shape(), labels.shape());
  }
  return probs.tape().record(OpKind::kLogLoss, {probs.id(), labels.id()}, {});
}

// ---------------------------------------------------------------------------

namespace {

double probe(const std::function<double()>& f) {
  const double v = f();
  if (!std::isfinite(v)) throw std::domain_error("finite_diff_grad: objective is not finite at a probe point");
  return v;
}

}  // namespace

std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Param& p,
                                        std::span<const std::size_t> coords, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<double> out;
  out.reserve(coords.size());
  auto v = p.value.data();
  for (std::size_t i : coords) {
    if (i >= v.size()) throw std::out_of_range("finite_diff_grad: coordinate out of range");
    const double saved = v[i];
    v[i] = saved + step;
    const double up = probe(f);
    v[i] = saved - step;
    const double down = probe(f);
    v[i] = saved;
    out.push_back((up - down) / (2.0 * step));
  }
  return out;
}

Tensor finite_diff_grad(const std::function<double()>& f, Param& p, double step) {
  std::vector<std::size_t> all(p.value.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return Tensor(p.value.shape(), finite_diff_grad_at(f, p, all, step));
}

double stochastic_round(double x, double grid_step, std::mt19937_64& rng) {
  if (!std::isfinite(x)) throw std::domain_error("stochastic_round: non-finite input");
  if (!(grid_step > 0.0)) throw std::invalid_argument("stochastic_round: grid step must be positive");
  const double down = std::floor(x / grid_step) * grid_step;
  if (down == x) return x;
  const double up = down + grid_step;
  const double p_up = (x - down) / grid_step;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  return unit(rng) < p_up ? up : down;
}

}  // namespace dhen
