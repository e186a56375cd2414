#include "tpn/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace tpn {

std::int64_t conv_out_size(std::int64_t in, std::int64_t k, int stride, int padding) {
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const std::int64_t span = in + 2 * padding - k;
  if (span < 0) {
    throw ShapeError("conv2d: non-positive output size for input " + std::to_string(in) + ", kernel " +
                     std::to_string(k));
  }
  return span / stride + 1;
}

Shape conv_out_shape(const Shape& x, const Shape& weight, const ConvGeometry& g) {
  if (g.groups < 1) throw ShapeError("conv2d: groups must be >= 1");
  if (weight.h != weight.w) throw ShapeError("conv2d: only square kernels are supported");
  if (weight.c * g.groups != x.c) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(x.c) + " channels, weight expects " +
                     std::to_string(weight.c * g.groups));
  }
  if (weight.n % g.groups != 0) throw ShapeError("conv2d: output channels not divisible by groups");
  return {x.n, weight.n, conv_out_size(x.h, weight.h, g.stride, g.padding),
          conv_out_size(x.w, weight.w, g.stride, g.padding)};
}

ResizeAxis resize_axis(std::int64_t in, std::int64_t out) {
  if (in < 1 || out < 1) throw ShapeError("bilinear_resize: sizes must be >= 1");
  ResizeAxis axis;
  axis.lo.resize(static_cast<std::size_t>(out));
  axis.hi.resize(static_cast<std::size_t>(out));
  axis.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const auto i = static_cast<std::size_t>(d);
    axis.lo[i] = lo;
    axis.hi[i] = std::min(lo + 1, in - 1);
    axis.frac[i] = src - static_cast<double>(lo);
  }
  return axis;
}

namespace {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
          int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
          int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

struct ConvDims {
  std::int64_t n, cin, h, w, cout, k, oh, ow;
  std::int64_t cin_g, cout_g, rows, cols;
  bool pointwise;
};

ConvDims conv_dims(const Shape& x, const Shape& weight, const ConvGeometry& g) {
  const Shape out = conv_out_shape(x, weight, g);
  ConvDims d{};
  d.n = x.n;
  d.cin = x.c;
  d.h = x.h;
  d.w = x.w;
  d.cout = weight.n;
  d.k = weight.h;
  d.oh = out.h;
  d.ow = out.w;
  d.cin_g = x.c / g.groups;
  d.cout_g = weight.n / g.groups;
  d.rows = d.cin_g * d.k * d.k;
  d.cols = d.oh * d.ow;
  d.pointwise = d.k == 1 && g.stride == 1 && g.padding == 0;
  return d;
}

// col[(ci*k + ky)*k + kx][oy*ow + ox] = x[ci][oy*s - p + ky][ox*s - p + kx], zero outside.
template <typename T>
void im2col(const T* x, const ConvDims& d, const ConvGeometry& g, T* col) {
  for (std::int64_t ci = 0; ci < d.cin_g; ++ci) {
    const T* plane = x + ci * d.h * d.w;
    for (std::int64_t ky = 0; ky < d.k; ++ky) {
      for (std::int64_t kx = 0; kx < d.k; ++kx) {
        T* dst = col + ((ci * d.k + ky) * d.k + kx) * d.cols;
        for (std::int64_t oy = 0; oy < d.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          T* row = dst + oy * d.ow;
          if (iy < 0 || iy >= d.h) {
            std::fill(row, row + d.ow, T(0));
            continue;
          }
          const T* src = plane + iy * d.w;
          for (std::int64_t ox = 0; ox < d.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kx;
            row[ox] = (ix >= 0 && ix < d.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, const ConvGeometry& g, T* x) {
  for (std::int64_t ci = 0; ci < d.cin_g; ++ci) {
    T* plane = x + ci * d.h * d.w;
    for (std::int64_t ky = 0; ky < d.k; ++ky) {
      for (std::int64_t kx = 0; kx < d.k; ++kx) {
        const T* src = col + ((ci * d.k + ky) * d.k + kx) * d.cols;
        for (std::int64_t oy = 0; oy < d.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= d.h) continue;
          T* dst = plane + iy * d.w;
          const T* row = src + oy * d.ow;
          for (std::int64_t ox = 0; ox < d.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < d.w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

namespace kernels {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, MaybeConst<T> bias,
                         const ConvGeometry& g) {
  const ConvDims d = conv_dims(x.shape(), weight.shape(), g);
  if (bias != nullptr && bias->numel() != d.cout) throw ShapeError("conv2d: bias size mismatch");
  Tensor<T> y({d.n, d.cout, d.oh, d.ow});
  const std::int64_t tasks = d.n * g.groups;
#pragma omp parallel
  {
    std::vector<T> col(d.pointwise ? 0 : static_cast<std::size_t>(d.rows * d.cols));
#pragma omp for schedule(static)
    for (std::int64_t t = 0; t < tasks; ++t) {
      const std::int64_t n = t / g.groups;
      const std::int64_t grp = t % g.groups;
      const T* xin = x.data() + (n * d.cin + grp * d.cin_g) * d.h * d.w;
      const T* b = xin;
      if (!d.pointwise) {
        im2col(xin, d, g, col.data());
        b = col.data();
      }
      T* out = y.data() + (n * d.cout + grp * d.cout_g) * d.cols;
      gemm(false, false, static_cast<int>(d.cout_g), static_cast<int>(d.cols), static_cast<int>(d.rows), T(1),
           weight.data() + grp * d.cout_g * d.rows, static_cast<int>(d.rows), b, static_cast<int>(d.cols), T(0), out,
           static_cast<int>(d.cols));
      if (bias != nullptr) {
        for (std::int64_t oc = 0; oc < d.cout_g; ++oc) {
          const T bv = (*bias)[grp * d.cout_g + oc];
          T* row = out + oc * d.cols;
          for (std::int64_t p = 0; p < d.cols; ++p) row[p] += bv;
        }
      }
    }
  }
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     const ConvGeometry& g, MaybeGrad<T> grad_x, MaybeGrad<T> grad_w, MaybeGrad<T> grad_b) {
  const ConvDims d = conv_dims(x.shape(), weight.shape(), g);
  if (!(grad_out.shape() == Shape{d.n, d.cout, d.oh, d.ow})) throw ShapeError("conv2d_backward: grad shape mismatch");

  if (grad_b != nullptr) {
#pragma omp parallel for schedule(static)
    for (std::int64_t oc = 0; oc < d.cout; ++oc) {
      T acc = 0;
      for (std::int64_t n = 0; n < d.n; ++n) {
        const T* row = grad_out.data() + (n * d.cout + oc) * d.cols;
        for (std::int64_t p = 0; p < d.cols; ++p) acc += row[p];
      }
      (*grad_b)[oc] += acc;
    }
  }

  const std::int64_t wsize = weight.numel();
  std::vector<T> partial_w(grad_w != nullptr ? static_cast<std::size_t>(wsize * d.n) : 0);

#pragma omp parallel
  {
    std::vector<T> col(static_cast<std::size_t>(d.rows * d.cols));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < d.n; ++n) {
      for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        const T* xin = x.data() + (n * d.cin + grp * d.cin_g) * d.h * d.w;
        const T* gy = grad_out.data() + (n * d.cout + grp * d.cout_g) * d.cols;
        const T* wg = weight.data() + grp * d.cout_g * d.rows;
        if (grad_w != nullptr) {
          const T* b = xin;
          if (!d.pointwise) {
            im2col(xin, d, g, col.data());
            b = col.data();
          }
          T* pw = partial_w.data() + n * wsize + grp * d.cout_g * d.rows;
          gemm(false, true, static_cast<int>(d.cout_g), static_cast<int>(d.rows), static_cast<int>(d.cols), T(1), gy,
               static_cast<int>(d.cols), b, static_cast<int>(d.cols), T(0), pw, static_cast<int>(d.rows));
        }
        if (grad_x != nullptr) {
          T* gx = grad_x->data() + (n * d.cin + grp * d.cin_g) * d.h * d.w;
          if (d.pointwise) {
            gemm(true, false, static_cast<int>(d.rows), static_cast<int>(d.cols), static_cast<int>(d.cout_g), T(1), wg,
                 static_cast<int>(d.rows), gy, static_cast<int>(d.cols), T(1), gx, static_cast<int>(d.cols));
          } else {
            gemm(true, false, static_cast<int>(d.rows), static_cast<int>(d.cols), static_cast<int>(d.cout_g), T(1), wg,
                 static_cast<int>(d.rows), gy, static_cast<int>(d.cols), T(0), col.data(), static_cast<int>(d.cols));
            col2im_add(col.data(), d, g, gx);
          }
        }
      }
    }
  }

  if (grad_w != nullptr) {
    T* gw = grad_w->data();
    for (std::int64_t n = 0; n < d.n; ++n) {
      const T* pw = partial_w.data() + n * wsize;
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < wsize; ++i) gw[i] += pw[i];
    }
  }
}

template <typename T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups,
                             double eps, std::type_identity_t<GroupNormStats<T>*> stats) {
  const Shape s = x.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(s.c) + " channels not divisible by " + std::to_string(groups) +
                     " groups");
  }
  if (gamma.numel() != s.c || beta.numel() != s.c) throw ShapeError("group_norm: affine size mismatch");
  const std::int64_t cpg = s.c / groups;
  const std::int64_t hw = s.plane();
  const std::int64_t span = cpg * hw;
  Tensor<T> y(s);
  std::vector<T> means(static_cast<std::size_t>(s.n * groups));
  std::vector<T> rstds(static_cast<std::size_t>(s.n * groups));
#pragma omp parallel for schedule(static)
  for (std::int64_t t = 0; t < s.n * groups; ++t) {
    const std::int64_t n = t / groups;
    const std::int64_t grp = t % groups;
    const T* src = x.data() + (n * s.c + grp * cpg) * hw;
    double sum = 0;
    for (std::int64_t i = 0; i < span; ++i) sum += src[i];
    const double mean = sum / static_cast<double>(span);
    double sq = 0;
    for (std::int64_t i = 0; i < span; ++i) {
      const double dv = src[i] - mean;
      sq += dv * dv;
    }
    const double rstd = 1.0 / std::sqrt(sq / static_cast<double>(span) + eps);
    means[static_cast<std::size_t>(t)] = static_cast<T>(mean);
    rstds[static_cast<std::size_t>(t)] = static_cast<T>(rstd);
    T* dst = y.data() + (n * s.c + grp * cpg) * hw;
    for (std::int64_t cc = 0; cc < cpg; ++cc) {
      const std::int64_t c = grp * cpg + cc;
      const T scale = static_cast<T>(rstd) * gamma[c];
      const T shift = beta[c] - static_cast<T>(mean) * scale;
      const T* in = src + cc * hw;
      T* out = dst + cc * hw;
      for (std::int64_t i = 0; i < hw; ++i) out[i] = in[i] * scale + shift;
    }
  }
  if (stats != nullptr) {
    stats->mean = std::move(means);
    stats->rstd = std::move(rstds);
  }
  return y;
}

template <typename T>
void group_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const GroupNormStats<T>& stats, int groups,
                         const Tensor<T>& grad_out, MaybeGrad<T> grad_x, MaybeGrad<T> grad_gamma, MaybeGrad<T> grad_beta) {
  const Shape s = x.shape();
  const std::int64_t cpg = s.c / groups;
  const std::int64_t hw = s.plane();
  const double span = static_cast<double>(cpg * hw);

  if (grad_x != nullptr) {
#pragma omp parallel for schedule(static)
    for (std::int64_t t = 0; t < s.n * groups; ++t) {
      const std::int64_t n = t / groups;
      const std::int64_t grp = t % groups;
      const double mean = stats.mean[static_cast<std::size_t>(t)];
      const double rstd = stats.rstd[static_cast<std::size_t>(t)];
      const std::int64_t base = (n * s.c + grp * cpg) * hw;
      double sum_g = 0;
      double sum_gx = 0;
      for (std::int64_t cc = 0; cc < cpg; ++cc) {
        const double gm = gamma[grp * cpg + cc];
        const T* gy = grad_out.data() + base + cc * hw;
        const T* xv = x.data() + base + cc * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double gxhat = gy[i] * gm;
          sum_g += gxhat;
          sum_gx += gxhat * (xv[i] - mean) * rstd;
        }
      }
      const double mean_g = sum_g / span;
      const double mean_gx = sum_gx / span;
      for (std::int64_t cc = 0; cc < cpg; ++cc) {
        const double gm = gamma[grp * cpg + cc];
        const T* gy = grad_out.data() + base + cc * hw;
        const T* xv = x.data() + base + cc * hw;
        T* gx = grad_x->data() + base + cc * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double xhat = (xv[i] - mean) * rstd;
          gx[i] += static_cast<T>(rstd * (gy[i] * gm - mean_g - xhat * mean_gx));
        }
      }
    }
  }

  if (grad_gamma != nullptr || grad_beta != nullptr) {
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < s.c; ++c) {
      const std::int64_t grp = c / cpg;
      double acc_gamma = 0;
      double acc_beta = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const auto t = static_cast<std::size_t>(n * groups + grp);
        const double mean = stats.mean[t];
        const double rstd = stats.rstd[t];
        const T* gy = grad_out.data() + (n * s.c + c) * hw;
        const T* xv = x.data() + (n * s.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          acc_gamma += gy[i] * (xv[i] - mean) * rstd;
          acc_beta += gy[i];
        }
      }
      if (grad_gamma != nullptr) (*grad_gamma)[c] += static_cast<T>(acc_gamma);
      if (grad_beta != nullptr) (*grad_beta)[c] += static_cast<T>(acc_beta);
    }
  }
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::int64_t count = x.numel();
  const T* src = x.data();
  T* dst = y.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  return y;
}

template <typename T>
void relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out, MaybeGrad<T> grad_x) {
  const std::int64_t count = x.numel();
  const T* src = x.data();
  const T* gy = grad_out.data();
  T* gx = grad_x->data();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) {
    if (src[i] > T(0)) gx[i] += gy[i];
  }
}

template <typename T>
Tensor<T> resize_forward(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  const Shape s = x.shape();
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: target size must be >= 1");
  if (out_h == s.h && out_w == s.w) return x;
  const ResizeAxis ay = resize_axis(s.h, out_h);
  const ResizeAxis ax = resize_axis(s.w, out_w);
  Tensor<T> y({s.n, s.c, out_h, out_w});
#pragma omp parallel for schedule(static)
  for (std::int64_t plane = 0; plane < s.n * s.c; ++plane) {
    const T* src = x.data() + plane * s.h * s.w;
    T* dst = y.data() + plane * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto iy = static_cast<std::size_t>(oy);
      const T ly = static_cast<T>(ay.frac[iy]);
      const T* r0 = src + ay.lo[iy] * s.w;
      const T* r1 = src + ay.hi[iy] * s.w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto ix = static_cast<std::size_t>(ox);
        const T lx = static_cast<T>(ax.frac[ix]);
        const std::int64_t x0 = ax.lo[ix];
        const std::int64_t x1 = ax.hi[ix];
        dst[oy * out_w + ox] =
            (T(1) - ly) * ((T(1) - lx) * r0[x0] + lx * r0[x1]) + ly * ((T(1) - lx) * r1[x0] + lx * r1[x1]);
      }
    }
  }
  return y;
}

template <typename T>
void resize_backward(const Tensor<T>& grad_out, MaybeGrad<T> grad_x) {
  const Shape s = grad_x->shape();
  const Shape o = grad_out.shape();
  if (o.h == s.h && o.w == s.w) {
    grad_x->add_(grad_out);
    return;
  }
  const ResizeAxis ay = resize_axis(s.h, o.h);
  const ResizeAxis ax = resize_axis(s.w, o.w);
#pragma omp parallel for schedule(static)
  for (std::int64_t plane = 0; plane < s.n * s.c; ++plane) {
    const T* gy = grad_out.data() + plane * o.h * o.w;
    T* gx = grad_x->data() + plane * s.h * s.w;
    for (std::int64_t oy = 0; oy < o.h; ++oy) {
      const auto iy = static_cast<std::size_t>(oy);
      const T ly = static_cast<T>(ay.frac[iy]);
      T* r0 = gx + ay.lo[iy] * s.w;
      T* r1 = gx + ay.hi[iy] * s.w;
      for (std::int64_t ox = 0; ox < o.w; ++ox) {
        const auto ix = static_cast<std::size_t>(ox);
        const T lx = static_cast<T>(ax.frac[ix]);
        const T g = gy[oy * o.w + ox];
        r0[ax.lo[ix]] += g * (T(1) - ly) * (T(1) - lx);
        r0[ax.hi[ix]] += g * (T(1) - ly) * lx;
        r1[ax.lo[ix]] += g * ly * (T(1) - lx);
        r1[ax.hi[ix]] += g * ly * lx;
      }
    }
  }
}

#define TPN_INSTANTIATE_KERNELS(T)                                                                                \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, const ConvGeometry&);  \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvGeometry&,        \
                                Tensor<T>*, Tensor<T>*, Tensor<T>*);                                              \
  template Tensor<T> group_norm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, double,       \
                                        GroupNormStats<T>*);                                                      \
  template void group_norm_backward(const Tensor<T>&, const Tensor<T>&, const GroupNormStats<T>&, int,            \
                                    const Tensor<T>&, Tensor<T>*, Tensor<T>*, Tensor<T>*);                        \
  template Tensor<T> relu_forward(const Tensor<T>&);                                                              \
  template void relu_backward(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                                    \
  template Tensor<T> resize_forward(const Tensor<T>&, std::int64_t, std::int64_t);                                \
  template void resize_backward(const Tensor<T>&, Tensor<T>*);

TPN_INSTANTIATE_KERNELS(float)
TPN_INSTANTIATE_KERNELS(double)
#undef TPN_INSTANTIATE_KERNELS

}  // namespace kernels
}  // namespace tpn
