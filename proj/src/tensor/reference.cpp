#include <cmath>

#include "tpn/kernels.hpp"

namespace tpn::ref {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, MaybeConst<T> bias, const ConvGeometry& g) {
  const Shape os = conv_out_shape(x.shape(), weight.shape(), g);
  const Shape ws = weight.shape();
  const std::int64_t cin_g = ws.c;
  const std::int64_t cout_g = ws.n / g.groups;
  Tensor<T> y(os);
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t oc = 0; oc < os.c; ++oc) {
      const std::int64_t grp = oc / cout_g;
      for (std::int64_t oy = 0; oy < os.h; ++oy)
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          T acc = bias != nullptr ? (*bias)[oc] : T(0);
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t ky = 0; ky < ws.h; ++ky)
              for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                const std::int64_t iy = oy * g.stride - g.padding + ky;
                const std::int64_t ix = ox * g.stride - g.padding + kx;
                if (iy < 0 || iy >= x.shape().h || ix < 0 || ix >= x.shape().w) continue;
                acc += x.at(n, grp * cin_g + ci, iy, ix) * weight.at(oc, ci, ky, kx);
              }
          y.at(n, oc, oy, ox) = acc;
        }
    }
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out, const ConvGeometry& g,
                     MaybeGrad<T> grad_x, MaybeGrad<T> grad_w, MaybeGrad<T> grad_b) {
  const Shape os = conv_out_shape(x.shape(), weight.shape(), g);
  const Shape ws = weight.shape();
  const std::int64_t cin_g = ws.c;
  const std::int64_t cout_g = ws.n / g.groups;
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t oc = 0; oc < os.c; ++oc) {
      const std::int64_t grp = oc / cout_g;
      for (std::int64_t oy = 0; oy < os.h; ++oy)
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          const T gy = grad_out.at(n, oc, oy, ox);
          if (grad_b != nullptr) (*grad_b)[oc] += gy;
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t ky = 0; ky < ws.h; ++ky)
              for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                const std::int64_t iy = oy * g.stride - g.padding + ky;
                const std::int64_t ix = ox * g.stride - g.padding + kx;
                if (iy < 0 || iy >= x.shape().h || ix < 0 || ix >= x.shape().w) continue;
                if (grad_x != nullptr) grad_x->at(n, grp * cin_g + ci, iy, ix) += gy * weight.at(oc, ci, ky, kx);
                if (grad_w != nullptr) grad_w->at(oc, ci, ky, kx) += gy * x.at(n, grp * cin_g + ci, iy, ix);
              }
        }
    }
}

template <typename T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups,
                             double eps) {
  const Shape s = x.shape();
  if (groups < 1 || s.c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const std::int64_t cpg = s.c / groups;
  Tensor<T> y(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t grp = 0; grp < groups; ++grp) {
      double sum = 0;
      double count = 0;
      for (std::int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j) {
            sum += x.at(n, c, i, j);
            count += 1;
          }
      const double mean = sum / count;
      double var = 0;
      for (std::int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j) var += (x.at(n, c, i, j) - mean) * (x.at(n, c, i, j) - mean);
      var /= count;
      for (std::int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j)
            y.at(n, c, i, j) = static_cast<T>((x.at(n, c, i, j) - mean) / std::sqrt(var + eps) * gamma[c] + beta[c]);
    }
  return y;
}

template <typename T>
void group_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, int groups, double eps, const Tensor<T>& grad_out,
                         MaybeGrad<T> grad_x, MaybeGrad<T> grad_gamma, MaybeGrad<T> grad_beta) {
  const Shape s = x.shape();
  const std::int64_t cpg = s.c / groups;
  const double count = static_cast<double>(cpg * s.h * s.w);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t grp = 0; grp < groups; ++grp) {
      const std::int64_t c0 = grp * cpg;
      const std::int64_t c1 = c0 + cpg;
      double mean = 0;
      for (std::int64_t c = c0; c < c1; ++c)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j) mean += x.at(n, c, i, j);
      mean /= count;
      double var = 0;
      for (std::int64_t c = c0; c < c1; ++c)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j) var += (x.at(n, c, i, j) - mean) * (x.at(n, c, i, j) - mean);
      var /= count;
      const double inv = 1.0 / std::sqrt(var + eps);
      // dL/dx = inv * (g - mean(g) - xhat * mean(g * xhat)), g = dL/dxhat
      double mean_g = 0;
      double mean_gx = 0;
      for (std::int64_t c = c0; c < c1; ++c)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j) {
            const double gh = grad_out.at(n, c, i, j) * gamma[c];
            const double xh = (x.at(n, c, i, j) - mean) * inv;
            mean_g += gh;
            mean_gx += gh * xh;
            if (grad_gamma != nullptr) (*grad_gamma)[c] += static_cast<T>(grad_out.at(n, c, i, j) * xh);
            if (grad_beta != nullptr) (*grad_beta)[c] += grad_out.at(n, c, i, j);
          }
      mean_g /= count;
      mean_gx /= count;
      if (grad_x == nullptr) continue;
      for (std::int64_t c = c0; c < c1; ++c)
        for (std::int64_t i = 0; i < s.h; ++i)
          for (std::int64_t j = 0; j < s.w; ++j) {
            const double gh = grad_out.at(n, c, i, j) * gamma[c];
            const double xh = (x.at(n, c, i, j) - mean) * inv;
            grad_x->at(n, c, i, j) += static_cast<T>(inv * (gh - mean_g - xh * mean_gx));
          }
    }
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = std::max(T(0), x[i]);
  return y;
}

namespace {
// Source coordinate for output index d, half-pixel centers, clamped at the low border.
double source_coord(std::int64_t d, std::int64_t in, std::int64_t out) {
  const double src = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  return src < 0.0 ? 0.0 : src;
}
}  // namespace

template <typename T>
Tensor<T> resize_forward(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  const Shape s = x.shape();
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: target size must be >= 1");
  Tensor<T> y({s.n, s.c, out_h, out_w});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t oy = 0; oy < out_h; ++oy)
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const double sy = source_coord(oy, s.h, out_h);
          const double sx = source_coord(ox, s.w, out_w);
          const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(sy), s.h - 1);
          const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(sx), s.w - 1);
          const std::int64_t y1 = std::min(y0 + 1, s.h - 1);
          const std::int64_t x1 = std::min(x0 + 1, s.w - 1);
          const T wy = static_cast<T>(sy - static_cast<double>(y0));
          const T wx = static_cast<T>(sx - static_cast<double>(x0));
          y.at(n, c, oy, ox) = (T(1) - wy) * ((T(1) - wx) * x.at(n, c, y0, x0) + wx * x.at(n, c, y0, x1)) +
                               wy * ((T(1) - wx) * x.at(n, c, y1, x0) + wx * x.at(n, c, y1, x1));
        }
  return y;
}

template <typename T>
void resize_backward(const Tensor<T>& grad_out, MaybeGrad<T> grad_x) {
  const Shape s = grad_x->shape();
  const Shape o = grad_out.shape();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t oy = 0; oy < o.h; ++oy)
        for (std::int64_t ox = 0; ox < o.w; ++ox) {
          const double sy = source_coord(oy, s.h, o.h);
          const double sx = source_coord(ox, s.w, o.w);
          const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(sy), s.h - 1);
          const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(sx), s.w - 1);
          const std::int64_t y1 = std::min(y0 + 1, s.h - 1);
          const std::int64_t x1 = std::min(x0 + 1, s.w - 1);
          const T wy = static_cast<T>(sy - static_cast<double>(y0));
          const T wx = static_cast<T>(sx - static_cast<double>(x0));
          const T g = grad_out.at(n, c, oy, ox);
          grad_x->at(n, c, y0, x0) += g * (T(1) - wy) * (T(1) - wx);
          grad_x->at(n, c, y0, x1) += g * (T(1) - wy) * wx;
          grad_x->at(n, c, y1, x0) += g * wy * (T(1) - wx);
          grad_x->at(n, c, y1, x1) += g * wy * wx;
        }
}

#define TPN_INSTANTIATE_REF(T)                                                                                   \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, const ConvGeometry&); \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvGeometry&,       \
                                Tensor<T>*, Tensor<T>*, Tensor<T>*);                                             \
  template Tensor<T> group_norm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, double);     \
  template void group_norm_backward(const Tensor<T>&, const Tensor<T>&, int, double, const Tensor<T>&,           \
                                    Tensor<T>*, Tensor<T>*, Tensor<T>*);                                         \
  template Tensor<T> relu_forward(const Tensor<T>&);                                                             \
  template Tensor<T> resize_forward(const Tensor<T>&, std::int64_t, std::int64_t);                               \
  template void resize_backward(const Tensor<T>&, Tensor<T>*);

TPN_INSTANTIATE_REF(float)
TPN_INSTANTIATE_REF(double)
#undef TPN_INSTANTIATE_REF

}  // namespace tpn::ref
