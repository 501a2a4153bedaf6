#pragma once

// Image losses with gradients (L1, SSIM-based D-SSIM) and the weighted total,
// plus evaluation metrics (PSNR, SSIM, per-part mask IoU).

#include "d3ga/common.hpp"
#include "d3ga/image.hpp"

#include <vector>

namespace d3ga {

// ---------------------------------------------------------------------------
// Separable Gaussian window, zero padding.

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> t(size);
  const int r = size / 2;
  double s = 0;
  for (int i = 0; i < size; ++i) {
    t[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
    s += t[i];
  }
  for (auto& v : t) v /= s;
  return t;
}

namespace detail {

/// Single-channel plane, row-major.
using Plane = std::vector<double>;

inline Plane blur(const Plane& in, int w, int h, const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size()) / 2;
  Plane tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int k = -r; k <= r; ++k) {
        const int xx = x + k;
        if (xx >= 0 && xx < w) s += taps[k + r] * in[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int k = -r; k <= r; ++k) {
        const int yy = y + k;
        if (yy >= 0 && yy < h) s += taps[k + r] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  return out;
}

inline Plane channel(const Image& img, int c) {
  Plane p(img.pixel_count());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.data[i * 3 + c];
  return p;
}

} // namespace detail

/// Mean SSIM over pixels and channels; optionally the gradient w.r.t. `a`.
inline double ssim(const Image& a, const Image& b, Image* grad_a = nullptr, const SsimParams& sp = {}) {
  require_same_shape(a, b, "ssim");
  const int w = a.width, h = a.height;
  const auto taps = gaussian_taps(sp.window, sp.sigma);
  const double c1 = sp.k1 * sp.k1, c2 = sp.k2 * sp.k2;
  const std::size_t n = a.pixel_count();
  const double inv = 1.0 / static_cast<double>(n * 3);
  if (grad_a) *grad_a = Image(w, h);
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    const auto x = detail::channel(a, c), y = detail::channel(b, c);
    detail::Plane xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::blur(x, w, h, taps), my = detail::blur(y, w, h, taps);
    const auto exx = detail::blur(xx, w, h, taps), eyy = detail::blur(yy, w, h, taps),
               exy = detail::blur(xy, w, h, taps);
    detail::Plane dm(n), dxx(n), dxy(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double sxx = exx[i] - mx[i] * mx[i], syy = eyy[i] - my[i] * my[i], sxy = exy[i] - mx[i] * my[i];
      const double a1 = 2 * mx[i] * my[i] + c1, a2 = 2 * sxy + c2;
      const double b1 = mx[i] * mx[i] + my[i] * my[i] + c1, b2 = sxx + syy + c2;
      const double s = a1 * a2 / (b1 * b2);
      total += s;
      if (grad_a) {
        const double bb = b1 * b2;
        dm[i] = inv * ((2 * my[i] * a2 - 2 * my[i] * a1) / bb - s * (2 * mx[i] / b1 - 2 * mx[i] / b2));
        dxx[i] = inv * (-s / b2);
        dxy[i] = inv * (2 * a1 / bb);
      }
    }
    if (grad_a) {
      const auto gm = detail::blur(dm, w, h, taps), gxx = detail::blur(dxx, w, h, taps),
                 gxy = detail::blur(dxy, w, h, taps);
      for (std::size_t i = 0; i < n; ++i) grad_a->data[i * 3 + c] = gm[i] + gxy[i] * y[i] + 2.0 * gxx[i] * x[i];
    }
  }
  return total * inv;
}

/// mean |a − b|; gradient sign(a − b)/N (0 at ties).
inline double l1_loss(const Image& a, const Image& b, Image* grad_a = nullptr, double grad_scale = 1.0) {
  require_same_shape(a, b, "l1");
  const double inv = 1.0 / static_cast<double>(a.data.size());
  if (grad_a && !grad_a->same_shape(a)) *grad_a = Image(a.width, a.height);
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += std::abs(d);
    if (grad_a) grad_a->data[i] += grad_scale * inv * static_cast<double>((d > 0) - (d < 0));
  }
  return s * inv;
}

/// (1 − ω)·L1 + ω·(1 − SSIM)/2. `grad` (if given) receives dL/d(render).
inline double color_loss(const Image& render, const Image& target, double omega, Image* grad = nullptr) {
  require_same_shape(render, target, "color_loss");
  if (grad) *grad = Image(render.width, render.height);
  const double l1 = l1_loss(render, target, grad, 1.0 - omega);
  if (omega == 0.0) return (1.0 - omega) * l1;
  Image gs;
  const double s = ssim(render, target, grad ? &gs : nullptr);
  if (grad)
    for (std::size_t i = 0; i < grad->data.size(); ++i) grad->data[i] += -0.5 * omega * gs.data[i];
  return (1.0 - omega) * l1 + omega * 0.5 * (1.0 - s);
}

inline double garment_loss(const Image& part_render, const Image& part_target, Image* grad = nullptr) {
  require_same_shape(part_render, part_target, "garment_loss");
  if (grad) *grad = Image(part_render.width, part_render.height);
  return l1_loss(part_render, part_target, grad);
}

struct LossWeights {
  double nu = 10.0;
  double tau = 0.005;
};

struct LossTerms {
  double color = 0;
  double garment = 0;
  double neo = 0;
};

/// ν·L_color + ν·L_garment + τ·L_neo. Disabled terms pass weight 0 and
/// contribute exactly 0.
inline double total_loss(const LossTerms& t, const LossWeights& w, double garment_weight, double neo_weight) {
  const double v = w.nu * t.color + garment_weight * t.garment + neo_weight * t.neo;
  if (!std::isfinite(v) || !std::isfinite(t.color) || !std::isfinite(t.garment) || !std::isfinite(t.neo))
    throw NonFiniteLoss("color=" + std::to_string(t.color) + " garment=" + std::to_string(t.garment) +
                        " neo=" + std::to_string(t.neo));
  return v;
}

inline double total_loss(const LossTerms& t, const LossWeights& w = {}) { return total_loss(t, w, w.nu, w.tau); }

// ---------------------------------------------------------------------------
// Metrics

inline constexpr double kPsnrCap = 99.0;

inline double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  double mse = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

/// Palette index per pixel: 0 = background, 1 + part otherwise.
inline std::vector<int> classify_parts(const Image& img) {
  std::vector<int> out(img.pixel_count());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Vec3 p = img.pixel(x, y);
      int best = 0;
      double bd = p.squaredNorm();
      for (int k = 0; k < kPartCount; ++k) {
        const double d = (p - part_color(static_cast<Part>(k))).squaredNorm();
        if (d < bd) {
          bd = d;
          best = k + 1;
        }
      }
      out[static_cast<std::size_t>(y) * img.width + x] = best;
    }
  return out;
}

struct IouResult {
  std::array<double, kPartCount> per_part{};
  std::array<bool, kPartCount> present{};
  double mean = 0;
};

/// Per-part IoU after snapping both images to the nearest palette color; the
/// mean covers parts present in either image.
inline IouResult part_iou(const Image& pred, const Image& target) {
  require_same_shape(pred, target, "iou");
  const auto a = classify_parts(pred), b = classify_parts(target);
  std::array<std::size_t, kPartCount> inter{}, uni{};
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int k = 0; k < kPartCount; ++k) {
      const bool pa = a[i] == k + 1, pb = b[i] == k + 1;
      inter[k] += pa && pb;
      uni[k] += pa || pb;
    }
  IouResult r;
  int n = 0;
  for (int k = 0; k < kPartCount; ++k) {
    r.present[k] = uni[k] > 0;
    r.per_part[k] = uni[k] ? static_cast<double>(inter[k]) / static_cast<double>(uni[k]) : 1.0;
    if (uni[k]) {
      r.mean += r.per_part[k];
      ++n;
    }
  }
  r.mean = n ? r.mean / n : 1.0;
  return r;
}

} // namespace d3ga
