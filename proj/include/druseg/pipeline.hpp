#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "druseg/common.hpp"
#include "druseg/rng.hpp"
#include "druseg/tensor.hpp"

namespace druseg {

// Hexcone HSV from RGB in [0, 1]; all three outputs are scaled to [0, 1]
// (hue = degrees / 360). Zero chroma yields hue 0; black yields saturation 0.
// Channel-maximum ties resolve in R, G, B priority order.
inline Tensor rgb_to_hsv(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.extent(0) != 3) {
    throw ShapeError("rgb_to_hsv: expected [3, H, W], got " +
                     rgb.shape_string());
  }
  const std::int64_t plane = rgb.extent(1) * rgb.extent(2);
  Tensor hsv = Tensor::zeros(rgb.shape());
  for (std::int64_t i = 0; i < plane; ++i) {
    const double r = rgb[i], g = rgb[plane + i], b = rgb[2 * plane + i];
    if (r < 0.0 || r > 1.0 || g < 0.0 || g > 1.0 || b < 0.0 || b > 1.0) {
      throw ValueError("rgb_to_hsv: values must lie in [0, 1]");
    }
    const double maxc = std::max({r, g, b});
    const double minc = std::min({r, g, b});
    const double d = maxc - minc;
    double h = 0.0;
    if (d > 0.0) {
      double h6;
      if (maxc == r) {
        h6 = std::fmod((g - b) / d, 6.0);
        if (h6 < 0.0) h6 += 6.0;
      } else if (maxc == g) {
        h6 = (b - r) / d + 2.0;
      } else {
        h6 = (r - g) / d + 4.0;
      }
      h = h6 / 6.0;
    }
    hsv[i] = h;
    hsv[plane + i] = maxc == 0.0 ? 0.0 : d / maxc;
    hsv[2 * plane + i] = maxc;
  }
  return hsv;
}

// Six-channel network input: RGB then HSV, each channel standardized to zero
// mean and unit variance over this image (population statistics). A channel
// whose standard deviation falls below 1e-8 becomes all zeros.
inline Tensor make_input(const Tensor& rgb) {
  const Tensor hsv = rgb_to_hsv(rgb);
  const std::int64_t h = rgb.extent(1), w = rgb.extent(2);
  const std::int64_t plane = h * w;
  Tensor out = Tensor::zeros({6, h, w});
  for (std::int64_t c = 0; c < 6; ++c) {
    const double* src =
        (c < 3 ? rgb.data() + c * plane : hsv.data() + (c - 3) * plane);
    double mean = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) mean += src[i];
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) {
      var += (src[i] - mean) * (src[i] - mean);
    }
    var /= static_cast<double>(plane);
    const double sd = std::sqrt(var);
    double* dst = out.data() + c * plane;
    if (sd < 1e-8) continue;  // flat channel stays all zero
    for (std::int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - mean) / sd;
  }
  return out;
}

namespace detail {

inline void check_resize_args(const Tensor& t, std::int64_t oh,
                              std::int64_t ow) {
  if (t.rank() != 2 && t.rank() != 3) {
    throw ShapeError("resize: expected [H, W] or [C, H, W], got " +
                     t.shape_string());
  }
  if (oh < 1 || ow < 1) {
    throw ValueError("resize: output extents must be >= 1");
  }
}

}  // namespace detail

// Bilinear resize with half-pixel-centre sampling and edge clamping.
// Resizing to the source size reproduces the input exactly.
inline Tensor resize_bilinear(const Tensor& img, std::int64_t out_h,
                              std::int64_t out_w) {
  detail::check_resize_args(img, out_h, out_w);
  const bool chw = img.rank() == 3;
  const std::int64_t c = chw ? img.extent(0) : 1;
  const std::int64_t h = img.extent(chw ? 1 : 0);
  const std::int64_t w = img.extent(chw ? 2 : 1);
  Tensor out = chw ? Tensor::zeros({c, out_h, out_w})
                   : Tensor::zeros({out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* src = img.data() + ch * h * w;
    double* dst = out.data() + ch * out_h * out_w;
    for (std::int64_t y = 0; y < out_h; ++y) {
      double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
      if (fy < 0.0) fy = 0.0;
      if (fy > static_cast<double>(h - 1)) fy = static_cast<double>(h - 1);
      const std::int64_t y0 = static_cast<std::int64_t>(fy);
      const std::int64_t y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - static_cast<double>(y0);
      for (std::int64_t x = 0; x < out_w; ++x) {
        double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
        if (fx < 0.0) fx = 0.0;
        if (fx > static_cast<double>(w - 1)) fx = static_cast<double>(w - 1);
        const std::int64_t x0 = static_cast<std::int64_t>(fx);
        const std::int64_t x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - static_cast<double>(x0);
        const double top =
            src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
        const double bot =
            src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
        dst[y * out_w + x] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

// Nearest-neighbour resize with the same half-pixel-centre geometry; used for
// masks so values stay binary.
inline Tensor resize_nearest(const Tensor& img, std::int64_t out_h,
                             std::int64_t out_w) {
  detail::check_resize_args(img, out_h, out_w);
  const bool chw = img.rank() == 3;
  const std::int64_t c = chw ? img.extent(0) : 1;
  const std::int64_t h = img.extent(chw ? 1 : 0);
  const std::int64_t w = img.extent(chw ? 2 : 1);
  Tensor out = chw ? Tensor::zeros({c, out_h, out_w})
                   : Tensor::zeros({out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* src = img.data() + ch * h * w;
    double* dst = out.data() + ch * out_h * out_w;
    for (std::int64_t y = 0; y < out_h; ++y) {
      std::int64_t ys = static_cast<std::int64_t>(
          std::floor((static_cast<double>(y) + 0.5) * sy));
      ys = std::min(std::max<std::int64_t>(ys, 0), h - 1);
      for (std::int64_t x = 0; x < out_w; ++x) {
        std::int64_t xs = static_cast<std::int64_t>(
            std::floor((static_cast<double>(x) + 0.5) * sx));
        xs = std::min(std::max<std::int64_t>(xs, 0), w - 1);
        dst[y * out_w + x] = src[ys * w + xs];
      }
    }
  }
  return out;
}

// One training example: a [6, S, S] standardized input and a binary [S, S]
// mask.
struct Sample {
  std::string id;
  Tensor image;
  Tensor mask;
};

// Geometric augmentation ranges. Zero rotation together with a degenerate
// [1, 1] scale range makes augment() the identity.
struct AugmentParams {
  bool enabled = true;
  double rotation_degrees = 30.0;
  double scale_min = 0.8;
  double scale_max = 1.25;
};

namespace detail {

// Mirror an index into [0, n) with edge repetition: -1 -> 0, n -> n-1.
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -1 - i;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

inline double sample_reflect_bilinear(const double* src, std::int64_t h,
                                      std::int64_t w, double fy, double fx) {
  const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
  const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
  const double wy = fy - static_cast<double>(y0);
  const double wx = fx - static_cast<double>(x0);
  const std::int64_t ya = reflect_index(y0, h), yb = reflect_index(y0 + 1, h);
  const std::int64_t xa = reflect_index(x0, w), xb = reflect_index(x0 + 1, w);
  const double top = src[ya * w + xa] * (1.0 - wx) + src[ya * w + xb] * wx;
  const double bot = src[yb * w + xa] * (1.0 - wx) + src[yb * w + xb] * wx;
  return top * (1.0 - wy) + bot * wy;
}

inline double sample_reflect_nearest(const double* src, std::int64_t h,
                                     std::int64_t w, double fy, double fx) {
  const std::int64_t y =
      reflect_index(static_cast<std::int64_t>(std::floor(fy + 0.5)), h);
  const std::int64_t x =
      reflect_index(static_cast<std::int64_t>(std::floor(fx + 0.5)), w);
  return src[y * w + x];
}

}  // namespace detail

// Shared geometric warp for image and mask: rotate by `angle_deg`
// (counter-clockwise), zoom by `zoom` about the image centre, then shift the
// crop window by (dx, dy) pixels. Out-of-frame samples reflect at the edges,
// which avoids injecting borders unrelated to the image statistics. The image
// is sampled bilinearly; the mask uses nearest neighbour and stays binary.
inline Sample apply_geometric(const Sample& s, double angle_deg, double zoom,
                              double dx, double dy) {
  if (!(zoom > 0.0)) throw ValueError("apply_geometric: zoom must be > 0");
  const std::int64_t c = s.image.extent(0);
  const std::int64_t h = s.image.extent(1);
  const std::int64_t w = s.image.extent(2);
  if (s.mask.rank() != 2 || s.mask.extent(0) != h || s.mask.extent(1) != w) {
    throw ShapeError("apply_geometric: mask shape " + s.mask.shape_string() +
                     " does not match image " + s.image.shape_string());
  }
  const double rad = angle_deg * 3.14159265358979323846 / 180.0;
  const double cos_a = std::cos(-rad);
  const double sin_a = std::sin(-rad);
  const double cy = static_cast<double>(h - 1) / 2.0;
  const double cx = static_cast<double>(w - 1) / 2.0;

  Sample out;
  out.id = s.id;
  out.image = Tensor::zeros(s.image.shape());
  out.mask = Tensor::zeros(s.mask.shape());
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      // Inverse map: source = centre + R(-angle) * (offset + shift) / zoom.
      const double u = static_cast<double>(x) - cx + dx;
      const double v = static_cast<double>(y) - cy + dy;
      const double fx = cx + (cos_a * u - sin_a * v) / zoom;
      const double fy = cy + (sin_a * u + cos_a * v) / zoom;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* src = s.image.data() + ch * h * w;
        out.image.data()[ch * h * w + y * w + x] =
            detail::sample_reflect_bilinear(src, h, w, fy, fx);
      }
      const double m = detail::sample_reflect_nearest(s.mask.data(), h, w, fy, fx);
      out.mask.data()[y * w + x] = m >= 0.5 ? 1.0 : 0.0;
    }
  }
  return out;
}

// Random augmentation. Draw order is pinned (angle, zoom, dx, dy) so seeded
// runs reproduce exactly. The crop jitter range grows with zoom-in:
// +-(zoom - 1) * size / 2, and is zero when zoom <= 1.
inline Sample augment(const Sample& s, const AugmentParams& p, Rng& rng) {
  if (!p.enabled) return s;
  if (!(p.scale_min > 0.0) || p.scale_max < p.scale_min) {
    throw ValueError("augment: scale range must satisfy 0 < min <= max");
  }
  if (p.rotation_degrees < 0.0) {
    throw ValueError("augment: rotation range must be >= 0");
  }
  const double angle = rng.uniform(-p.rotation_degrees, p.rotation_degrees);
  const double zoom = rng.uniform(p.scale_min, p.scale_max);
  const double size = static_cast<double>(s.image.extent(1));
  const double jitter = std::max(0.0, (zoom - 1.0) * size / 2.0);
  const double dx = rng.uniform(-jitter, jitter);
  const double dy = rng.uniform(-jitter, jitter);
  if (angle == 0.0 && zoom == 1.0 && dx == 0.0 && dy == 0.0) return s;
  return apply_geometric(s, angle, zoom, dx, dy);
}

}  // namespace druseg
