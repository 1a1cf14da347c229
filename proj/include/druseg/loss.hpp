#pragma once

#include <cstdint>

#include "druseg/tensor.hpp"

namespace druseg {

namespace detail {

inline void check_loss_pair(const Tensor& predictions, const Tensor& targets) {
  if (!predictions.same_shape(targets)) {
    throw ShapeError("jaccard_loss: prediction shape " +
                     predictions.shape_string() + " does not match target " +
                     targets.shape_string());
  }
  for (double v : targets.values()) {
    if (v != 0.0 && v != 1.0) {
      throw ValueError("jaccard_loss: targets must be binary (0 or 1)");
    }
  }
}

}  // namespace detail

// Soft Jaccard loss. Per image: L = 1 - I/U with I = sum(t * p) and
// U = sum(t^2) + sum(p^2) - I; an empty union (t = p = 0 everywhere) gives
// loss 0. A rank-4 tensor is a batch: its loss is the mean over images, so
// per-image gradients carry a 1/batch factor. If `grad` is non-null it
// receives dL/dp:
//   dL/dp_k = -(t_k * U - I * (2 p_k - t_k)) / U^2   (0 when U = 0).
inline double jaccard_loss_with_grad(const Tensor& predictions,
                                     const Tensor& targets,
                                     Tensor* grad = nullptr) {
  detail::check_loss_pair(predictions, targets);
  const std::int64_t images =
      predictions.rank() == 4 ? predictions.extent(0) : 1;
  const std::int64_t per_image = predictions.numel() / images;
  if (grad != nullptr) *grad = Tensor::zeros(predictions.shape());
  const double inv_images = 1.0 / static_cast<double>(images);

  double total = 0.0;
  for (std::int64_t img = 0; img < images; ++img) {
    const double* p = predictions.data() + img * per_image;
    const double* t = targets.data() + img * per_image;
    double inter = 0.0, sum_t = 0.0, sum_p2 = 0.0;
    for (std::int64_t k = 0; k < per_image; ++k) {
      inter += t[k] * p[k];
      sum_t += t[k];  // t is binary, so sum(t^2) = sum(t)
      sum_p2 += p[k] * p[k];
    }
    const double uni = sum_t + sum_p2 - inter;
    if (uni == 0.0) continue;  // empty union: loss 0, gradient 0
    total += 1.0 - inter / uni;
    if (grad != nullptr) {
      double* g = grad->data() + img * per_image;
      const double inv_u2 = 1.0 / (uni * uni);
      for (std::int64_t k = 0; k < per_image; ++k) {
        g[k] = -(t[k] * uni - inter * (2.0 * p[k] - t[k])) * inv_u2 *
               inv_images;
      }
    }
  }
  return total * inv_images;
}

inline double jaccard_loss(const Tensor& predictions, const Tensor& targets) {
  return jaccard_loss_with_grad(predictions, targets, nullptr);
}

inline Tensor jaccard_loss_grad(const Tensor& predictions,
                                const Tensor& targets) {
  Tensor grad;
  jaccard_loss_with_grad(predictions, targets, &grad);
  return grad;
}

}  // namespace druseg
