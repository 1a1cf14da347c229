#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "druseg/layers.hpp"

namespace druseg {

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ValueError("gradient_check: eps must lie in [1e-7, 1e-3], got " +
                     std::to_string(eps));
  }
}

inline void check_stochastic_contract(const Layer& layer, Mode mode) {
  if (mode == Mode::kTrain && layer.stochastic() && !layer.frozen()) {
    throw ValueError(
        "gradient_check: stochastic layer in train mode must have a frozen "
        "mask");
  }
}

// Uniform probe coefficients in [-1, 1] defining the scalar loss
// L(y) = sum_i c_i * y_i.
inline Tensor make_probe(const Tensor& like, std::uint64_t probe_seed) {
  Rng probe(probe_seed);
  Tensor c = Tensor::zeros(like.shape());
  for (auto& x : c.values()) x = probe.uniform(-1.0, 1.0);
  return c;
}

inline double probe_loss(const Tensor& y, const Tensor& c) {
  double acc = 0.0;
  const double* yp = y.data();
  const double* cp = c.data();
  for (std::int64_t i = 0; i < y.numel(); ++i) acc += yp[i] * cp[i];
  return acc;
}

}  // namespace detail

// Central-finite-difference check of one layer: compares the analytic
// gradients of L = sum(c * output) against (L(x + eps) - L(x - eps)) / 2eps
// for every input element and every parameter element. Returns the maximum
// guarded relative error.
inline double gradient_check(Layer& layer, const Tensor& input,
                             double eps = 1e-5, Mode mode = Mode::kEval,
                             Rng* rng = nullptr,
                             std::uint64_t probe_seed = 0xC0FFEEULL) {
  detail::check_eps(eps);
  detail::check_stochastic_contract(layer, mode);

  Tensor x = input;
  Tensor y0 = layer.forward(x, mode, rng);
  const Tensor c = detail::make_probe(y0, probe_seed);

  zero_param_grads(layer);
  Tensor gin = layer.backward(c);
  std::vector<ParamRef> refs;
  layer.collect_params("p", refs);
  std::vector<Tensor> analytic_grads;
  analytic_grads.reserve(refs.size());
  for (const auto& r : refs) analytic_grads.push_back(*r.grad);

  const auto loss_at = [&](const Tensor& xx) {
    return detail::probe_loss(layer.forward(xx, mode, rng), c);
  };

  double max_err = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double lp = loss_at(x);
    x[i] = keep - eps;
    const double lm = loss_at(x);
    x[i] = keep;
    const double numeric = (lp - lm) / (2.0 * eps);
    max_err = std::max(max_err, relative_error(gin[i], numeric));
  }
  for (std::size_t pi = 0; pi < refs.size(); ++pi) {
    Tensor& v = *refs[pi].value;
    for (std::int64_t j = 0; j < v.numel(); ++j) {
      const double keep = v[j];
      v[j] = keep + eps;
      const double lp = loss_at(x);
      v[j] = keep - eps;
      const double lm = loss_at(x);
      v[j] = keep;
      const double numeric = (lp - lm) / (2.0 * eps);
      max_err = std::max(max_err, relative_error(analytic_grads[pi][j], numeric));
    }
  }
  return max_err;
}

// Same check through the multi-input entry points of a merge block.
inline double gradient_check_multi(MergeBlock& layer,
                                   const std::vector<Tensor>& inputs,
                                   double eps = 1e-5, Mode mode = Mode::kEval,
                                   Rng* rng = nullptr,
                                   std::uint64_t probe_seed = 0xC0FFEEULL) {
  detail::check_eps(eps);
  detail::check_stochastic_contract(layer, mode);

  std::vector<Tensor> xs = inputs;
  Tensor y0 = layer.forward_multi(xs, mode, rng);
  const Tensor c = detail::make_probe(y0, probe_seed);

  zero_param_grads(layer);
  std::vector<Tensor> gins = layer.backward_multi(c);
  std::vector<ParamRef> refs;
  layer.collect_params("p", refs);
  std::vector<Tensor> analytic_grads;
  for (const auto& r : refs) analytic_grads.push_back(*r.grad);

  const auto loss_at = [&] {
    return detail::probe_loss(layer.forward_multi(xs, mode, rng), c);
  };

  double max_err = 0.0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    for (std::int64_t i = 0; i < xs[t].numel(); ++i) {
      const double keep = xs[t][i];
      xs[t][i] = keep + eps;
      const double lp = loss_at();
      xs[t][i] = keep - eps;
      const double lm = loss_at();
      xs[t][i] = keep;
      const double numeric = (lp - lm) / (2.0 * eps);
      max_err = std::max(max_err, relative_error(gins[t][i], numeric));
    }
  }
  for (std::size_t pi = 0; pi < refs.size(); ++pi) {
    Tensor& v = *refs[pi].value;
    for (std::int64_t j = 0; j < v.numel(); ++j) {
      const double keep = v[j];
      v[j] = keep + eps;
      const double lp = loss_at();
      v[j] = keep - eps;
      const double lm = loss_at();
      v[j] = keep;
      const double numeric = (lp - lm) / (2.0 * eps);
      max_err = std::max(max_err, relative_error(analytic_grads[pi][j], numeric));
    }
  }
  return max_err;
}

struct GradCheckCase {
  std::string name;
  double max_err;
  double threshold;
  bool pass;
};

// One full sweep over every layer type at a given seed. Inputs for layers
// containing rectifiers are drawn away from the kink so the finite
// difference stays on one linear piece.
inline std::vector<GradCheckCase> run_layer_gradient_checks(
    std::uint64_t seed) {
  Rng rng(seed);
  const auto away_from_zero = [&](Tensor& t) {
    for (auto& x : t.values()) {
      x = rng.uniform(0.1, 1.0) * (rng.unit() < 0.5 ? -1.0 : 1.0);
    }
  };
  const auto rand_tensor = [&](std::vector<std::int64_t> shape) {
    Tensor t = Tensor::zeros(shape);
    away_from_zero(t);
    return t;
  };

  std::vector<GradCheckCase> cases;
  const auto record = [&](const std::string& name, double err,
                          double threshold) {
    cases.push_back({name, err, threshold, err < threshold});
  };

  {
    Conv2d layer(2, 3);
    layer.init_params(rng);
    record("conv2d", gradient_check(layer, rand_tensor({2, 2, 5, 5})), 1e-4);
  }
  {
    MaxPool2 layer;
    record("maxpool2", gradient_check(layer, rand_tensor({2, 3, 4, 4})), 1e-4);
  }
  {
    Upsample2Nearest layer;
    record("upsample2_nearest",
           gradient_check(layer, rand_tensor({2, 2, 3, 3})), 1e-4);
  }
  {
    FullyConnected layer(7, 4);
    layer.init_params(rng);
    record("fully_connected", gradient_check(layer, rand_tensor({3, 7})),
           1e-4);
  }
  {
    ReLU layer;
    record("relu", gradient_check(layer, rand_tensor({2, 3, 4, 4})), 1e-4);
  }
  {
    Tanh01 layer;
    Tensor x = Tensor::zeros({2, 3, 4, 4});
    for (auto& v : x.values()) v = rng.uniform(-2.0, 2.0);
    record("tanh01", gradient_check(layer, x), 1e-4);
  }
  {
    Dropout layer(0.5);
    layer.set_freeze_mask(true);
    record("dropout",
           gradient_check(layer, rand_tensor({2, 2, 4, 4}), 1e-5,
                          Mode::kTrain, &rng),
           1e-4);
  }
  {
    GaussianNoise layer(0.025);
    layer.set_freeze_mask(true);
    record("gaussian_noise",
           gradient_check(layer, rand_tensor({2, 2, 4, 4}), 1e-5,
                          Mode::kTrain, &rng),
           1e-4);
  }
  {
    DenseBlock layer(3, 2, 4);
    layer.init_params(rng);
    record("dense_block", gradient_check(layer, rand_tensor({1, 3, 6, 6})),
           1e-4);
  }
  {
    DenseBlock layer(3, 2, 4, /*include_input=*/true);
    layer.init_params(rng);
    record("dense_block_include_input",
           gradient_check(layer, rand_tensor({1, 3, 6, 6})), 1e-4);
  }
  {
    ResidualBlock layer(4);
    layer.init_params(rng);
    record("residual_block", gradient_check(layer, rand_tensor({1, 4, 5, 5})),
           1e-4);
  }
  {
    MergeBlock layer(3, 6, 5);
    layer.init_params(rng);
    std::vector<Tensor> ins = {rand_tensor({1, 2, 4, 4}),
                               rand_tensor({1, 2, 4, 4}),
                               rand_tensor({1, 2, 4, 4})};
    record("merge_block", gradient_check_multi(layer, ins), 1e-4);
  }
  {
    MergeBlock layer(1, 2, 1, /*final_merge=*/true);
    layer.init_params(rng);
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    for (auto& v : x.values()) v = rng.uniform(-2.0, 2.0);
    record("merge_block_final", gradient_check(layer, x), 1e-4);
  }
  {
    ConvPair layer(2, 3);
    layer.init_params(rng);
    record("conv_pair", gradient_check(layer, rand_tensor({1, 2, 5, 5})),
           1e-4);
  }
  return cases;
}

}  // namespace druseg
