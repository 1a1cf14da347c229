#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "druseg/common.hpp"
#include "druseg/rng.hpp"
#include "druseg/tensor.hpp"

namespace druseg {

// A named view of one learnable tensor plus its gradient and momentum buffer.
struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
  Tensor* velocity;
};

// Base class for differentiable layers. forward caches whatever backward
// needs; backward consumes the cache, accumulates parameter gradients (+=)
// and returns the gradient with respect to the layer input.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual const char* kind() const = 0;
  virtual Tensor forward(const Tensor& input, Mode mode = Mode::kEval,
                         Rng* rng = nullptr) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect_params(const std::string& prefix,
                              std::vector<ParamRef>& out) {
    (void)prefix;
    (void)out;
  }
  // True when train-mode output depends on random draws.
  virtual bool stochastic() const { return false; }
  // Stochastic layers can freeze their last drawn mask/noise for replay.
  virtual void set_freeze_mask(bool on) { (void)on; }
  virtual bool frozen() const { return true; }
  virtual void init_params(Rng& rng) { (void)rng; }
};

inline void zero_param_grads(Layer& layer) {
  std::vector<ParamRef> refs;
  layer.collect_params("p", refs);
  for (auto& r : refs) r.grad->fill(0.0);
}

namespace detail {

inline void require_forward(bool have, const char* who) {
  if (!have) {
    throw StateError(std::string(who) + ": backward called without a cached forward");
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* who) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(who) + ": gradient shape " + a.shape_string() +
                     " does not match forward output " + b.shape_string());
  }
}

}  // namespace detail

// 3x3 convolution, stride 1, zero padding 1; spatial extents are preserved.
class Conv2d : public Layer {
 public:
  Conv2d(std::int64_t in_channels, std::int64_t out_channels)
      : in_c_(in_channels), out_c_(out_channels) {
    if (in_channels < 1 || out_channels < 1) {
      throw ValueError("conv2d: channel counts must be >= 1");
    }
    w_ = Tensor::zeros({out_c_, in_c_, 3, 3});
    b_ = Tensor::zeros({out_c_});
    gw_ = Tensor::zeros({out_c_, in_c_, 3, 3});
    gb_ = Tensor::zeros({out_c_});
    vw_ = Tensor::zeros({out_c_, in_c_, 3, 3});
    vb_ = Tensor::zeros({out_c_});
  }

  const char* kind() const override { return "conv2d"; }
  std::int64_t in_channels() const { return in_c_; }
  std::int64_t out_channels() const { return out_c_; }
  Tensor& weights() { return w_; }
  Tensor& bias() { return b_; }

  // He-uniform: +-sqrt(6 / fan_in), fan_in = in_channels * 9.
  void init_params(Rng& rng) override {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_c_ * 9));
    for (auto& x : w_.values()) x = rng.uniform(-limit, limit);
    b_.fill(0.0);
  }

  // Glorot-uniform: +-sqrt(6 / (fan_in + fan_out)); used before squashing
  // activations.
  void init_params_glorot(Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_c_ * 9 + out_c_ * 9));
    for (auto& x : w_.values()) x = rng.uniform(-limit, limit);
    b_.fill(0.0);
  }

  Tensor forward(const Tensor& input, Mode = Mode::kEval,
                 Rng* = nullptr) override {
    if (input.rank() != 4) {
      throw ShapeError("conv2d: expected rank-4 input, got " +
                       input.shape_string());
    }
    if (input.extent(1) != in_c_) {
      throw ShapeError("conv2d: input has " + std::to_string(input.extent(1)) +
                       " channels, layer expects " + std::to_string(in_c_));
    }
    input_ = input;
    have_forward_ = true;
    const std::int64_t n = input.extent(0), h = input.extent(2),
                       w = input.extent(3);
    Tensor out = Tensor::zeros({n, out_c_, h, w});
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t oc = 0; oc < out_c_; ++oc) {
        double* op = out.data() + (in * out_c_ + oc) * h * w;
        const double bias = b_[oc];
        for (std::int64_t i = 0; i < h * w; ++i) op[i] = bias;
        for (std::int64_t ic = 0; ic < in_c_; ++ic) {
          const double* ip = input.data() + (in * in_c_ + ic) * h * w;
          const double* wp = w_.data() + (oc * in_c_ + ic) * 9;
          accumulate_taps(op, ip, wp, h, w);
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "conv2d");
    const std::int64_t n = input_.extent(0), h = input_.extent(2),
                       w = input_.extent(3);
    if (grad_out.rank() != 4 || grad_out.extent(0) != n ||
        grad_out.extent(1) != out_c_ || grad_out.extent(2) != h ||
        grad_out.extent(3) != w) {
      throw ShapeError("conv2d: gradient shape " + grad_out.shape_string() +
                       " does not match forward output");
    }
    Tensor gin = Tensor::zeros(input_.shape());
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t oc = 0; oc < out_c_; ++oc) {
        const double* gp = grad_out.data() + (in * out_c_ + oc) * h * w;
        double gb_acc = 0.0;
        for (std::int64_t i = 0; i < h * w; ++i) gb_acc += gp[i];
        gb_[oc] += gb_acc;
        for (std::int64_t ic = 0; ic < in_c_; ++ic) {
          const double* ip = input_.data() + (in * in_c_ + ic) * h * w;
          double* gip = gin.data() + (in * in_c_ + ic) * h * w;
          double* gwp = gw_.data() + (oc * in_c_ + ic) * 9;
          const double* wp = w_.data() + (oc * in_c_ + ic) * 9;
          backward_taps(gp, ip, gip, gwp, wp, h, w);
        }
      }
    }
    return gin;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override {
    out.push_back({prefix + ".w", &w_, &gw_, &vw_});
    out.push_back({prefix + ".b", &b_, &gb_, &vb_});
  }

 private:
  // out[y, x] += w[dy, dx] * in[y + dy - 1, x + dx - 1] over valid sources.
  static void accumulate_taps(double* op, const double* ip, const double* wp,
                              std::int64_t h, std::int64_t w) {
    for (int dy = 0; dy < 3; ++dy) {
      const std::int64_t y0 = std::max<std::int64_t>(0, 1 - dy);
      const std::int64_t y1 = std::min<std::int64_t>(h, h + 1 - dy);
      for (int dx = 0; dx < 3; ++dx) {
        const double wv = wp[dy * 3 + dx];
        if (wv == 0.0) continue;
        const std::int64_t x0 = std::max<std::int64_t>(0, 1 - dx);
        const std::int64_t x1 = std::min<std::int64_t>(w, w + 1 - dx);
        for (std::int64_t y = y0; y < y1; ++y) {
          const double* src = ip + (y + dy - 1) * w + (x0 + dx - 1);
          double* dst = op + y * w + x0;
          for (std::int64_t i = 0; i < x1 - x0; ++i) dst[i] += wv * src[i];
        }
      }
    }
  }

  // For one (oc, ic) pair: accumulate dL/dw taps and scatter dL/dinput.
  static void backward_taps(const double* gp, const double* ip, double* gip,
                            double* gwp, const double* wp, std::int64_t h,
                            std::int64_t w) {
    for (int dy = 0; dy < 3; ++dy) {
      const std::int64_t y0 = std::max<std::int64_t>(0, 1 - dy);
      const std::int64_t y1 = std::min<std::int64_t>(h, h + 1 - dy);
      for (int dx = 0; dx < 3; ++dx) {
        const std::int64_t x0 = std::max<std::int64_t>(0, 1 - dx);
        const std::int64_t x1 = std::min<std::int64_t>(w, w + 1 - dx);
        const double wv = wp[dy * 3 + dx];
        double gw_acc = 0.0;
        for (std::int64_t y = y0; y < y1; ++y) {
          const double* src = ip + (y + dy - 1) * w + (x0 + dx - 1);
          double* gdst = gip + (y + dy - 1) * w + (x0 + dx - 1);
          const double* g = gp + y * w + x0;
          for (std::int64_t i = 0; i < x1 - x0; ++i) {
            gw_acc += g[i] * src[i];
            gdst[i] += g[i] * wv;
          }
        }
        gwp[dy * 3 + dx] += gw_acc;
      }
    }
  }

  std::int64_t in_c_, out_c_;
  Tensor w_, b_, gw_, gb_, vw_, vb_;
  Tensor input_;
  bool have_forward_ = false;
};

// 2x2 max pooling with stride 2. Ties resolve to the first maximum in
// row-major window order; the winner's position is kept for backward.
class MaxPool2 : public Layer {
 public:
  const char* kind() const override { return "maxpool2"; }

  Tensor forward(const Tensor& input, Mode = Mode::kEval,
                 Rng* = nullptr) override {
    if (input.rank() != 4) {
      throw ShapeError("maxpool2: expected rank-4 input, got " +
                       input.shape_string());
    }
    const std::int64_t h = input.extent(2), w = input.extent(3);
    if (h % 2 != 0 || w % 2 != 0) {
      throw ShapeError("maxpool2: spatial extents must be even, got " +
                       input.shape_string());
    }
    in_shape_ = input.shape();
    const std::int64_t n = input.extent(0), c = input.extent(1);
    Tensor out = Tensor::zeros({n, c, h / 2, w / 2});
    argmax_.assign(static_cast<std::size_t>(out.numel()), 0);
    std::int64_t o = 0;
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t ic = 0; ic < c; ++ic) {
        const double* ip = input.data() + (in * c + ic) * h * w;
        for (std::int64_t y = 0; y < h; y += 2) {
          for (std::int64_t x = 0; x < w; x += 2) {
            double best = ip[y * w + x];
            int best_k = 0;
            for (int k = 1; k < 4; ++k) {
              const double v = ip[(y + k / 2) * w + x + k % 2];
              if (v > best) {
                best = v;
                best_k = k;
              }
            }
            out[o] = best;
            argmax_[static_cast<std::size_t>(o)] = best_k;
            ++o;
          }
        }
      }
    }
    have_forward_ = true;
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "maxpool2");
    const std::int64_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2],
                       w = in_shape_[3];
    if (grad_out.rank() != 4 || grad_out.extent(0) != n ||
        grad_out.extent(1) != c || grad_out.extent(2) != h / 2 ||
        grad_out.extent(3) != w / 2) {
      throw ShapeError("maxpool2: gradient shape " + grad_out.shape_string() +
                       " does not match forward output");
    }
    Tensor gin = Tensor::zeros(in_shape_);
    std::int64_t o = 0;
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t ic = 0; ic < c; ++ic) {
        double* gip = gin.data() + (in * c + ic) * h * w;
        for (std::int64_t y = 0; y < h; y += 2) {
          for (std::int64_t x = 0; x < w; x += 2) {
            const int k = argmax_[static_cast<std::size_t>(o)];
            gip[(y + k / 2) * w + x + k % 2] += grad_out[o];
            ++o;
          }
        }
      }
    }
    return gin;
  }

 private:
  std::vector<std::int64_t> in_shape_;
  std::vector<int> argmax_;
  bool have_forward_ = false;
};

// Nearest-neighbour 2x upsampling: each input pixel becomes a 2x2 block.
class Upsample2Nearest : public Layer {
 public:
  const char* kind() const override { return "upsample2_nearest"; }

  Tensor forward(const Tensor& input, Mode = Mode::kEval,
                 Rng* = nullptr) override {
    if (input.rank() != 4) {
      throw ShapeError("upsample2_nearest: expected rank-4 input, got " +
                       input.shape_string());
    }
    in_shape_ = input.shape();
    have_forward_ = true;
    const std::int64_t n = input.extent(0), c = input.extent(1),
                       h = input.extent(2), w = input.extent(3);
    Tensor out = Tensor::zeros({n, c, h * 2, w * 2});
    for (std::int64_t p = 0; p < n * c; ++p) {
      const double* ip = input.data() + p * h * w;
      double* op = out.data() + p * 4 * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const double v = ip[y * w + x];
          double* base = op + 2 * y * 2 * w + 2 * x;
          base[0] = v;
          base[1] = v;
          base[2 * w] = v;
          base[2 * w + 1] = v;
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "upsample2_nearest");
    const std::int64_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2],
                       w = in_shape_[3];
    if (grad_out.rank() != 4 || grad_out.extent(0) != n ||
        grad_out.extent(1) != c || grad_out.extent(2) != 2 * h ||
        grad_out.extent(3) != 2 * w) {
      throw ShapeError("upsample2_nearest: gradient shape " +
                       grad_out.shape_string() +
                       " does not match forward output");
    }
    Tensor gin = Tensor::zeros(in_shape_);
    for (std::int64_t p = 0; p < n * c; ++p) {
      const double* gp = grad_out.data() + p * 4 * h * w;
      double* gip = gin.data() + p * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const double* base = gp + 2 * y * 2 * w + 2 * x;
          gip[y * w + x] = base[0] + base[1] + base[2 * w] + base[2 * w + 1];
        }
      }
    }
    return gin;
  }

 private:
  std::vector<std::int64_t> in_shape_;
  bool have_forward_ = false;
};

// Dense layer on rank-2 input [batch, in_width]: out = input * W^T + bias.
class FullyConnected : public Layer {
 public:
  FullyConnected(std::int64_t in_width, std::int64_t out_width)
      : in_w_(in_width), out_w_(out_width) {
    if (in_width < 1 || out_width < 1) {
      throw ValueError("fully_connected: widths must be >= 1");
    }
    w_ = Tensor::zeros({out_w_, in_w_});
    b_ = Tensor::zeros({out_w_});
    gw_ = Tensor::zeros({out_w_, in_w_});
    gb_ = Tensor::zeros({out_w_});
    vw_ = Tensor::zeros({out_w_, in_w_});
    vb_ = Tensor::zeros({out_w_});
  }

  const char* kind() const override { return "fully_connected"; }
  std::int64_t in_width() const { return in_w_; }
  std::int64_t out_width() const { return out_w_; }
  Tensor& weights() { return w_; }
  Tensor& bias() { return b_; }

  void init_params(Rng& rng) override {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_w_));
    for (auto& x : w_.values()) x = rng.uniform(-limit, limit);
    b_.fill(0.0);
  }

  Tensor forward(const Tensor& input, Mode = Mode::kEval,
                 Rng* = nullptr) override {
    if (input.rank() != 2) {
      throw ShapeError("fully_connected: expected rank-2 input, got " +
                       input.shape_string());
    }
    if (input.extent(1) != in_w_) {
      throw ShapeError("fully_connected: input width " +
                       std::to_string(input.extent(1)) + ", layer expects " +
                       std::to_string(in_w_));
    }
    input_ = input;
    have_forward_ = true;
    const std::int64_t n = input.extent(0);
    Tensor out = Tensor::zeros({n, out_w_});
    for (std::int64_t in = 0; in < n; ++in) {
      const double* xp = input.data() + in * in_w_;
      double* op = out.data() + in * out_w_;
      for (std::int64_t o = 0; o < out_w_; ++o) {
        const double* wp = w_.data() + o * in_w_;
        double acc = b_[o];
        for (std::int64_t k = 0; k < in_w_; ++k) acc += wp[k] * xp[k];
        op[o] = acc;
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "fully_connected");
    const std::int64_t n = input_.extent(0);
    if (grad_out.rank() != 2 || grad_out.extent(0) != n ||
        grad_out.extent(1) != out_w_) {
      throw ShapeError("fully_connected: gradient shape " +
                       grad_out.shape_string() +
                       " does not match forward output");
    }
    Tensor gin = Tensor::zeros(input_.shape());
    for (std::int64_t in = 0; in < n; ++in) {
      const double* xp = input_.data() + in * in_w_;
      const double* gp = grad_out.data() + in * out_w_;
      double* gxp = gin.data() + in * in_w_;
      for (std::int64_t o = 0; o < out_w_; ++o) {
        const double g = gp[o];
        gb_[o] += g;
        if (g == 0.0) continue;
        double* gwp = gw_.data() + o * in_w_;
        const double* wp = w_.data() + o * in_w_;
        for (std::int64_t k = 0; k < in_w_; ++k) {
          gwp[k] += g * xp[k];
          gxp[k] += g * wp[k];
        }
      }
    }
    return gin;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override {
    out.push_back({prefix + ".w", &w_, &gw_, &vw_});
    out.push_back({prefix + ".b", &b_, &gb_, &vb_});
  }

 private:
  std::int64_t in_w_, out_w_;
  Tensor w_, b_, gw_, gb_, vw_, vb_;
  Tensor input_;
  bool have_forward_ = false;
};

// Rectifier; the subgradient at exactly 0 is taken as 0.
class ReLU : public Layer {
 public:
  const char* kind() const override { return "relu"; }

  Tensor forward(const Tensor& input, Mode = Mode::kEval,
                 Rng* = nullptr) override {
    input_ = input;
    have_forward_ = true;
    Tensor out = input;
    for (auto& x : out.values()) x = x > 0.0 ? x : 0.0;
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "relu");
    detail::require_same_shape(grad_out, input_, "relu");
    Tensor gin = grad_out;
    const double* xp = input_.data();
    double* gp = gin.data();
    for (std::int64_t i = 0; i < gin.numel(); ++i) {
      if (xp[i] <= 0.0) gp[i] = 0.0;
    }
    return gin;
  }

 private:
  Tensor input_;
  bool have_forward_ = false;
};

// Squash to (0, 1): y = (tanh(x) + 1) / 2, derivative (1 - tanh(x)^2) / 2.
class Tanh01 : public Layer {
 public:
  const char* kind() const override { return "tanh01"; }

  Tensor forward(const Tensor& input, Mode = Mode::kEval,
                 Rng* = nullptr) override {
    tanh_ = input;
    for (auto& x : tanh_.values()) x = std::tanh(x);
    have_forward_ = true;
    Tensor out = tanh_;
    for (auto& x : out.values()) x = 0.5 * (x + 1.0);
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "tanh01");
    detail::require_same_shape(grad_out, tanh_, "tanh01");
    Tensor gin = grad_out;
    const double* tp = tanh_.data();
    double* gp = gin.data();
    for (std::int64_t i = 0; i < gin.numel(); ++i) {
      gp[i] *= 0.5 * (1.0 - tp[i] * tp[i]);
    }
    return gin;
  }

 private:
  Tensor tanh_;
  bool have_forward_ = false;
};

// Inverted dropout: in train mode each element is zeroed with probability
// `rate` and survivors are scaled by 1/(1-rate); eval mode is the identity.
class Dropout : public Layer {
 public:
  explicit Dropout(double rate) : rate_(rate) {
    if (!(rate >= 0.0 && rate < 1.0)) {
      throw ValueError("dropout: rate must be in [0, 1), got " +
                       std::to_string(rate));
    }
  }

  const char* kind() const override { return "dropout"; }
  double rate() const { return rate_; }
  bool stochastic() const override { return rate_ > 0.0; }
  void set_freeze_mask(bool on) override { freeze_ = on; }
  bool frozen() const override { return freeze_; }

  Tensor forward(const Tensor& input, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) override {
    last_mode_ = mode;
    have_forward_ = true;
    if (mode == Mode::kEval || rate_ == 0.0) return input;
    const bool reuse = freeze_ && mask_.same_shape(input) && !mask_.empty();
    if (!reuse) {
      if (rng == nullptr) {
        throw StateError("dropout: train-mode forward needs a generator");
      }
      const double keep_scale = 1.0 / (1.0 - rate_);
      mask_ = Tensor::zeros(input.shape());
      for (auto& m : mask_.values()) {
        m = rng->unit() < rate_ ? 0.0 : keep_scale;
      }
    }
    Tensor out = input;
    const double* mp = mask_.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) op[i] *= mp[i];
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "dropout");
    if (last_mode_ == Mode::kEval || rate_ == 0.0) return grad_out;
    detail::require_same_shape(grad_out, mask_, "dropout");
    Tensor gin = grad_out;
    const double* mp = mask_.data();
    double* gp = gin.data();
    for (std::int64_t i = 0; i < gin.numel(); ++i) gp[i] *= mp[i];
    return gin;
  }

 private:
  double rate_;
  Tensor mask_;
  bool freeze_ = false;
  Mode last_mode_ = Mode::kEval;
  bool have_forward_ = false;
};

// Additive gaussian noise, applied in train mode only.
class GaussianNoise : public Layer {
 public:
  explicit GaussianNoise(double sigma) : sigma_(sigma) {
    if (sigma < 0.0) {
      throw ValueError("gaussian_noise: sigma must be >= 0, got " +
                       std::to_string(sigma));
    }
  }

  const char* kind() const override { return "gaussian_noise"; }
  double sigma() const { return sigma_; }
  bool stochastic() const override { return sigma_ > 0.0; }
  void set_freeze_mask(bool on) override { freeze_ = on; }
  bool frozen() const override { return freeze_; }

  Tensor forward(const Tensor& input, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) override {
    have_forward_ = true;
    if (mode == Mode::kEval || sigma_ == 0.0) return input;
    const bool reuse = freeze_ && noise_.same_shape(input) && !noise_.empty();
    if (!reuse) {
      if (rng == nullptr) {
        throw StateError("gaussian_noise: train-mode forward needs a generator");
      }
      noise_ = sample_gaussian(*rng, input.shape(), 0.0, sigma_);
    }
    Tensor out = input;
    add_inplace(out, noise_);
    return out;
  }

  // Additive noise does not alter gradients.
  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "gaussian_noise");
    return grad_out;
  }

 private:
  double sigma_;
  Tensor noise_;
  bool freeze_ = false;
  bool have_forward_ = false;
};

// Densely connected convolution block. Convolution i consumes the channel
// concatenation of the block input and all previous conv outputs, produces
// `growth` channels, and is followed by ReLU. The block output concatenates
// the conv outputs only, unless include_input is set.
class DenseBlock : public Layer {
 public:
  DenseBlock(std::int64_t in_channels, std::int64_t depth, std::int64_t growth,
             bool include_input = false)
      : in_c_(in_channels), depth_(depth), growth_(growth),
        include_input_(include_input) {
    if (depth < 1) throw ValueError("dense_block: depth must be >= 1");
    if (growth < 1) throw ValueError("dense_block: growth must be >= 1");
    for (std::int64_t i = 0; i < depth_; ++i) {
      convs_.push_back(std::make_unique<Conv2d>(in_c_ + i * growth_, growth_));
    }
  }

  const char* kind() const override { return "dense_block"; }
  std::int64_t depth() const { return depth_; }
  std::int64_t growth() const { return growth_; }
  bool include_input() const { return include_input_; }
  std::int64_t out_channels() const {
    return (include_input_ ? in_c_ : 0) + depth_ * growth_;
  }
  // Channel range of the concatenated conv outputs within the block output.
  std::int64_t conv_out_base() const { return include_input_ ? in_c_ : 0; }
  std::int64_t conv_out_channels() const { return depth_ * growth_; }
  Conv2d& conv(std::int64_t i) { return *convs_[static_cast<std::size_t>(i)]; }

  void init_params(Rng& rng) override {
    for (auto& c : convs_) c->init_params(rng);
  }

  Tensor forward(const Tensor& input, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) override {
    if (input.rank() != 4 || input.extent(1) != in_c_) {
      throw ShapeError("dense_block: expected rank-4 input with " +
                       std::to_string(in_c_) + " channels, got " +
                       input.shape_string());
    }
    input_shape_ = input.shape();
    outs_.clear();
    Tensor carry = input;  // concat(input, out_0, ..., out_{i-1})
    for (std::int64_t i = 0; i < depth_; ++i) {
      Tensor pre = convs_[static_cast<std::size_t>(i)]->forward(carry, mode, rng);
      for (auto& x : pre.values()) x = x > 0.0 ? x : 0.0;
      outs_.push_back(pre);
      if (i + 1 < depth_) carry = concat_channels({carry, pre});
    }
    have_forward_ = true;
    std::vector<Tensor> parts;
    if (include_input_) parts.push_back(input);
    for (const auto& o : outs_) parts.push_back(o);
    return concat_channels(parts);
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "dense_block");
    const std::int64_t n = input_shape_[0], h = input_shape_[2],
                       w = input_shape_[3];
    if (grad_out.rank() != 4 || grad_out.extent(0) != n ||
        grad_out.extent(1) != out_channels() || grad_out.extent(2) != h ||
        grad_out.extent(3) != w) {
      throw ShapeError("dense_block: gradient shape " +
                       grad_out.shape_string() +
                       " does not match forward output");
    }
    Tensor g_input = Tensor::zeros(input_shape_);
    if (include_input_) {
      add_inplace(g_input, slice_channels(grad_out, 0, in_c_));
    }
    std::vector<Tensor> g_outs;
    for (std::int64_t i = 0; i < depth_; ++i) {
      g_outs.push_back(
          slice_channels(grad_out, conv_out_base() + i * growth_, growth_));
    }
    for (std::int64_t i = depth_ - 1; i >= 0; --i) {
      Tensor g = g_outs[static_cast<std::size_t>(i)];
      // ReLU mask: post-activation output is > 0 iff pre-activation was.
      const double* op = outs_[static_cast<std::size_t>(i)].data();
      double* gp = g.data();
      for (std::int64_t k = 0; k < g.numel(); ++k) {
        if (op[k] <= 0.0) gp[k] = 0.0;
      }
      Tensor d = convs_[static_cast<std::size_t>(i)]->backward(g);
      // d covers concat(input, out_0..out_{i-1}); fan the slices back out.
      add_inplace(g_input, slice_channels(d, 0, in_c_));
      for (std::int64_t j = 0; j < i; ++j) {
        add_inplace(g_outs[static_cast<std::size_t>(j)],
                    slice_channels(d, in_c_ + j * growth_, growth_));
      }
    }
    return g_input;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override {
    for (std::int64_t i = 0; i < depth_; ++i) {
      convs_[static_cast<std::size_t>(i)]->collect_params(
          prefix + ".conv" + std::to_string(i), out);
    }
  }

 private:
  std::int64_t in_c_, depth_, growth_;
  bool include_input_;
  std::vector<std::unique_ptr<Conv2d>> convs_;
  std::vector<Tensor> outs_;  // post-ReLU conv outputs
  std::vector<std::int64_t> input_shape_;
  bool have_forward_ = false;
};

// Residual convolution block: out = ReLU(input + conv2(ReLU(conv1(input)))).
// Channel count is preserved.
class ResidualBlock : public Layer {
 public:
  explicit ResidualBlock(std::int64_t channels)
      : channels_(channels), conv1_(channels, channels),
        conv2_(channels, channels) {}

  const char* kind() const override { return "residual_block"; }
  std::int64_t channels() const { return channels_; }
  Conv2d& conv1() { return conv1_; }
  Conv2d& conv2() { return conv2_; }

  void init_params(Rng& rng) override {
    conv1_.init_params(rng);
    conv2_.init_params(rng);
  }

  Tensor forward(const Tensor& input, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) override {
    if (input.rank() != 4 || input.extent(1) != channels_) {
      throw ShapeError("residual_block: expected rank-4 input with " +
                       std::to_string(channels_) + " channels, got " +
                       input.shape_string());
    }
    Tensor a = conv1_.forward(input, mode, rng);
    for (auto& x : a.values()) x = x > 0.0 ? x : 0.0;
    mid_ = a;
    Tensor b = conv2_.forward(a, mode, rng);
    add_inplace(b, input);
    for (auto& x : b.values()) x = x > 0.0 ? x : 0.0;
    out_ = b;
    have_forward_ = true;
    return b;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "residual_block");
    detail::require_same_shape(grad_out, out_, "residual_block");
    Tensor g = grad_out;
    {
      const double* op = out_.data();
      double* gp = g.data();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        if (op[i] <= 0.0) gp[i] = 0.0;
      }
    }
    Tensor g_mid = conv2_.backward(g);
    {
      const double* mp = mid_.data();
      double* gp = g_mid.data();
      for (std::int64_t i = 0; i < g_mid.numel(); ++i) {
        if (mp[i] <= 0.0) gp[i] = 0.0;
      }
    }
    Tensor g_in = conv1_.backward(g_mid);
    add_inplace(g_in, g);  // identity branch
    return g_in;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override {
    conv1_.collect_params(prefix + ".conv1", out);
    conv2_.collect_params(prefix + ".conv2", out);
  }

 private:
  std::int64_t channels_;
  Conv2d conv1_, conv2_;
  Tensor mid_, out_;
  bool have_forward_ = false;
};

// Merge block: channel-concatenate z inputs, then one 3x3 convolution and an
// activation (ReLU normally; the final merge of a network uses tanh01).
class MergeBlock : public Layer {
 public:
  MergeBlock(std::int64_t arity, std::int64_t in_channels_total,
             std::int64_t out_channels, bool final_merge = false)
      : arity_(arity), conv_(in_channels_total, out_channels),
        final_(final_merge) {
    if (arity < 1) throw ValueError("merge_block: arity must be >= 1");
  }

  const char* kind() const override { return "merge_block"; }
  std::int64_t arity() const { return arity_; }
  bool final_merge() const { return final_; }
  Conv2d& conv() { return conv_; }

  void init_params(Rng& rng) override {
    if (final_) {
      conv_.init_params_glorot(rng);
    } else {
      conv_.init_params(rng);
    }
  }

  // Single-tensor entry point for pre-concatenated input.
  Tensor forward(const Tensor& input, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) override {
    Tensor a = conv_.forward(input, mode, rng);
    have_forward_ = true;
    if (final_) return tanh_.forward(a, mode, rng);
    return relu_.forward(a, mode, rng);
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "merge_block");
    Tensor g = final_ ? tanh_.backward(grad_out) : relu_.backward(grad_out);
    return conv_.backward(g);
  }

  // Multi-input entry point matching the block's declared arity.
  Tensor forward_multi(const std::vector<Tensor>& inputs,
                       Mode mode = Mode::kEval, Rng* rng = nullptr) {
    if (static_cast<std::int64_t>(inputs.size()) != arity_) {
      throw ShapeError("merge_block: expected " + std::to_string(arity_) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
    part_channels_.clear();
    for (const auto& t : inputs) {
      if (t.rank() != 4) {
        throw ShapeError("merge_block: expected rank-4 inputs");
      }
      part_channels_.push_back(t.extent(1));
    }
    return forward(concat_channels(inputs), mode, rng);
  }

  std::vector<Tensor> backward_multi(const Tensor& grad_out) {
    if (part_channels_.empty()) {
      throw StateError("merge_block: backward_multi without forward_multi");
    }
    Tensor g = backward(grad_out);
    std::vector<Tensor> parts;
    std::int64_t base = 0;
    for (std::int64_t c : part_channels_) {
      parts.push_back(slice_channels(g, base, c));
      base += c;
    }
    return parts;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override {
    conv_.collect_params(prefix + ".conv", out);
  }

 private:
  std::int64_t arity_;
  Conv2d conv_;
  bool final_;
  ReLU relu_;
  Tanh01 tanh_;
  std::vector<std::int64_t> part_channels_;
  bool have_forward_ = false;
};

// Two 3x3 convolutions, each followed by ReLU: the standard encoder/decoder
// stage of the plain variants.
class ConvPair : public Layer {
 public:
  ConvPair(std::int64_t in_channels, std::int64_t out_channels)
      : conv1_(in_channels, out_channels), conv2_(out_channels, out_channels) {}

  const char* kind() const override { return "conv_pair"; }
  std::int64_t out_channels() const { return conv2_.out_channels(); }
  Conv2d& conv1() { return conv1_; }
  Conv2d& conv2() { return conv2_; }

  void init_params(Rng& rng) override {
    conv1_.init_params(rng);
    conv2_.init_params(rng);
  }

  Tensor forward(const Tensor& input, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) override {
    Tensor a = relu1_.forward(conv1_.forward(input, mode, rng), mode, rng);
    have_forward_ = true;
    return relu2_.forward(conv2_.forward(a, mode, rng), mode, rng);
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_forward(have_forward_, "conv_pair");
    Tensor g = conv2_.backward(relu2_.backward(grad_out));
    return conv1_.backward(relu1_.backward(g));
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override {
    conv1_.collect_params(prefix + ".conv1", out);
    conv2_.collect_params(prefix + ".conv2", out);
  }

 private:
  Conv2d conv1_, conv2_;
  ReLU relu1_, relu2_;
  bool have_forward_ = false;
};

}  // namespace druseg
