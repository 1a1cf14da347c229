#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "druseg/gradcheck.hpp"
#include "druseg/layers.hpp"
#include "druseg/loss.hpp"

namespace druseg {

enum class Variant { kUnet, kUnetLarge, kDenseResidualUnet };
enum class ScalePreset { kFull, kToy };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kUnet: return "unet";
    case Variant::kUnetLarge: return "unet_large";
    case Variant::kDenseResidualUnet: return "dense_residual_unet";
  }
  throw ValueError("unknown variant");
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "unet") return Variant::kUnet;
  if (s == "unet_large") return Variant::kUnetLarge;
  if (s == "dense_residual_unet") return Variant::kDenseResidualUnet;
  throw ConfigError("unknown model variant '" + s +
                    "' (expected unet, unet_large or dense_residual_unet)");
}

inline const char* scale_name(ScalePreset s) {
  return s == ScalePreset::kFull ? "full" : "toy";
}

inline ScalePreset scale_from_string(const std::string& s) {
  if (s == "full") return ScalePreset::kFull;
  if (s == "toy") return ScalePreset::kToy;
  throw ConfigError("unknown model scale '" + s + "' (expected full or toy)");
}

// Structural description of a network. `stage_filters` drives the plain
// variants; the dense_* / residual / merge fields drive the dense residual
// variant. Presets fill in the reference defaults; every field can be overridden.
struct ModelConfig {
  Variant variant = Variant::kUnet;
  ScalePreset scale = ScalePreset::kFull;
  std::int64_t input_channels = 6;
  std::int64_t input_size = 128;
  std::vector<std::int64_t> stage_filters;  // plain variants
  std::int64_t fc_width = 142;
  std::int64_t dense_depth = 4;             // dense residual variant
  std::vector<std::int64_t> dense_growth;
  bool dense_include_input = false;
  std::int64_t residual_blocks = 4;
  std::int64_t merge_filters = 24;
  double noise_sigma = 0.025;
  double dropout_rate = 0.5;

  static ModelConfig make(Variant variant, ScalePreset scale) {
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.scale = scale;
    const bool full = scale == ScalePreset::kFull;
    cfg.input_size = full ? 128 : 32;
    switch (variant) {
      case Variant::kUnet:
        cfg.stage_filters = full ? std::vector<std::int64_t>{24, 48, 96}
                                  : std::vector<std::int64_t>{8, 16};
        cfg.fc_width = full ? 142 : 32;
        break;
      case Variant::kUnetLarge:
        cfg.stage_filters = full ? std::vector<std::int64_t>{45, 90, 180}
                                  : std::vector<std::int64_t>{12, 24};
        cfg.fc_width = full ? 1450 : 48;
        break;
      case Variant::kDenseResidualUnet:
        cfg.dense_depth = full ? 4 : 2;
        cfg.dense_growth = full ? std::vector<std::int64_t>{24, 48, 96}
                                 : std::vector<std::int64_t>{6, 12};
        cfg.fc_width = full ? 730 : 32;
        cfg.merge_filters = full ? 24 : 8;
        cfg.residual_blocks = 4;
        break;
    }
    return cfg;
  }

  bool dense_residual() const {
    return variant == Variant::kDenseResidualUnet;
  }

  std::int64_t stages() const {
    return static_cast<std::int64_t>(
        dense_residual() ? dense_growth.size() : stage_filters.size());
  }

  // Output channels of the encode/decode block at a stage.
  std::int64_t stage_out_channels(std::int64_t s) const {
    if (dense_residual()) {
      return dense_depth * dense_growth[static_cast<std::size_t>(s)];
    }
    return stage_filters[static_cast<std::size_t>(s)];
  }

  std::int64_t bottleneck_side() const {
    std::int64_t side = input_size;
    for (std::int64_t s = 0; s < stages(); ++s) side /= 2;
    return side;
  }

  std::int64_t bottleneck_volume() const {
    const std::int64_t side = bottleneck_side();
    return stage_out_channels(stages() - 1) * side * side;
  }

  void validate() const {
    if (input_channels < 1) throw ConfigError("model: input_channels must be >= 1");
    if (fc_width < 1) throw ConfigError("model: fc_width must be >= 1");
    const std::int64_t s = stages();
    if (s < 1) throw ConfigError("model: at least one stage is required");
    std::int64_t side = input_size;
    for (std::int64_t i = 0; i < s; ++i) {
      if (side < 2 || side % 2 != 0) {
        throw ConfigError("model: input_size " + std::to_string(input_size) +
                          " is not divisible by 2^" + std::to_string(s) +
                          " (stage " + std::to_string(i) + " would see side " +
                          std::to_string(side) + ")");
      }
      side /= 2;
    }
    if (dense_residual()) {
      if (dense_depth < 1) throw ConfigError("model: dense_depth must be >= 1");
      for (std::int64_t g : dense_growth) {
        if (g < 1) throw ConfigError("model: dense growth rates must be >= 1");
      }
      if (residual_blocks < 1) {
        throw ConfigError("model: residual_blocks must be >= 1");
      }
      if (merge_filters < 1) {
        throw ConfigError("model: merge_filters must be >= 1");
      }
      if (dense_include_input) {
        throw ConfigError(
            "model: dense_include_input is not supported inside networks");
      }
    } else {
      for (std::int64_t f : stage_filters) {
        if (f < 1) throw ConfigError("model: stage filters must be >= 1");
      }
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw ConfigError("model: dropout_rate must be in [0, 1)");
    }
    if (noise_sigma < 0.0) {
      throw ConfigError("model: noise_sigma must be >= 0");
    }
  }
};

namespace detail {

inline std::int64_t conv_param_count(std::int64_t in_c, std::int64_t out_c) {
  return out_c * in_c * 9 + out_c;
}

inline std::int64_t dense_block_param_count(std::int64_t in_c,
                                            std::int64_t depth,
                                            std::int64_t growth) {
  std::int64_t total = 0;
  for (std::int64_t i = 0; i < depth; ++i) {
    total += conv_param_count(in_c + i * growth, growth);
  }
  return total;
}

}  // namespace detail

// Parameter count from the structural arithmetic alone; no tensors are
// allocated, so full-scale configurations are cheap to query.
inline std::int64_t planned_param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t s = cfg.stages();
  std::int64_t total = 0;
  // Encoder.
  std::int64_t prev_c = cfg.input_channels;
  for (std::int64_t i = 0; i < s; ++i) {
    if (cfg.dense_residual()) {
      total += detail::dense_block_param_count(
          prev_c, cfg.dense_depth, cfg.dense_growth[static_cast<std::size_t>(i)]);
    } else {
      const std::int64_t f = cfg.stage_filters[static_cast<std::size_t>(i)];
      total += detail::conv_param_count(prev_c, f);
      total += detail::conv_param_count(f, f);
    }
    prev_c = cfg.stage_out_channels(i);
  }
  // Bottleneck pair.
  const std::int64_t volume = cfg.bottleneck_volume();
  total += cfg.fc_width * volume + cfg.fc_width;  // in -> fc_width
  total += volume * cfg.fc_width + volume;        // fc_width -> out
  // Decoder, deepest stage first.
  std::int64_t below_c = cfg.stage_out_channels(s - 1);
  for (std::int64_t i = s - 1; i >= 0; --i) {
    const std::int64_t concat_c = below_c + cfg.stage_out_channels(i);
    if (cfg.dense_residual()) {
      total += detail::dense_block_param_count(
          concat_c, cfg.dense_depth,
          cfg.dense_growth[static_cast<std::size_t>(i)]);
    } else {
      const std::int64_t f = cfg.stage_filters[static_cast<std::size_t>(i)];
      total += detail::conv_param_count(concat_c, f);
      total += detail::conv_param_count(f, f);
    }
    below_c = cfg.stage_out_channels(i);
  }
  // Head.
  if (cfg.dense_residual()) {
    const std::int64_t merged_in =
        cfg.dense_depth * cfg.dense_growth[0];  // last decode block's convs
    total += detail::conv_param_count(merged_in, cfg.merge_filters);
    total += cfg.residual_blocks * 2 *
             detail::conv_param_count(cfg.merge_filters, cfg.merge_filters);
    total += detail::conv_param_count(
        cfg.residual_blocks * cfg.merge_filters, 1);
  } else {
    total += detail::conv_param_count(cfg.stage_filters[0], 1);
  }
  return total;
}

// Encoder-decoder segmentation network covering all three variants.
//
// Encoder stage s: [gaussian noise ->] block -> [dropout ->] maxpool, where
// the block is a conv pair (plain variants) or a dense block, noise applies
// to every dense-residual encode stage and dropout only to its last one.
// Bottleneck: flatten -> dense -> ReLU -> [dropout ->] dense -> reshape.
// Decoder stage s: upsample -> concat skip -> block [-> dropout].
// Head: 1-channel conv + tanh01 (plain) or merge -> residual chain -> final
// merge (dense residual).
class Network {
 public:
  explicit Network(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }

  // He-uniform inits everywhere except the final convolution before tanh01,
  // which uses Glorot-uniform; applied in registry order off one stream.
  void init_params(Rng& rng) {
    const std::int64_t s = cfg_.stages();
    for (std::int64_t i = 0; i < s; ++i) {
      stages_[static_cast<std::size_t>(i)].enc_block->init_params(rng);
    }
    fc1_->init_params(rng);
    fc2_->init_params(rng);
    for (std::int64_t i = s - 1; i >= 0; --i) {
      stages_[static_cast<std::size_t>(i)].dec_block->init_params(rng);
    }
    if (cfg_.dense_residual()) {
      merge1_->init_params(rng);
      for (auto& r : residuals_) r->init_params(rng);
      merge2_->init_params(rng);
    } else {
      final_conv_->init_params_glorot(rng);
    }
  }

  Tensor forward(const Tensor& batch, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) {
    if (batch.rank() != 4) {
      throw ShapeError("network: expected a rank-4 batch, got " +
                       batch.shape_string());
    }
    if (batch.extent(1) != cfg_.input_channels) {
      throw ShapeError("network: batch has " +
                       std::to_string(batch.extent(1)) +
                       " channels, config expects " +
                       std::to_string(cfg_.input_channels));
    }
    if (batch.extent(2) != cfg_.input_size ||
        batch.extent(3) != cfg_.input_size) {
      throw ShapeError("network: batch spatial extents " +
                       batch.shape_string() + " do not match input_size " +
                       std::to_string(cfg_.input_size));
    }
    const std::int64_t s = cfg_.stages();
    last_batch_ = batch.extent(0);
    Tensor x = batch;
    for (std::int64_t i = 0; i < s; ++i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      if (st.noise) x = st.noise->forward(x, mode, rng);
      x = st.enc_block->forward(x, mode, rng);
      if (st.enc_dropout) x = st.enc_dropout->forward(x, mode, rng);
      st.skip = x;
      x = st.pool->forward(x, mode, rng);
    }
    const std::int64_t side = cfg_.bottleneck_side();
    const std::int64_t deep_c = cfg_.stage_out_channels(s - 1);
    x = reshape(x, {last_batch_, deep_c * side * side});
    x = fc1_->forward(x, mode, rng);
    x = fc_relu_->forward(x, mode, rng);
    if (fc_dropout_) x = fc_dropout_->forward(x, mode, rng);
    x = fc2_->forward(x, mode, rng);
    x = reshape(x, {last_batch_, deep_c, side, side});
    for (std::int64_t i = s - 1; i >= 0; --i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      x = st.up->forward(x, mode, rng);
      x = concat_channels({x, st.skip});
      x = st.dec_block->forward(x, mode, rng);
      if (st.dec_dropout) x = st.dec_dropout->forward(x, mode, rng);
    }
    if (!cfg_.dense_residual()) {
      return final_act_->forward(final_conv_->forward(x, mode, rng), mode,
                                 rng);
    }
    auto* last = static_cast<DenseBlock*>(stages_[0].dec_block.get());
    Tensor mi =
        slice_channels(x, last->conv_out_base(), last->conv_out_channels());
    Tensor r = merge1_->forward(mi, mode, rng);
    std::vector<Tensor> res_outs;
    for (auto& rb : residuals_) {
      r = rb->forward(r, mode, rng);
      res_outs.push_back(r);
    }
    return merge2_->forward(concat_channels(res_outs), mode, rng);
  }

  // Gradient of a scalar loss with respect to every parameter (stored in the
  // registry gradients, zeroed first) and to the network input (returned).
  Tensor backward(const Tensor& grad_output) {
    if (last_batch_ == 0) {
      throw StateError("network: backward called without a cached forward");
    }
    zero_grads();
    const std::int64_t s = cfg_.stages();
    Tensor g;
    if (cfg_.dense_residual()) {
      Tensor gm = merge2_->backward(grad_output);
      const std::int64_t mf = cfg_.merge_filters;
      Tensor carry;
      for (std::int64_t i = static_cast<std::int64_t>(residuals_.size()) - 1;
           i >= 0; --i) {
        Tensor gi = slice_channels(gm, i * mf, mf);
        if (!carry.empty()) add_inplace(gi, carry);
        carry = residuals_[static_cast<std::size_t>(i)]->backward(gi);
      }
      Tensor g_mi = merge1_->backward(carry);
      auto* last = static_cast<DenseBlock*>(stages_[0].dec_block.get());
      g = Tensor::zeros({last_batch_, last->out_channels(),
                         cfg_.input_size, cfg_.input_size});
      add_into_channels(g, g_mi, last->conv_out_base());
    } else {
      g = final_conv_->backward(final_act_->backward(grad_output));
    }
    // Decoder ran deepest-last in index order s-1..0, so walk 0..s-1 here.
    std::vector<Tensor> skip_grads(static_cast<std::size_t>(s));
    for (std::int64_t i = 0; i < s; ++i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      if (st.dec_dropout) g = st.dec_dropout->backward(g);
      g = st.dec_block->backward(g);
      const std::int64_t skip_c = cfg_.stage_out_channels(i);
      const std::int64_t below_c = g.extent(1) - skip_c;
      Tensor g_below = slice_channels(g, 0, below_c);
      skip_grads[static_cast<std::size_t>(i)] =
          slice_channels(g, below_c, skip_c);
      g = st.up->backward(g_below);
    }
    const std::int64_t side = cfg_.bottleneck_side();
    const std::int64_t deep_c = cfg_.stage_out_channels(s - 1);
    g = reshape(g, {last_batch_, deep_c * side * side});
    g = fc2_->backward(g);
    if (fc_dropout_) g = fc_dropout_->backward(g);
    g = fc_relu_->backward(g);
    g = fc1_->backward(g);
    g = reshape(g, {last_batch_, deep_c, side, side});
    for (std::int64_t i = s - 1; i >= 0; --i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      g = st.pool->backward(g);
      add_inplace(g, skip_grads[static_cast<std::size_t>(i)]);
      if (st.enc_dropout) g = st.enc_dropout->backward(g);
      g = st.enc_block->backward(g);
      if (st.noise) g = st.noise->backward(g);
    }
    return g;
  }

  // Stable parameter registry: encoder stages, bottleneck pair, decoder
  // stages in execution order, head.
  std::vector<ParamRef>& params() { return registry_; }

  std::int64_t count_params() const {
    std::int64_t total = 0;
    for (const auto& r : registry_) total += r.value->numel();
    return total;
  }

  void zero_grads() {
    for (auto& r : registry_) r.grad->fill(0.0);
  }

  void zero_velocity() {
    for (auto& r : registry_) r.velocity->fill(0.0);
  }

  // Flat copies of all parameters (or momentum buffers) in registry order.
  std::vector<double> snapshot_params() const { return snapshot(false); }
  std::vector<double> snapshot_velocity() const { return snapshot(true); }

  void restore_params(const std::vector<double>& flat) {
    restore(flat, false);
  }
  void restore_velocity(const std::vector<double>& flat) {
    restore(flat, true);
  }

  // Ordered coarse structure, usable for structural assertions.
  std::vector<std::string> block_kinds() const {
    std::vector<std::string> kinds;
    const std::int64_t s = cfg_.stages();
    for (std::int64_t i = 0; i < s; ++i) {
      const Stage& st = stages_[static_cast<std::size_t>(i)];
      if (st.noise) kinds.push_back("gaussian_noise");
      kinds.push_back(st.enc_block->kind());
      if (st.enc_dropout) kinds.push_back("dropout");
      kinds.push_back("maxpool2");
    }
    kinds.push_back("flatten");
    kinds.push_back("fully_connected");
    kinds.push_back("relu");
    if (fc_dropout_) kinds.push_back("dropout");
    kinds.push_back("fully_connected");
    kinds.push_back("reshape");
    for (std::int64_t i = s - 1; i >= 0; --i) {
      const Stage& st = stages_[static_cast<std::size_t>(i)];
      kinds.push_back("upsample2_nearest");
      kinds.push_back("concat");
      kinds.push_back(st.dec_block->kind());
      if (st.dec_dropout) kinds.push_back("dropout");
    }
    if (cfg_.dense_residual()) {
      kinds.push_back("merge_block");
      for (std::size_t i = 0; i < residuals_.size(); ++i) {
        kinds.push_back("residual_block");
      }
      kinds.push_back("merge_block");
    } else {
      kinds.push_back("conv2d");
      kinds.push_back("tanh01");
    }
    return kinds;
  }

  // Freeze or release dropout masks and noise draws (for gradient checks).
  void set_freeze_stochastic(bool on) {
    for (Layer* l : all_layers_) l->set_freeze_mask(on);
  }

 private:
  std::vector<double> snapshot(bool velocity) const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(count_params()));
    for (const auto& r : registry_) {
      const Tensor& t = velocity ? *r.velocity : *r.value;
      flat.insert(flat.end(), t.data(), t.data() + t.numel());
    }
    return flat;
  }

  void restore(const std::vector<double>& flat, bool velocity) {
    if (static_cast<std::int64_t>(flat.size()) != count_params()) {
      throw StateError("network: flat buffer holds " +
                       std::to_string(flat.size()) + " values, expected " +
                       std::to_string(count_params()));
    }
    std::size_t pos = 0;
    for (auto& r : registry_) {
      Tensor& t = velocity ? *r.velocity : *r.value;
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                flat.begin() + static_cast<std::ptrdiff_t>(pos + t.numel()),
                t.data());
      pos += static_cast<std::size_t>(t.numel());
    }
  }

  struct Stage {
    std::unique_ptr<GaussianNoise> noise;
    std::unique_ptr<Layer> enc_block;
    std::unique_ptr<Dropout> enc_dropout;
    std::unique_ptr<MaxPool2> pool;
    std::unique_ptr<Upsample2Nearest> up;
    std::unique_ptr<Layer> dec_block;
    std::unique_ptr<Dropout> dec_dropout;
    Tensor skip;
  };

  void build() {
    const std::int64_t s = cfg_.stages();
    const bool dru = cfg_.dense_residual();
    stages_.resize(static_cast<std::size_t>(s));
    std::int64_t prev_c = cfg_.input_channels;
    for (std::int64_t i = 0; i < s; ++i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      if (dru) {
        st.noise = std::make_unique<GaussianNoise>(cfg_.noise_sigma);
        st.enc_block = std::make_unique<DenseBlock>(
            prev_c, cfg_.dense_depth,
            cfg_.dense_growth[static_cast<std::size_t>(i)]);
        if (i == s - 1) {
          st.enc_dropout = std::make_unique<Dropout>(cfg_.dropout_rate);
        }
      } else {
        st.enc_block = std::make_unique<ConvPair>(
            prev_c, cfg_.stage_filters[static_cast<std::size_t>(i)]);
      }
      st.pool = std::make_unique<MaxPool2>();
      prev_c = cfg_.stage_out_channels(i);
    }
    const std::int64_t volume = cfg_.bottleneck_volume();
    fc1_ = std::make_unique<FullyConnected>(volume, cfg_.fc_width);
    fc2_ = std::make_unique<FullyConnected>(cfg_.fc_width, volume);
    fc_relu_ = std::make_unique<ReLU>();
    if (dru) fc_dropout_ = std::make_unique<Dropout>(cfg_.dropout_rate);
    std::int64_t below_c = cfg_.stage_out_channels(s - 1);
    for (std::int64_t i = s - 1; i >= 0; --i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      st.up = std::make_unique<Upsample2Nearest>();
      const std::int64_t concat_c = below_c + cfg_.stage_out_channels(i);
      if (dru) {
        st.dec_block = std::make_unique<DenseBlock>(
            concat_c, cfg_.dense_depth,
            cfg_.dense_growth[static_cast<std::size_t>(i)]);
        st.dec_dropout = std::make_unique<Dropout>(cfg_.dropout_rate);
      } else {
        st.dec_block = std::make_unique<ConvPair>(
            concat_c, cfg_.stage_filters[static_cast<std::size_t>(i)]);
      }
      below_c = cfg_.stage_out_channels(i);
    }
    if (dru) {
      const std::int64_t merged_in = cfg_.dense_depth * cfg_.dense_growth[0];
      merge1_ = std::make_unique<MergeBlock>(cfg_.dense_depth, merged_in,
                                            cfg_.merge_filters);
      for (std::int64_t i = 0; i < cfg_.residual_blocks; ++i) {
        residuals_.push_back(
            std::make_unique<ResidualBlock>(cfg_.merge_filters));
      }
      merge2_ = std::make_unique<MergeBlock>(
          cfg_.residual_blocks, cfg_.residual_blocks * cfg_.merge_filters, 1,
          /*final_merge=*/true);
    } else {
      final_conv_ = std::make_unique<Conv2d>(cfg_.stage_filters[0], 1);
      final_act_ = std::make_unique<Tanh01>();
    }
    build_registry();
  }

  void build_registry() {
    registry_.clear();
    all_layers_.clear();
    const std::int64_t s = cfg_.stages();
    for (std::int64_t i = 0; i < s; ++i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      const std::string name = "enc" + std::to_string(i);
      st.enc_block->collect_params(name, registry_);
      for (Layer* l :
           {static_cast<Layer*>(st.noise.get()),
            static_cast<Layer*>(st.enc_block.get()),
            static_cast<Layer*>(st.enc_dropout.get()),
            static_cast<Layer*>(st.pool.get())}) {
        if (l) all_layers_.push_back(l);
      }
    }
    fc1_->collect_params("fc1", registry_);
    fc2_->collect_params("fc2", registry_);
    all_layers_.push_back(fc1_.get());
    all_layers_.push_back(fc_relu_.get());
    if (fc_dropout_) all_layers_.push_back(fc_dropout_.get());
    all_layers_.push_back(fc2_.get());
    for (std::int64_t i = s - 1; i >= 0; --i) {
      Stage& st = stages_[static_cast<std::size_t>(i)];
      st.dec_block->collect_params("dec" + std::to_string(i), registry_);
      for (Layer* l :
           {static_cast<Layer*>(st.up.get()),
            static_cast<Layer*>(st.dec_block.get()),
            static_cast<Layer*>(st.dec_dropout.get())}) {
        if (l) all_layers_.push_back(l);
      }
    }
    if (cfg_.dense_residual()) {
      merge1_->collect_params("merge1", registry_);
      all_layers_.push_back(merge1_.get());
      for (std::size_t i = 0; i < residuals_.size(); ++i) {
        residuals_[i]->collect_params("res" + std::to_string(i), registry_);
        all_layers_.push_back(residuals_[i].get());
      }
      merge2_->collect_params("merge2", registry_);
      all_layers_.push_back(merge2_.get());
    } else {
      final_conv_->collect_params("final", registry_);
      all_layers_.push_back(final_conv_.get());
      all_layers_.push_back(final_act_.get());
    }
  }

  ModelConfig cfg_;
  std::vector<Stage> stages_;
  std::unique_ptr<FullyConnected> fc1_, fc2_;
  std::unique_ptr<ReLU> fc_relu_;
  std::unique_ptr<Dropout> fc_dropout_;
  std::unique_ptr<Conv2d> final_conv_;
  std::unique_ptr<Tanh01> final_act_;
  std::unique_ptr<MergeBlock> merge1_;
  std::vector<std::unique_ptr<ResidualBlock>> residuals_;
  std::unique_ptr<MergeBlock> merge2_;
  std::vector<ParamRef> registry_;
  std::vector<Layer*> all_layers_;
  std::int64_t last_batch_ = 0;
};

inline Network build_unet(const ModelConfig& cfg) {
  if (cfg.dense_residual()) {
    throw ConfigError("build_unet: config describes the dense residual variant");
  }
  return Network(cfg);
}

inline Network build_dense_residual_unet(const ModelConfig& cfg) {
  if (!cfg.dense_residual()) {
    throw ConfigError(
        "build_dense_residual_unet: config describes a plain variant");
  }
  return Network(cfg);
}

struct NetworkGradCheckResult {
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
};

// Whole-network gradient check against the segmentation loss: analytic
// parameter and input gradients versus central differences on a
// deterministic (eval-mode) forward, sampled by even strides.
inline NetworkGradCheckResult network_gradient_check(
    Network& net, std::int64_t max_params = 220, double eps = 1e-5,
    std::uint64_t seed = 99, std::int64_t max_inputs = 24) {
  detail::check_eps(eps);
  Rng rng(seed);
  const auto& cfg = net.config();
  Tensor x = Tensor::zeros({2, cfg.input_channels, cfg.input_size,
                            cfg.input_size});
  for (auto& v : x.values()) v = rng.uniform(-1.5, 1.5);
  Tensor t = Tensor::zeros({2, 1, cfg.input_size, cfg.input_size});
  for (auto& v : t.values()) v = rng.unit() < 0.5 ? 1.0 : 0.0;

  Tensor y = net.forward(x, Mode::kEval, nullptr);
  Tensor gl = jaccard_loss_grad(y, t);
  Tensor gx = net.backward(gl);
  auto& refs = net.params();
  std::vector<Tensor> analytic;
  analytic.reserve(refs.size());
  for (auto& r : refs) analytic.push_back(*r.grad);

  std::int64_t total = 0;
  for (auto& r : refs) total += r.value->numel();
  const std::int64_t want = std::min<std::int64_t>(max_params, total);

  NetworkGradCheckResult result;
  for (std::int64_t k = 0; k < want; ++k) {
    // Even stride over the flat parameter index space.
    std::int64_t flat = k * total / want;
    std::size_t pi = 0;
    while (flat >= refs[pi].value->numel()) {
      flat -= refs[pi].value->numel();
      ++pi;
    }
    Tensor& v = *refs[pi].value;
    const double keep = v[flat];
    v[flat] = keep + eps;
    const double lp = jaccard_loss(net.forward(x, Mode::kEval, nullptr), t);
    v[flat] = keep - eps;
    const double lm = jaccard_loss(net.forward(x, Mode::kEval, nullptr), t);
    v[flat] = keep;
    const double numeric = (lp - lm) / (2.0 * eps);
    result.max_rel_err = std::max(
        result.max_rel_err, relative_error(analytic[pi][flat], numeric));
    ++result.checked;
  }
  const std::int64_t in_want = std::min<std::int64_t>(max_inputs, x.numel());
  for (std::int64_t k = 0; k < in_want; ++k) {
    const std::int64_t flat = k * x.numel() / in_want;
    const double keep = x[flat];
    x[flat] = keep + eps;
    const double lp = jaccard_loss(net.forward(x, Mode::kEval, nullptr), t);
    x[flat] = keep - eps;
    const double lm = jaccard_loss(net.forward(x, Mode::kEval, nullptr), t);
    x[flat] = keep;
    const double numeric = (lp - lm) / (2.0 * eps);
    result.max_rel_err =
        std::max(result.max_rel_err, relative_error(gx[flat], numeric));
    ++result.checked;
  }
  return result;
}

}  // namespace druseg
