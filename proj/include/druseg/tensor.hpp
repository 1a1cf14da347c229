#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "druseg/common.hpp"
#include "druseg/rng.hpp"

namespace druseg {

// Hard cap on elements per tensor (2^28 doubles = 2 GiB) so malformed configs
// fail fast instead of exhausting memory.
inline constexpr std::int64_t kTensorElementCap = std::int64_t{1} << 28;

// Dense row-major tensor of doubles, rank 1..4. Rank-4 tensors follow NCHW
// layout. A default-constructed Tensor is the empty sentinel (rank 0).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const std::vector<std::int64_t>& shape) {
    Tensor t;
    t.shape_ = shape;
    t.data_.assign(static_cast<std::size_t>(checked_numel(shape)), 0.0);
    return t;
  }

  static Tensor full(const std::vector<std::int64_t>& shape, double value) {
    Tensor t = zeros(shape);
    t.fill(value);
    return t;
  }

  static Tensor from_values(const std::vector<std::int64_t>& shape,
                            std::vector<double> values) {
    const std::int64_t n = checked_numel(shape);
    if (n != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("from_values: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_string(shape));
    }
    Tensor t;
    t.shape_ = shape;
    t.data_ = std::move(values);
    return t;
  }

  bool empty() const { return shape_.empty(); }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<std::int64_t>& shape() const { return shape_; }

  std::int64_t extent(int axis) const {
    if (axis < 0 || axis >= rank()) {
      throw ShapeError("extent: axis " + std::to_string(axis) +
                       " out of range for rank " + std::to_string(rank()));
    }
    return shape_[static_cast<std::size_t>(axis)];
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Unchecked rank-4 offset; callers guarantee the tensor is rank 4.
  std::int64_t idx4(std::int64_t n, std::int64_t c, std::int64_t h,
                    std::int64_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  double& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    check_index(4, {n, c, h, w});
    return data_[static_cast<std::size_t>(idx4(n, c, h, w))];
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t h,
            std::int64_t w) const {
    check_index(4, {n, c, h, w});
    return data_[static_cast<std::size_t>(idx4(n, c, h, w))];
  }
  double& at(std::int64_t r, std::int64_t c) {
    check_index(2, {r, c});
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    check_index(2, {r, c});
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }
  double& at(std::int64_t i) {
    check_index(1, {i});
    return data_[static_cast<std::size_t>(i)];
  }
  double at(std::int64_t i) const {
    check_index(1, {i});
    return data_[static_cast<std::size_t>(i)];
  }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static std::string shape_string(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << ",";
      os << shape[i];
    }
    os << "]";
    return os.str();
  }
  std::string shape_string() const { return shape_string(shape_); }

 private:
  static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    if (shape.empty() || shape.size() > 4) {
      throw ShapeError("tensor rank must be 1..4, got shape " +
                       shape_string(shape));
    }
    std::int64_t n = 1;
    for (std::int64_t e : shape) {
      if (e < 1) {
        throw ShapeError("tensor extents must be >= 1, got shape " +
                         shape_string(shape));
      }
      if (n > kTensorElementCap / e) {
        throw ShapeError("tensor too large: shape " + shape_string(shape) +
                         " exceeds the element cap");
      }
      n *= e;
    }
    return n;
  }

  void check_index(int want_rank, std::initializer_list<std::int64_t> idx) const {
    if (rank() != want_rank) {
      throw ShapeError("index arity " + std::to_string(want_rank) +
                       " does not match tensor shape " + shape_string());
    }
    int axis = 0;
    for (std::int64_t i : idx) {
      if (i < 0 || i >= shape_[static_cast<std::size_t>(axis)]) {
        throw ShapeError("index " + std::to_string(i) +
                         " out of range on axis " + std::to_string(axis) +
                         " for shape " + shape_string());
      }
      ++axis;
    }
  }

  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

// Concatenate rank-4 tensors along the channel axis. All inputs must agree on
// batch and spatial extents.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("concat_channels: empty input list");
  for (const Tensor& p : parts) {
    if (p.rank() != 4) {
      throw ShapeError("concat_channels: expected rank-4 tensors, got " +
                       p.shape_string());
    }
  }
  const std::int64_t n = parts[0].extent(0);
  const std::int64_t h = parts[0].extent(2);
  const std::int64_t w = parts[0].extent(3);
  std::int64_t total_c = 0;
  for (const Tensor& p : parts) {
    if (p.extent(0) != n || p.extent(2) != h || p.extent(3) != w) {
      throw ShapeError("concat_channels: mismatched batch/spatial extents (" +
                       parts[0].shape_string() + " vs " + p.shape_string() + ")");
    }
    total_c += p.extent(1);
  }
  Tensor out = Tensor::zeros({n, total_c, h, w});
  const std::int64_t plane = h * w;
  for (std::int64_t in = 0; in < n; ++in) {
    std::int64_t c_base = 0;
    for (const Tensor& p : parts) {
      const std::int64_t pc = p.extent(1);
      const double* src = p.data() + in * pc * plane;
      double* dst = out.data() + (in * total_c + c_base) * plane;
      for (std::int64_t i = 0; i < pc * plane; ++i) dst[i] = src[i];
      c_base += pc;
    }
  }
  return out;
}

// Channel range [begin, begin + count) of a rank-4 tensor.
inline Tensor slice_channels(const Tensor& t, std::int64_t begin,
                             std::int64_t count) {
  if (t.rank() != 4) {
    throw ShapeError("slice_channels: expected rank-4 tensor, got " +
                     t.shape_string());
  }
  if (begin < 0 || count < 1 || begin + count > t.extent(1)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of " +
                     std::to_string(t.extent(1)) + " channels");
  }
  const std::int64_t n = t.extent(0), c = t.extent(1);
  const std::int64_t plane = t.extent(2) * t.extent(3);
  Tensor out = Tensor::zeros({n, count, t.extent(2), t.extent(3)});
  for (std::int64_t in = 0; in < n; ++in) {
    const double* src = t.data() + (in * c + begin) * plane;
    double* dst = out.data() + in * count * plane;
    for (std::int64_t i = 0; i < count * plane; ++i) dst[i] = src[i];
  }
  return out;
}

// Add `src` into the channel range [begin, ...) of rank-4 tensor `dst`.
inline void add_into_channels(Tensor& dst, const Tensor& src,
                              std::int64_t begin) {
  if (dst.rank() != 4 || src.rank() != 4) {
    throw ShapeError("add_into_channels: expected rank-4 tensors");
  }
  if (src.extent(0) != dst.extent(0) || src.extent(2) != dst.extent(2) ||
      src.extent(3) != dst.extent(3) ||
      begin + src.extent(1) > dst.extent(1) || begin < 0) {
    throw ShapeError("add_into_channels: " + src.shape_string() +
                     " does not fit into " + dst.shape_string() + " at " +
                     std::to_string(begin));
  }
  const std::int64_t n = dst.extent(0), dc = dst.extent(1), sc = src.extent(1);
  const std::int64_t plane = dst.extent(2) * dst.extent(3);
  for (std::int64_t in = 0; in < n; ++in) {
    const double* s = src.data() + in * sc * plane;
    double* d = dst.data() + (in * dc + begin) * plane;
    for (std::int64_t i = 0; i < sc * plane; ++i) d[i] += s[i];
  }
}

// Rank-2 matrix product [m,k] x [k,n] -> [m,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expected rank-2 tensors, got " +
                     a.shape_string() + " and " + b.shape_string());
  }
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: inner extents disagree (" + a.shape_string() +
                     " x " + b.shape_string() + ")");
  }
  const std::int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out = Tensor::zeros({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a.data()[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// Same data, different shape; element counts must match.
inline Tensor reshape(const Tensor& t, const std::vector<std::int64_t>& shape) {
  Tensor out = Tensor::zeros(shape);
  if (out.numel() != t.numel()) {
    throw ShapeError("reshape: " + t.shape_string() + " has " +
                     std::to_string(t.numel()) + " elements, target " +
                     Tensor::shape_string(shape) + " has " +
                     std::to_string(out.numel()));
  }
  out.values() = t.values();
  return out;
}

// Elementwise sum of two same-shape tensors, in place on `dst`.
inline void add_inplace(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("add_inplace: shape mismatch " + dst.shape_string() +
                     " vs " + src.shape_string());
  }
  double* d = dst.data();
  const double* s = src.data();
  const std::int64_t n = dst.numel();
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

inline void scale_inplace(Tensor& t, double a) {
  for (auto& x : t.values()) x *= a;
}

inline double sum(const Tensor& t) {
  double acc = 0.0;
  for (double x : t.values()) acc += x;
  return acc;
}

// Tensor of i.i.d. gaussian draws. std == 0 fills with the mean exactly and
// consumes no generator state.
inline Tensor sample_gaussian(Rng& rng, const std::vector<std::int64_t>& shape,
                              double mean, double std) {
  Tensor t = Tensor::zeros(shape);
  if (std < 0.0) throw ValueError("sample_gaussian: std must be >= 0");
  if (std == 0.0) {
    t.fill(mean);
    return t;
  }
  for (auto& x : t.values()) x = rng.gaussian(mean, std);
  return t;
}

}  // namespace druseg
