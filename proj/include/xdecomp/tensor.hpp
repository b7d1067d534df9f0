#pragma once

// Dense row-major tensor value type. Rank up to 4 with (batch, channel,
// height, width) ordering for the network ops; lower ranks are used for
// biases and flat images. Float is the working precision; double
// instantiations exist for gradient checking.

#include <array>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace xdecomp {

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    if (shape_.empty() || shape_.size() > 4)
      throw std::invalid_argument("tensor rank must be 1..4");
    std::int64_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
      n *= d;
    }
    data_.assign(std::size_t(n), T(0));
  }

  TensorT(std::vector<int> shape, std::vector<T> data)
      : TensorT(std::move(shape)) {
    if (data.size() != data_.size())
      throw std::invalid_argument("tensor data size does not match shape");
    data_ = std::move(data);
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, T v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int dim(int i) const { return shape_.at(std::size_t(i)); }
  std::int64_t numel() const { return std::int64_t(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  T& operator[](std::int64_t i) { return data_[std::size_t(i)]; }
  const T& operator[](std::int64_t i) const { return data_[std::size_t(i)]; }

  // Rank-checked element access for tests and glue code; hot loops index raw
  // data with locally computed strides.
  T& at4(int b, int c, int h, int w) {
    return data_[std::size_t(((std::int64_t(b) * shape_[1] + c) * shape_[2] + h) *
                                 shape_[3] +
                             w)];
  }
  const T& at4(int b, int c, int h, int w) const {
    return const_cast<TensorT*>(this)->at4(b, c, h, w);
  }
  T& at2(int h, int w) { return data_[std::size_t(std::int64_t(h) * shape_[1] + w)]; }
  const T& at2(int h, int w) const { return const_cast<TensorT*>(this)->at2(h, w); }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[std::int64_t(i)] = U(data_[i]);
    return out;
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;

// XDT1 container: magic "XDT1", u32 rank, u32 dims..., f32 little-endian
// payload in row-major order.
void write_xdt1(std::ostream& os, const Tensor& t);
Tensor read_xdt1(std::istream& is);
void save_xdt1(const std::filesystem::path& path, const Tensor& t);
Tensor load_xdt1(const std::filesystem::path& path);

}  // namespace xdecomp
