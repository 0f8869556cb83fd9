#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace liaf {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Dense NCHW tensor. Storage is contiguous so each image can be viewed as a
// row-major [C, H*W] matrix, which is what the convolution GEMMs consume.
template <typename Scalar>
class Tensor4 {
 public:
  using ImageMap = Eigen::Map<MatrixX<Scalar>>;
  using ConstImageMap = Eigen::Map<const MatrixX<Scalar>>;

  Tensor4() = default;
  Tensor4(Index n, Index c, Index h, Index w, Scalar fill = Scalar(0))
      : n_(n), c_(c), h_(h), w_(w), data_(VectorX<Scalar>::Constant(n * c * h * w, fill)) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw std::invalid_argument("Tensor4: negative dimension");
  }

  static Tensor4 zeros_like(const Tensor4& other) { return Tensor4(other.n_, other.c_, other.h_, other.w_); }

  Index n() const { return n_; }
  Index c() const { return c_; }
  Index h() const { return h_; }
  Index w() const { return w_; }
  Index size() const { return data_.size(); }
  Index plane() const { return h_ * w_; }

  Scalar& operator()(Index n, Index c, Index y, Index x) { return data_[((n * c_ + c) * h_ + y) * w_ + x]; }
  Scalar operator()(Index n, Index c, Index y, Index x) const { return data_[((n * c_ + c) * h_ + y) * w_ + x]; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar* image_data(Index n) { return data_.data() + n * c_ * h_ * w_; }
  const Scalar* image_data(Index n) const { return data_.data() + n * c_ * h_ * w_; }

  ImageMap image(Index n) { return ImageMap(image_data(n), c_, h_ * w_); }
  ConstImageMap image(Index n) const { return ConstImageMap(image_data(n), c_, h_ * w_); }

  VectorX<Scalar>& flat() { return data_; }
  const VectorX<Scalar>& flat() const { return data_; }

  bool same_shape(const Tensor4& o) const { return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }
  bool all_finite() const { return data_.allFinite(); }

  std::string shape_string() const {
    return "[" + std::to_string(n_) + ", " + std::to_string(c_) + ", " + std::to_string(h_) + ", " +
           std::to_string(w_) + "]";
  }

  template <typename Other>
  Tensor4<Other> cast() const {
    Tensor4<Other> out(n_, c_, h_, w_);
    out.flat() = data_.template cast<Other>();
    return out;
  }

 private:
  Index n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  VectorX<Scalar> data_;
};

// A neck-level feature map together with its stride in image pixels.
template <typename Scalar>
struct FeatureMap {
  Tensor4<Scalar> values;
  int level_stride = 1;

  Index n() const { return values.n(); }
  Index c() const { return values.c(); }
  Index h() const { return values.h(); }
  Index w() const { return values.w(); }

  void validate() const {
    if (values.n() < 1 || values.c() < 1 || values.h() < 1 || values.w() < 1)
      throw std::invalid_argument("FeatureMap: empty dimension " + values.shape_string());
    if (level_stride < 1) throw std::invalid_argument("FeatureMap: stride must be >= 1");
    if (!values.all_finite()) throw std::invalid_argument("FeatureMap: non-finite entries");
  }
};

}  // namespace liaf
