#pragma once

// Layer primitives with explicit forward/backward passes. Activations are
// stored as (frames x channels) matrices; a batch of variable-length
// sequences is packed row-wise with segment offsets.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "xvage/error.hpp"
#include "xvage/random.hpp"

namespace xvage {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Offsets = std::vector<Eigen::Index>;

enum class Mode { kTrain, kInfer };

/// A named weight array. Vectors are stored as n x 1 and report a 1-D shape.
template <class T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool trainable = true;
  bool is_vector = false;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols, bool vec, bool train = true)
      : name(std::move(n)),
        value(Mat<T>::Zero(rows, cols)),
        grad(Mat<T>::Zero(rows, cols)),
        trainable(train),
        is_vector(vec) {}

  std::vector<std::uint32_t> shape() const {
    if (is_vector) return {static_cast<std::uint32_t>(value.rows())};
    return {static_cast<std::uint32_t>(value.rows()), static_cast<std::uint32_t>(value.cols())};
  }
  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

template <class T>
using ParamRefs = std::vector<Param<T>*>;

// Uniform in [-bound, bound) from a per-parameter stream.
template <class T>
void fill_uniform(Param<T>& p, double bound, std::uint64_t seed) {
  std::uint64_t state = seed;
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    state = splitmix64(state);
    const double u = static_cast<double>(state >> 11) * 0x1.0p-53;
    p.value.data()[i] = static_cast<T>((2.0 * u - 1.0) * bound);
  }
}

inline std::uint64_t hash_name(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------

/// y = x W + b, W is (in x out).
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, bool bias)
      : weight(name + ".weight", in, out, false), has_bias_(bias) {
    if (bias) this->bias = Param<T>(name + ".bias", out, 1, true);
  }

  int in_dim() const { return static_cast<int>(weight.value.rows()); }
  int out_dim() const { return static_cast<int>(weight.value.cols()); }
  bool has_bias() const { return has_bias_; }

  void init(std::uint64_t seed) {
    fill_uniform(weight, 1.0 / std::sqrt(static_cast<double>(in_dim())), derive_seed(seed, {hash_name(weight.name)}));
    if (has_bias_) bias.value.setZero();
  }

  Mat<T> forward(const Mat<T>& x) {
    if (x.cols() != weight.value.rows())
      throw ShapeError(weight.name + ": expected " + std::to_string(weight.value.rows()) +
                       " input channels, got " + std::to_string(x.cols()));
    x_ = x;
    Mat<T> y = x * weight.value;
    if (has_bias_) y.rowwise() += bias.value.col(0).transpose();
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    weight.grad.noalias() += x_.transpose() * dy;
    if (has_bias_) bias.grad.col(0) += dy.colwise().sum().transpose();
    return dy * weight.value.transpose();
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    if (has_bias_) out.push_back(&bias);
  }

  Param<T> weight;
  Param<T> bias;

 private:
  bool has_bias_ = false;
  Mat<T> x_;
};

/// Per-channel 1-D convolution over time with "same" zero padding inside each
/// sequence. Weight is (channels x kernel).
template <class T>
class DepthwiseConv {
 public:
  DepthwiseConv() = default;
  DepthwiseConv(const std::string& name, int channels, int kernel)
      : weight(name + ".weight", channels, kernel, false) {
    if (kernel % 2 == 0) throw ShapeError(name + ": kernel length must be odd");
  }

  int kernel() const { return static_cast<int>(weight.value.cols()); }

  void init(std::uint64_t seed) {
    fill_uniform(weight, 1.0 / std::sqrt(static_cast<double>(kernel())), derive_seed(seed, {hash_name(weight.name)}));
  }

  Mat<T> forward(const Mat<T>& x, const Offsets& offsets) {
    if (x.cols() != weight.value.rows()) throw ShapeError(weight.name + ": channel mismatch");
    x_ = x;
    offsets_ = offsets;
    Mat<T> y = Mat<T>::Zero(x.rows(), x.cols());
    const int k = kernel(), pad = k / 2;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const Eigen::Index start = offsets[s], len = offsets[s + 1] - offsets[s];
      for (int j = 0; j < k; ++j) {
        const Eigen::Index shift = j - pad;  // y[t] += w[j] * x[t + shift]
        const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
        const Eigen::Index t1 = std::min<Eigen::Index>(len, len - shift);
        if (t1 <= t0) continue;
        y.block(start + t0, 0, t1 - t0, x.cols()) +=
            x.block(start + t0 + shift, 0, t1 - t0, x.cols()) * weight.value.col(j).asDiagonal();
      }
    }
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    Mat<T> dx = Mat<T>::Zero(x_.rows(), x_.cols());
    const int k = kernel(), pad = k / 2;
    for (std::size_t s = 0; s + 1 < offsets_.size(); ++s) {
      const Eigen::Index start = offsets_[s], len = offsets_[s + 1] - offsets_[s];
      for (int j = 0; j < k; ++j) {
        const Eigen::Index shift = j - pad;
        const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
        const Eigen::Index t1 = std::min<Eigen::Index>(len, len - shift);
        if (t1 <= t0) continue;
        auto dyb = dy.block(start + t0, 0, t1 - t0, dy.cols());
        auto xb = x_.block(start + t0 + shift, 0, t1 - t0, x_.cols());
        weight.grad.col(j) += dyb.cwiseProduct(xb).colwise().sum().transpose();
        dx.block(start + t0 + shift, 0, t1 - t0, dx.cols()) += dyb * weight.value.col(j).asDiagonal();
      }
    }
    return dx;
  }

  void collect(ParamRefs<T>& out) { out.push_back(&weight); }

  Param<T> weight;

 private:
  Mat<T> x_;
  Offsets offsets_;
};

/// Batch normalisation over rows (batch x time for convolutional activations,
/// batch for dense ones). Training mode uses batch statistics and updates the
/// running estimates with momentum 0.9.
template <class T>
class BatchNorm {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

  BatchNorm() = default;
  BatchNorm(const std::string& name, int channels)
      : gamma(name + ".gamma", channels, 1, true),
        beta(name + ".beta", channels, 1, true),
        running_mean(name + ".running_mean", channels, 1, true, false),
        running_var(name + ".running_var", channels, 1, true, false) {
    init();
  }

  void init() {
    gamma.value.setOnes();
    beta.value.setZero();
    running_mean.value.setZero();
    running_var.value.setOnes();
  }

  Mat<T> forward(const Mat<T>& x, Mode mode) {
    const auto n = x.rows();
    if (mode == Mode::kInfer) {
      const RowVec<T> inv = (running_var.value.col(0).array() + T(kEps)).rsqrt().transpose();
      Mat<T> y = (x.rowwise() - running_mean.value.col(0).transpose()).array().rowwise() *
                 (inv.array() * gamma.value.col(0).transpose().array());
      y.rowwise() += beta.value.col(0).transpose();
      return y;
    }
    const RowVec<T> mean = x.colwise().mean();
    Mat<T> centered = x.rowwise() - mean;
    const RowVec<T> var = centered.array().square().colwise().mean();
    inv_std_ = (var.array() + T(kEps)).rsqrt();
    xhat_ = centered.array().rowwise() * inv_std_.array();
    Mat<T> y = xhat_.array().rowwise() * gamma.value.col(0).transpose().array();
    y.rowwise() += beta.value.col(0).transpose();

    const T unbias = n > 1 ? T(n) / T(n - 1) : T(1);
    running_mean.value.col(0) = T(kMomentum) * running_mean.value.col(0) + T(1 - kMomentum) * mean.transpose();
    running_var.value.col(0) =
        T(kMomentum) * running_var.value.col(0) + T(1 - kMomentum) * unbias * var.transpose();
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    const T n = T(dy.rows());
    gamma.grad.col(0) += dy.cwiseProduct(xhat_).colwise().sum().transpose();
    beta.grad.col(0) += dy.colwise().sum().transpose();
    const Mat<T> dxhat = dy.array().rowwise() * gamma.value.col(0).transpose().array();
    const RowVec<T> sum_dxhat = dxhat.colwise().sum();
    const RowVec<T> sum_dxhat_xhat = dxhat.cwiseProduct(xhat_).colwise().sum();
    Mat<T> dx = (dxhat * n).rowwise() - sum_dxhat;
    dx -= (xhat_.array().rowwise() * sum_dxhat_xhat.array()).matrix();
    return dx.array().rowwise() * (inv_std_.array() / n);
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
    out.push_back(&running_mean);
    out.push_back(&running_var);
  }

  Param<T> gamma, beta, running_mean, running_var;

 private:
  Mat<T> xhat_;
  RowVec<T> inv_std_;
};

template <class T>
class ReLU {
 public:
  Mat<T> forward(const Mat<T>& x) {
    mask_ = (x.array() > T(0)).template cast<T>();
    return x.cwiseMax(T(0));
  }
  Mat<T> backward(const Mat<T>& dy) const { return dy.cwiseProduct(mask_); }

 private:
  Mat<T> mask_;
};

/// Concatenated per-channel mean and standard deviation over each sequence.
/// The deviation uses the population convention, sqrt(var + 1e-9).
template <class T>
class StatsPooling {
 public:
  static constexpr double kVarEps = 1e-9;

  Mat<T> forward(const Mat<T>& x, const Offsets& offsets) {
    x_ = x;
    offsets_ = offsets;
    const auto batch = static_cast<Eigen::Index>(offsets.size() - 1);
    const auto c = x.cols();
    mean_.resize(batch, c);
    std_.resize(batch, c);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const Eigen::Index start = offsets[b], len = offsets[b + 1] - offsets[b];
      if (len <= 0) throw ShapeError("stats pooling: empty sequence");
      auto seg = x.middleRows(start, len);
      const RowVec<T> mu = seg.colwise().mean();
      const RowVec<T> var = (seg.rowwise() - mu).array().square().colwise().mean();
      mean_.row(b) = mu;
      std_.row(b) = (var.array() + T(kVarEps)).sqrt();
    }
    Mat<T> out(batch, 2 * c);
    out << mean_, std_;
    return out;
  }

  Mat<T> backward(const Mat<T>& dy) const {
    const auto c = x_.cols();
    Mat<T> dx(x_.rows(), c);
    for (Eigen::Index b = 0; b + 1 < static_cast<Eigen::Index>(offsets_.size()); ++b) {
      const Eigen::Index start = offsets_[b], len = offsets_[b + 1] - offsets_[b];
      const RowVec<T> dmean = dy.row(b).head(c) / T(len);
      const RowVec<T> dstd = dy.row(b).tail(c).array() / (std_.row(b).array() * T(len));
      auto seg = x_.middleRows(start, len);
      dx.middleRows(start, len) = ((seg.rowwise() - mean_.row(b)).array().rowwise() * dstd.array()).matrix();
      dx.middleRows(start, len).rowwise() += dmean;
    }
    return dx;
  }

 private:
  Mat<T> x_, mean_, std_;
  Offsets offsets_;
};

}  // namespace xvage
