#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kflo/errors.hpp"

namespace kflo {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array with an explicit shape. Channels precede spatial axes
// ([batch, channels, spatial...]) everywhere in the library.
template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <std::integral... Index>
  T& at(Index... index) {
    return data_[offset({static_cast<std::size_t>(index)...})];
  }
  template <std::integral... Index>
  const T& at(Index... index) const {
    return data_[offset({static_cast<std::size_t>(index)...})];
  }

  // Same data viewed under a new shape of equal size.
  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                           shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw DimensionError("index rank " + std::to_string(index.size()) +
                           " does not match tensor rank " +
                           std::to_string(shape_.size()));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= shape_[axis]) {
        throw DimensionError("index " + std::to_string(i) + " out of range on axis " +
                             std::to_string(axis));
      }
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <std::floating_point To, std::floating_point From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> data(t.data().begin(), t.data().end());
  return BasicTensor<To>(t.shape(), std::move(data));
}

// Throws InputError naming `context` when a tensor holds NaN or Inf.
template <std::floating_point T>
void check_finite(const BasicTensor<T>& t, const std::string& context) {
  if (!t.all_finite()) throw InputError("non-finite value in " + context);
}

// Active in debug builds only; ops call it on their outputs.
template <std::floating_point T>
void debug_check_finite([[maybe_unused]] const BasicTensor<T>& t,
                        [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  check_finite(t, std::string("output of ") + op);
#endif
}

// Sliding-window properties of a 2D filtering layer. Padding is zero padding.
struct ConvGeometry {
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
  std::array<std::size_t, 2> dilation{1, 1};
  std::size_t groups = 1;

  static ConvGeometry trivial() { return {}; }

  // floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1; throws when the
  // window does not fit.
  std::size_t output_extent(std::size_t in, std::size_t k, std::size_t axis) const {
    if (stride[axis] == 0 || dilation[axis] == 0 || k == 0) {
      throw DimensionError("stride, dilation and kernel extent must be positive");
    }
    const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * padding[axis]) -
                                static_cast<std::ptrdiff_t>(dilation[axis] * (k - 1)) - 1;
    if (span < 0) {
      throw DimensionError("kernel extent " + std::to_string(k) +
                           " does not fit padded input extent on spatial axis " +
                           std::to_string(axis));
    }
    return static_cast<std::size_t>(span) / stride[axis] + 1;
  }

  bool operator==(const ConvGeometry&) const = default;
};

namespace detail {

inline void expect_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) +
                         ", got " + shape_string(s));
  }
}

inline void expect_axis(std::size_t got, std::size_t want, const char* axis) {
  if (got != want) {
    throw DimensionError(std::string("mismatch on axis ") + axis + ": " +
                         std::to_string(got) + " vs " + std::to_string(want));
  }
}

struct ConvDims {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, ch_per_group, kh, kw;
  std::size_t out_h, out_w, out_per_group;
};

inline ConvDims conv_dims(const Shape& in, const Shape& k, const ConvGeometry& g) {
  expect_rank(in, 4, "conv2d input");
  expect_rank(k, 4, "conv2d kernel");
  if (g.groups == 0) throw DimensionError("groups must be positive");
  ConvDims d{};
  d.batch = in[0];
  d.in_ch = in[1];
  d.height = in[2];
  d.width = in[3];
  d.out_ch = k[0];
  d.ch_per_group = k[1];
  d.kh = k[2];
  d.kw = k[3];
  if (d.in_ch % g.groups != 0) {
    throw DimensionError("input channels " + std::to_string(d.in_ch) +
                         " not divisible by groups " + std::to_string(g.groups));
  }
  if (d.out_ch % g.groups != 0) {
    throw DimensionError("output channels " + std::to_string(d.out_ch) +
                         " not divisible by groups " + std::to_string(g.groups));
  }
  expect_axis(d.ch_per_group, d.in_ch / g.groups, "kernel input channels");
  d.out_h = g.output_extent(d.height, d.kh, 0);
  d.out_w = g.output_extent(d.width, d.kw, 1);
  d.out_per_group = d.out_ch / g.groups;
  return d;
}

template <std::floating_point T>
BasicTensor<T> narrow(const Shape& shape, const std::vector<double>& acc) {
  BasicTensor<T> out(shape);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
  return out;
}

}  // namespace detail

// Direct convolution. Each output element is accumulated in double and
// rounded once.
template <std::floating_point T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const ConvGeometry& geom) {
  const auto d = detail::conv_dims(input.shape(), kernel.shape(), geom);
  BasicTensor<T> out({d.batch, d.out_ch, d.out_h, d.out_w});
  const T* x = input.ptr();
  const T* k = kernel.ptr();
  T* y = out.ptr();
  const auto sh = static_cast<std::ptrdiff_t>(geom.stride[0]);
  const auto sw = static_cast<std::ptrdiff_t>(geom.stride[1]);
  const auto ph = static_cast<std::ptrdiff_t>(geom.padding[0]);
  const auto pw = static_cast<std::ptrdiff_t>(geom.padding[1]);
  const auto dh = static_cast<std::ptrdiff_t>(geom.dilation[0]);
  const auto dw = static_cast<std::ptrdiff_t>(geom.dilation[1]);
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);

  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
      const std::size_t first_in = (oc / d.out_per_group) * d.ch_per_group;
      const T* k_oc = k + oc * d.ch_per_group * d.kh * d.kw;
      for (std::size_t oh = 0; oh < d.out_h; ++oh) {
        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
          double acc = 0.0;
          const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh) * sh - ph;
          const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(ow) * sw - pw;
          for (std::size_t ic = 0; ic < d.ch_per_group; ++ic) {
            const T* x_c = x + ((b * d.in_ch) + first_in + ic) * d.height * d.width;
            const T* k_c = k_oc + ic * d.kh * d.kw;
            for (std::size_t m = 0; m < d.kh; ++m) {
              const std::ptrdiff_t ih = h0 + static_cast<std::ptrdiff_t>(m) * dh;
              if (ih < 0 || ih >= H) continue;
              const T* x_row = x_c + ih * W;
              const T* k_row = k_c + m * d.kw;
              for (std::size_t n = 0; n < d.kw; ++n) {
                const std::ptrdiff_t iw = w0 + static_cast<std::ptrdiff_t>(n) * dw;
                if (iw < 0 || iw >= W) continue;
                acc += static_cast<double>(k_row[n]) * static_cast<double>(x_row[iw]);
              }
            }
          }
          y[((b * d.out_ch + oc) * d.out_h + oh) * d.out_w + ow] = static_cast<T>(acc);
        }
      }
    }
  }
  debug_check_finite(out, "conv2d");
  return out;
}

// d(loss)/d(input) of conv2d given d(loss)/d(output).
template <std::floating_point T>
BasicTensor<T> conv2d_grad_input(const BasicTensor<T>& grad_out,
                                 const BasicTensor<T>& kernel, const Shape& input_shape,
                                 const ConvGeometry& geom) {
  const auto d = detail::conv_dims(input_shape, kernel.shape(), geom);
  detail::expect_rank(grad_out.shape(), 4, "conv2d output gradient");
  std::vector<double> gx(shape_size(input_shape), 0.0);
  const T* gy = grad_out.ptr();
  const T* k = kernel.ptr();
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
      const std::size_t first_in = (oc / d.out_per_group) * d.ch_per_group;
      for (std::size_t oh = 0; oh < d.out_h; ++oh) {
        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
          const double g = gy[((b * d.out_ch + oc) * d.out_h + oh) * d.out_w + ow];
          if (g == 0.0) continue;
          const auto h0 = static_cast<std::ptrdiff_t>(oh * geom.stride[0]) -
                          static_cast<std::ptrdiff_t>(geom.padding[0]);
          const auto w0 = static_cast<std::ptrdiff_t>(ow * geom.stride[1]) -
                          static_cast<std::ptrdiff_t>(geom.padding[1]);
          for (std::size_t ic = 0; ic < d.ch_per_group; ++ic) {
            double* gx_c = gx.data() + ((b * d.in_ch) + first_in + ic) * d.height * d.width;
            const T* k_c = k + (oc * d.ch_per_group + ic) * d.kh * d.kw;
            for (std::size_t m = 0; m < d.kh; ++m) {
              const auto ih = h0 + static_cast<std::ptrdiff_t>(m * geom.dilation[0]);
              if (ih < 0 || ih >= H) continue;
              for (std::size_t n = 0; n < d.kw; ++n) {
                const auto iw = w0 + static_cast<std::ptrdiff_t>(n * geom.dilation[1]);
                if (iw < 0 || iw >= W) continue;
                gx_c[ih * W + iw] += g * static_cast<double>(k_c[m * d.kw + n]);
              }
            }
          }
        }
      }
    }
  }
  return detail::narrow<T>(input_shape, gx);
}

// d(loss)/d(kernel) of conv2d given d(loss)/d(output).
template <std::floating_point T>
BasicTensor<T> conv2d_grad_kernel(const BasicTensor<T>& grad_out,
                                  const BasicTensor<T>& input, const Shape& kernel_shape,
                                  const ConvGeometry& geom) {
  const auto d = detail::conv_dims(input.shape(), kernel_shape, geom);
  detail::expect_rank(grad_out.shape(), 4, "conv2d output gradient");
  std::vector<double> gk(shape_size(kernel_shape), 0.0);
  const T* gy = grad_out.ptr();
  const T* x = input.ptr();
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
      const std::size_t first_in = (oc / d.out_per_group) * d.ch_per_group;
      for (std::size_t oh = 0; oh < d.out_h; ++oh) {
        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
          const double g = gy[((b * d.out_ch + oc) * d.out_h + oh) * d.out_w + ow];
          if (g == 0.0) continue;
          const auto h0 = static_cast<std::ptrdiff_t>(oh * geom.stride[0]) -
                          static_cast<std::ptrdiff_t>(geom.padding[0]);
          const auto w0 = static_cast<std::ptrdiff_t>(ow * geom.stride[1]) -
                          static_cast<std::ptrdiff_t>(geom.padding[1]);
          for (std::size_t ic = 0; ic < d.ch_per_group; ++ic) {
            const T* x_c = x + ((b * d.in_ch) + first_in + ic) * d.height * d.width;
            double* gk_c = gk.data() + (oc * d.ch_per_group + ic) * d.kh * d.kw;
            for (std::size_t m = 0; m < d.kh; ++m) {
              const auto ih = h0 + static_cast<std::ptrdiff_t>(m * geom.dilation[0]);
              if (ih < 0 || ih >= H) continue;
              for (std::size_t n = 0; n < d.kw; ++n) {
                const auto iw = w0 + static_cast<std::ptrdiff_t>(n * geom.dilation[1]);
                if (iw < 0 || iw >= W) continue;
                gk_c[m * d.kw + n] += g * static_cast<double>(x_c[ih * W + iw]);
              }
            }
          }
        }
      }
    }
  }
  return detail::narrow<T>(kernel_shape, gk);
}

// 1D pointwise convolution: the (ch_out x ch_in) matrix kernel[:, :, 0] applied
// at every position of a [batch, ch_in, L] signal.
template <std::floating_point T>
BasicTensor<T> pointwise_conv1d(const BasicTensor<T>& input, const BasicTensor<T>& kernel) {
  detail::expect_rank(input.shape(), 3, "pointwise_conv1d input");
  detail::expect_rank(kernel.shape(), 3, "pointwise_conv1d kernel");
  detail::expect_axis(kernel.dim(2), 1, "pointwise kernel spatial");
  detail::expect_axis(kernel.dim(1), input.dim(1), "pointwise input channels");
  const std::size_t batch = input.dim(0), cin = input.dim(1), len = input.dim(2);
  const std::size_t cout = kernel.dim(0);
  BasicTensor<T> out({batch, cout, len});
  std::vector<double> acc(len);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* x = input.ptr() + b * cin * len;
    for (std::size_t o = 0; o < cout; ++o) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t c = 0; c < cin; ++c) {
        const double w = kernel[o * cin + c];
        const T* x_c = x + c * len;
        for (std::size_t t = 0; t < len; ++t) acc[t] += w * static_cast<double>(x_c[t]);
      }
      T* y = out.ptr() + (b * cout + o) * len;
      for (std::size_t t = 0; t < len; ++t) y[t] = static_cast<T>(acc[t]);
    }
  }
  debug_check_finite(out, "pointwise_conv1d");
  return out;
}

template <std::floating_point T>
BasicTensor<T> pointwise_conv1d_grad_input(const BasicTensor<T>& grad_out,
                                           const BasicTensor<T>& kernel) {
  const std::size_t batch = grad_out.dim(0), cout = grad_out.dim(1), len = grad_out.dim(2);
  const std::size_t cin = kernel.dim(1);
  BasicTensor<T> gx({batch, cin, len});
  std::vector<double> acc(len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < cin; ++c) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t o = 0; o < cout; ++o) {
        const double w = kernel[o * cin + c];
        const T* g = grad_out.ptr() + (b * cout + o) * len;
        for (std::size_t t = 0; t < len; ++t) acc[t] += w * static_cast<double>(g[t]);
      }
      T* dst = gx.ptr() + (b * cin + c) * len;
      for (std::size_t t = 0; t < len; ++t) dst[t] = static_cast<T>(acc[t]);
    }
  }
  return gx;
}

template <std::floating_point T>
BasicTensor<T> pointwise_conv1d_grad_kernel(const BasicTensor<T>& grad_out,
                                            const BasicTensor<T>& input) {
  const std::size_t batch = grad_out.dim(0), cout = grad_out.dim(1), len = grad_out.dim(2);
  const std::size_t cin = input.dim(1);
  BasicTensor<T> gk({cout, cin, 1});
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t c = 0; c < cin; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* g = grad_out.ptr() + (b * cout + o) * len;
        const T* x = input.ptr() + (b * cin + c) * len;
        for (std::size_t t = 0; t < len; ++t) {
          acc += static_cast<double>(g[t]) * static_cast<double>(x[t]);
        }
      }
      gk[o * cin + c] = static_cast<T>(acc);
    }
  }
  return gk;
}

// Fully connected map [b, in] x [out, in]^T. Summation order matches conv2d
// with 1x1 spatial extents, so the two agree bit for bit.
template <std::floating_point T>
BasicTensor<T> fc_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights) {
  detail::expect_rank(input.shape(), 2, "fc input");
  detail::expect_rank(weights.shape(), 2, "fc weights");
  detail::expect_axis(weights.dim(1), input.dim(1), "fc input features");
  const std::size_t batch = input.dim(0), cin = input.dim(1), cout = weights.dim(0);
  BasicTensor<T> out({batch, cout});
  for (std::size_t b = 0; b < batch; ++b) {
    const T* x = input.ptr() + b * cin;
    for (std::size_t o = 0; o < cout; ++o) {
      const T* w = weights.ptr() + o * cin;
      double acc = 0.0;
      for (std::size_t i = 0; i < cin; ++i) {
        acc += static_cast<double>(w[i]) * static_cast<double>(x[i]);
      }
      out[b * cout + o] = static_cast<T>(acc);
    }
  }
  debug_check_finite(out, "fc_forward");
  return out;
}

template <std::floating_point T>
BasicTensor<T> fc_grad_input(const BasicTensor<T>& grad_out, const BasicTensor<T>& weights) {
  const std::size_t batch = grad_out.dim(0), cout = grad_out.dim(1), cin = weights.dim(1);
  std::vector<double> gx(batch * cin, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      const double g = grad_out[b * cout + o];
      if (g == 0.0) continue;
      const T* w = weights.ptr() + o * cin;
      double* dst = gx.data() + b * cin;
      for (std::size_t i = 0; i < cin; ++i) dst[i] += g * static_cast<double>(w[i]);
    }
  }
  return detail::narrow<T>({batch, cin}, gx);
}

template <std::floating_point T>
BasicTensor<T> fc_grad_weights(const BasicTensor<T>& grad_out, const BasicTensor<T>& input) {
  const std::size_t batch = grad_out.dim(0), cout = grad_out.dim(1), cin = input.dim(1);
  std::vector<double> gw(cout * cin, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* x = input.ptr() + b * cin;
    for (std::size_t o = 0; o < cout; ++o) {
      const double g = grad_out[b * cout + o];
      if (g == 0.0) continue;
      double* dst = gw.data() + o * cin;
      for (std::size_t i = 0; i < cin; ++i) dst[i] += g * static_cast<double>(x[i]);
    }
  }
  return detail::narrow<T>({cout, cin}, gw);
}

// Adds bias[c] to every element of channel c (axis 1) of a rank >= 2 tensor.
template <std::floating_point T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& input, const BasicTensor<T>& bias) {
  if (input.rank() < 2) throw DimensionError("bias input must have rank >= 2");
  detail::expect_rank(bias.shape(), 1, "bias");
  detail::expect_axis(bias.dim(0), input.dim(1), "bias channels");
  const std::size_t ch = input.dim(1);
  const std::size_t inner = input.size() / (input.dim(0) * ch);
  BasicTensor<T> out = input;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[(i / inner) % ch];
  return out;
}

template <std::floating_point T>
BasicTensor<T> channel_bias_grad(const BasicTensor<T>& grad_out) {
  const std::size_t ch = grad_out.dim(1);
  const std::size_t inner = grad_out.size() / (grad_out.dim(0) * ch);
  std::vector<double> acc(ch, 0.0);
  for (std::size_t i = 0; i < grad_out.size(); ++i) acc[(i / inner) % ch] += grad_out[i];
  return detail::narrow<T>({ch}, acc);
}

template <std::floating_point T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out = input;
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  return out;
}

// Subgradient 0 at exactly 0.
template <std::floating_point T>
BasicTensor<T> relu_grad(const BasicTensor<T>& grad_out, const BasicTensor<T>& input) {
  BasicTensor<T> gx(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    gx[i] = input[i] > T(0) ? grad_out[i] : T(0);
  }
  return gx;
}

template <std::floating_point T>
struct MaxPoolResult {
  BasicTensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index of each output element
};

// Max pooling with window == stride (non-overlapping) and implicit -inf
// padding. Ties go to the first maximal element in row-major window order.
template <std::floating_point T>
MaxPoolResult<T> maxpool2d(const BasicTensor<T>& input, const ConvGeometry& geom) {
  detail::expect_rank(input.shape(), 4, "maxpool2d input");
  const std::size_t batch = input.dim(0), ch = input.dim(1);
  const std::size_t H = input.dim(2), W = input.dim(3);
  const std::size_t kh = geom.stride[0], kw = geom.stride[1];
  ConvGeometry window = geom;
  window.dilation = {1, 1};
  const std::size_t out_h = window.output_extent(H, kh, 0);
  const std::size_t out_w = window.output_extent(W, kw, 1);
  MaxPoolResult<T> r{BasicTensor<T>({batch, ch, out_h, out_w}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    for (std::size_t oh = 0; oh < out_h; ++oh) {
      for (std::size_t ow = 0; ow < out_w; ++ow, ++o) {
        bool found = false;
        T best = T(0);
        std::size_t best_idx = 0;
        for (std::size_t m = 0; m < kh; ++m) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * kh + m) -
                          static_cast<std::ptrdiff_t>(geom.padding[0]);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t n = 0; n < kw; ++n) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * kw + n) -
                            static_cast<std::ptrdiff_t>(geom.padding[1]);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t idx = (bc * H + static_cast<std::size_t>(ih)) * W +
                                    static_cast<std::size_t>(iw);
            if (!found || input[idx] > best) {
              best = input[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        if (!found) throw DimensionError("maxpool2d window lies entirely in padding");
        r.output[o] = best;
        r.argmax[o] = best_idx;
      }
    }
  }
  return r;
}

template <std::floating_point T>
BasicTensor<T> maxpool2d_grad(const BasicTensor<T>& grad_out,
                              const std::vector<std::size_t>& argmax,
                              const Shape& input_shape) {
  BasicTensor<T> gx(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += grad_out[o];
  return gx;
}

// [b, c, H, W] -> [b, c]
template <std::floating_point T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  detail::expect_rank(input.shape(), 4, "global_avg_pool input");
  const std::size_t bc = input.dim(0) * input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  BasicTensor<T> out({input.dim(0), input.dim(1)});
  for (std::size_t i = 0; i < bc; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < area; ++j) acc += input[i * area + j];
    out[i] = static_cast<T>(acc / static_cast<double>(area));
  }
  return out;
}

template <std::floating_point T>
BasicTensor<T> global_avg_pool_grad(const BasicTensor<T>& grad_out, const Shape& input_shape) {
  BasicTensor<T> gx(input_shape);
  const std::size_t area = input_shape[2] * input_shape[3];
  for (std::size_t i = 0; i < gx.size(); ++i) {
    gx[i] = static_cast<T>(static_cast<double>(grad_out[i / area]) / static_cast<double>(area));
  }
  return gx;
}

enum class Reduction { mean, sum };

template <std::floating_point T>
struct CrossEntropyResult {
  T loss;
  BasicTensor<T> grad;  // d(loss)/d(logits)
};

// Softmax cross-entropy over logits [b, classes] using the max-subtracted
// log-sum-exp form.
template <std::floating_point T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                            std::span<const int> labels,
                                            Reduction reduction = Reduction::mean) {
  detail::expect_rank(logits.shape(), 2, "logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  detail::expect_axis(labels.size(), batch, "label count");
  const double scale = reduction == Reduction::mean ? 1.0 / static_cast<double>(batch) : 1.0;
  CrossEntropyResult<T> r{T(0), BasicTensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InputError("label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const T* z = logits.ptr() + b * classes;
    double max = z[0];
    for (std::size_t k = 1; k < classes; ++k) max = std::max(max, static_cast<double>(z[k]));
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(z[k] - max);
    const double log_denom = std::log(denom);
    total += log_denom - (z[label] - max);
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = std::exp(z[k] - max - log_denom);
      const double onehot = static_cast<std::size_t>(label) == k ? 1.0 : 0.0;
      r.grad[b * classes + k] = static_cast<T>((p - onehot) * scale);
    }
  }
  r.loss = static_cast<T>(total * scale);
  return r;
}

// max |a - b| / (max |reference| + 1e-8)
template <std::floating_point T>
double relative_deviation(const BasicTensor<T>& value, const BasicTensor<T>& reference) {
  if (value.shape() != reference.shape()) {
    throw DimensionError("cannot compare " + shape_string(value.shape()) + " with " +
                         shape_string(reference.shape()));
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double d = std::abs(static_cast<double>(value[i]) - static_cast<double>(reference[i]));
    if (std::isnan(d)) return d;
    diff = std::max(diff, d);
    scale = std::max(scale, std::abs(static_cast<double>(reference[i])));
  }
  return diff / (scale + 1e-8);
}

template <std::floating_point T>
double max_abs_difference(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("shape mismatch in max_abs_difference");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    if (std::isnan(d)) return d;
    diff = std::max(diff, d);
  }
  return diff;
}

}  // namespace kflo
