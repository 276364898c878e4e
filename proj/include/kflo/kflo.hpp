#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kflo/autodiff.hpp"
#include "kflo/errors.hpp"
#include "kflo/random.hpp"
#include "kflo/tensor.hpp"

namespace kflo {

// Intermediate cascade width Round(rho * ch_out), rounding half away from zero.
inline std::size_t cascade_width(double rho, std::size_t ch_out) {
  return static_cast<std::size_t>(std::llround(rho * static_cast<double>(ch_out)));
}

// [ch2, ch1, M, N] -> [1, ch2, ch1*M*N] with t = (M*N)*d1 + N*m + n. In
// row-major storage this is a pure relabelling of the same buffer; any
// trailing rank works, so fully connected kernels [ch2, ch1] map to
// [1, ch2, ch1].
template <std::floating_point T>
BasicTensor<T> reshape_kernel_to_signal(const BasicTensor<T>& kernel) {
  if (kernel.rank() < 2) throw DimensionError("kernel must have rank >= 2");
  const std::size_t filters = kernel.dim(0);
  return kernel.reshaped({1, filters, kernel.size() / filters});
}

// Inverse of reshape_kernel_to_signal. `tail` is the per-filter shape, e.g.
// {ch1, M, N}.
template <std::floating_point T>
BasicTensor<T> reshape_signal_to_kernel(const BasicTensor<T>& signal, const Shape& tail) {
  detail::expect_rank(signal.shape(), 3, "kernel signal");
  detail::expect_axis(signal.dim(0), 1, "kernel signal batch");
  detail::expect_axis(signal.dim(2), shape_size(tail), "kernel signal length");
  Shape shape{signal.dim(1)};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return signal.reshaped(std::move(shape));
}

// Pointwise identity map [out, in, 1]; non-square kernels place row i's one
// at column i mod in, so every output channel is fed by exactly one input.
template <std::floating_point T>
BasicTensor<T> dirac_pointwise(std::size_t out, std::size_t in) {
  BasicTensor<T> k({out, in, 1});
  for (std::size_t i = 0; i < out; ++i) k[i * in + i % in] = T(1);
  return k;
}

// One overparameterized filtering layer: the filtered base kernel W1 and the
// pointwise cascade W2..WB, stored in reshaped 1D form [ch_{i+1}, ch_i, 1].
// Rank-4 base kernels describe a conv2d layer, rank-2 a fully connected one.
template <std::floating_point T>
class KfloBlock {
 public:
  KfloBlock(ParamSlot<T> base, std::vector<ParamSlot<T>> cascade, ConvGeometry geom,
            double rho)
      : base_(std::move(base)), cascade_(std::move(cascade)), geom_(geom), rho_(rho) {
    validate();
  }

  std::size_t depth() const noexcept { return cascade_.size() + 1; }
  double rho() const noexcept { return rho_; }
  const ConvGeometry& geometry() const noexcept { return geom_; }
  bool is_fc() const { return base_.value().rank() == 2; }

  std::size_t width() const { return base_.value().dim(0); }
  std::size_t out_channels() const {
    return cascade_.empty() ? width() : cascade_.back().value().dim(0);
  }
  // Per-filter shape of W1 and W', e.g. {ch_in/groups, M, N}.
  Shape filter_shape() const {
    const Shape& s = base_.value().shape();
    return Shape(s.begin() + 1, s.end());
  }
  Shape deployed_shape() const {
    Shape s = filter_shape();
    s.insert(s.begin(), out_channels());
    return s;
  }

  ParamSlot<T>& base() noexcept { return base_; }
  const ParamSlot<T>& base() const noexcept { return base_; }
  std::vector<ParamSlot<T>>& cascade() noexcept { return cascade_; }
  const std::vector<ParamSlot<T>>& cascade() const noexcept { return cascade_; }

  // Throws StructureError unless cascade widths chain from W1 to ch_out.
  void validate() const {
    if (base_.value().rank() != 2 && base_.value().rank() != 4) {
      throw StructureError("base kernel " + base_.name() + " must have rank 2 or 4");
    }
    std::size_t prev = width();
    for (const auto& k : cascade_) {
      const Shape& s = k.value().shape();
      if (s.size() != 3 || s[2] != 1) {
        throw StructureError("cascade kernel " + k.name() + " must have shape [out, in, 1]");
      }
      if (s[1] != prev) {
        throw StructureError("cascade kernel " + k.name() + " expects " +
                             std::to_string(s[1]) + " input channels but receives " +
                             std::to_string(prev));
      }
      prev = s[0];
    }
  }

  // Collapsed kernel W', recomputed only when a parameter version changed.
  // Not safe for concurrent use; the free function collapse() is.
  const BasicTensor<T>& collapsed() const;

  template <std::floating_point U>
  KfloBlock<U> cast() const {
    std::vector<ParamSlot<U>> cascade;
    for (const auto& k : cascade_) cascade.push_back(k.template cast<U>());
    return KfloBlock<U>(base_.template cast<U>(), std::move(cascade), geom_, rho_);
  }

 private:
  ParamSlot<T> base_;
  std::vector<ParamSlot<T>> cascade_;
  ConvGeometry geom_;
  double rho_;

  mutable std::vector<std::uint64_t> cache_versions_;
  mutable BasicTensor<T> cache_;
};

// W'^R = W_B^R * (... * (W_2^R * W_1^R)), evaluated innermost first with
// pointwise_conv1d, then reshaped back to the deployed kernel shape.
template <std::floating_point T>
BasicTensor<T> collapse(const KfloBlock<T>& block) {
  block.validate();
  BasicTensor<T> signal = reshape_kernel_to_signal(block.base().value());
  for (const auto& k : block.cascade()) signal = pointwise_conv1d(signal, k.value());
  return reshape_signal_to_kernel(signal, block.filter_shape());
}

template <std::floating_point T>
const BasicTensor<T>& KfloBlock<T>::collapsed() const {
  std::vector<std::uint64_t> versions{base_.version()};
  for (const auto& k : cascade_) versions.push_back(k.version());
  if (versions != cache_versions_ || cache_.empty()) {
    cache_ = collapse(*this);
    cache_versions_ = std::move(versions);
  }
  return cache_;
}

// The same collapse recorded on a tape, so gradients reach W1 and the cascade.
template <std::floating_point T>
Var<T> collapse(Tape<T>& tape, KfloBlock<T>& block) {
  block.validate();
  const Shape base_shape = block.base().value().shape();
  const std::size_t filters = base_shape[0];
  Var<T> signal = ad::reshape(tape.param(block.base()),
                              {1, filters, shape_size(base_shape) / filters});
  for (auto& k : block.cascade()) signal = ad::pointwise_conv1d(signal, tape.param(k));
  return ad::reshape(signal, block.deployed_shape());
}

namespace detail {

template <std::floating_point T>
BasicTensor<T> tile_filters(const BasicTensor<T>& kernel, std::size_t times) {
  BasicTensor<T> out = kernel;
  if (times == 1) return out;
  Shape shape = kernel.shape();
  shape[0] *= times;
  std::vector<T> data;
  data.reserve(kernel.size() * times);
  for (std::size_t i = 0; i < times; ++i) {
    data.insert(data.end(), kernel.data().begin(), kernel.data().end());
  }
  return BasicTensor<T>(std::move(shape), std::move(data));
}

template <std::floating_point T>
BasicTensor<T> flatten_batch(const BasicTensor<T>& x) {
  if (x.rank() == 2) return x;
  return x.reshaped({x.dim(0), x.size() / x.dim(0)});
}

}  // namespace detail

// Reference path that applies the cascade to feature maps: W1 as a
// convolution with the block geometry, then every cascade kernel as a 1x1
// convolution. With groups > 1 each group runs its own copy of the cascade
// (intermediate kernels shared across groups, W_B split by output group),
// which is the feature-space meaning of a grouped collapsed kernel.
template <std::floating_point T>
BasicTensor<T> feature_filter_oracle(const BasicTensor<T>& input, const KfloBlock<T>& block) {
  block.validate();
  const auto& cascade = block.cascade();
  if (block.is_fc()) {
    BasicTensor<T> x = fc_forward(detail::flatten_batch(input), block.base().value());
    for (const auto& k : cascade) {
      x = fc_forward(x, k.value().reshaped({k.value().dim(0), k.value().dim(1)}));
    }
    return x;
  }
  const std::size_t groups = block.geometry().groups;
  if (cascade.empty()) return conv2d(input, block.base().value(), block.geometry());

  BasicTensor<T> x =
      conv2d(input, detail::tile_filters(block.base().value(), groups), block.geometry());
  ConvGeometry pointwise;
  pointwise.groups = groups;
  for (std::size_t i = 0; i < cascade.size(); ++i) {
    const auto& k = cascade[i].value();
    const BasicTensor<T> k4 = k.reshaped({k.dim(0), k.dim(1), 1, 1});
    const bool last = i + 1 == cascade.size();
    x = conv2d(x, last ? k4 : detail::tile_filters(k4, groups), pointwise);
  }
  return x;
}

// Builds a block for a deployed kernel [ch_out, ch_in/groups, tail...]. W1 is
// drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in taken from W1's
// own shape; cascade kernels start as dirac maps. depth == 1 yields a plain
// layer (empty cascade, W1 has the deployed shape).
template <std::floating_point T>
KfloBlock<T> expand(const std::string& name, std::size_t ch_out, const Shape& filter_shape,
                    const ConvGeometry& geom, std::size_t depth, double rho, Rng& rng) {
  if (depth < 1) throw ConfigError("linear depth multiplier B must be >= 1");
  if (!(rho > 0.0)) throw ConfigError("width multiplier rho must be > 0");
  if (ch_out == 0) throw ConfigError("layer " + name + " has zero output channels");
  const std::size_t width = depth == 1 ? ch_out : cascade_width(rho, ch_out);
  if (width == 0) {
    throw ConfigError("layer " + name + ": Round(rho * ch_out) is 0 for rho " +
                      std::to_string(rho));
  }
  Shape base_shape{width};
  base_shape.insert(base_shape.end(), filter_shape.begin(), filter_shape.end());
  BasicTensor<T> base(base_shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape_size(filter_shape)));
  for (T& v : base.data()) v = static_cast<T>(uniform(rng, -bound, bound));

  std::vector<ParamSlot<T>> cascade;
  for (std::size_t i = 2; i <= depth; ++i) {
    const std::size_t out = i == depth ? ch_out : width;
    cascade.emplace_back(name + ".W" + std::to_string(i), dirac_pointwise<T>(out, width),
                         ParamClass::cascade_pointwise);
  }
  return KfloBlock<T>(ParamSlot<T>(name + ".W1", std::move(base), ParamClass::base_kernel),
                      std::move(cascade), geom, rho);
}

template <std::floating_point T>
KfloBlock<T> expand_conv(const std::string& name, std::size_t ch_out, std::size_t ch_in,
                         std::size_t kh, std::size_t kw, const ConvGeometry& geom,
                         std::size_t depth, double rho, Rng& rng) {
  if (geom.groups == 0 || ch_in % geom.groups != 0 || ch_out % geom.groups != 0) {
    throw ConfigError("layer " + name + ": groups must divide both channel counts");
  }
  return expand<T>(name, ch_out, {ch_in / geom.groups, kh, kw}, geom, depth, rho, rng);
}

template <std::floating_point T>
KfloBlock<T> expand_fc(const std::string& name, std::size_t ch_out, std::size_t ch_in,
                       std::size_t depth, double rho, Rng& rng) {
  return expand<T>(name, ch_out, {ch_in}, ConvGeometry::trivial(), depth, rho, rng);
}

template <std::floating_point T>
KfloBlock<T> expand_conv(const std::string& name, std::size_t ch_out, std::size_t ch_in,
                         std::size_t kh, std::size_t kw, const ConvGeometry& geom,
                         std::size_t depth, double rho, std::uint64_t seed) {
  Rng rng(seed);
  return expand_conv<T>(name, ch_out, ch_in, kh, kw, geom, depth, rho, rng);
}

// Transfer-learning initialization: stacks K pretrained kernels of the
// deployed shape into W1 (W1[k*ch_out + d] = pretrained[k][d]) and resets the
// cascade to dirac, so the collapsed kernel equals pretrained[0] exactly.
// Requires rho == K and W1 holding K * ch_out filters.
template <std::floating_point T>
void tl_stack_init(KfloBlock<T>& block, std::span<const BasicTensor<T>> pretrained) {
  const std::size_t count = pretrained.size();
  const std::size_t ch_out = block.out_channels();
  const std::string& name = block.base().name();
  if (count == 0) throw ConfigError(name + ": no pretrained kernels given");
  if (block.depth() > 1 && block.rho() != static_cast<double>(count)) {
    throw ConfigError(name + ": rho " + std::to_string(block.rho()) +
                      " must equal the number of pretrained kernels " + std::to_string(count));
  }
  if (block.width() != count * ch_out) {
    throw ConfigError(name + ": W1 holds " + std::to_string(block.width()) +
                      " filters, stacking needs " + std::to_string(count * ch_out));
  }
  const Shape deployed = block.deployed_shape();
  BasicTensor<T> base(block.base().value().shape());
  const std::size_t chunk = shape_size(deployed);
  for (std::size_t k = 0; k < count; ++k) {
    if (pretrained[k].shape() != deployed) {
      throw ConfigError(name + ": pretrained kernel " + std::to_string(k) + " has shape " +
                        shape_string(pretrained[k].shape()) + ", expected " +
                        shape_string(deployed));
    }
    std::copy(pretrained[k].data().begin(), pretrained[k].data().end(),
              base.data().begin() + static_cast<std::ptrdiff_t>(k * chunk));
  }
  block.base().set_value(std::move(base));
  for (auto& k : block.cascade()) {
    const auto& s = k.value().shape();
    k.set_value(dirac_pointwise<T>(s[0], s[1]));
  }
}

// Multiply-accumulate counts for one forward pass of a block.
struct FlopCount {
  std::uint64_t kernel_filtering = 0;   // vanilla conv + cascade on the kernel
  std::uint64_t feature_filtering = 0;  // W1 conv + cascade on feature maps
  std::uint64_t vanilla = 0;            // deployed layer alone
  std::uint64_t kernel_cascade = 0;     // cascade part of kernel_filtering
  std::uint64_t feature_cascade = 0;    // cascade part of feature_filtering
};

// input_h / input_w are ignored for fully connected blocks.
template <std::floating_point T>
FlopCount flop_count(const KfloBlock<T>& block, std::size_t input_h, std::size_t input_w,
                     std::size_t batch) {
  const auto& g = block.geometry();
  std::uint64_t out_area = 1;
  if (!block.is_fc()) {
    const Shape f = block.filter_shape();
    out_area = static_cast<std::uint64_t>(g.output_extent(input_h, f[1], 0)) *
               g.output_extent(input_w, f[2], 1);
  }
  const std::uint64_t filter_len = shape_size(block.filter_shape());
  const std::uint64_t groups = block.is_fc() ? 1 : g.groups;
  const std::uint64_t per_sample_area = out_area * batch;

  FlopCount c;
  c.vanilla = block.out_channels() * filter_len * per_sample_area;
  const bool plain = block.cascade().empty();
  const std::uint64_t w1_conv =
      (plain ? block.width() : groups * block.width()) * filter_len * per_sample_area;
  for (std::size_t i = 0; i < block.cascade().size(); ++i) {
    const auto& s = block.cascade()[i].value().shape();
    const std::uint64_t pair = static_cast<std::uint64_t>(s[0]) * s[1];
    const bool last = i + 1 == block.cascade().size();
    c.kernel_cascade += pair * filter_len;
    c.feature_cascade += (last ? 1 : groups) * pair * per_sample_area;
  }
  c.kernel_filtering = c.vanilla + c.kernel_cascade;
  c.feature_filtering = w1_conv + c.feature_cascade;
  return c;
}

}  // namespace kflo
