#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "kflo/autodiff.hpp"
#include "kflo/errors.hpp"
#include "kflo/kflo.hpp"
#include "kflo/random.hpp"
#include "kflo/tensor.hpp"

namespace kflo {

enum class LayerKind : std::uint8_t {
  conv2d = 0,
  fc = 1,
  relu = 2,
  maxpool2d = 3,  // window == stride
  global_avg_pool = 4,
};

enum class ModelMode : std::uint8_t { training = 0, deployed = 1 };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::fc: return "fc";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::global_avg_pool: return "global_avg_pool";
  }
  return "unknown";
}

// Linear depth multiplier B and width multiplier rho, written "BxR".
struct KfloConfig {
  std::size_t depth = 1;
  double rho = 1.0;

  bool vanilla() const noexcept { return depth == 1; }

  static KfloConfig parse(std::string_view text) {
    const auto x = text.find('x');
    if (x == std::string_view::npos) throw ConfigError("expected BxR, got '" + std::string(text) + "'");
    KfloConfig c;
    const char* b_end = text.data() + x;
    auto [p1, e1] = std::from_chars(text.data(), b_end, c.depth);
    const char* r_end = text.data() + text.size();
    auto [p2, e2] = std::from_chars(b_end + 1, r_end, c.rho);
    if (e1 != std::errc{} || p1 != b_end || e2 != std::errc{} || p2 != r_end || c.depth < 1 ||
        !(c.rho > 0.0) || !std::isfinite(c.rho)) {
      throw ConfigError("invalid KFLO setting '" + std::string(text) + "' (need B >= 1, R > 0)");
    }
    return c;
  }

  std::string format() const {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, rho);
    return std::to_string(depth) + "x" + std::string(buf, end);
  }

  bool operator==(const KfloConfig&) const = default;
};

template <std::floating_point T>
struct PlainParams {
  ParamSlot<T> kernel;
  ParamSlot<T> bias;
};

// The bias belongs to the collapsed layer and never enters the cascade.
template <std::floating_point T>
struct KfloParams {
  KfloBlock<T> block;
  ParamSlot<T> bias;
};

template <std::floating_point T>
struct LayerNode {
  LayerKind kind;
  std::string name;
  ConvGeometry geom;
  std::variant<std::monostate, PlainParams<T>, KfloParams<T>> params;

  bool filtering() const { return kind == LayerKind::conv2d || kind == LayerKind::fc; }
  bool is_kflo() const { return std::holds_alternative<KfloParams<T>>(params); }
  const PlainParams<T>* plain() const { return std::get_if<PlainParams<T>>(&params); }
  PlainParams<T>* plain() { return std::get_if<PlainParams<T>>(&params); }
  const KfloParams<T>* kflo() const { return std::get_if<KfloParams<T>>(&params); }
  KfloParams<T>* kflo() { return std::get_if<KfloParams<T>>(&params); }

  const ParamSlot<T>& bias() const { return plain() ? plain()->bias : kflo()->bias; }

  Shape deployed_kernel_shape() const {
    return plain() ? plain()->kernel.value().shape() : kflo()->block.deployed_shape();
  }

  // Deployed kernel: the plain kernel or the block's (cached) collapse.
  const BasicTensor<T>& effective_kernel() const {
    return plain() ? plain()->kernel.value() : kflo()->block.collapsed();
  }

  // Parameter slots in serialization order.
  std::vector<const ParamSlot<T>*> slots() const {
    std::vector<const ParamSlot<T>*> out;
    if (auto* p = plain()) {
      out = {&p->kernel, &p->bias};
    } else if (auto* k = kflo()) {
      out.push_back(&k->block.base());
      for (const auto& c : k->block.cascade()) out.push_back(&c);
      out.push_back(&k->bias);
    }
    return out;
  }
  std::vector<ParamSlot<T>*> slots() {
    std::vector<ParamSlot<T>*> out;
    if (auto* p = plain()) {
      out = {&p->kernel, &p->bias};
    } else if (auto* k = kflo()) {
      out.push_back(&k->block.base());
      for (auto& c : k->block.cascade()) out.push_back(&c);
      out.push_back(&k->bias);
    }
    return out;
  }
};

namespace detail {

template <std::floating_point T>
void check_bias(const LayerNode<T>& n, std::size_t channels) {
  const Shape& b = n.bias().value().shape();
  if (b.size() != 1 || b[0] != channels) {
    throw DimensionError("bias must have shape [" + std::to_string(channels) + "]");
  }
}

// Output shape of one node for input shape `in`; DimensionError names the layer.
template <std::floating_point T>
Shape node_output_shape(const LayerNode<T>& n, const Shape& in) {
  try {
    switch (n.kind) {
      case LayerKind::conv2d: {
        const Shape k = n.deployed_kernel_shape();
        const auto d = conv_dims(in, k, n.geom);
        check_bias(n, d.out_ch);
        return {d.batch, d.out_ch, d.out_h, d.out_w};
      }
      case LayerKind::fc: {
        const Shape k = n.deployed_kernel_shape();
        expect_rank(k, 2, "fc kernel");
        expect_axis(k[1], shape_size(in) / in[0], "fc input features");
        check_bias(n, k[0]);
        return {in[0], k[0]};
      }
      case LayerKind::relu:
        return in;
      case LayerKind::maxpool2d: {
        expect_rank(in, 4, "maxpool2d input");
        ConvGeometry w = n.geom;
        w.dilation = {1, 1};
        return {in[0], in[1], w.output_extent(in[2], w.stride[0], 0),
                w.output_extent(in[3], w.stride[1], 1)};
      }
      case LayerKind::global_avg_pool:
        expect_rank(in, 4, "global_avg_pool input");
        return {in[0], in[1]};
    }
  } catch (const DimensionError& e) {
    throw DimensionError("layer " + n.name + ": " + e.what());
  }
  throw ConfigError("layer " + n.name + ": unknown kind");
}

template <std::floating_point T>
bool accepts_input(const std::vector<LayerNode<T>>& nodes, const Shape& input_shape) {
  Shape cur{1};
  cur.insert(cur.end(), input_shape.begin(), input_shape.end());
  try {
    for (const auto& n : nodes) cur = node_output_shape(n, cur);
  } catch (const DimensionError&) {
    return false;
  }
  return true;
}

}  // namespace detail

// Which path evaluates KFLO layers: the collapsed kernel (training and
// deployment) or the cascade applied to feature maps (verification only).
enum class FilterPath { kernel_filtering, feature_filtering };

// Ordered sequence of layers for a declared input shape [channels, H, W].
// Fully connected layers flatten their input.
template <std::floating_point T>
class BasicModelGraph {
 public:
  BasicModelGraph(Shape input_shape, std::vector<LayerNode<T>> nodes, ModelMode mode)
      : input_shape_(std::move(input_shape)), nodes_(std::move(nodes)), mode_(mode) {
    validate();
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  ModelMode mode() const noexcept { return mode_; }

  // Re-declares the input shape; throws DimensionError when the layers do
  // not accept it.
  void set_input_shape(Shape shape) {
    Shape old = std::exchange(input_shape_, std::move(shape));
    try {
      shape_trace(1);
    } catch (...) {
      input_shape_ = std::move(old);
      throw;
    }
  }
  const std::vector<LayerNode<T>>& nodes() const noexcept { return nodes_; }
  std::vector<LayerNode<T>>& nodes() noexcept { return nodes_; }

  std::vector<ParamSlot<T>*> parameters() {
    std::vector<ParamSlot<T>*> out;
    for (auto& n : nodes_) {
      for (ParamSlot<T>* s : n.slots()) out.push_back(s);
    }
    return out;
  }
  std::vector<const ParamSlot<T>*> parameters() const {
    std::vector<const ParamSlot<T>*> out;
    for (const auto& n : nodes_) {
      for (const ParamSlot<T>* s : n.slots()) out.push_back(s);
    }
    return out;
  }

  void zero_grad() {
    for (ParamSlot<T>* p : parameters()) p->zero_grad();
  }

  // Trainable scalars in the current parameterization.
  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const ParamSlot<T>* p : parameters()) total += p->value().size();
    return total;
  }

  // Scalars of the deployed form (collapsed kernels plus biases).
  std::size_t deployed_parameter_count() const {
    std::size_t total = 0;
    for (const auto& n : nodes_) {
      if (!n.filtering()) continue;
      total += shape_size(n.deployed_kernel_shape()) + n.bias().value().size();
    }
    return total;
  }

  // Output shape of every node for a batch of the declared input shape;
  // element 0 is the input itself.
  std::vector<Shape> shape_trace(std::size_t batch) const {
    std::vector<Shape> shapes;
    Shape cur{batch};
    cur.insert(cur.end(), input_shape_.begin(), input_shape_.end());
    shapes.push_back(cur);
    for (const auto& n : nodes_) {
      cur = detail::node_output_shape(n, cur);
      shapes.push_back(cur);
    }
    return shapes;
  }

  // Multiply-accumulates of one deployed forward pass.
  std::uint64_t inference_macs(std::size_t batch = 1) const {
    std::uint64_t total = 0;
    const auto shapes = shape_trace(batch);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (!n.filtering()) continue;
      const Shape k = n.deployed_kernel_shape();
      total += static_cast<std::uint64_t>(shape_size(shapes[i + 1])) * (shape_size(k) / k[0]);
    }
    return total;
  }

  // Multiply-accumulates of one training forward pass at `batch`, including
  // the cascade work, under the given filter path.
  std::uint64_t training_macs(std::size_t batch, FilterPath path) const {
    std::uint64_t total = 0;
    const auto shapes = shape_trace(batch);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (!n.filtering()) continue;
      if (const auto* k = n.kflo()) {
        const Shape& in = shapes[i];
        const std::size_t h = in.size() == 4 ? in[2] : 1, w = in.size() == 4 ? in[3] : 1;
        const FlopCount c = flop_count(k->block, h, w, batch);
        total += path == FilterPath::kernel_filtering ? c.kernel_filtering : c.feature_filtering;
      } else {
        const Shape kshape = n.deployed_kernel_shape();
        total += static_cast<std::uint64_t>(shape_size(shapes[i + 1])) *
                 (shape_size(kshape) / kshape[0]);
      }
    }
    return total;
  }

  template <std::floating_point U>
  BasicModelGraph<U> cast() const {
    std::vector<LayerNode<U>> nodes;
    for (const auto& n : nodes_) {
      LayerNode<U> m{n.kind, n.name, n.geom, {}};
      if (const auto* p = n.plain()) {
        m.params = PlainParams<U>{p->kernel.template cast<U>(), p->bias.template cast<U>()};
      } else if (const auto* k = n.kflo()) {
        m.params = KfloParams<U>{k->block.template cast<U>(), k->bias.template cast<U>()};
      }
      nodes.push_back(std::move(m));
    }
    return BasicModelGraph<U>(input_shape_, std::move(nodes), mode_);
  }

 private:
  void validate() const {
    if (input_shape_.empty()) throw DimensionError("model input shape is empty");
    std::set<std::string> names;
    for (const auto& n : nodes_) {
      if (!names.insert(n.name).second) throw ConfigError("duplicate layer name " + n.name);
      const bool has_params = !std::holds_alternative<std::monostate>(n.params);
      if (n.filtering() != has_params) {
        throw ConfigError("layer " + n.name + ": parameters do not match its kind");
      }
      if (mode_ == ModelMode::deployed && n.is_kflo()) {
        throw ModeError("deployed model contains KFLO layer " + n.name);
      }
      if (const auto* k = n.kflo()) {
        k->block.validate();
        if (k->block.geometry() != n.geom) {
          throw ConfigError("layer " + n.name + ": block geometry differs from the layer's");
        }
      }
    }
    shape_trace(1);
  }

  Shape input_shape_;
  std::vector<LayerNode<T>> nodes_;
  ModelMode mode_;
};

using ModelGraph = BasicModelGraph<float>;

// Collapsed kernel variables recorded during a tape forward, for the
// weight-decay term on W'.
template <std::floating_point T>
struct ForwardTrace {
  std::vector<Var<T>> collapsed_kernels;
};

// Training forward on a tape. KFLO layers collapse their cascade on the tape
// first, so gradients flow to W1 and every cascade kernel.
template <std::floating_point T>
Var<T> forward(Tape<T>& tape, BasicModelGraph<T>& model, Var<T> x,
               ForwardTrace<T>* trace = nullptr) {
  for (auto& n : model.nodes()) {
    switch (n.kind) {
      case LayerKind::conv2d:
      case LayerKind::fc: {
        Var<T> kernel;
        if (auto* p = n.plain()) {
          kernel = tape.param(p->kernel);
        } else {
          kernel = collapse(tape, n.kflo()->block);
          if (trace) trace->collapsed_kernels.push_back(kernel);
        }
        if (n.kind == LayerKind::conv2d) {
          x = ad::conv2d(x, kernel, n.geom);
        } else {
          if (x.shape().size() != 2) x = ad::reshape(x, {x.shape()[0], x.value().size() / x.shape()[0]});
          x = ad::fc(x, kernel);
        }
        ParamSlot<T>& bias = n.plain() ? n.plain()->bias : n.kflo()->bias;
        x = ad::add_bias(x, tape.param(bias));
        break;
      }
      case LayerKind::relu: x = ad::relu(x); break;
      case LayerKind::maxpool2d: x = ad::maxpool2d(x, n.geom); break;
      case LayerKind::global_avg_pool: x = ad::global_avg_pool(x); break;
    }
  }
  return x;
}

namespace detail {

template <std::floating_point T>
BasicTensor<T> apply_node(const LayerNode<T>& n, const BasicTensor<T>& x, FilterPath path) {
  switch (n.kind) {
    case LayerKind::conv2d:
    case LayerKind::fc: {
      BasicTensor<T> y;
      if (path == FilterPath::feature_filtering && n.is_kflo()) {
        y = feature_filter_oracle(x, n.kflo()->block);
      } else if (n.kind == LayerKind::conv2d) {
        y = conv2d(x, n.effective_kernel(), n.geom);
      } else {
        y = fc_forward(flatten_batch(x), n.effective_kernel());
      }
      return add_channel_bias(y, n.bias().value());
    }
    case LayerKind::relu: return relu(x);
    case LayerKind::maxpool2d: return maxpool2d(x, n.geom).output;
    case LayerKind::global_avg_pool: return global_avg_pool(x);
  }
  throw ConfigError("unknown layer kind");
}

}  // namespace detail

// Inference forward without a tape. Produces the same bits as forward() on a
// tape for the kernel-filtering path.
template <std::floating_point T>
BasicTensor<T> predict(const BasicModelGraph<T>& model, BasicTensor<T> x,
                       FilterPath path = FilterPath::kernel_filtering) {
  for (const auto& n : model.nodes()) x = detail::apply_node(n, x, path);
  return x;
}

struct LayerDeviation {
  std::string layer;
  double deviation;  // relative_deviation(collapsed, feature-filtering oracle)
};

// Runs the kernel-filtering forward and, at every KFLO layer, compares the
// collapsed layer against the feature-filtering oracle on that layer's
// actual input.
template <std::floating_point T>
std::vector<LayerDeviation> layer_equivalence(const BasicModelGraph<T>& model, BasicTensor<T> x) {
  std::vector<LayerDeviation> out;
  for (const auto& n : model.nodes()) {
    BasicTensor<T> y = detail::apply_node(n, x, FilterPath::kernel_filtering);
    if (n.is_kflo()) {
      const BasicTensor<T> oracle = detail::apply_node(n, x, FilterPath::feature_filtering);
      out.push_back({n.name, relative_deviation(y, oracle)});
    }
    x = std::move(y);
  }
  return out;
}

// Replaces every KFLO block by its collapsed kernel; biases carry over.
template <std::floating_point T>
BasicModelGraph<T> collapse_model(const BasicModelGraph<T>& model) {
  if (model.mode() != ModelMode::training) throw ModeError("model is already deployed");
  std::vector<LayerNode<T>> nodes;
  for (const auto& n : model.nodes()) {
    LayerNode<T> m{n.kind, n.name, n.geom, {}};
    if (const auto* p = n.plain()) {
      m.params = PlainParams<T>{ParamSlot<T>(p->kernel.name(), p->kernel.value(), ParamClass::plain),
                                p->bias};
    } else if (const auto* k = n.kflo()) {
      m.params = PlainParams<T>{ParamSlot<T>(n.name + ".weight", collapse(k->block), ParamClass::plain),
                                k->bias};
    }
    nodes.push_back(std::move(m));
  }
  return BasicModelGraph<T>(model.input_shape(), std::move(nodes), ModelMode::deployed);
}

namespace detail {

template <std::floating_point T>
ParamSlot<T> uniform_slot(const std::string& name, Shape shape, std::size_t fan_in,
                          ParamClass cls, Rng& rng) {
  BasicTensor<T> value(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (T& v : value.data()) v = static_cast<T>(uniform(rng, -bound, bound));
  return ParamSlot<T>(name, std::move(value), cls);
}

// Filtering node: plain when cfg is vanilla, KFLO-expanded otherwise.
template <std::floating_point T>
LayerNode<T> filtering_node(LayerKind kind, const std::string& name, std::size_t ch_out,
                            const Shape& filter_shape, const ConvGeometry& geom,
                            const KfloConfig& cfg, Rng& rng) {
  LayerNode<T> n{kind, name, geom, {}};
  const std::size_t fan_in = shape_size(filter_shape);
  if (cfg.vanilla()) {
    Shape shape{ch_out};
    shape.insert(shape.end(), filter_shape.begin(), filter_shape.end());
    auto kernel = uniform_slot<T>(name + ".weight", shape, fan_in, ParamClass::plain, rng);
    auto bias = uniform_slot<T>(name + ".bias", {ch_out}, fan_in, ParamClass::bias, rng);
    n.params = PlainParams<T>{std::move(kernel), std::move(bias)};
  } else {
    auto block = expand<T>(name, ch_out, filter_shape, geom, cfg.depth, cfg.rho, rng);
    auto bias = uniform_slot<T>(name + ".bias", {ch_out}, fan_in, ParamClass::bias, rng);
    n.params = KfloParams<T>{std::move(block), std::move(bias)};
  }
  return n;
}

inline ConvGeometry padded(std::size_t pad) {
  ConvGeometry g;
  g.padding = {pad, pad};
  return g;
}

inline ConvGeometry pool2() {
  ConvGeometry g;
  g.stride = {2, 2};
  return g;
}

}  // namespace detail

// LeNet-5 for 28x28 inputs: conv(6, 5x5, pad 2) relu maxpool2, conv(16, 5x5)
// relu maxpool2, fc 400->120 relu, fc 120->84 relu, fc 84->classes.
template <std::floating_point T = float>
BasicModelGraph<T> build_lenet5(const KfloConfig& cfg, std::size_t num_classes = 10,
                                std::size_t in_channels = 1, std::uint64_t seed = 0) {
  Rng rng(seed);
  using detail::filtering_node;
  std::vector<LayerNode<T>> nodes;
  nodes.push_back(filtering_node<T>(LayerKind::conv2d, "conv1", 6, {in_channels, 5, 5},
                                    detail::padded(2), cfg, rng));
  nodes.push_back({LayerKind::relu, "relu1", {}, {}});
  nodes.push_back({LayerKind::maxpool2d, "pool1", detail::pool2(), {}});
  nodes.push_back(filtering_node<T>(LayerKind::conv2d, "conv2", 16, {6, 5, 5},
                                    ConvGeometry::trivial(), cfg, rng));
  nodes.push_back({LayerKind::relu, "relu2", {}, {}});
  nodes.push_back({LayerKind::maxpool2d, "pool2", detail::pool2(), {}});
  nodes.push_back(filtering_node<T>(LayerKind::fc, "fc1", 120, {400}, {}, cfg, rng));
  nodes.push_back({LayerKind::relu, "relu3", {}, {}});
  nodes.push_back(filtering_node<T>(LayerKind::fc, "fc2", 84, {120}, {}, cfg, rng));
  nodes.push_back({LayerKind::relu, "relu4", {}, {}});
  nodes.push_back(filtering_node<T>(LayerKind::fc, "fc3", num_classes, {84}, {}, cfg, rng));
  return BasicModelGraph<T>({in_channels, 28, 28}, std::move(nodes), ModelMode::training);
}

// Three conv(3x3, pad 1)-relu-maxpool2 stages of 32, 64 and 128 channels,
// global average pooling, then fc 128->classes. Declared for 32x32 inputs.
template <std::floating_point T = float>
BasicModelGraph<T> build_smallcnn(const KfloConfig& cfg, std::size_t num_classes,
                                  std::size_t in_channels = 3, std::uint64_t seed = 0) {
  Rng rng(seed);
  using detail::filtering_node;
  std::vector<LayerNode<T>> nodes;
  std::size_t prev = in_channels;
  const std::size_t widths[] = {32, 64, 128};
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string idx = std::to_string(s + 1);
    nodes.push_back(filtering_node<T>(LayerKind::conv2d, "conv" + idx, widths[s], {prev, 3, 3},
                                      detail::padded(1), cfg, rng));
    nodes.push_back({LayerKind::relu, "relu" + idx, {}, {}});
    nodes.push_back({LayerKind::maxpool2d, "pool" + idx, detail::pool2(), {}});
    prev = widths[s];
  }
  nodes.push_back({LayerKind::global_avg_pool, "gap", {}, {}});
  nodes.push_back(filtering_node<T>(LayerKind::fc, "fc", num_classes, {prev}, {}, cfg, rng));
  return BasicModelGraph<T>({in_channels, 32, 32}, std::move(nodes), ModelMode::training);
}

template <std::floating_point T>
struct TlInit {
  BasicModelGraph<T> model;
  std::vector<std::string> reinitialized;  // heads left at their fresh init
};

// Stacks the kernels of K deployed networks into the W1 tensors of `target`
// (a training-mode model built with rho = K) and copies biases from network
// 0. A final filtering layer whose shape differs from the pretrained one,
// such as a head for a different class count, keeps its fresh init.
template <std::floating_point T>
TlInit<T> tl_init_model(BasicModelGraph<T> target, std::span<const BasicModelGraph<T>> pretrained) {
  if (pretrained.empty()) throw ConfigError("no pretrained models given");
  if (target.mode() != ModelMode::training) throw ModeError("TL target must be a training-mode model");
  for (const auto& p : pretrained) {
    if (p.mode() != ModelMode::deployed) throw ModeError("pretrained models must be deployed-mode files");
  }
  const auto& first = pretrained.front().nodes();
  for (std::size_t k = 1; k < pretrained.size(); ++k) {
    const auto& other = pretrained[k].nodes();
    for (std::size_t i = 0; i < std::max(first.size(), other.size()); ++i) {
      const std::string layer = i < first.size() ? first[i].name : other[i].name;
      if (i >= first.size() || i >= other.size() || first[i].name != other[i].name ||
          first[i].kind != other[i].kind ||
          (first[i].filtering() && first[i].deployed_kernel_shape() != other[i].deployed_kernel_shape())) {
        throw StructureError("pretrained model " + std::to_string(k) +
                             " does not match model 0 at layer " + layer);
      }
    }
  }
  auto& nodes = target.nodes();
  if (nodes.size() != first.size()) {
    throw StructureError("pretrained models have " + std::to_string(first.size()) +
                         " layers, the target architecture has " + std::to_string(nodes.size()));
  }
  std::size_t last_filtering = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].filtering()) last_filtering = i;
  }

  std::vector<std::string> reinitialized;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    auto& n = nodes[i];
    if (n.name != first[i].name || n.kind != first[i].kind) {
      throw StructureError("layer " + n.name + " does not match pretrained layer " + first[i].name);
    }
    if (!n.filtering()) continue;
    if (n.deployed_kernel_shape() != first[i].deployed_kernel_shape()) {
      if (i == last_filtering) {
        reinitialized.push_back(n.name);
        continue;
      }
      throw StructureError("layer " + n.name + ": pretrained kernel shape " +
                           shape_string(first[i].deployed_kernel_shape()) + " does not match " +
                           shape_string(n.deployed_kernel_shape()));
    }
    if (auto* k = n.kflo()) {
      std::vector<BasicTensor<T>> kernels;
      for (const auto& p : pretrained) kernels.push_back(p.nodes()[i].effective_kernel());
      tl_stack_init(k->block, std::span<const BasicTensor<T>>(kernels));
      k->bias.set_value(first[i].bias().value());
    } else {
      n.plain()->kernel.set_value(first[i].effective_kernel());
      n.plain()->bias.set_value(first[i].bias().value());
    }
  }
  return {std::move(target), std::move(reinitialized)};
}

}  // namespace kflo
