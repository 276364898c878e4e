#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kflo/errors.hpp"
#include "kflo/random.hpp"
#include "kflo/tensor.hpp"

namespace kflo {

// Parameter classes drive the weight-decay policy in the optimizer.
enum class ParamClass : std::uint8_t {
  base_kernel,        // KFLO filtered kernel W1
  cascade_pointwise,  // KFLO pointwise cascade kernels W2..WB
  plain,              // ordinary filtering kernel
  bias,
};

inline const char* param_class_name(ParamClass c) {
  switch (c) {
    case ParamClass::base_kernel: return "base_kernel";
    case ParamClass::cascade_pointwise: return "cascade_pointwise";
    case ParamClass::plain: return "plain";
    case ParamClass::bias: return "bias";
  }
  return "unknown";
}

namespace detail {
inline std::uint64_t next_param_version() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

// A trainable tensor with its gradient. Every mutable access stamps a fresh,
// process-unique version so derived caches can tell when they are stale.
template <std::floating_point T>
class ParamSlot {
 public:
  ParamSlot(std::string name, BasicTensor<T> value, ParamClass cls)
      : name_(std::move(name)),
        value_(std::move(value)),
        grad_(value_.shape()),
        class_(cls),
        version_(detail::next_param_version()) {}

  const std::string& name() const noexcept { return name_; }
  ParamClass param_class() const noexcept { return class_; }
  std::uint64_t version() const noexcept { return version_; }

  const BasicTensor<T>& value() const noexcept { return value_; }
  BasicTensor<T>& mutable_value() {
    version_ = detail::next_param_version();
    return value_;
  }
  void set_value(BasicTensor<T> value) {
    if (value.shape() != value_.shape()) {
      throw DimensionError("parameter " + name_ + " expects shape " +
                           shape_string(value_.shape()) + ", got " +
                           shape_string(value.shape()));
    }
    mutable_value() = std::move(value);
  }

  const BasicTensor<T>& grad() const noexcept { return grad_; }
  BasicTensor<T>& grad() noexcept { return grad_; }
  void zero_grad() { grad_.fill(T(0)); }

  template <std::floating_point U>
  ParamSlot<U> cast() const {
    return ParamSlot<U>(name_, tensor_cast<U>(value_), class_);
  }

 private:
  std::string name_;
  BasicTensor<T> value_;
  BasicTensor<T> grad_;
  ParamClass class_;
  std::uint64_t version_;
};

template <std::floating_point T>
class Tape;

// Handle to a value recorded on a tape.
template <std::floating_point T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Linear record of a computation. Nodes are appended in evaluation order, so
// the tape is a DAG in topological order and backward() walks it once in
// reverse. A non-recording tape only keeps values (inference).
template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    ParamSlot<T>* param = nullptr;
    BackwardFn backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  Var<T> constant(BasicTensor<T> value) {
    nodes_.push_back(Node{"constant", {}, std::move(value), {}, false, nullptr, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> param(ParamSlot<T>& slot) {
    nodes_.push_back(Node{"param", {}, slot.value(), {}, recording_, &slot, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(std::string_view op, std::vector<std::size_t> inputs, BasicTensor<T> value,
                BackwardFn backward) {
    bool needs = false;
    if (recording_) {
      for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    }
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), {}, needs, nullptr,
                          needs ? std::move(backward) : BackwardFn{}});
    return {this, nodes_.size() - 1};
  }

  const BasicTensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const BasicTensor<T>& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  void accumulate(std::size_t id, const BasicTensor<T>& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw DimensionError(std::string("gradient shape mismatch at op ") +
                           std::string(n.op) + ": " + shape_string(g.shape()) + " vs " +
                           shape_string(n.value.shape()));
    }
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  }

  // Accumulates (+=) d(loss)/d(param) into every ParamSlot used on the tape.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw UsageError("loss belongs to another tape");
    if (!recording_) throw UsageError("backward on a non-recording tape");
    if (finished_) throw UsageError("backward already ran on this tape");
    if (value(loss).size() != 1) {
      throw UsageError("backward needs a scalar loss, got shape " +
                       shape_string(value(loss).shape()));
    }
    finished_ = true;
    Node& root = nodes_.at(loss.id);
    if (!root.requires_grad) return;
    root.grad = BasicTensor<T>(root.value.shape(), T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param != nullptr) {
        BasicTensor<T>& dst = n.param->grad();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

 private:
  std::vector<Node> nodes_;
  bool recording_;
  bool finished_ = false;
};

// Differentiable wrappers over the tensor kernels. Every wrapper computes its
// value with the same kernel as the plain tensor API, so tape and non-tape
// evaluation agree bit for bit.
namespace ad {

namespace detail {
template <std::floating_point T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw UsageError("operands on different tapes");
  return *a.tape;
}
}  // namespace detail

template <std::floating_point T>
Var<T> conv2d(Var<T> x, Var<T> k, const ConvGeometry& geom) {
  Tape<T>& tape = detail::same_tape(x, k);
  return tape.record("conv2d", {x.id, k.id}, kflo::conv2d(x.value(), k.value(), geom),
                     [geom](Tape<T>& t, std::size_t self) {
                       const auto& n = t.node(self);
                       const auto& xv = t.value(n.inputs[0]);
                       const auto& kv = t.value(n.inputs[1]);
                       if (t.requires_grad(n.inputs[0])) {
                         t.accumulate(n.inputs[0],
                                      conv2d_grad_input(n.grad, kv, xv.shape(), geom));
                       }
                       if (t.requires_grad(n.inputs[1])) {
                         t.accumulate(n.inputs[1],
                                      conv2d_grad_kernel(n.grad, xv, kv.shape(), geom));
                       }
                     });
}

template <std::floating_point T>
Var<T> pointwise_conv1d(Var<T> x, Var<T> k) {
  Tape<T>& tape = detail::same_tape(x, k);
  return tape.record("pointwise_conv1d", {x.id, k.id},
                     kflo::pointwise_conv1d(x.value(), k.value()),
                     [](Tape<T>& t, std::size_t self) {
                       const auto& n = t.node(self);
                       if (t.requires_grad(n.inputs[0])) {
                         t.accumulate(n.inputs[0], pointwise_conv1d_grad_input(
                                                       n.grad, t.value(n.inputs[1])));
                       }
                       if (t.requires_grad(n.inputs[1])) {
                         t.accumulate(n.inputs[1], pointwise_conv1d_grad_kernel(
                                                       n.grad, t.value(n.inputs[0])));
                       }
                     });
}

template <std::floating_point T>
Var<T> fc(Var<T> x, Var<T> w) {
  Tape<T>& tape = detail::same_tape(x, w);
  return tape.record("fc", {x.id, w.id}, fc_forward(x.value(), w.value()),
                     [](Tape<T>& t, std::size_t self) {
                       const auto& n = t.node(self);
                       if (t.requires_grad(n.inputs[0])) {
                         t.accumulate(n.inputs[0], fc_grad_input(n.grad, t.value(n.inputs[1])));
                       }
                       if (t.requires_grad(n.inputs[1])) {
                         t.accumulate(n.inputs[1],
                                      fc_grad_weights(n.grad, t.value(n.inputs[0])));
                       }
                     });
}

template <std::floating_point T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  Tape<T>& tape = detail::same_tape(x, bias);
  return tape.record("add_bias", {x.id, bias.id}, add_channel_bias(x.value(), bias.value()),
                     [](Tape<T>& t, std::size_t self) {
                       const auto& n = t.node(self);
                       t.accumulate(n.inputs[0], n.grad);
                       if (t.requires_grad(n.inputs[1])) {
                         t.accumulate(n.inputs[1], channel_bias_grad(n.grad));
                       }
                     });
}

template <std::floating_point T>
Var<T> relu(Var<T> x) {
  return x.tape->record("relu", {x.id}, kflo::relu(x.value()),
                        [](Tape<T>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          t.accumulate(n.inputs[0], relu_grad(n.grad, t.value(n.inputs[0])));
                        });
}

template <std::floating_point T>
Var<T> maxpool2d(Var<T> x, const ConvGeometry& geom) {
  auto pooled = kflo::maxpool2d(x.value(), geom);
  return x.tape->record("maxpool2d", {x.id}, std::move(pooled.output),
                        [argmax = std::move(pooled.argmax)](Tape<T>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          t.accumulate(n.inputs[0],
                                       maxpool2d_grad(n.grad, argmax,
                                                      t.value(n.inputs[0]).shape()));
                        });
}

template <std::floating_point T>
Var<T> global_avg_pool(Var<T> x) {
  return x.tape->record("global_avg_pool", {x.id}, kflo::global_avg_pool(x.value()),
                        [](Tape<T>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          t.accumulate(n.inputs[0], global_avg_pool_grad(
                                                        n.grad, t.value(n.inputs[0]).shape()));
                        });
}

template <std::floating_point T>
Var<T> reshape(Var<T> x, Shape shape) {
  return x.tape->record("reshape", {x.id}, x.value().reshaped(std::move(shape)),
                        [](Tape<T>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          t.accumulate(n.inputs[0],
                                       n.grad.reshaped(t.value(n.inputs[0]).shape()));
                        });
}

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape(a, b);
  if (a.shape() != b.shape()) throw DimensionError("add: operand shapes differ");
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape.record("add", {a.id, b.id}, std::move(out), [](Tape<T>& t, std::size_t self) {
    const auto& n = t.node(self);
    t.accumulate(n.inputs[0], n.grad);
    t.accumulate(n.inputs[1], n.grad);
  });
}

// Scalar sum of all elements.
template <std::floating_point T>
Var<T> sum(Var<T> x) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += v;
  return x.tape->record("sum", {x.id}, BasicTensor<T>({}, static_cast<T>(acc)),
                        [](Tape<T>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          t.accumulate(n.inputs[0],
                                       BasicTensor<T>(t.value(n.inputs[0]).shape(), n.grad[0]));
                        });
}

// Scalar sum of weights * x for a fixed weight tensor.
template <std::floating_point T>
Var<T> weighted_sum(Var<T> x, BasicTensor<T> weights) {
  if (weights.shape() != x.shape()) throw DimensionError("weighted_sum: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += static_cast<double>(weights[i]) * static_cast<double>(x.value()[i]);
  }
  return x.tape->record("weighted_sum", {x.id}, BasicTensor<T>({}, static_cast<T>(acc)),
                        [w = std::move(weights)](Tape<T>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          BasicTensor<T> g = w;
                          for (T& v : g.data()) v *= n.grad[0];
                          t.accumulate(n.inputs[0], g);
                        });
}

// scale * sum(x^2). The collapsed-kernel weight decay term uses scale = wd / 2.
template <std::floating_point T>
Var<T> sum_squares(Var<T> x, double scale) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += static_cast<double>(v) * static_cast<double>(v);
  return x.tape->record("sum_squares", {x.id}, BasicTensor<T>({}, static_cast<T>(scale * acc)),
                        [scale](Tape<T>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          BasicTensor<T> g = t.value(n.inputs[0]);
                          const double factor = 2.0 * scale * static_cast<double>(n.grad[0]);
                          for (T& v : g.data()) v = static_cast<T>(factor * v);
                          t.accumulate(n.inputs[0], g);
                        });
}

template <std::floating_point T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels,
                             Reduction reduction = Reduction::mean) {
  auto ce = kflo::softmax_cross_entropy(logits.value(), labels, reduction);
  return logits.tape->record("softmax_cross_entropy", {logits.id},
                             BasicTensor<T>({}, ce.loss),
                             [grad = std::move(ce.grad)](Tape<T>& t, std::size_t self) {
                               const auto& n = t.node(self);
                               BasicTensor<T> g = grad;
                               for (T& v : g.data()) v *= n.grad[0];
                               t.accumulate(n.inputs[0], g);
                             });
}

}  // namespace ad

// Result of comparing analytic gradients with central differences for one
// parameter tensor.
struct GradCheckEntry {
  std::string name;
  ParamClass param_class;
  std::size_t coordinates;
  double max_rel_error;
};

struct GradCheckOptions {
  std::size_t coordinates_per_tensor = 32;
  std::uint64_t seed = 0;
};

// Builds the loss on a tape, backpropagates, then re-evaluates the loss with
// each sampled coordinate nudged by +/- eps. Tensors with fewer elements than
// coordinates_per_tensor are checked exhaustively. Parameter values are
// restored bit-exactly afterwards; gradients are left holding the analytic
// result.
template <std::floating_point T>
std::vector<GradCheckEntry> finite_diff_check(
    const std::function<Var<T>(Tape<T>&)>& build_loss, std::span<ParamSlot<T>* const> params,
    double eps, GradCheckOptions options = {}) {
  if (!(eps > 0.0 && eps <= 0.1)) throw ConfigError("finite-difference eps must be in (0, 0.1]");
  std::vector<GradCheckEntry> report;
  if (params.empty()) return report;

  auto evaluate = [&]() {
    Tape<T> tape(false);
    return static_cast<double>(build_loss(tape).value()[0]);
  };

  for (ParamSlot<T>* p : params) p->zero_grad();
  double base = 0.0;
  {
    Tape<T> tape;
    Var<T> loss = build_loss(tape);
    base = static_cast<double>(loss.value()[0]);
    tape.backward(loss);
  }
  if (evaluate() != base) throw DeterminismError("loss differs between identical evaluations");

  Rng rng(options.seed);
  for (ParamSlot<T>* p : params) {
    const std::size_t n = p->value().size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > options.coordinates_per_tensor) {
      for (std::size_t i = 0; i < options.coordinates_per_tensor; ++i) {
        std::swap(coords[i], coords[i + uniform_index(rng, n - i)]);
      }
      coords.resize(options.coordinates_per_tensor);
    }
    double worst = 0.0;
    for (std::size_t c : coords) {
      const T original = p->value()[c];
      p->mutable_value()[c] = static_cast<T>(original + eps);
      const double plus = evaluate();
      p->mutable_value()[c] = static_cast<T>(original - eps);
      const double minus = evaluate();
      p->mutable_value()[c] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double analytic = p->grad()[c];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic - numeric) / denom;
      worst = std::isnan(err) ? err : std::max(worst, err);
    }
    report.push_back({p->name(), p->param_class(), coords.size(), worst});
  }
  return report;
}

}  // namespace kflo
