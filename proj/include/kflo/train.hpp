#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kflo/autodiff.hpp"
#include "kflo/data.hpp"
#include "kflo/errors.hpp"
#include "kflo/model.hpp"
#include "kflo/random.hpp"

namespace kflo {

// Multistep schedule: initial * factor^(number of milestones <= epoch).
// Epochs count from 0.
struct LrSchedule {
  double initial = 0.05;
  std::vector<int> milestones;
  double factor = 0.1;

  double at(int epoch) const {
    double lr = initial;
    for (int m : milestones) {
      if (epoch >= m) lr *= factor;
    }
    return lr;
  }
};

struct TrainConfig {
  LrSchedule lr;
  double momentum = 0.9;
  double wd_plain = 5e-4;      // plain kernels
  double wd_cascade = 1e-9;    // KFLO pointwise cascade kernels
  double wd_collapsed = 5e-4;  // collapsed W', applied through the loss
  std::optional<double> ema_decay;
  std::size_t batch_size = 64;
  int epochs = 1;
  std::uint64_t seed = 0;
  double data_fraction = 1.0;
  bool augment = false;  // horizontal flip + 4-pixel pad-crop
};

// Direct decay coefficient per parameter class. Base kernels get none: their
// decay reaches them through the wd_collapsed * |W'|^2 / 2 loss term.
inline double weight_decay_for(ParamClass cls, const TrainConfig& cfg) {
  switch (cls) {
    case ParamClass::plain: return cfg.wd_plain;
    case ParamClass::cascade_pointwise: return cfg.wd_cascade;
    case ParamClass::base_kernel:
    case ParamClass::bias: return 0.0;
  }
  return 0.0;
}

inline std::string layer_of(const std::string& param_name) {
  return param_name.substr(0, param_name.find('.'));
}

// Momentum SGD: v <- momentum * v + (grad + wd * w); w <- w - lr * v.
template <std::floating_point T>
class SgdMomentum {
 public:
  void step(std::span<ParamSlot<T>* const> params, const TrainConfig& cfg, int epoch) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (const ParamSlot<T>* p : params) velocity_.emplace_back(p->value().shape());
    }
    const double lr = cfg.lr.at(epoch);
    for (std::size_t i = 0; i < params.size(); ++i) {
      ParamSlot<T>& p = *params[i];
      BasicTensor<T>& v = velocity_[i];
      const double wd = weight_decay_for(p.param_class(), cfg);
      BasicTensor<T>& w = p.mutable_value();
      bool finite = true;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = static_cast<double>(p.grad()[j]) + wd * static_cast<double>(w[j]);
        v[j] = static_cast<T>(cfg.momentum * static_cast<double>(v[j]) + g);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * static_cast<double>(v[j]));
        finite = finite && std::isfinite(w[j]);
      }
      if (!finite) {
        throw DivergenceError(layer_of(p.name()), "non-finite update in layer " +
                                                      layer_of(p.name()) + " (parameter " +
                                                      p.name() + ")");
      }
    }
  }

  const std::vector<BasicTensor<T>>& velocity() const { return velocity_; }

 private:
  std::vector<BasicTensor<T>> velocity_;
};

// One optimizer update from the gradients already held in the slots.
template <std::floating_point T>
void sgd_step(std::span<ParamSlot<T>* const> params, SgdMomentum<T>& state,
              const TrainConfig& cfg, int epoch) {
  state.step(params, cfg, epoch);
}

// shadow <- decay * shadow + (1 - decay) * params, elementwise.
template <std::floating_point T>
void ema_update(std::span<BasicTensor<T>> shadow, std::span<const ParamSlot<T>* const> params,
                double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("EMA decay must be in [0, 1)");
  if (shadow.size() != params.size()) throw DimensionError("EMA shadow/parameter count mismatch");
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    const auto& p = params[i]->value();
    for (std::size_t j = 0; j < p.size(); ++j) {
      shadow[i][j] = static_cast<T>(decay * static_cast<double>(shadow[i][j]) +
                                    (1.0 - decay) * static_cast<double>(p[j]));
    }
  }
}

// wd / 2 * sum |W'|^2 over the collapsed kernels of one forward.
template <std::floating_point T>
std::optional<Var<T>> collapsed_decay_term(const ForwardTrace<T>& trace, double wd) {
  if (wd == 0.0 || trace.collapsed_kernels.empty()) return std::nullopt;
  Var<T> total = ad::sum_squares(trace.collapsed_kernels.front(), wd / 2.0);
  for (std::size_t i = 1; i < trace.collapsed_kernels.size(); ++i) {
    total = ad::add(total, ad::sum_squares(trace.collapsed_kernels[i], wd / 2.0));
  }
  return total;
}

// Index of the largest logit per row; ties go to the lowest class index.
template <std::floating_point T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (logits[r * cols + c] > logits[r * cols + best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

template <std::floating_point T>
std::size_t count_correct(const BasicTensor<T>& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    correct += static_cast<int>(pred[i]) == labels[i] ? 1 : 0;
  }
  return correct;
}

struct StepResult {
  double data_loss;  // mean cross-entropy of the batch
  std::size_t correct;
};

// Name of the first layer whose output on `x` is not finite, or "loss".
template <std::floating_point T>
std::string first_nonfinite_layer(const BasicModelGraph<T>& model, BasicTensor<T> x) {
  for (const auto& n : model.nodes()) {
    for (const auto* p : n.slots()) {
      if (!p->value().all_finite()) return n.name;
    }
    try {
      x = detail::apply_node(n, x, FilterPath::kernel_filtering);
    } catch (const InputError&) {
      return n.name;
    }
    if (!x.all_finite()) return n.name;
  }
  return "loss";
}

// collapse -> forward -> loss (+ collapsed decay) -> backward -> update.
template <std::floating_point T>
StepResult train_step(BasicModelGraph<T>& model, BasicTensor<T> x, std::span<const int> labels,
                      const TrainConfig& cfg, int epoch, SgdMomentum<T>& sgd) {
  model.zero_grad();
  Tape<T> tape;
  ForwardTrace<T> trace;
  const BasicTensor<T> input = x;
  auto diverged = [&]() {
    const std::string layer = first_nonfinite_layer(model, input);
    return DivergenceError(layer, "non-finite activations at layer " + layer);
  };
  Var<T> logits, loss;
  try {
    logits = forward(tape, model, tape.constant(std::move(x)), &trace);
    loss = ad::softmax_cross_entropy(logits, labels);
  } catch (const InputError&) {
    // Debug builds check every op output for non-finite values.
    if (input.all_finite()) throw diverged();
    throw;
  }
  if (!std::isfinite(loss.value()[0])) throw diverged();
  StepResult r{static_cast<double>(loss.value()[0]), count_correct(logits.value(), labels)};
  if (auto reg = collapsed_decay_term(trace, cfg.wd_collapsed)) loss = ad::add(loss, *reg);
  tape.backward(loss);
  auto params = model.parameters();
  sgd.step(params, cfg, epoch);
  return r;
}

template <std::floating_point T>
double evaluate(const BasicModelGraph<T>& model, const Dataset& data, std::size_t batch = 250) {
  if (data.size() == 0) throw UsageError("cannot evaluate on an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    BasicTensor<T> logits = predict(model, tensor_cast<T>(data.gather(idx)));
    const auto labels = data.gather_labels(idx);
    correct += count_correct(logits, std::span<const int>(labels));
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct MetricsRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_acc;
  std::optional<double> ema_test_acc;
  double wall_seconds = 0.0;
  std::uint64_t macs_per_step = 0;
};

namespace detail {
inline std::string shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
}  // namespace detail

// One space-separated key=value line with a fixed key order. Optional keys
// are omitted when unset.
inline std::string format_metrics(const MetricsRecord& m) {
  std::string s = "epoch=" + std::to_string(m.epoch) +
                  " train_loss=" + detail::shortest(m.train_loss) +
                  " train_acc=" + detail::shortest(m.train_acc);
  if (m.test_acc) s += " test_acc=" + detail::shortest(*m.test_acc);
  if (m.ema_test_acc) s += " ema_test_acc=" + detail::shortest(*m.ema_test_acc);
  s += " wall_seconds=" + detail::shortest(m.wall_seconds);
  s += " macs_per_step=" + std::to_string(m.macs_per_step);
  return s;
}

// Every field except wall_seconds, which measures the host.
inline bool same_outcome(const MetricsRecord& a, const MetricsRecord& b) {
  return a.epoch == b.epoch && a.train_loss == b.train_loss && a.train_acc == b.train_acc &&
         a.test_acc == b.test_acc && a.ema_test_acc == b.ema_test_acc &&
         a.macs_per_step == b.macs_per_step;
}

struct StepInfo {
  int epoch;
  std::size_t step;
  double loss;
};
using StepObserver = std::function<void(const StepInfo&)>;

namespace detail {

// Random horizontal flip and 4-pixel zero-pad random crop, in place.
inline void augment_batch(Tensor& x, Rng& rng) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<float> tmp(c * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    float* img = x.ptr() + i * c * h * w;
    const bool flip = uniform_index(rng, 2) == 1;
    const auto dy = static_cast<std::ptrdiff_t>(uniform_index(rng, 9)) - 4;
    const auto dx = static_cast<std::ptrdiff_t>(uniform_index(rng, 9)) - 4;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t q = 0; q < w; ++q) {
          const auto sr = static_cast<std::ptrdiff_t>(r) + dy;
          auto sq = static_cast<std::ptrdiff_t>(flip ? w - 1 - q : q) + dx;
          float v = 0.0f;
          if (sr >= 0 && sr < static_cast<std::ptrdiff_t>(h) && sq >= 0 &&
              sq < static_cast<std::ptrdiff_t>(w)) {
            v = img[(ch * h + static_cast<std::size_t>(sr)) * w + static_cast<std::size_t>(sq)];
          }
          tmp[(ch * h + r) * w + q] = v;
        }
      }
    }
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

}  // namespace detail

// Seeded, single-threaded training loop. Emits one record per epoch.
inline std::vector<MetricsRecord> train(ModelGraph& model, const Dataset& train_set,
                                        const TrainConfig& cfg, const Dataset* test_set = nullptr,
                                        const StepObserver& observer = {}) {
  if (model.mode() != ModelMode::training) throw ModeError("cannot train a deployed model");
  if (train_set.size() == 0) throw UsageError("training set is empty");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  model.set_input_shape(train_set.sample_shape());

  Rng rng(cfg.seed);
  SgdMomentum<float> sgd;
  std::vector<Tensor> shadow;
  if (cfg.ema_decay) {
    for (const auto* p : std::as_const(model).parameters()) shadow.push_back(p->value());
  }
  const std::uint64_t macs = model.training_macs(cfg.batch_size, FilterPath::kernel_filtering);

  std::vector<MetricsRecord> records;
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto order = permutation(train_set.size(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor x = train_set.gather(idx);
      if (cfg.augment && x.rank() == 4) detail::augment_batch(x, rng);
      const auto labels = train_set.gather_labels(idx);
      const StepResult r = train_step(model, std::move(x), std::span<const int>(labels), cfg, epoch, sgd);
      loss_sum += r.data_loss * static_cast<double>(idx.size());
      correct += r.correct;
      if (cfg.ema_decay) {
        const auto params = std::as_const(model).parameters();
        ema_update(std::span<Tensor>(shadow), std::span<const ParamSlot<float>* const>(params),
                   *cfg.ema_decay);
      }
      if (observer) observer({epoch, step, r.data_loss});
      ++step;
    }
    MetricsRecord m;
    m.epoch = epoch + 1;
    m.train_loss = loss_sum / static_cast<double>(train_set.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    if (test_set) {
      m.test_acc = evaluate(model, *test_set);
      if (cfg.ema_decay) {
        ModelGraph ema_model = model;
        auto params = ema_model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->set_value(shadow[i]);
        m.ema_test_acc = evaluate(ema_model, *test_set);
      }
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    m.macs_per_step = macs;
    records.push_back(m);
  }
  return records;
}

}  // namespace kflo
