#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knnx/arch.hpp"
#include "knnx/dataset.hpp"
#include "knnx/errors.hpp"
#include "knnx/linalg.hpp"
#include "knnx/random.hpp"

namespace knnx {

// Parameters of a layered classifier. The architecture is fixed at
// construction; only the flat parameter vector changes during training.
class LayeredModel {
 public:
  LayeredModel() = default;

  LayeredModel(ArchSpec arch, std::vector<double> parameters)
      : arch_(std::move(arch)), plan_(plan_layers(arch_)), parameters_(std::move(parameters)) {
    if (parameters_.size() != num_parameters(plan_))
      throw ArchError("parameter vector has " + std::to_string(parameters_.size()) + " scalars, architecture needs " +
                      std::to_string(num_parameters(plan_)));
  }

  const ArchSpec& arch() const noexcept { return arch_; }
  const std::vector<LayerPlan>& plan() const noexcept { return plan_; }
  std::span<const double> parameters() const noexcept { return parameters_; }
  std::vector<double>& mutable_parameters() noexcept { return parameters_; }

  bool trained() const noexcept { return trained_; }
  std::uint64_t train_seed() const noexcept { return train_seed_; }
  void mark_trained(std::uint64_t seed) noexcept {
    trained_ = true;
    train_seed_ = seed;
  }

  std::size_t input_dim() const noexcept { return plan_.front().in.size(); }
  std::size_t num_classes() const noexcept { return plan_.back().out.size(); }
  // Width h of the representation feeding the logit layer.
  std::size_t penultimate_dim() const noexcept { return plan_.back().fan_in; }
  std::size_t last_layer_offset() const noexcept { return plan_.back().param_offset; }
  // (h + 1) * C
  std::size_t last_layer_size() const noexcept { return plan_.back().param_count; }

  std::span<const double> layer_parameters(std::size_t layer) const {
    return std::span<const double>(parameters_).subspan(plan_[layer].param_offset, plan_[layer].param_count);
  }

  std::size_t layer_index(const std::string& tap) const {
    for (std::size_t i = 0; i < arch_.layers.size(); ++i)
      if (arch_.layers[i].tap == tap) return i;
    throw TapError("unknown tap '" + tap + "'");
  }

  static std::size_t num_parameters(const std::vector<LayerPlan>& plan) {
    return plan.empty() ? 0 : plan.back().param_offset + plan.back().param_count;
  }

  friend bool operator==(const LayeredModel& a, const LayeredModel& b) {
    return a.arch_ == b.arch_ && a.parameters_ == b.parameters_ && a.trained_ == b.trained_ && a.train_seed_ == b.train_seed_;
  }

 private:
  ArchSpec arch_;
  std::vector<LayerPlan> plan_;
  std::vector<double> parameters_;
  bool trained_ = false;
  std::uint64_t train_seed_ = 0;
};

enum class Optimizer {
  sgd,                // mini-batch SGD with momentum over every non-frozen layer
  newton_last_layer,  // exact full-batch Newton fit of the logit layer only
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::set<std::string> frozen_layers;
  // L2 coefficient: the objective is mean loss + weight_decay/2 * |theta|^2.
  double weight_decay = 0.0;
  Optimizer optimizer = Optimizer::sgd;
  double newton_tolerance = 1e-10;
  int newton_max_iterations = 100;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for every weight and bias, drawn in
// parameter-layout order from a generator seeded with `seed`.
inline LayeredModel build_model(const ArchSpec& arch, std::uint64_t seed) {
  const auto plan = plan_layers(arch);
  std::vector<double> params(LayeredModel::num_parameters(plan), 0.0);
  Rng rng(seed);
  for (const auto& p : plan) {
    if (p.param_count == 0) continue;
    const double bound = std::sqrt(1.0 / static_cast<double>(p.fan_in));
    for (std::size_t i = 0; i < p.param_count; ++i) params[p.param_offset + i] = rng.uniform(-bound, bound);
  }
  return LayeredModel(arch, std::move(params));
}

namespace detail {

// Everything the backward pass needs from one forward pass.
struct Trace {
  std::vector<std::vector<double>> acts;           // acts[0] = input, acts[i + 1] = output of layer i
  std::vector<std::vector<std::size_t>> argmax;    // maxpool source index per output
  std::vector<std::vector<double>> dropout_scale;  // 0 or 1/(1 - rate) per unit
};

inline void check_input(const LayeredModel& model, std::span<const double> x) {
  if (x.size() != model.input_dim())
    throw ShapeError("input has dimension " + std::to_string(x.size()) + ", model expects " + std::to_string(model.input_dim()));
}

// Runs layers [0, stop). With a dropout generator the pass is a training
// pass; without one dropout is the identity.
inline Trace forward_trace(const LayeredModel& model, std::span<const double> x, std::size_t stop, Rng* dropout_rng = nullptr) {
  const auto& layers = model.arch().layers;
  const auto& plan = model.plan();
  const double* params = model.parameters().data();
  Trace t;
  t.acts.reserve(stop + 1);
  t.acts.emplace_back(x.begin(), x.end());
  t.argmax.resize(stop);
  t.dropout_scale.resize(stop);
  for (std::size_t li = 0; li < stop; ++li) {
    const LayerSpec& l = layers[li];
    const LayerPlan& p = plan[li];
    const std::vector<double>& in = t.acts.back();
    std::vector<double> out(p.out.size());
    switch (l.kind) {
      case LayerKind::dense: {
        const std::size_t fan = p.fan_in;
        for (std::size_t o = 0; o < out.size(); ++o) {
          const double* row = params + p.param_offset + o * (fan + 1);
          double acc = row[fan];
          for (std::size_t i = 0; i < fan; ++i) acc += row[i] * in[i];
          out[o] = acc;
        }
        break;
      }
      case LayerKind::conv2d: {
        const int k = l.kernel, s = l.stride;
        const int ih = p.in.height, iw = p.in.width, ic = p.in.channels;
        const int oh = p.out.height, ow = p.out.width;
        for (int co = 0; co < p.out.channels; ++co) {
          const double* row = params + p.param_offset + static_cast<std::size_t>(co) * (p.fan_in + 1);
          for (int y = 0; y < oh; ++y)
            for (int xo = 0; xo < ow; ++xo) {
              double acc = row[p.fan_in];
              for (int ci = 0; ci < ic; ++ci)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx)
                    acc += row[(ci * k + ky) * k + kx] * in[(static_cast<std::size_t>(ci) * ih + y * s + ky) * iw + xo * s + kx];
              out[(static_cast<std::size_t>(co) * oh + y) * ow + xo] = acc;
            }
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
        break;
      case LayerKind::maxpool: {
        const int k = l.kernel;
        const int ih = p.in.height, iw = p.in.width;
        const int oh = p.out.height, ow = p.out.width;
        auto& src = t.argmax[li];
        src.resize(out.size());
        for (int c = 0; c < p.out.channels; ++c)
          for (int y = 0; y < oh; ++y)
            for (int xo = 0; xo < ow; ++xo) {
              std::size_t best = (static_cast<std::size_t>(c) * ih + y * k) * iw + xo * k;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const std::size_t idx = (static_cast<std::size_t>(c) * ih + y * k + ky) * iw + xo * k + kx;
                  if (in[idx] > in[best]) best = idx;
                }
              const std::size_t o = (static_cast<std::size_t>(c) * oh + y) * ow + xo;
              out[o] = in[best];
              src[o] = best;
            }
        break;
      }
      case LayerKind::dropout:
        if (dropout_rng != nullptr && l.rate > 0.0) {
          auto& scale = t.dropout_scale[li];
          scale.resize(out.size());
          const double keep = 1.0 / (1.0 - l.rate);
          for (std::size_t i = 0; i < out.size(); ++i) {
            scale[i] = dropout_rng->uniform() < l.rate ? 0.0 : keep;
            out[i] = in[i] * scale[i];
          }
        } else {
          out = in;
        }
        break;
      case LayerKind::flatten:
        out = in;
        break;
    }
    t.acts.push_back(std::move(out));
  }
  return t;
}

// Accumulates d(loss)/d(params) into `grad` for layers whose `trainable`
// flag is set, given d(loss)/d(logits).
inline void backward(const LayeredModel& model, const Trace& t, std::vector<double> upstream, std::vector<double>& grad,
                     const std::vector<bool>& trainable) {
  const auto& layers = model.arch().layers;
  const auto& plan = model.plan();
  const double* params = model.parameters().data();
  // Layers before the first trainable one only need their input gradient if
  // something upstream of them trains.
  std::size_t first_trainable = layers.size();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (trainable[i] && layers[i].parametric()) {
      first_trainable = i;
      break;
    }
  for (std::size_t li = layers.size(); li-- > 0;) {
    if (li < first_trainable) break;
    const LayerSpec& l = layers[li];
    const LayerPlan& p = plan[li];
    const std::vector<double>& in = t.acts[li];
    std::vector<double> down(p.in.size(), 0.0);
    switch (l.kind) {
      case LayerKind::dense: {
        const std::size_t fan = p.fan_in;
        for (std::size_t o = 0; o < upstream.size(); ++o) {
          const double g = upstream[o];
          const double* row = params + p.param_offset + o * (fan + 1);
          if (trainable[li]) {
            double* grow = grad.data() + p.param_offset + o * (fan + 1);
            for (std::size_t i = 0; i < fan; ++i) grow[i] += g * in[i];
            grow[fan] += g;
          }
          for (std::size_t i = 0; i < fan; ++i) down[i] += g * row[i];
        }
        break;
      }
      case LayerKind::conv2d: {
        const int k = l.kernel, s = l.stride;
        const int ih = p.in.height, iw = p.in.width, ic = p.in.channels;
        const int oh = p.out.height, ow = p.out.width;
        for (int co = 0; co < p.out.channels; ++co) {
          const double* row = params + p.param_offset + static_cast<std::size_t>(co) * (p.fan_in + 1);
          double* grow = grad.data() + p.param_offset + static_cast<std::size_t>(co) * (p.fan_in + 1);
          for (int y = 0; y < oh; ++y)
            for (int xo = 0; xo < ow; ++xo) {
              const double g = upstream[(static_cast<std::size_t>(co) * oh + y) * ow + xo];
              if (g == 0.0) continue;
              if (trainable[li]) grow[p.fan_in] += g;
              for (int ci = 0; ci < ic; ++ci)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    const std::size_t w = (ci * k + ky) * k + kx;
                    const std::size_t idx = (static_cast<std::size_t>(ci) * ih + y * s + ky) * iw + xo * s + kx;
                    if (trainable[li]) grow[w] += g * in[idx];
                    down[idx] += g * row[w];
                  }
            }
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < down.size(); ++i) down[i] = in[i] > 0.0 ? upstream[i] : 0.0;
        break;
      case LayerKind::maxpool:
        for (std::size_t o = 0; o < upstream.size(); ++o) down[t.argmax[li][o]] += upstream[o];
        break;
      case LayerKind::dropout:
        if (t.dropout_scale[li].empty())
          down = std::move(upstream);
        else
          for (std::size_t i = 0; i < down.size(); ++i) down[i] = upstream[i] * t.dropout_scale[li][i];
        break;
      case LayerKind::flatten:
        down = std::move(upstream);
        break;
    }
    upstream = std::move(down);
  }
}

inline double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace detail

inline std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(logits[i] - m));
  for (double& v : p) v /= s;
  return p;
}

struct ForwardResult {
  std::vector<double> logits;
  std::map<std::string, std::vector<double>> taps;
};

// Inference pass. Every layer's output is exposed under its tap name; the
// logits are the final tap.
inline ForwardResult forward_with_taps(const LayeredModel& model, std::span<const double> x) {
  detail::check_input(model, x);
  auto trace = detail::forward_trace(model, x, model.arch().layers.size());
  ForwardResult r;
  const auto& layers = model.arch().layers;
  for (std::size_t i = 0; i < layers.size(); ++i) r.taps.emplace(layers[i].tap, trace.acts[i + 1]);
  r.logits = std::move(trace.acts.back());
  return r;
}

inline std::vector<double> logits(const LayeredModel& model, std::span<const double> x) {
  detail::check_input(model, x);
  return std::move(detail::forward_trace(model, x, model.arch().layers.size()).acts.back());
}

// Output of one tap.
inline std::vector<double> tap_activation(const LayeredModel& model, std::span<const double> x, std::size_t layer) {
  detail::check_input(model, x);
  return std::move(detail::forward_trace(model, x, layer + 1).acts.back());
}

// Input of the logit layer (phi_last); the raw input for a model with a
// single dense layer.
inline std::vector<double> penultimate_activation(const LayeredModel& model, std::span<const double> x) {
  detail::check_input(model, x);
  return std::move(detail::forward_trace(model, x, model.arch().layers.size() - 1).acts.back());
}

// argmax, ties toward the smallest class index.
inline int argmax_label(std::span<const double> logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

inline int predict(const LayeredModel& model, std::span<const double> x) { return argmax_label(logits(model, x)); }

inline void check_label(const LayeredModel& model, int y) {
  if (y < 0 || static_cast<std::size_t>(y) >= model.num_classes())
    throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(model.num_classes()) + ")");
}

// -log softmax(logits)[y], computed with max subtraction.
inline double ce_loss_from_logits(std::span<const double> z, int y) {
  const double loss = detail::log_sum_exp(z) - z[static_cast<std::size_t>(y)];
  return loss > 0.0 ? loss : 0.0;
}

inline double ce_loss(const LayeredModel& model, std::span<const double> x, int y) {
  check_label(model, y);
  return ce_loss_from_logits(logits(model, x), y);
}

// Exact gradient of ce_loss with respect to the logit layer, laid out like the
// parameters: index c*(h+1)+j is (p_c - [c == y]) * a_j with a_h = 1.
inline std::vector<double> grad_last_layer(const LayeredModel& model, std::span<const double> x, int y) {
  check_label(model, y);
  detail::check_input(model, x);
  auto trace = detail::forward_trace(model, x, model.arch().layers.size());
  const auto p = softmax(trace.acts.back());
  const auto& a = trace.acts[trace.acts.size() - 2];
  const std::size_t h = a.size();
  std::vector<double> g(model.last_layer_size());
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double r = p[c] - (static_cast<int>(c) == y ? 1.0 : 0.0);
    for (std::size_t j = 0; j < h; ++j) g[c * (h + 1) + j] = r * a[j];
    g[c * (h + 1) + h] = r;
  }
  return g;
}

namespace detail {

// Penultimate activations of every sample; they do not depend on the logit
// layer, so last-layer fits compute them once.
inline std::vector<std::vector<double>> penultimate_rows(const LayeredModel& model, const LabeledDataset& data) {
  std::vector<std::vector<double>> rows;
  rows.reserve(data.size());
  for (const auto& s : data) rows.push_back(penultimate_activation(model, s.features));
  return rows;
}

inline std::vector<double> last_layer_logits(std::span<const double> theta, std::span<const double> a, std::size_t classes) {
  const std::size_t h = a.size();
  std::vector<double> z(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const double* row = theta.data() + c * (h + 1);
    double acc = row[h];
    for (std::size_t j = 0; j < h; ++j) acc += row[j] * a[j];
    z[c] = acc;
  }
  return z;
}

// (1/n) sum_z (diag(p) - p p^T) kron (a a^T), a augmented with 1. Only the
// upper triangle is accumulated, then mirrored.
inline Matrix last_layer_hessian(std::span<const double> theta, const std::vector<std::vector<double>>& rows,
                                 std::size_t classes) {
  const std::size_t h = rows.empty() ? 0 : rows.front().size();
  const std::size_t m = h + 1;
  const std::size_t dim = m * classes;
  Matrix hess(dim);
  std::vector<double> outer(m * m);
  std::vector<double> a(m);
  for (const auto& row : rows) {
    std::copy(row.begin(), row.end(), a.begin());
    a[h] = 1.0;
    const auto p = softmax(last_layer_logits(theta, row, classes));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i; j < m; ++j) outer[i * m + j] = outer[j * m + i] = a[i] * a[j];
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t d = c; d < classes; ++d) {
        const double coef = (c == d ? p[c] : 0.0) - p[c] * p[d];
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t r = c * m + i;
          const std::size_t j0 = (c == d) ? i : 0;
          for (std::size_t j = j0; j < m; ++j) hess(r, d * m + j) += coef * outer[i * m + j];
        }
      }
  }
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r = 0; r < dim; ++r)
    for (std::size_t c = r; c < dim; ++c) {
      const double v = hess(r, c) * inv_n;
      hess(r, c) = v;
      hess(c, r) = v;
    }
  return hess;
}

}  // namespace detail

// (1/n) sum of exact per-sample cross-entropy Hessians of the logit layer,
// plus damping on the diagonal. Symmetric by construction.
inline Matrix hessian_last_layer(const LayeredModel& model, const LabeledDataset& data, double damping) {
  if (data.empty()) throw DataError("Hessian needs a nonempty dataset");
  if (damping < 0.0) throw ArgError("damping must be >= 0");
  const auto rows = detail::penultimate_rows(model, data);
  Matrix hess = detail::last_layer_hessian(model.parameters().subspan(model.last_layer_offset(), model.last_layer_size()), rows,
                                           model.num_classes());
  for (std::size_t i = 0; i < hess.size(); ++i) hess(i, i) += damping;
  return hess;
}

namespace detail {

inline void validate_training(const LayeredModel& model, const LabeledDataset& data, const TrainConfig& cfg) {
  if (data.empty()) throw DataError("cannot train on an empty dataset");
  if (data.dim() != model.input_dim())
    throw ShapeError("dataset dimension " + std::to_string(data.dim()) + " does not match model input " +
                     std::to_string(model.input_dim()));
  if (static_cast<std::size_t>(data.num_classes()) > model.num_classes())
    throw LabelError("dataset has " + std::to_string(data.num_classes()) + " classes, model outputs " +
                     std::to_string(model.num_classes()));
  if (cfg.epochs < 1) throw ArgError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ArgError("batch_size must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw ArgError("learning_rate must be > 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw ArgError("momentum must be in [0, 1)");
  if (cfg.weight_decay < 0.0) throw ArgError("weight_decay must be >= 0");
  for (const auto& tap : cfg.frozen_layers) model.layer_index(tap);
}

inline LayeredModel train_sgd(LayeredModel model, const LabeledDataset& data, const TrainConfig& cfg) {
  const auto& layers = model.arch().layers;
  const auto& plan = model.plan();
  std::vector<bool> trainable(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) trainable[i] = layers[i].parametric() && !cfg.frozen_layers.count(layers[i].tap);

  Rng order_rng(Rng::derive(cfg.seed, 1));
  Rng dropout_rng(Rng::derive(cfg.seed, 2));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto& theta = model.mutable_parameters();
  std::vector<double> velocity(theta.size(), 0.0);
  std::vector<double> grad(theta.size(), 0.0);
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const Sample& s = data[order[b]];
        auto trace = forward_trace(model, s.features, layers.size(), &dropout_rng);
        auto up = softmax(trace.acts.back());
        up[static_cast<std::size_t>(s.label)] -= 1.0;
        backward(model, trace, std::move(up), grad, trainable);
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t li = 0; li < layers.size(); ++li) {
        if (!trainable[li]) continue;
        const std::size_t lo = plan[li].param_offset, hi = lo + plan[li].param_count;
        for (std::size_t i = lo; i < hi; ++i) {
          const double g = grad[i] * scale + cfg.weight_decay * theta[i];
          velocity[i] = cfg.momentum * velocity[i] + g;
          theta[i] -= cfg.learning_rate * velocity[i];
        }
      }
    }
  }
  return model;
}

struct LastLayerObjective {
  double value = 0.0;
  std::vector<double> gradient;
};

inline LastLayerObjective last_layer_objective(std::span<const double> theta, const std::vector<std::vector<double>>& rows,
                                               const LabeledDataset& data, std::size_t classes, double l2) {
  LastLayerObjective out;
  out.gradient.assign(theta.size(), 0.0);
  const std::size_t h = rows.front().size();
  for (std::size_t n = 0; n < rows.size(); ++n) {
    const auto z = last_layer_logits(theta, rows[n], classes);
    const int y = data[n].label;
    out.value += ce_loss_from_logits(z, y);
    const auto p = softmax(z);
    for (std::size_t c = 0; c < classes; ++c) {
      const double r = p[c] - (static_cast<int>(c) == y ? 1.0 : 0.0);
      double* g = out.gradient.data() + c * (h + 1);
      for (std::size_t j = 0; j < h; ++j) g[j] += r * rows[n][j];
      g[h] += r;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  out.value *= inv_n;
  double sq = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    out.gradient[i] = out.gradient[i] * inv_n + l2 * theta[i];
    sq += theta[i] * theta[i];
  }
  out.value += 0.5 * l2 * sq;
  return out;
}

// Damped Newton with Armijo backtracking on the convex logit-layer objective.
inline LayeredModel train_newton_last_layer(LayeredModel model, const LabeledDataset& data, const TrainConfig& cfg) {
  const auto rows = penultimate_rows(model, data);
  const std::size_t classes = model.num_classes();
  const std::size_t off = model.last_layer_offset(), len = model.last_layer_size();
  std::vector<double> theta(model.parameters().begin() + static_cast<std::ptrdiff_t>(off),
                            model.parameters().begin() + static_cast<std::ptrdiff_t>(off + len));
  auto obj = last_layer_objective(theta, rows, data, classes, cfg.weight_decay);
  for (int it = 0; it < cfg.newton_max_iterations && norm2(obj.gradient) >= cfg.newton_tolerance; ++it) {
    const Matrix hess = last_layer_hessian(theta, rows, classes);
    // Softmax over C classes has a flat direction; a tiny extra shift keeps
    // the factorization defined when weight_decay is zero.
    double shift = cfg.weight_decay;
    std::vector<double> step;
    for (;;) {
      try {
        step = CholeskyFactor(hess, shift).solve(obj.gradient);
        break;
      } catch (const SingularHessianError&) {
        shift = shift > 0.0 ? shift * 10.0 : 1e-12;
      }
    }
    const double slope = -dot(obj.gradient, step);
    double t = 1.0;
    std::vector<double> trial(theta.size());
    LastLayerObjective next;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      for (std::size_t i = 0; i < theta.size(); ++i) trial[i] = theta[i] - t * step[i];
      next = last_layer_objective(trial, rows, data, classes, cfg.weight_decay);
      if (next.value <= obj.value + 1e-4 * t * slope) break;
    }
    if (!(next.value <= obj.value)) break;  // no further decrease at machine precision
    theta = trial;
    obj = std::move(next);
  }
  auto& params = model.mutable_parameters();
  std::copy(theta.begin(), theta.end(), params.begin() + static_cast<std::ptrdiff_t>(off));
  return model;
}

}  // namespace detail

// Returns a trained copy. Shuffling and dropout masks derive from cfg.seed;
// layers named in cfg.frozen_layers keep their parameters bit for bit. The
// Newton optimizer updates only the logit layer.
inline LayeredModel train(const LayeredModel& model, const LabeledDataset& data, const TrainConfig& cfg) {
  detail::validate_training(model, data, cfg);
  LayeredModel out = model;
  const bool logit_frozen = cfg.frozen_layers.count(model.arch().layers.back().tap) > 0;
  if (cfg.optimizer == Optimizer::newton_last_layer) {
    if (!logit_frozen) out = detail::train_newton_last_layer(std::move(out), data, cfg);
  } else {
    out = detail::train_sgd(std::move(out), data, cfg);
  }
  out.mark_trained(cfg.seed);
  return out;
}

// Norm of the gradient of mean loss + weight_decay/2 |theta|^2 over the logit
// layer; how converged a last-layer fit is.
inline double last_layer_gradient_norm(const LayeredModel& model, const LabeledDataset& data, double weight_decay) {
  if (data.empty()) throw DataError("gradient norm needs a nonempty dataset");
  const auto rows = detail::penultimate_rows(model, data);
  const auto theta = model.parameters().subspan(model.last_layer_offset(), model.last_layer_size());
  return norm2(detail::last_layer_objective(theta, rows, data, model.num_classes(), weight_decay).gradient);
}

inline double accuracy(const LayeredModel& model, const LabeledDataset& data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : data) hits += predict(model, s.features) == s.label;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace knnx
