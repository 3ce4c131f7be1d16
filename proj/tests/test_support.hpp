#pragma once

// Fixtures and independent numerical oracles shared by the unit tests.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "knnx/arch.hpp"
#include "knnx/data_io.hpp"
#include "knnx/model.hpp"
#include "knnx/random.hpp"

namespace knnx::testing {

inline ArchSpec mlp(int in, std::vector<int> hidden, int classes) {
  ArchSpec a;
  a.input = {in};
  int i = 1;
  for (int h : hidden) {
    a.layers.push_back(LayerSpec::dense(h, "fc" + std::to_string(i)));
    a.layers.push_back(LayerSpec::relu("relu" + std::to_string(i)));
    ++i;
  }
  a.layers.push_back(LayerSpec::dense(classes, "logits"));
  return a;
}

inline ArchSpec logistic(int in, int classes) {
  ArchSpec a;
  a.input = {in};
  a.layers.push_back(LayerSpec::dense(classes, "logits"));
  return a;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Central difference of f along every coordinate of theta.
inline std::vector<double> central_gradient(const std::function<double(const std::vector<double>&)>& f, std::vector<double> theta,
                                            double h = 1e-5) {
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double t = theta[i];
    theta[i] = t + h;
    const double up = f(theta);
    theta[i] = t - h;
    const double down = f(theta);
    theta[i] = t;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Second-order central differences of f (loss values only).
inline std::vector<std::vector<double>> central_hessian(const std::function<double(const std::vector<double>&)>& f,
                                                        std::vector<double> theta, double h = 1e-4) {
  const std::size_t n = theta.size();
  std::vector<std::vector<double>> H(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      auto eval = [&](double di, double dj) {
        auto t = theta;
        t[i] += di;
        t[j] += dj;
        return f(t);
      };
      const double v = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4 * h * h);
      H[i][j] = H[j][i] = v;
    }
  return H;
}

// max |a - b| / max(|a|_inf, |b|_inf, floor)
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    na = std::max(na, std::abs(a[i]));
    nb = std::max(nb, std::abs(b[i]));
  }
  return diff / std::max({na, nb, floor});
}

// Mean cross-entropy over `data` as a function of the logit-layer block only.
inline std::function<double(const std::vector<double>&)> mean_loss_of_last_layer(const LayeredModel& model, const LabeledDataset& data) {
  return [&model, &data](const std::vector<double>& block) {
    LayeredModel m = model;
    std::copy(block.begin(), block.end(), m.mutable_parameters().begin() + static_cast<std::ptrdiff_t>(m.last_layer_offset()));
    double s = 0.0;
    for (const auto& z : data) s += ce_loss(m, z.features, z.label);
    return s / static_cast<double>(data.size());
  };
}

inline std::vector<double> last_block(const LayeredModel& m) {
  const auto p = m.parameters().subspan(m.last_layer_offset(), m.last_layer_size());
  return {p.begin(), p.end()};
}

}  // namespace knnx::testing
