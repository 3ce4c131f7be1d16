#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knnx/data_io.hpp"
#include "knnx/dataset.hpp"
#include "knnx/errors.hpp"
#include "knnx/linalg.hpp"
#include "knnx/model.hpp"

namespace knnx {

struct InfluenceScores {
  SampleId test_id = -1;
  std::vector<SampleId> candidate_ids;
  std::vector<double> scores;  // aligned with candidate_ids
  double damping = 0.0;
};

// Influence of training points on a test loss, restricted to the logit layer:
//
//   score(z) = (1/n) grad L(z_test)^T (H + damping I)^-1 grad L(z)
//
// H is the mean last-layer Hessian over the training set and n its size. A
// positive score predicts that removing z raises the test loss. The
// factorization is computed once and shared by every query.
class InfluenceModel {
 public:
  InfluenceModel(const LayeredModel& model, const LabeledDataset& train_set, double damping)
      : model_(&model), n_(train_set.size()), damping_(damping), factor_(init(model, train_set, damping)) {}

  std::size_t training_size() const noexcept { return n_; }
  double damping() const noexcept { return damping_; }

  // (H + damping I)^-1 grad L(z_test)
  std::vector<double> test_direction(const Sample& test) const { return factor_.solve(grad_last_layer(*model_, test.features, test.label)); }

  // Score of an arbitrary last-layer gradient against a solved test direction.
  double score_gradient(std::span<const double> test_direction, std::span<const double> train_gradient) const {
    if (train_gradient.size() != test_direction.size()) throw ShapeError("gradient length does not match the logit layer");
    return dot(test_direction, train_gradient) / static_cast<double>(n_);
  }

  InfluenceScores scores(const LabeledDataset& pool, const Sample& test) const {
    if (pool.empty()) throw DataError("influence pool is empty");
    const auto direction = test_direction(test);
    InfluenceScores out;
    out.test_id = test.id;
    out.damping = damping_;
    out.candidate_ids.reserve(pool.size());
    out.scores.reserve(pool.size());
    for (const auto& z : pool) {
      const double s = score_gradient(direction, grad_last_layer(*model_, z.features, z.label));
      if (!std::isfinite(s)) throw ModelError("non-finite influence score for train id " + std::to_string(z.id));
      out.candidate_ids.push_back(z.id);
      out.scores.push_back(s);
    }
    return out;
  }

 private:
  static CholeskyFactor init(const LayeredModel& model, const LabeledDataset& train_set, double damping) {
    if (!model.trained()) throw ModelError("influence needs a trained model");
    for (double p : model.parameters())
      if (!std::isfinite(p)) throw ModelError("model has non-finite parameters");
    if (train_set.empty()) throw DataError("influence needs a nonempty training set");
    if (damping < 0.0) throw ArgError("damping must be >= 0");
    return CholeskyFactor(hessian_last_layer(model, train_set, 0.0), damping);
  }

  const LayeredModel* model_;
  std::size_t n_;
  double damping_;
  CholeskyFactor factor_;
};

// One-shot convenience wrapper; prefer InfluenceModel for repeated queries.
inline InfluenceScores influence_scores(const LayeredModel& model, const LabeledDataset& train_set, const LabeledDataset& pool,
                                        const Sample& test, double damping) {
  return InfluenceModel(model, train_set, damping).scores(pool, test);
}

// Ids of the k largest signed scores, descending; ties by ascending id.
inline std::vector<SampleId> top_k_influential(const InfluenceScores& s, std::size_t k) {
  if (k < 1 || k > s.candidate_ids.size())
    throw ArgError("k = " + std::to_string(k) + " outside [1, " + std::to_string(s.candidate_ids.size()) + "]");
  std::vector<std::size_t> idx(s.candidate_ids.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return s.scores[a] > s.scores[b] || (s.scores[a] == s.scores[b] && s.candidate_ids[a] < s.candidate_ids[b]);
  });
  std::vector<SampleId> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(s.candidate_ids[idx[i]]);
  return out;
}

// Audit CSV: test_id,train_id,score
inline void write_influence_csv(std::ostream& out, const std::vector<InfluenceScores>& all, bool header = true) {
  if (header) out << "test_id,train_id,score\n";
  for (const auto& s : all)
    for (std::size_t i = 0; i < s.scores.size(); ++i) out << s.test_id << ',' << s.candidate_ids[i] << ',' << format_exact(s.scores[i]) << '\n';
}

}  // namespace knnx
