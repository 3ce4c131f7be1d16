#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "knnx/data_io.hpp"
#include "knnx/dataset.hpp"
#include "knnx/errors.hpp"
#include "knnx/linalg.hpp"
#include "knnx/model.hpp"

namespace knnx {

inline constexpr double kDegenerateNorm = 1e-12;

// 1 - cos(u, v), clamped to [0, 2]. The denominator is sqrt(|u|^2 |v|^2) so
// that identical inputs give exactly 0.
inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw ShapeError("cosine_distance: dimensions " + std::to_string(u.size()) + " and " + std::to_string(v.size()) + " differ");
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!(std::sqrt(uu) > kDegenerateNorm) || !(std::sqrt(vv) > kDegenerateNorm))
    throw DegenerateVectorError("cosine_distance: vector norm is below 1e-12");
  const double d = 1.0 - uv / std::sqrt(uu * vv);
  return std::clamp(d, 0.0, 2.0);
}

// Activations of one tap for a set of samples, row-major.
class RepresentationMatrix {
 public:
  RepresentationMatrix() = default;

  RepresentationMatrix(std::string layer, std::string source, std::size_t dim)
      : layer_(std::move(layer)), source_(std::move(source)), dim_(dim) {
    if (dim_ < 1) throw ShapeError("representation dimension must be >= 1");
  }

  void add_row(SampleId id, std::span<const double> values) {
    if (values.size() != dim_)
      throw ShapeError("row for id " + std::to_string(id) + " has dimension " + std::to_string(values.size()) + ", expected " +
                       std::to_string(dim_));
    if (!index_.emplace(id, ids_.size()).second) throw IdError("duplicate id " + std::to_string(id) + " in representation matrix");
    ids_.push_back(id);
    values_.insert(values_.end(), values.begin(), values.end());
  }

  const std::string& layer() const noexcept { return layer_; }
  const std::string& source() const noexcept { return source_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t rows() const noexcept { return ids_.size(); }
  const std::vector<SampleId>& ids() const noexcept { return ids_; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }
  bool contains(SampleId id) const { return index_.count(id) > 0; }

  RepresentationMatrix scaled(double factor) const {
    RepresentationMatrix out = *this;
    for (double& v : out.values_) v *= factor;
    return out;
  }

  friend bool operator==(const RepresentationMatrix& a, const RepresentationMatrix& b) {
    return a.layer_ == b.layer_ && a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.values_ == b.values_;
  }

 private:
  std::string layer_;
  std::string source_;
  std::size_t dim_ = 0;
  std::vector<SampleId> ids_;
  std::vector<double> values_;
  std::unordered_map<SampleId, std::size_t> index_;
};

// One row per sample, in dataset order.
inline RepresentationMatrix extract_representations(const LayeredModel& model, const LabeledDataset& data, const std::string& layer) {
  const std::size_t li = model.layer_index(layer);
  RepresentationMatrix out(layer, data.name(), model.plan()[li].out.size());
  for (const auto& s : data) out.add_row(s.id, tap_activation(model, s.features, li));
  return out;
}

// CSV cache layout: a "layer,d_layer,n" header line, then one line per row
// with the id followed by d_layer values in shortest round-trip form.
inline void write_representations_csv(std::ostream& out, const RepresentationMatrix& m) {
  out << m.layer() << ',' << m.dim() << ',' << m.rows() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out << m.ids()[r];
    for (double v : m.row(r)) out << ',' << format_exact(v);
    out << '\n';
  }
}

inline RepresentationMatrix read_representations_csv(std::istream& in, std::string source = "") {
  constexpr auto row_unit = ParseError::Unit::row;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1, row_unit);
  const auto head = detail::split_commas(line);
  if (head.size() != 3) throw ParseError("header must be layer,d_layer,n", 1, row_unit);
  std::size_t dim = 0, n = 0;
  auto parse_size = [&](std::string_view s, std::size_t& out) {
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size()) throw ParseError("bad header field '" + std::string(s) + "'", 1, row_unit);
  };
  parse_size(head[1], dim);
  parse_size(head[2], n);
  RepresentationMatrix m(std::string(head[0]), std::move(source), dim);
  std::vector<double> values(dim);
  for (std::size_t r = 0; r < n; ++r) {
    if (!std::getline(in, line)) throw ParseError("expected " + std::to_string(n) + " rows", r + 2, row_unit);
    const auto cells = detail::split_commas(detail::trim(line));
    if (cells.size() != dim + 1) throw ParseError("row has " + std::to_string(cells.size()) + " fields", r + 2, row_unit);
    SampleId id = 0;
    if (auto [p, ec] = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), id); ec != std::errc())
      throw ParseError("bad id", r + 2, row_unit);
    for (std::size_t c = 0; c < dim; ++c) {
      const auto cell = cells[c + 1];
      const auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), values[c]);
      if (ec != std::errc() || p != cell.data() + cell.size()) throw ParseError("bad value", r + 2, row_unit);
    }
    m.add_row(id, values);
  }
  return m;
}

// Name of the representation feeding the logit layer: the tap just before it,
// or "input" for a model whose only layer is the logit layer.
inline std::string phi_last_name(const LayeredModel& model) {
  const auto& layers = model.arch().layers;
  return layers.size() >= 2 ? layers[layers.size() - 2].tap : std::string("input");
}

inline RepresentationMatrix extract_phi_last(const LayeredModel& model, const LabeledDataset& data) {
  RepresentationMatrix out(phi_last_name(model), data.name(), model.penultimate_dim());
  for (const auto& s : data) out.add_row(s.id, penultimate_activation(model, s.features));
  return out;
}

struct Neighbor {
  SampleId id = 0;
  double distance = 0.0;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct NeighborList {
  SampleId query_id = -1;
  std::size_t k = 0;
  std::vector<Neighbor> neighbors;  // ascending distance, ties by ascending id
};

// Exact brute-force k-NN under cosine distance.
inline NeighborList knn_query(const RepresentationMatrix& reps, std::span<const double> query, std::size_t k, SampleId query_id = -1) {
  if (k < 1) throw ArgError("k must be >= 1");
  if (query.size() != reps.dim())
    throw ShapeError("query has dimension " + std::to_string(query.size()) + ", layer '" + reps.layer() + "' has " +
                     std::to_string(reps.dim()));
  if (!(norm2(query) > kDegenerateNorm)) throw DegenerateVectorError("knn_query: query vector norm is below 1e-12", query_id);
  std::vector<Neighbor> all;
  all.reserve(reps.rows());
  for (std::size_t r = 0; r < reps.rows(); ++r) {
    try {
      all.push_back({reps.ids()[r], cosine_distance(query, reps.row(r))});
    } catch (const DegenerateVectorError&) {
      throw DegenerateVectorError("knn_query: training row norm is below 1e-12 in layer '" + reps.layer() + "'", reps.ids()[r]);
    }
  }
  const std::size_t take = std::min(k, all.size());
  auto less = [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance || (a.distance == b.distance && a.id < b.id); };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), less);
  all.resize(take);
  return {query_id, k, std::move(all)};
}

// Fraction of queries whose 1-NN training label equals the given prediction.
// Core form over precomputed query vectors; see label_agreement below.
inline double label_agreement(const RepresentationMatrix& train_reps, const std::unordered_map<SampleId, int>& train_labels,
                              const std::vector<std::vector<double>>& queries, const std::vector<int>& predictions,
                              const std::vector<SampleId>& query_ids = {}) {
  if (queries.empty()) throw DataError("label agreement needs at least one test point");
  if (queries.size() != predictions.size()) throw ArgError("queries and predictions differ in length");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const SampleId qid = query_ids.empty() ? -1 : query_ids[i];
    const auto nn = knn_query(train_reps, queries[i], 1, qid);
    if (nn.neighbors.empty()) throw DataError("label agreement needs a nonempty training representation");
    const auto it = train_labels.find(nn.neighbors.front().id);
    if (it == train_labels.end()) throw IdError("no training label for id " + std::to_string(nn.neighbors.front().id));
    agree += it->second == predictions[i];
  }
  return static_cast<double>(agree) / static_cast<double>(queries.size());
}

// Label agreement between the network and 1-NN in the tap of `train_reps`.
// Test ids must not occur among the training rows.
inline double label_agreement(const LayeredModel& model, const RepresentationMatrix& train_reps,
                              const std::unordered_map<SampleId, int>& train_labels, const LabeledDataset& test_set) {
  if (test_set.empty()) throw DataError("label agreement needs a nonempty test set");
  const std::size_t li = model.layer_index(train_reps.layer());
  std::vector<std::vector<double>> queries;
  std::vector<int> predictions;
  std::vector<SampleId> ids;
  queries.reserve(test_set.size());
  for (const auto& s : test_set) {
    if (train_reps.contains(s.id)) throw IdError("test id " + std::to_string(s.id) + " also occurs in the training set");
    detail::check_input(model, s.features);
    auto trace = detail::forward_trace(model, s.features, model.arch().layers.size());
    queries.push_back(trace.acts[li + 1]);
    predictions.push_back(argmax_label(trace.acts.back()));
    ids.push_back(s.id);
  }
  return label_agreement(train_reps, train_labels, queries, predictions, ids);
}

}  // namespace knnx
