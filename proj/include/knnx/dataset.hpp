#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "knnx/errors.hpp"

namespace knnx {

using SampleId = std::int64_t;

struct Sample {
  SampleId id = 0;
  std::vector<double> features;
  int label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Immutable labelled samples with stable ids. Construction validates every
// invariant, so a LabeledDataset in hand is always well formed.
class LabeledDataset {
 public:
  LabeledDataset() = default;

  LabeledDataset(std::string name, int num_classes, std::vector<Sample> samples)
      : name_(std::move(name)), num_classes_(num_classes), samples_(std::move(samples)) {
    if (num_classes_ < 1) throw DataError("dataset '" + name_ + "': num_classes must be >= 1");
    std::unordered_set<SampleId> seen;
    seen.reserve(samples_.size());
    for (const auto& s : samples_) {
      if (dim_ == 0) dim_ = s.features.size();
      if (s.features.empty()) throw DataError("dataset '" + name_ + "': sample " + std::to_string(s.id) + " has no features");
      if (s.features.size() != dim_)
        throw DataError("dataset '" + name_ + "': sample " + std::to_string(s.id) + " has dimension " +
                        std::to_string(s.features.size()) + ", expected " + std::to_string(dim_));
      if (s.label < 0 || s.label >= num_classes_)
        throw LabelError("dataset '" + name_ + "': sample " + std::to_string(s.id) + " has label " +
                         std::to_string(s.label) + " outside [0, " + std::to_string(num_classes_) + ")");
      if (!seen.insert(s.id).second) throw IdError("dataset '" + name_ + "': duplicate id " + std::to_string(s.id));
    }
  }

  const std::string& name() const noexcept { return name_; }
  int num_classes() const noexcept { return num_classes_; }
  // Feature dimension; 0 only for an empty dataset.
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const std::vector<Sample>& samples() const noexcept { return samples_; }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }

  std::vector<SampleId> ids() const {
    std::vector<SampleId> out;
    out.reserve(samples_.size());
    for (const auto& s : samples_) out.push_back(s.id);
    return out;
  }

  std::unordered_map<SampleId, int> labels_by_id() const {
    std::unordered_map<SampleId, int> out;
    out.reserve(samples_.size());
    for (const auto& s : samples_) out.emplace(s.id, s.label);
    return out;
  }

  // Keeps sample order and ids of the survivors. Every removed id must exist.
  LabeledDataset without(const std::set<SampleId>& removed) const {
    std::unordered_set<SampleId> present;
    for (const auto& s : samples_) present.insert(s.id);
    for (SampleId id : removed)
      if (!present.count(id)) throw IdError("cannot remove id " + std::to_string(id) + ": not in dataset '" + name_ + "'");
    std::vector<Sample> kept;
    kept.reserve(samples_.size() - std::min(samples_.size(), removed.size()));
    for (const auto& s : samples_)
      if (!removed.count(s.id)) kept.push_back(s);
    return LabeledDataset(name_, num_classes_, std::move(kept));
  }

  // Samples at the given positions, in the given order.
  LabeledDataset select(const std::vector<std::size_t>& positions) const {
    std::vector<Sample> picked;
    picked.reserve(positions.size());
    for (std::size_t p : positions) picked.push_back(samples_.at(p));
    return LabeledDataset(name_, num_classes_, std::move(picked));
  }

  LabeledDataset renamed(std::string name) const { return LabeledDataset(std::move(name), num_classes_, samples_); }

  friend bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
    return a.num_classes_ == b.num_classes_ && a.samples_ == b.samples_;
  }

 private:
  std::string name_;
  int num_classes_ = 0;
  std::size_t dim_ = 0;
  std::vector<Sample> samples_;
};

}  // namespace knnx
