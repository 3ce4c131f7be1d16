#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "knnx/data_io.hpp"
#include "knnx/dataset.hpp"
#include "knnx/errors.hpp"
#include "knnx/influence.hpp"
#include "knnx/knn.hpp"
#include "knnx/model.hpp"
#include "knnx/parallel.hpp"
#include "knnx/random.hpp"

namespace knnx {

enum class Method { knn, influence };

inline const char* to_string(Method m) { return m == Method::knn ? "knn" : "influence"; }

inline Method parse_method(std::string_view s) {
  if (s == "knn") return Method::knn;
  if (s == "influence") return Method::influence;
  throw ArgError("unknown method '" + std::string(s) + "' (expected knn or influence)");
}

// Table heading used for a method ("k-NN", "IF").
inline const char* method_label(Method m) { return m == Method::knn ? "k-NN" : "IF"; }

// One (test point, k, method) leave-k-out trial. removed_ids are listed in
// selection rank order (nearest first, or most influential first).
struct CounterfactualRecord {
  SampleId test_id = 0;
  std::size_t k = 0;
  Method method = Method::knn;
  std::vector<SampleId> removed_ids;
  double loss_before = 0.0;
  double loss_after = 0.0;
  double lc = 0.0;
  int label_before = 0;
  int label_after = 0;
  bool flipped = false;

  void validate() const {
    if (lc != loss_after - loss_before) throw ArgError("record: lc must equal loss_after - loss_before");
    if (flipped != (label_before != label_after)) throw ArgError("record: flipped must equal (label_before != label_after)");
    if (removed_ids.size() != k) throw ArgError("record: |removed_ids| must equal k");
    if (std::set<SampleId>(removed_ids.begin(), removed_ids.end()).size() != removed_ids.size())
      throw ArgError("record: removed ids must be distinct");
  }

  friend bool operator==(const CounterfactualRecord&, const CounterfactualRecord&) = default;
};

inline CounterfactualRecord make_record(SampleId test_id, std::size_t k, Method method, std::vector<SampleId> removed,
                                        double loss_before, double loss_after, int label_before, int label_after) {
  CounterfactualRecord r{test_id, k, method, std::move(removed), loss_before, loss_after, loss_after - loss_before,
                         label_before, label_after, label_before != label_after};
  r.validate();
  return r;
}

// Layers that keep their values when training with `cfg`.
inline std::vector<bool> fixed_layers(const ArchSpec& arch, const TrainConfig& cfg) {
  std::vector<bool> fixed(arch.layers.size(), false);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (!arch.layers[i].parametric()) continue;
    const bool last = i + 1 == arch.layers.size();
    fixed[i] = cfg.frozen_layers.count(arch.layers[i].tap) > 0 || (cfg.optimizer == Optimizer::newton_last_layer && !last);
  }
  return fixed;
}

// Trains a fresh model (initialized from cfg.seed) on the dataset minus
// `removed`. When `fixed_source` is given, layers that cfg does not train take
// their parameters from it instead of from the initializer.
inline LayeredModel remove_and_retrain(const LabeledDataset& data, const std::set<SampleId>& removed, const ArchSpec& arch,
                                       const TrainConfig& cfg, const LayeredModel* fixed_source = nullptr) {
  LabeledDataset kept = data.without(removed);
  if (kept.empty()) throw DataError("removing " + std::to_string(removed.size()) + " ids leaves no training data");
  LayeredModel fresh = build_model(arch, cfg.seed);
  if (fixed_source != nullptr) {
    if (!(fixed_source->arch() == arch)) throw ArchError("fixed-layer source has a different architecture");
    const auto fixed = fixed_layers(arch, cfg);
    auto& dst = fresh.mutable_parameters();
    const auto src = fixed_source->parameters();
    for (std::size_t i = 0; i < fixed.size(); ++i) {
      if (!fixed[i]) continue;
      const auto& p = fresh.plan()[i];
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(p.param_offset), p.param_count,
                  dst.begin() + static_cast<std::ptrdiff_t>(p.param_offset));
    }
  }
  return train(fresh, kept, cfg);
}

inline CounterfactualRecord evaluate_trial(const LayeredModel& before, const LayeredModel& after, const Sample& test, std::size_t k,
                                           Method method, std::vector<SampleId> removed) {
  const auto z_before = logits(before, test.features);
  const auto z_after = logits(after, test.features);
  check_label(before, test.label);
  check_label(after, test.label);
  return make_record(test.id, k, method, std::move(removed), ce_loss_from_logits(z_before, test.label),
                     ce_loss_from_logits(z_after, test.label), argmax_label(z_before), argmax_label(z_after));
}

struct CounterfactualOptions {
  std::vector<std::size_t> ks{1, 5, 10, 15, 20};
  std::vector<Method> methods{Method::knn, Method::influence};
  std::size_t pool_size = 1000;
  double damping = 0.01;
  std::uint64_t master_seed = 0;
  std::size_t workers = 1;
  // Retraining setup for influence trials; the base config when absent. When
  // it fixes layers (frozen or Newton), those layers come from the base model
  // and the reference "before" model is the same setup with nothing removed.
  std::optional<TrainConfig> influence_train;
};

// Failure of one trial. Carries the records that completed before the run
// stopped, sorted in trial order.
class TrialError : public Error {
 public:
  TrialError(const std::string& what, std::vector<CounterfactualRecord> completed)
      : Error(what), completed_(std::move(completed)) {}
  const std::vector<CounterfactualRecord>& completed() const noexcept { return completed_; }

 private:
  std::vector<CounterfactualRecord> completed_;
};

inline bool trial_order(const CounterfactualRecord& a, const CounterfactualRecord& b) {
  if (a.test_id != b.test_id) return a.test_id < b.test_id;
  if (a.k != b.k) return a.k < b.k;
  return a.method < b.method;
}

// Uniform influence pool, drawn once per experiment from the master seed.
inline LabeledDataset influence_pool(const LabeledDataset& train_set, std::size_t pool_size, std::uint64_t master_seed) {
  return uniform_subsample(train_set, std::min(pool_size, train_set.size()), Rng::derive(master_seed, 101));
}

// The leave-k-out protocol. For every (test point, k, method): pick the
// removal set (k nearest neighbours in phi_last of the base model, or the k
// most influential points of the pool), retrain without it and record the
// loss and label change. Records come back sorted by test id, k, method.
inline std::vector<CounterfactualRecord> run_counterfactual_experiment(const LayeredModel& base, const LabeledDataset& train_set,
                                                                       const LabeledDataset& test_samples, const ArchSpec& arch,
                                                                       const TrainConfig& cfg, const CounterfactualOptions& opt) {
  if (opt.ks.empty()) throw ArgError("ks must be nonempty");
  if (opt.methods.empty()) throw ArgError("methods must be nonempty");
  for (std::size_t k : opt.ks)
    if (k < 1) throw ArgError("every k must be >= 1");
  if (!(base.arch() == arch)) throw ArchError("base model architecture differs from the experiment architecture");
  {
    std::unordered_set<SampleId> train_ids;
    for (const auto& s : train_set) train_ids.insert(s.id);
    for (const auto& t : test_samples)
      if (train_ids.count(t.id)) throw IdError("test id " + std::to_string(t.id) + " also occurs in the training set");
  }

  std::vector<Sample> tests(test_samples.begin(), test_samples.end());
  std::sort(tests.begin(), tests.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  std::vector<std::size_t> ks = opt.ks;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  std::vector<Method> methods = opt.methods;
  std::sort(methods.begin(), methods.end());
  methods.erase(std::unique(methods.begin(), methods.end()), methods.end());
  const std::size_t max_k = ks.back();
  const bool want_knn = std::count(methods.begin(), methods.end(), Method::knn) > 0;
  const bool want_inf = std::count(methods.begin(), methods.end(), Method::influence) > 0;

  const TrainConfig inf_cfg = opt.influence_train.value_or(cfg);
  const auto inf_fixed = fixed_layers(arch, inf_cfg);
  const bool inf_uses_base = std::count(inf_fixed.begin(), inf_fixed.end(), true) > 0;

  // Removal sets, computed once per test point for the largest k.
  std::vector<std::vector<SampleId>> knn_rank(tests.size()), inf_rank(tests.size());
  std::optional<LayeredModel> inf_reference;
  if (want_knn) {
    const auto reps = extract_phi_last(base, train_set);
    for (std::size_t t = 0; t < tests.size(); ++t) {
      const auto nn = knn_query(reps, penultimate_activation(base, tests[t].features), max_k, tests[t].id);
      for (const auto& n : nn.neighbors) knn_rank[t].push_back(n.id);
    }
  }
  if (want_inf) {
    inf_reference = (inf_cfg == cfg) ? base : remove_and_retrain(train_set, {}, arch, inf_cfg, inf_uses_base ? &base : nullptr);
    const auto pool = influence_pool(train_set, opt.pool_size, opt.master_seed);
    if (max_k > pool.size())
      throw ArgError("k = " + std::to_string(max_k) + " exceeds the influence pool size " + std::to_string(pool.size()));
    const InfluenceModel influence(*inf_reference, train_set, opt.damping);
    for (std::size_t t = 0; t < tests.size(); ++t) inf_rank[t] = top_k_influential(influence.scores(pool, tests[t]), max_k);
  }

  struct Trial {
    std::size_t test;
    std::size_t k;
    Method method;
  };
  std::vector<Trial> trials;
  for (std::size_t t = 0; t < tests.size(); ++t)
    for (std::size_t k : ks)
      for (Method m : methods) trials.push_back({t, k, m});

  std::vector<std::optional<CounterfactualRecord>> results(trials.size());
  const auto failure = parallel_for(trials.size(), opt.workers, [&](std::size_t i) {
    const Trial& tr = trials[i];
    const auto& rank = tr.method == Method::knn ? knn_rank[tr.test] : inf_rank[tr.test];
    if (rank.size() < tr.k)
      throw DataError("only " + std::to_string(rank.size()) + " candidates available for k = " + std::to_string(tr.k));
    std::vector<SampleId> removed(rank.begin(), rank.begin() + static_cast<std::ptrdiff_t>(tr.k));
    const std::set<SampleId> removed_set(removed.begin(), removed.end());
    LayeredModel after;
    const LayeredModel* before = &base;
    if (tr.method == Method::knn) {
      after = remove_and_retrain(train_set, removed_set, arch, cfg);
    } else {
      after = remove_and_retrain(train_set, removed_set, arch, inf_cfg, inf_uses_base ? &base : nullptr);
      before = &*inf_reference;
    }
    results[i] = evaluate_trial(*before, after, tests[tr.test], tr.k, tr.method, std::move(removed));
  });

  std::vector<CounterfactualRecord> records;
  records.reserve(results.size());
  for (auto& r : results)
    if (r) records.push_back(std::move(*r));
  if (failure) {
    const Trial& tr = trials[failure.index];
    std::string what;
    try {
      std::rethrow_exception(failure.error);
    } catch (const std::exception& e) {
      what = e.what();
    }
    throw TrialError("trial (test_id=" + std::to_string(tests[tr.test].id) + ", k=" + std::to_string(tr.k) +
                         ", method=" + to_string(tr.method) + ") failed: " + what,
                     std::move(records));
  }
  return records;
}

// ---- Aggregation -------------------------------------------------------------

struct AggregateRow {
  std::string dataset;
  Method method = Method::knn;
  std::size_t k = 0;
  std::size_t count = 0;
  double avg_lc = 0.0, std_lc = 0.0;
  std::optional<double> avg_pos_lc, std_pos_lc;  // over records with lc >= 0
  std::optional<double> avg_neg_lc, std_neg_lc;  // over records with lc < 0
  double max_lc = 0.0, min_lc = 0.0;
  std::size_t pos_count = 0, neg_count = 0, flip_count = 0;
  double pos_lc_pct = 0.0;  // 100 * pos_count / count
  double flip_pct = 0.0;
};

namespace detail {

// Mean and population standard deviation, two-pass.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

}  // namespace detail

inline AggregateRow aggregate(std::span<const CounterfactualRecord> records, const std::string& dataset, Method method, std::size_t k) {
  std::vector<double> all, pos, neg;
  std::size_t flips = 0;
  for (const auto& r : records) {
    if (r.method != method || r.k != k) continue;
    all.push_back(r.lc);
    (r.lc >= 0.0 ? pos : neg).push_back(r.lc);
    flips += r.flipped;
  }
  if (all.empty()) throw ArgError(std::string("no records for group (") + dataset + ", " + to_string(method) + ", k=" + std::to_string(k) + ")");
  AggregateRow row;
  row.dataset = dataset;
  row.method = method;
  row.k = k;
  row.count = all.size();
  std::tie(row.avg_lc, row.std_lc) = detail::mean_std(all);
  if (!pos.empty()) {
    auto [m, s] = detail::mean_std(pos);
    row.avg_pos_lc = m;
    row.std_pos_lc = s;
  }
  if (!neg.empty()) {
    auto [m, s] = detail::mean_std(neg);
    row.avg_neg_lc = m;
    row.std_neg_lc = s;
  }
  row.max_lc = *std::max_element(all.begin(), all.end());
  row.min_lc = *std::min_element(all.begin(), all.end());
  row.pos_count = pos.size();
  row.neg_count = neg.size();
  row.flip_count = flips;
  row.pos_lc_pct = 100.0 * static_cast<double>(pos.size()) / static_cast<double>(all.size());
  row.flip_pct = 100.0 * static_cast<double>(flips) / static_cast<double>(all.size());
  return row;
}

// One row per (method, k) group present in the records, sorted by method then k.
inline std::vector<AggregateRow> aggregate_all(std::span<const CounterfactualRecord> records, const std::string& dataset) {
  std::set<std::pair<Method, std::size_t>> groups;
  for (const auto& r : records) groups.emplace(r.method, r.k);
  std::vector<AggregateRow> rows;
  for (const auto& [m, k] : groups) rows.push_back(aggregate(records, dataset, m, k));
  return rows;
}

// ---- Rendering ---------------------------------------------------------------

inline constexpr const char* kAbsent = "NA";

// Six significant digits; every table cell goes through here.
inline std::string format_number(double v) {
  if (v == 0.0) v = 0.0;  // no "-0"
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string format_number(const std::optional<double>& v) { return v ? format_number(*v) : kAbsent; }

inline constexpr const char* kRecordsHeader = "test_id,k,method,removed_ids,loss_before,loss_after,lc,label_before,label_after,flipped";

// Per-trial records. Reals use shortest round-trip form so the file can be
// re-aggregated without loss.
inline void write_records_csv(std::ostream& out, std::span<const CounterfactualRecord> records) {
  out << kRecordsHeader << '\n';
  for (const auto& r : records) {
    out << r.test_id << ',' << r.k << ',' << to_string(r.method) << ',';
    for (std::size_t i = 0; i < r.removed_ids.size(); ++i) out << (i ? ";" : "") << r.removed_ids[i];
    out << ',' << format_exact(r.loss_before) << ',' << format_exact(r.loss_after) << ',' << format_exact(r.lc) << ','
        << r.label_before << ',' << r.label_after << ',' << (r.flipped ? "true" : "false") << '\n';
  }
}

inline std::vector<CounterfactualRecord> read_records_csv(std::istream& in) {
  constexpr auto row_unit = ParseError::Unit::row;
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kRecordsHeader) throw ParseError("missing or wrong records header", 1, row_unit);
  std::vector<CounterfactualRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto cells = detail::split_commas(trimmed);
    if (cells.size() != 10) throw ParseError("expected 10 fields", line_no, row_unit);
    auto num = [&](std::string_view s, auto& v) {
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || s.empty()) throw ParseError("bad field '" + std::string(s) + "'", line_no, row_unit);
    };
    CounterfactualRecord r;
    num(cells[0], r.test_id);
    num(cells[1], r.k);
    try {
      r.method = parse_method(cells[2]);
    } catch (const ArgError& e) {
      throw ParseError(e.what(), line_no, row_unit);
    }
    if (!cells[3].empty()) {
      std::size_t start = 0;
      for (;;) {
        const auto semi = cells[3].find(';', start);
        SampleId id = 0;
        num(cells[3].substr(start, semi == std::string_view::npos ? std::string_view::npos : semi - start), id);
        r.removed_ids.push_back(id);
        if (semi == std::string_view::npos) break;
        start = semi + 1;
      }
    }
    num(cells[4], r.loss_before);
    num(cells[5], r.loss_after);
    num(cells[6], r.lc);
    num(cells[7], r.label_before);
    num(cells[8], r.label_after);
    if (cells[9] != "true" && cells[9] != "false") throw ParseError("flipped must be true or false", line_no, row_unit);
    r.flipped = cells[9] == "true";
    try {
      r.validate();
    } catch (const ArgError& e) {
      throw ParseError(e.what(), line_no, row_unit);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_aggregate_csv(std::ostream& out, std::span<const AggregateRow> rows) {
  out << "dataset,method,k,n,avg_lc,avg_lc_std,avg_pos_lc,avg_pos_lc_std,avg_neg_lc,avg_neg_lc_std,max_lc,min_lc,pos_lc_pct,flip_pct\n";
  for (const auto& r : rows)
    out << r.dataset << ',' << to_string(r.method) << ',' << r.k << ',' << r.count << ',' << format_number(r.avg_lc) << ','
        << format_number(r.std_lc) << ',' << format_number(r.avg_pos_lc) << ',' << format_number(r.std_pos_lc) << ','
        << format_number(r.avg_neg_lc) << ',' << format_number(r.std_neg_lc) << ',' << format_number(r.max_lc) << ','
        << format_number(r.min_lc) << ',' << format_number(r.pos_lc_pct) << ',' << format_number(r.flip_pct) << '\n';
}

inline std::string plus_minus(const std::optional<double>& mean, const std::optional<double>& sd) {
  if (!mean) return kAbsent;
  return format_number(*mean) + " ± " + format_number(sd);
}

// Loss-change table for one method, columns in the order
// Dataset | k | Avg. LC | Avg. +ve LC | Avg. -ve LC | Max. LC | Min. LC | +ve LC %.
inline void write_aggregate_markdown(std::ostream& out, std::span<const AggregateRow> rows, Method method) {
  out << "| Dataset | k | Avg. LC | Avg. +ve LC | Avg. -ve LC | Max. LC | Min. LC | +ve LC % |\n";
  out << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    if (r.method != method) continue;
    out << "| " << r.dataset << " | " << r.k << " | " << plus_minus(r.avg_lc, r.std_lc) << " | " << plus_minus(r.avg_pos_lc, r.std_pos_lc)
        << " | " << plus_minus(r.avg_neg_lc, r.std_neg_lc) << " | " << format_number(r.max_lc) << " | " << format_number(r.min_lc)
        << " | " << format_number(r.pos_lc_pct) << " |\n";
  }
}

namespace detail {

inline std::map<std::size_t, std::map<Method, double>> flip_grid(std::span<const AggregateRow> rows, std::vector<Method>& methods) {
  std::map<std::size_t, std::map<Method, double>> grid;
  std::set<Method> seen;
  for (const auto& r : rows) {
    grid[r.k][r.method] = r.flip_pct;
    seen.insert(r.method);
  }
  methods.assign(seen.begin(), seen.end());
  return grid;
}

}  // namespace detail

// Label-flip percentages: one row per k, one column per method.
inline void write_flip_markdown(std::ostream& out, std::span<const AggregateRow> rows) {
  std::vector<Method> methods;
  const auto grid = detail::flip_grid(rows, methods);
  const std::string dataset = rows.empty() ? std::string() : rows.front().dataset;
  out << "| k |";
  for (Method m : methods) out << ' ' << dataset << ' ' << method_label(m) << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < methods.size(); ++i) out << "---|";
  out << '\n';
  for (const auto& [k, cells] : grid) {
    out << "| " << k << " |";
    for (Method m : methods) {
      const auto it = cells.find(m);
      out << ' ' << (it == cells.end() ? std::string(kAbsent) : format_number(it->second)) << " |";
    }
    out << '\n';
  }
}

inline void write_flip_csv(std::ostream& out, std::span<const AggregateRow> rows) {
  std::vector<Method> methods;
  const auto grid = detail::flip_grid(rows, methods);
  out << 'k';
  for (Method m : methods) out << ',' << to_string(m);
  out << '\n';
  for (const auto& [k, cells] : grid) {
    out << k;
    for (Method m : methods) {
      const auto it = cells.find(m);
      out << ',' << (it == cells.end() ? std::string(kAbsent) : format_number(it->second));
    }
    out << '\n';
  }
}

}  // namespace knnx
