// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <unistd.h>

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "../test_support.hpp"
#include "knnx/counterfactual.hpp"
#include "knnx/experiment.hpp"

namespace {

using namespace knnx;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) { return format_number(v); }

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// 1. Layer trend of 1-NN label agreement on 4-class blobs.
Outcome layer_trend() {
  const auto t0 = Clock::now();
  BlobSpec spec;
  spec.num_classes = 4;
  spec.dim = 20;
  spec.per_class = 150;
  spec.spread = 0.5;
  spec.sigma = 1.0;
  spec.seed = 21;
  const auto [train_set, test_set] = split_per_class(make_blobs(spec), 100);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 0.02;
  cfg.seed = 5;
  const auto arch = testing::mlp(20, {32, 32}, 4);
  const auto model = train(build_model(arch, cfg.seed), train_set, cfg);
  const double train_acc = accuracy(model, train_set);

  const auto labels = train_set.labels_by_id();
  const auto taps = arch.tap_names();
  std::vector<double> frac;
  std::ostringstream d;
  for (const auto& tap : taps) {
    frac.push_back(label_agreement(model, extract_representations(model, train_set, tap), labels, test_set));
    d << tap << "=" << fmt(frac.back()) << " ";
  }
  const double last = frac.back();
  bool trend = true;
  for (std::size_t i = 0; i + 1 < frac.size(); ++i) trend = trend && last >= frac[i] - 0.02;
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = train_acc >= 0.99 && last >= 0.95 && trend && secs < 60;
  d << "(phi_last=" << phi_last_name(model) << ", train_acc=" << fmt(train_acc) << ", " << fmt(secs) << "s)";
  o.detail = d.str();
  return o;
}

// 2. knn_query against an independent full scan.
Outcome knn_oracle() {
  Rng rng(777);
  std::size_t exact = 0, ties = 0;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(200), d = 1 + rng.below(64), k = 1 + rng.below(20);
    RepresentationMatrix m("layer", "", d);
    std::vector<std::vector<double>> rows;
    std::vector<SampleId> ids;
    for (std::size_t i = 0; i < n; ++i) {
      auto v = (i > 0 && rng.below(4) == 0) ? rows[rng.below(rows.size())] : testing::random_vector(rng, d);
      if (rng.below(10) == 0) {
        for (double& x : v) x *= 2.5;  // positive multiple: same direction, tie in distance
      }
      rows.push_back(v);
      ids.push_back(static_cast<SampleId>(rng.below(1000000)) * 1000 + static_cast<SampleId>(i));
      m.add_row(ids.back(), v);
    }
    const auto q = (t % 4 == 0) ? rows[rng.below(n)] : testing::random_vector(rng, d);

    std::vector<std::pair<double, SampleId>> scan;
    for (std::size_t i = 0; i < n; ++i) {
      double uv = 0, uu = 0, vv = 0;
      for (std::size_t j = 0; j < d; ++j) {
        uv += q[j] * rows[i][j];
        uu += q[j] * q[j];
        vv += rows[i][j] * rows[i][j];
      }
      scan.emplace_back(std::clamp(1.0 - uv / std::sqrt(uu * vv), 0.0, 2.0), ids[i]);
    }
    std::sort(scan.begin(), scan.end());
    scan.resize(std::min(k, n));
    for (std::size_t i = 1; i < scan.size(); ++i) ties += scan[i].first == scan[i - 1].first;

    const auto got = knn_query(m, q, k).neighbors;
    bool same = got.size() == scan.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) {
      same = got[i].id == scan[i].second;
      worst = std::max(worst, std::abs(got[i].distance - scan[i].first));
    }
    exact += same && worst <= 1e-12;
  }
  return {exact == 100, std::to_string(exact) + "/100 instances identical, " + std::to_string(ties) +
                            " tied neighbour pairs, max distance diff " + fmt(worst)};
}

// 3. Gradient, Hessian and solve checks.
Outcome derivatives() {
  Rng rng(31);
  int grad_ok = 0;
  double grad_worst = 0;
  for (int t = 0; t < 50; ++t) {
    const int h = 2 + static_cast<int>(rng.below(8)), c = 2 + static_cast<int>(rng.below(4)), in = 1 + static_cast<int>(rng.below(6));
    const auto m = build_model(testing::mlp(in, {h}, c), 1000 + t);
    const auto x = testing::random_vector(rng, in, 2.0);
    const int y = static_cast<int>(rng.below(c));
    const LabeledDataset one("one", c, {{0, x, y}});
    const auto fd = testing::central_gradient(testing::mean_loss_of_last_layer(m, one), testing::last_block(m));
    const double e = testing::relative_error(grad_last_layer(m, x, y), fd);
    grad_worst = std::max(grad_worst, e);
    grad_ok += e < 1e-4;
  }

  int hess_ok = 0;
  double hess_worst = 0;
  for (int t = 0; t < 10; ++t) {
    BlobSpec spec;
    spec.num_classes = 2 + static_cast<int>(rng.below(2));
    spec.dim = 3;
    spec.per_class = 6;
    spec.seed = 50 + t;
    const auto data = make_blobs(spec);
    const auto m = build_model(testing::mlp(3, {3}, spec.num_classes), 60 + t);
    const auto hm = hessian_last_layer(m, data, 0.0);
    const auto fd = testing::central_hessian(testing::mean_loss_of_last_layer(m, data), testing::last_block(m), 1e-3);
    bool ok = true;
    for (std::size_t i = 0; i < hm.size(); ++i)
      for (std::size_t j = 0; j < hm.size(); ++j) {
        const double err = std::abs(hm(i, j) - fd[i][j]);
        const double scale = std::max(std::abs(hm(i, j)), std::abs(fd[i][j]));
        if (err < 1e-9) continue;
        hess_worst = std::max(hess_worst, err / scale);
        ok = ok && err <= 1e-3 * scale;
      }
    hess_ok += ok;
  }

  int solve_ok = 0;
  double solve_worst = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(40);
    Eigen::MatrixXd b = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return rng.normal(); });
    const Eigen::MatrixXd spd = b.transpose() * b + 1e-2 * Eigen::MatrixXd::Identity(n, n);
    Matrix a(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) a(i, j) = a(j, i) = spd(i, j);
    const auto v = testing::random_vector(rng, n);
    const double damping = t % 2 ? 1e-3 : 0.0;
    const auto s = inverse_hvp_solve(a, v, damping);
    auto r = a.multiply(s);
    for (std::size_t i = 0; i < n; ++i) r[i] += damping * s[i] - v[i];
    const double rel = norm2(r) / norm2(v);
    solve_worst = std::max(solve_worst, rel);
    solve_ok += rel <= 1e-8;
  }
  return {grad_ok == 50 && hess_ok == 10 && solve_ok == 50,
          "gradient " + std::to_string(grad_ok) + "/50 (worst " + fmt(grad_worst) + "), Hessian " + std::to_string(hess_ok) +
              "/10 (worst " + fmt(hess_worst) + "), solve " + std::to_string(solve_ok) + "/50 (worst residual " + fmt(solve_worst) + ")"};
}

// 4. Influence against true leave-one-out retraining on logistic regression.
// The fit has no L2 term so that refitting on n - 1 points changes nothing but
// the removed point; overlapping classes keep the minimizer finite.
Outcome influence_fidelity() {
  const auto t0 = Clock::now();
  const double damping = 1e-3;
  BlobSpec spec;
  spec.num_classes = 2;
  spec.dim = 2;
  spec.per_class = 30;
  spec.spread = 0.7;
  spec.sigma = 1.0;
  spec.seed = 40;
  const auto data = make_blobs(spec);
  const auto arch = testing::logistic(2, 2);
  TrainConfig cfg;
  cfg.optimizer = Optimizer::newton_last_layer;
  cfg.seed = 1;
  const auto full = train(build_model(arch, cfg.seed), data, cfg);
  double worst_grad = last_layer_gradient_norm(full, data, 0.0);

  std::vector<LayeredModel> loo;
  for (const auto& z : data) {
    const std::set<SampleId> removed{z.id};
    loo.push_back(remove_and_retrain(data, removed, arch, cfg));
    worst_grad = std::max(worst_grad, last_layer_gradient_norm(loo.back(), data.without(removed), 0.0));
  }

  const std::vector<Sample> tests{{1000, {0.3, -0.4}, 1}, {1001, {0.2, 0.4}, 0}, {1002, {-1.0, 0.5}, 1}};
  double min_r = 1.0, min_sign = 1.0;
  for (const auto& test : tests) {
    const auto predicted = influence_scores(full, data, data, test, damping).scores;
    const double before = ce_loss(full, test.features, test.label);
    std::vector<double> actual;
    std::size_t agree = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      actual.push_back(ce_loss(loo[i], test.features, test.label) - before);
      agree += (actual.back() > 0) == (predicted[i] > 0);
    }
    min_r = std::min(min_r, pearson(predicted, actual));
    min_sign = std::min(min_sign, static_cast<double>(agree) / data.size());
  }
  const double secs = seconds_since(t0);
  return {min_r >= 0.9 && min_sign >= 0.8 && worst_grad < 1e-8 && secs < 120,
          "over " + std::to_string(tests.size()) + " test points: min pearson " + fmt(min_r) + ", min sign agreement " + fmt(min_sign) +
              ", max retrain gradient norm " + fmt(worst_grad) + ", damping " + fmt(damping) + ", " + fmt(secs) + "s"};
}

// 5. Removing a near-boundary test point's duplicate and neighbours raises its loss.
Outcome protocol_effect() {
  BlobSpec spec;
  spec.num_classes = 2;
  spec.dim = 5;
  spec.per_class = 150;
  spec.spread = 1.0;
  spec.sigma = 1.0;
  spec.seed = 55;
  const auto [train_set, test_pool] = split_per_class(make_blobs(spec), 100);
  const auto arch = testing::mlp(5, {16}, 2);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 1024;  // full batch
  cfg.learning_rate = 0.2;
  cfg.seed = 9;

  // Boundary points: smallest softmax margin under a model trained without duplicates.
  const auto pilot = train(build_model(arch, cfg.seed), train_set, cfg);
  std::vector<std::pair<double, std::size_t>> margin;
  for (std::size_t i = 0; i < test_pool.size(); ++i) {
    const auto p = softmax(logits(pilot, test_pool[i].features));
    margin.emplace_back(std::abs(p[0] - p[1]), i);
  }
  std::sort(margin.begin(), margin.end());
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < 20; ++i) chosen.push_back(margin[i].second);
  const auto tests = test_pool.select(chosen);

  std::vector<Sample> with_dups = train_set.samples();
  std::map<SampleId, SampleId> dup_of;
  for (const auto& t : tests) {
    const SampleId id = 100000 + t.id;
    with_dups.push_back({id, t.features, t.label});
    dup_of[t.id] = id;
  }
  const LabeledDataset augmented("boundary", 2, with_dups);
  const auto base = train(build_model(arch, cfg.seed), augmented, cfg);

  CounterfactualOptions opt;
  opt.ks = {5};
  opt.methods = {Method::knn};
  opt.workers = 4;
  const auto records = run_counterfactual_experiment(base, augmented, tests, arch, cfg, opt);
  std::size_t positive = 0, dup_first = 0;
  for (const auto& r : records) {
    positive += r.lc > 0;
    dup_first += r.removed_ids.front() == dup_of.at(r.test_id);
  }

  std::size_t noop_exact = 0;
  const auto again = remove_and_retrain(augmented, {}, arch, cfg);
  for (const auto& t : tests) {
    const auto r = evaluate_trial(base, again, t, 0, Method::knn, {});
    noop_exact += r.lc == 0.0 && !r.flipped;
  }
  const double frac = static_cast<double>(positive) / records.size();
  return {frac >= 0.6 && noop_exact == tests.size() && dup_first == records.size(),
          "lc > 0 for " + std::to_string(positive) + "/" + std::to_string(records.size()) + " (k=5, duplicate removed first in " +
              std::to_string(dup_first) + "), empty removal exact for " + std::to_string(noop_exact) + "/" + std::to_string(tests.size())};
}

// 6. Aggregate statistics against an independent recomputation.
Outcome aggregate_oracle() {
  Rng rng(606);
  std::size_t ok = 0;
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(200);
    std::vector<CounterfactualRecord> recs;
    for (std::size_t i = 0; i < n; ++i) {
      const double lc = rng.below(8) == 0 ? 0.0 : rng.normal() * std::pow(10.0, rng.uniform(-3, 1)) + (t % 3 == 0 ? 0.2 : -0.05);
      const int lb = static_cast<int>(rng.below(3)), la = rng.below(4) == 0 ? static_cast<int>(rng.below(3)) : lb;
      CounterfactualRecord r{static_cast<SampleId>(i), 3, Method::influence, {1, 2, 3}, 0.0, lc, lc, lb, la, lb != la};
      r.validate();
      recs.push_back(r);
    }
    // Streaming recomputation (Welford) over each subset.
    struct W {
      double n = 0, mean = 0, m2 = 0;
      void add(double x) {
        n += 1;
        const double d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
      }
      double sd() const { return std::sqrt(m2 / n); }
    } all, pos, neg;
    double mx = -INFINITY, mn = INFINITY, flips = 0;
    for (const auto& r : recs) {
      all.add(r.lc);
      (r.lc >= 0 ? pos : neg).add(r.lc);
      mx = std::max(mx, r.lc);
      mn = std::min(mn, r.lc);
      flips += r.flipped;
    }
    const auto row = aggregate(recs, "s", Method::influence, 3);
    auto close = [&](double a, double b) {
      worst = std::max(worst, std::abs(a - b));
      return std::abs(a - b) <= 1e-12;
    };
    bool good = close(row.avg_lc, all.mean) && close(row.std_lc, all.sd()) && row.max_lc == mx && row.min_lc == mn &&
                row.count == n && row.pos_count + row.neg_count == row.count && row.pos_count == pos.n && row.neg_count == neg.n &&
                close(row.pos_lc_pct, 100.0 * pos.n / n) && close(row.flip_pct, 100.0 * flips / n);
    good = good && row.avg_pos_lc.has_value() == (pos.n > 0) && row.avg_neg_lc.has_value() == (neg.n > 0);
    if (pos.n > 0) good = good && close(*row.avg_pos_lc, pos.mean) && close(*row.std_pos_lc, pos.sd());
    if (neg.n > 0) good = good && close(*row.avg_neg_lc, neg.mean) && close(*row.std_neg_lc, neg.sd());
    ok += good;
  }

  // Hand fixture: exact zeros count toward the +ve share.
  std::vector<CounterfactualRecord> hand;
  const double lcs[] = {0.0, 0.0, 0.3, -0.1, -0.2};
  for (int i = 0; i < 5; ++i) hand.push_back(make_record(i, 1, Method::knn, {100 + i}, 1.0, 1.0 + lcs[i], 0, i == 4 ? 1 : 0));
  const auto row = aggregate(hand, "fixture", Method::knn, 1);
  std::ostringstream md;
  const std::vector<AggregateRow> rows{row};
  write_aggregate_markdown(md, rows, Method::knn);
  const bool hand_ok = row.pos_count == 3 && row.neg_count == 2 && row.pos_lc_pct == 60.0 && row.flip_pct == 20.0 &&
                       std::abs(*row.avg_pos_lc - 0.1) < 1e-15 && std::abs(*row.avg_neg_lc + 0.15) < 1e-15 &&
                       md.str().find("| fixture | 1 | ") != std::string::npos && md.str().find(" | 0.3 | -0.2 | 60 |") != std::string::npos;
  return {ok == 1000 && hand_ok, std::to_string(ok) + "/1000 vectors match (worst diff " + fmt(worst) + "), hand fixture " +
                                     (hand_ok ? "ok" : "mismatch:\n" + md.str())};
}

// 7. End-to-end outputs independent of the worker count.
Outcome end_to_end() {
  const auto dir = fs::temp_directory_path() / ("knnx_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  auto j = nlohmann::json::parse(R"({
    "dataset": {"source": "blobs", "name": "blobs", "train_per_class": 100,
                "blobs": {"num_classes": 4, "dim": 20, "per_class": 150, "spread": 3.0, "sigma": 1.0, "seed": 7}},
    "arch": {"input": [20], "layers": [
      {"type": "dense", "tap": "fc1", "out": 32}, {"type": "relu", "tap": "relu1"},
      {"type": "dense", "tap": "fc2", "out": 32}, {"type": "relu", "tap": "relu2"},
      {"type": "dense", "tap": "logits", "out": 4}]},
    "train": {"epochs": 30, "batch_size": 32, "learning_rate": 0.02, "seed": 3},
    "influence_train": {"frozen_layers": ["fc1", "fc2"]},
    "ks": [1, 5], "methods": ["knn", "influence"],
    "num_test_samples": 20, "pool_size": 1000, "damping": 0.01, "master_seed": 2024
  })");
  auto cfg = parse_config(j, dir);
  std::ostringstream log;
  auto files = [](const fs::path& d) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(d)) {
      std::ifstream in(e.path(), std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      out[e.path().filename().string()] = ss.str();
    }
    return out;
  };
  double worst_secs = 0;
  std::size_t records = 0;
  for (std::size_t workers : {1, 8}) {
    const auto t0 = Clock::now();
    cfg.workers = workers;
    cfg.output_dir = dir / ("w" + std::to_string(workers));
    const auto model = cmd_train(cfg, log).model;
    records = cmd_counterfactual(cfg, model, log).size();
    std::ostringstream report;
    cmd_report(cfg, report);
    worst_secs = std::max(worst_secs, seconds_since(t0));
  }
  const auto a = files(dir / "w1"), b = files(dir / "w8");
  std::size_t identical = 0;
  for (const auto& [name, text] : a) identical += b.count(name) && b.at(name) == text;
  fs::remove_all(dir);
  const bool pass = a.size() == 7 && identical == a.size() && b.size() == a.size() && records == 80 && worst_secs < 600;
  return {pass, std::to_string(identical) + "/" + std::to_string(a.size()) + " files byte-identical, " + std::to_string(records) +
                    " trials, slowest run " + fmt(worst_secs) + "s"};
}

// 8. IDX fixture and corrupted variants.
Outcome idx_exactness() {
  std::vector<std::vector<std::uint8_t>> imgs(3, std::vector<std::uint8_t>(784));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 784; ++p) imgs[i][p] = static_cast<std::uint8_t>((p * 13 + i * 101) & 0xff);
  const std::vector<std::uint8_t> labels{7, 2, 1};
  const auto [img, lab] = encode_idx(imgs, labels);

  bool accepted = false;
  try {
    const auto d = parse_idx(img, lab);
    accepted = d.size() == 3;
    for (std::size_t i = 0; accepted && i < 3; ++i) {
      accepted = d[i].label == labels[i];
      for (std::size_t p = 0; p < 784; ++p) accepted = accepted && d[i].features[p] == imgs[i][p] / 255.0;
    }
  } catch (const std::exception&) {
    accepted = false;
  }

  struct Variant {
    std::string name;
    std::vector<std::uint8_t> images, labels;
    std::size_t position;
  };
  std::vector<Variant> variants;
  {
    auto v = img;
    v[2] = 0x09;
    variants.push_back({"bad magic", v, lab, 0});
  }
  {
    auto v = img;
    v.resize(v.size() - 100);
    variants.push_back({"truncation", v, lab, v.size()});
  }
  {
    auto [i2, l2] = encode_idx(imgs, {7, 2});
    variants.push_back({"count mismatch", i2, l2, 4});
  }
  {
    auto v = img;
    v[11] = 27;
    variants.push_back({"wrong dims", v, lab, 8});
  }
  {
    auto v = img;
    v.push_back(0);
    variants.push_back({"trailing bytes", v, lab, img.size()});
  }
  std::size_t rejected = 0;
  std::ostringstream d;
  for (const auto& v : variants) {
    try {
      parse_idx(v.images, v.labels);
      d << v.name << ": accepted; ";
    } catch (const ParseError& e) {
      const bool ok = e.unit() == ParseError::Unit::byte && e.position() == v.position;
      rejected += ok;
      d << v.name << "@" << e.position() << (ok ? "" : " (wrong position)") << "; ";
    }
  }
  return {accepted && rejected == 5, std::string(accepted ? "fixture accepted" : "fixture REJECTED") + ", " + std::to_string(rejected) +
                                         "/5 variants rejected: " + d.str()};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"layer-trend agreement", layer_trend},       {"k-NN oracle equivalence", knn_oracle},
      {"gradient/Hessian/solve", derivatives},       {"influence fidelity (convex)", influence_fidelity},
      {"counterfactual protocol effect", protocol_effect}, {"aggregate-statistics oracle", aggregate_oracle},
      {"end-to-end determinism", end_to_end},        {"IDX bit-exactness", idx_exactness}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first << "): " << o.detail << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
