#pragma once

#include <openssl/evp.h>

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "knnx/arch.hpp"
#include "knnx/counterfactual.hpp"
#include "knnx/data_io.hpp"
#include "knnx/dataset.hpp"
#include "knnx/errors.hpp"
#include "knnx/knn.hpp"
#include "knnx/model.hpp"

namespace knnx {

namespace fs = std::filesystem;

// Where the data comes from. Blobs are generated and split per class; idx
// and csv read separate train and test files, with test ids offset by the
// training-set size so the two sets never share an id.
struct DatasetSource {
  enum class Kind { blobs, idx, csv } kind = Kind::blobs;
  std::string name = "blobs";
  BlobSpec blobs;
  int train_per_class = 100;
  int num_classes = 10;
  fs::path train_images, train_labels, test_images, test_labels;  // idx
  fs::path train_csv, test_csv;                                    // csv
  bool csv_header = false;
};

struct ExperimentConfig {
  DatasetSource dataset;
  ArchSpec arch;
  TrainConfig train;
  std::optional<TrainConfig> influence_train;
  std::vector<std::size_t> ks{1, 5, 10, 15, 20};
  std::vector<Method> methods{Method::knn, Method::influence};
  std::size_t num_test_samples = 20;
  std::size_t agreement_samples = 200;
  std::size_t pool_size = 1000;
  double damping = 0.01;
  std::uint64_t master_seed = 0;
  fs::path output_dir = "out";
  std::size_t workers = 1;
};

// ---- Config parsing ------------------------------------------------------------
//
// The config is a JSON object. Every key is optional except "arch" (or
// "arch_file"); unknown keys anywhere are rejected. All violations are
// collected and reported together.

namespace detail {

class ConfigReader {
 public:
  std::vector<std::string> errors;

  void allow(const nlohmann::json& j, const std::string& where, const std::set<std::string>& keys) {
    if (!j.is_object()) {
      errors.push_back(where + ": expected an object");
      return;
    }
    for (const auto& [k, _] : j.items())
      if (!keys.count(k)) errors.push_back(where + "." + k + ": unknown key");
  }

  template <class T>
  void read(const nlohmann::json& j, const char* key, const std::string& where, T& out) {
    if (!j.is_object() || !j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors.push_back(where + "." + key + ": wrong type");
    }
  }

  void read_path(const nlohmann::json& j, const char* key, const std::string& where, fs::path& out, const fs::path& base) {
    std::string s;
    read(j, key, where, s);
    if (!s.empty()) out = fs::path(s).is_absolute() ? fs::path(s) : base / s;
  }
};

inline void read_train_config(ConfigReader& r, const nlohmann::json& j, const std::string& where, TrainConfig& cfg) {
  r.allow(j, where,
          {"epochs", "batch_size", "learning_rate", "momentum", "seed", "frozen_layers", "weight_decay", "optimizer",
           "newton_tolerance", "newton_max_iterations"});
  r.read(j, "epochs", where, cfg.epochs);
  r.read(j, "batch_size", where, cfg.batch_size);
  r.read(j, "learning_rate", where, cfg.learning_rate);
  r.read(j, "momentum", where, cfg.momentum);
  r.read(j, "seed", where, cfg.seed);
  r.read(j, "weight_decay", where, cfg.weight_decay);
  r.read(j, "newton_tolerance", where, cfg.newton_tolerance);
  r.read(j, "newton_max_iterations", where, cfg.newton_max_iterations);
  std::vector<std::string> frozen;
  r.read(j, "frozen_layers", where, frozen);
  cfg.frozen_layers = std::set<std::string>(frozen.begin(), frozen.end());
  std::string opt = "sgd";
  r.read(j, "optimizer", where, opt);
  if (opt == "sgd")
    cfg.optimizer = Optimizer::sgd;
  else if (opt == "newton_last_layer")
    cfg.optimizer = Optimizer::newton_last_layer;
  else
    r.errors.push_back(where + ".optimizer: must be sgd or newton_last_layer");
  if (cfg.epochs < 1) r.errors.push_back(where + ".epochs: must be >= 1");
  if (cfg.batch_size < 1) r.errors.push_back(where + ".batch_size: must be >= 1");
  if (!(cfg.learning_rate > 0.0)) r.errors.push_back(where + ".learning_rate: must be > 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) r.errors.push_back(where + ".momentum: must be in [0, 1)");
  if (cfg.weight_decay < 0.0) r.errors.push_back(where + ".weight_decay: must be >= 0");
}

}  // namespace detail

// Parses and validates a config. Relative paths resolve against `base_dir`
// (the directory of the config file).
inline ExperimentConfig parse_config(const nlohmann::json& j, const fs::path& base_dir = ".") {
  detail::ConfigReader r;
  ExperimentConfig cfg;
  r.allow(j, "config",
          {"dataset", "arch", "arch_file", "train", "influence_train", "ks", "methods", "num_test_samples", "agreement_samples",
           "pool_size", "damping", "master_seed", "output_dir", "workers"});
  if (!j.is_object()) throw ConfigError(r.errors);

  // dataset
  if (!j.contains("dataset")) {
    r.errors.push_back("config.dataset: missing");
  } else {
    const auto& d = j["dataset"];
    auto& ds = cfg.dataset;
    std::string source;
    r.read(d, "source", "dataset", source);
    r.read(d, "name", "dataset", ds.name);
    if (source == "blobs") {
      ds.kind = DatasetSource::Kind::blobs;
      r.allow(d, "dataset", {"source", "name", "blobs", "train_per_class"});
      r.read(d, "train_per_class", "dataset", ds.train_per_class);
      if (d.contains("blobs")) {
        const auto& b = d["blobs"];
        r.allow(b, "dataset.blobs", {"num_classes", "dim", "per_class", "spread", "sigma", "seed"});
        r.read(b, "num_classes", "dataset.blobs", ds.blobs.num_classes);
        r.read(b, "dim", "dataset.blobs", ds.blobs.dim);
        r.read(b, "per_class", "dataset.blobs", ds.blobs.per_class);
        r.read(b, "spread", "dataset.blobs", ds.blobs.spread);
        r.read(b, "sigma", "dataset.blobs", ds.blobs.sigma);
        r.read(b, "seed", "dataset.blobs", ds.blobs.seed);
      }
      try {
        validate(ds.blobs);
      } catch (const Error& e) {
        r.errors.push_back(std::string("dataset.blobs: ") + e.what());
      }
      if (ds.train_per_class < 1 || ds.train_per_class >= ds.blobs.per_class)
        r.errors.push_back("dataset.train_per_class: must be in [1, blobs.per_class)");
      ds.num_classes = ds.blobs.num_classes;
    } else if (source == "idx") {
      ds.kind = DatasetSource::Kind::idx;
      r.allow(d, "dataset", {"source", "name", "train_images", "train_labels", "test_images", "test_labels", "num_classes"});
      r.read(d, "num_classes", "dataset", ds.num_classes);
      r.read_path(d, "train_images", "dataset", ds.train_images, base_dir);
      r.read_path(d, "train_labels", "dataset", ds.train_labels, base_dir);
      r.read_path(d, "test_images", "dataset", ds.test_images, base_dir);
      r.read_path(d, "test_labels", "dataset", ds.test_labels, base_dir);
      for (auto [key, p] : {std::pair{"train_images", &ds.train_images}, std::pair{"train_labels", &ds.train_labels},
                            std::pair{"test_images", &ds.test_images}, std::pair{"test_labels", &ds.test_labels}})
        if (p->empty() || !fs::exists(*p)) r.errors.push_back(std::string("dataset.") + key + ": file not found '" + p->string() + "'");
    } else if (source == "csv") {
      ds.kind = DatasetSource::Kind::csv;
      r.allow(d, "dataset", {"source", "name", "train_csv", "test_csv", "num_classes", "header"});
      r.read(d, "num_classes", "dataset", ds.num_classes);
      r.read(d, "header", "dataset", ds.csv_header);
      r.read_path(d, "train_csv", "dataset", ds.train_csv, base_dir);
      r.read_path(d, "test_csv", "dataset", ds.test_csv, base_dir);
      for (auto [key, p] : {std::pair{"train_csv", &ds.train_csv}, std::pair{"test_csv", &ds.test_csv}})
        if (p->empty() || !fs::exists(*p)) r.errors.push_back(std::string("dataset.") + key + ": file not found '" + p->string() + "'");
    } else {
      r.errors.push_back("dataset.source: must be blobs, idx or csv");
    }
    if (ds.num_classes < 2) r.errors.push_back("dataset.num_classes: must be >= 2");
  }

  // arch
  if (j.contains("arch") == j.contains("arch_file")) {
    r.errors.push_back("config.arch: give exactly one of arch or arch_file");
  } else {
    try {
      if (j.contains("arch")) {
        cfg.arch = arch_from_json(j["arch"]);
      } else {
        fs::path p;
        r.read_path(j, "arch_file", "config", p, base_dir);
        std::ifstream in(p);
        if (!in) throw ArchError("cannot open '" + p.string() + "'");
        cfg.arch = arch_from_json(nlohmann::json::parse(in));
      }
      if (num_outputs(cfg.arch) != static_cast<std::size_t>(cfg.dataset.num_classes))
        r.errors.push_back("config.arch: logit layer has " + std::to_string(num_outputs(cfg.arch)) + " outputs, dataset has " +
                           std::to_string(cfg.dataset.num_classes) + " classes");
    } catch (const nlohmann::json::exception& e) {
      r.errors.push_back(std::string("config.arch_file: ") + e.what());
    } catch (const ArchError& e) {
      r.errors.push_back(std::string("config.arch: ") + e.what());
    }
  }

  if (j.contains("train")) detail::read_train_config(r, j["train"], "train", cfg.train);
  if (j.contains("influence_train")) {
    TrainConfig t = cfg.train;
    detail::read_train_config(r, j["influence_train"], "influence_train", t);
    cfg.influence_train = t;
  }
  if (!cfg.arch.layers.empty()) {
    const auto taps = cfg.arch.tap_names();
    const std::set<std::string> known(taps.begin(), taps.end());
    for (const auto* t : {&cfg.train, cfg.influence_train ? &*cfg.influence_train : nullptr}) {
      if (t == nullptr) continue;
      for (const auto& f : t->frozen_layers)
        if (!known.count(f)) r.errors.push_back("frozen_layers: unknown tap '" + f + "'");
    }
  }

  std::vector<long long> ks;
  r.read(j, "ks", "config", ks);
  if (j.contains("ks")) {
    cfg.ks.clear();
    if (ks.empty()) r.errors.push_back("config.ks: must be nonempty");
    for (long long k : ks) {
      if (k < 1) r.errors.push_back("config.ks: every k must be a positive integer");
      else cfg.ks.push_back(static_cast<std::size_t>(k));
    }
  }
  std::vector<std::string> methods;
  r.read(j, "methods", "config", methods);
  if (j.contains("methods")) {
    cfg.methods.clear();
    if (methods.empty()) r.errors.push_back("config.methods: must be nonempty");
    for (const auto& m : methods) {
      if (m == "knn") cfg.methods.push_back(Method::knn);
      else if (m == "influence") cfg.methods.push_back(Method::influence);
      else r.errors.push_back("config.methods: unknown method '" + m + "'");
    }
  }
  long long num_test = static_cast<long long>(cfg.num_test_samples), agreement = static_cast<long long>(cfg.agreement_samples),
            pool = static_cast<long long>(cfg.pool_size), workers = static_cast<long long>(cfg.workers);
  r.read(j, "num_test_samples", "config", num_test);
  r.read(j, "agreement_samples", "config", agreement);
  r.read(j, "pool_size", "config", pool);
  r.read(j, "workers", "config", workers);
  r.read(j, "damping", "config", cfg.damping);
  r.read(j, "master_seed", "config", cfg.master_seed);
  std::string out;
  r.read(j, "output_dir", "config", out);
  if (!out.empty()) cfg.output_dir = fs::path(out).is_absolute() ? fs::path(out) : base_dir / out;
  if (num_test < 1) r.errors.push_back("config.num_test_samples: must be >= 1");
  if (agreement < 1) r.errors.push_back("config.agreement_samples: must be >= 1");
  if (pool < 1) r.errors.push_back("config.pool_size: must be >= 1");
  if (workers < 1) r.errors.push_back("config.workers: must be >= 1");
  if (cfg.damping < 0.0) r.errors.push_back("config.damping: must be >= 0");
  cfg.num_test_samples = static_cast<std::size_t>(std::max(1LL, num_test));
  cfg.agreement_samples = static_cast<std::size_t>(std::max(1LL, agreement));
  cfg.pool_size = static_cast<std::size_t>(std::max(1LL, pool));
  cfg.workers = static_cast<std::size_t>(std::max(1LL, workers));

  if (!r.errors.empty()) throw ConfigError(std::move(r.errors));
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"--config: cannot open '" + path.string() + "'"});
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({"--config: " + std::string(e.what())});
  }
  return parse_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

struct Splits {
  LabeledDataset train;
  LabeledDataset test;
};

inline Splits load_datasets(const DatasetSource& ds) {
  switch (ds.kind) {
    case DatasetSource::Kind::blobs: {
      auto [train, test] = split_per_class(make_blobs(ds.blobs, ds.name), ds.train_per_class);
      return {std::move(train), std::move(test)};
    }
    case DatasetSource::Kind::idx: {
      IdxOptions opt;
      opt.num_classes = ds.num_classes;
      opt.name = ds.name;
      auto train = load_idx(ds.train_images, ds.train_labels, opt);
      opt.id_offset = static_cast<SampleId>(train.size());
      auto test = load_idx(ds.test_images, ds.test_labels, opt);
      return {std::move(train), std::move(test)};
    }
    case DatasetSource::Kind::csv: {
      CsvOptions opt;
      opt.header = ds.csv_header;
      opt.name = ds.name;
      auto train = load_csv(ds.train_csv, ds.num_classes, opt);
      opt.id_offset = static_cast<SampleId>(train.size());
      auto test = load_csv(ds.test_csv, ds.num_classes, opt);
      return {std::move(train), std::move(test)};
    }
  }
  throw DataError("unknown dataset source");
}

// ---- Model artifact ------------------------------------------------------------
//
// model.json: {"format", "arch", "train_seed", "trained", "parameters",
// "digest"}. The digest is SHA-256 over the compact arch JSON, the seed and
// the little-endian parameter bytes.

inline constexpr const char* kModelFormat = "knnx-model-v1";

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string model_digest(const LayeredModel& model) {
  std::string buf = arch_to_json(model.arch()).dump();
  buf += '\n' + std::to_string(model.train_seed()) + '\n';
  for (double p : model.parameters()) {
    std::uint64_t bits;
    std::memcpy(&bits, &p, sizeof bits);
    for (int b = 0; b < 8; ++b) buf += static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return sha256_hex(buf);
}

inline void save_model(const fs::path& path, const LayeredModel& model) {
  nlohmann::json j;
  j["format"] = kModelFormat;
  j["arch"] = arch_to_json(model.arch());
  j["train_seed"] = model.train_seed();
  j["trained"] = model.trained();
  j["parameters"] = std::vector<double>(model.parameters().begin(), model.parameters().end());
  j["digest"] = model_digest(model);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

inline LayeredModel load_model(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model artifact '" + path.string() + "'");
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != kModelFormat) throw ModelError("unsupported model format");
    LayeredModel m(arch_from_json(j.at("arch")), j.at("parameters").get<std::vector<double>>());
    if (j.at("trained").get<bool>()) m.mark_trained(j.at("train_seed").get<std::uint64_t>());
    if (model_digest(m) != j.at("digest").get<std::string>()) throw ModelError("model artifact digest mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ModelError("malformed model artifact: " + std::string(e.what()));
  }
}

inline fs::path model_path(const ExperimentConfig& cfg) { return cfg.output_dir / "model.json"; }

// ---- Commands --------------------------------------------------------------------

struct TrainResult {
  LayeredModel model;
  std::string digest;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

inline TrainResult cmd_train(const ExperimentConfig& cfg, std::ostream& log = std::clog) {
  const auto data = load_datasets(cfg.dataset);
  TrainResult r;
  r.model = train(build_model(cfg.arch, cfg.train.seed), data.train, cfg.train);
  r.digest = model_digest(r.model);
  r.train_accuracy = accuracy(r.model, data.train);
  r.test_accuracy = accuracy(r.model, data.test);
  fs::create_directories(cfg.output_dir);
  save_model(model_path(cfg), r.model);
  log << "train: " << data.train.size() << " samples, train accuracy " << format_number(r.train_accuracy) << ", test accuracy "
      << format_number(r.test_accuracy) << ", digest " << r.digest << '\n';
  return r;
}

inline LayeredModel load_trained_model(const ExperimentConfig& cfg) {
  auto m = load_model(model_path(cfg));
  if (!(m.arch() == cfg.arch)) throw ModelError("model artifact architecture does not match the config; rerun train");
  if (!m.trained()) throw ModelError("model artifact is not trained");
  return m;
}

struct AgreementRow {
  std::string layer;
  double fraction = 0.0;
};

inline void write_agreement(std::ostream& csv, std::ostream& md, const std::vector<AgreementRow>& rows) {
  csv << "layer,fraction\n";
  md << "| Layer | Fraction |\n|---|---|\n";
  for (const auto& r : rows) {
    csv << r.layer << ',' << format_number(r.fraction) << '\n';
    md << "| " << r.layer << " | " << format_number(r.fraction) << " |\n";
  }
}

// Per-tap 1-NN label agreement on a class-balanced sample of the test set,
// one row per tap in architecture order.
inline std::vector<AgreementRow> cmd_agreement(const ExperimentConfig& cfg, const LayeredModel& model, std::ostream& log = std::clog) {
  const auto data = load_datasets(cfg.dataset);
  const auto tests = stratified_sample(data.test, std::min(cfg.agreement_samples, data.test.size()), Rng::derive(cfg.master_seed, 3));
  const auto labels = data.train.labels_by_id();
  std::vector<AgreementRow> rows;
  for (const auto& tap : cfg.arch.tap_names()) {
    const auto reps = extract_representations(model, data.train, tap);
    rows.push_back({tap, label_agreement(model, reps, labels, tests)});
    log << "agreement: " << tap << " " << format_number(rows.back().fraction) << '\n';
  }
  fs::create_directories(cfg.output_dir);
  std::ofstream csv(cfg.output_dir / "agreement.csv"), md(cfg.output_dir / "agreement.md");
  write_agreement(csv, md, rows);
  return rows;
}

inline void write_tables(const fs::path& dir, const std::vector<CounterfactualRecord>& records, const std::string& dataset) {
  const auto rows = aggregate_all(records, dataset);
  std::ofstream agg(dir / "aggregate.csv");
  write_aggregate_csv(agg, rows);
  std::set<Method> methods;
  for (const auto& r : rows) methods.insert(r.method);
  for (Method m : methods) {
    std::ofstream md(dir / (std::string("lc_") + to_string(m) + ".md"));
    write_aggregate_markdown(md, rows, m);
  }
  std::ofstream fmd(dir / "flips.md"), fcsv(dir / "flips.csv");
  write_flip_markdown(fmd, rows);
  write_flip_csv(fcsv, rows);
}

inline CounterfactualOptions counterfactual_options(const ExperimentConfig& cfg) {
  CounterfactualOptions opt;
  opt.ks = cfg.ks;
  opt.methods = cfg.methods;
  opt.pool_size = cfg.pool_size;
  opt.damping = cfg.damping;
  opt.master_seed = cfg.master_seed;
  opt.workers = cfg.workers;
  opt.influence_train = cfg.influence_train;
  return opt;
}

// Runs the leave-k-out protocol and writes records.csv, aggregate.csv,
// lc_<method>.md, flips.md and flips.csv. On a failing trial the completed
// records are written before the error propagates.
inline std::vector<CounterfactualRecord> cmd_counterfactual(const ExperimentConfig& cfg, const LayeredModel& model,
                                                           std::ostream& log = std::clog) {
  const auto data = load_datasets(cfg.dataset);
  const auto tests = uniform_subsample(data.test, std::min(cfg.num_test_samples, data.test.size()), Rng::derive(cfg.master_seed, 5));
  fs::create_directories(cfg.output_dir);
  std::vector<CounterfactualRecord> records;
  try {
    records = run_counterfactual_experiment(model, data.train, tests, cfg.arch, cfg.train, counterfactual_options(cfg));
  } catch (const TrialError& e) {
    std::ofstream out(cfg.output_dir / "records.csv");
    write_records_csv(out, e.completed());
    log << "counterfactual: aborted after " << e.completed().size() << " completed trials\n";
    throw;
  }
  {
    std::ofstream out(cfg.output_dir / "records.csv");
    write_records_csv(out, records);
  }
  write_tables(cfg.output_dir, records, cfg.dataset.name);
  log << "counterfactual: " << records.size() << " trials written to " << cfg.output_dir.string() << '\n';
  return records;
}

// Re-renders the tables from an existing records.csv and prints them.
inline void cmd_report(const ExperimentConfig& cfg, std::ostream& out) {
  std::ifstream in(cfg.output_dir / "records.csv");
  if (!in) throw DataError("no records.csv in '" + cfg.output_dir.string() + "'; run counterfactual first");
  const auto records = read_records_csv(in);
  write_tables(cfg.output_dir, records, cfg.dataset.name);
  const auto rows = aggregate_all(records, cfg.dataset.name);
  std::set<Method> methods;
  for (const auto& r : rows) methods.insert(r.method);
  for (Method m : methods) {
    out << "### Loss change, " << method_label(m) << "\n\n";
    write_aggregate_markdown(out, rows, m);
    out << '\n';
  }
  out << "### Label flips (%)\n\n";
  write_flip_markdown(out, rows);
}

}  // namespace knnx
