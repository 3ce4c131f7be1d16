#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "knnx/dataset.hpp"
#include "knnx/errors.hpp"
#include "knnx/random.hpp"

namespace knnx {

// ---- IDX (classic MNIST container) ---------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxOptions {
  int rows = 28;
  int cols = 28;
  int num_classes = 10;
  SampleId id_offset = 0;
  std::string name = "mnist";
};

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const char* file) {
  if (bytes.size() < offset + 4) throw ParseError(std::string(file) + ": truncated header", bytes.size(), ParseError::Unit::byte);
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) | (std::uint32_t{bytes[offset + 2]} << 8) |
         std::uint32_t{bytes[offset + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

// Parses an IDX image/label pair held in memory. Pixels are scaled to [0, 1].
inline LabeledDataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                                const IdxOptions& opt = {}) {
  using detail::read_be32;
  constexpr auto byte = ParseError::Unit::byte;
  if (const auto m = read_be32(images, 0, "images"); m != kIdxImageMagic)
    throw ParseError("images: bad magic number " + std::to_string(m), 0, byte);
  if (const auto m = read_be32(labels, 0, "labels"); m != kIdxLabelMagic)
    throw ParseError("labels: bad magic number " + std::to_string(m), 0, byte);
  const std::uint32_t n_images = read_be32(images, 4, "images");
  const std::uint32_t rows = read_be32(images, 8, "images");
  const std::uint32_t cols = read_be32(images, 12, "images");
  const std::uint32_t n_labels = read_be32(labels, 4, "labels");
  if (rows != static_cast<std::uint32_t>(opt.rows))
    throw ParseError("images: expected " + std::to_string(opt.rows) + " rows, header says " + std::to_string(rows), 8, byte);
  if (cols != static_cast<std::uint32_t>(opt.cols))
    throw ParseError("images: expected " + std::to_string(opt.cols) + " columns, header says " + std::to_string(cols), 12, byte);
  if (n_images != n_labels)
    throw ParseError("labels: count " + std::to_string(n_labels) + " does not match image count " + std::to_string(n_images), 4, byte);

  const std::size_t pixels = std::size_t{rows} * cols;
  const std::size_t image_bytes = 16 + std::size_t{n_images} * pixels;
  const std::size_t label_bytes = 8 + std::size_t{n_labels};
  if (images.size() < image_bytes) throw ParseError("images: truncated payload", images.size(), byte);
  if (images.size() > image_bytes) throw ParseError("images: trailing bytes after payload", image_bytes, byte);
  if (labels.size() < label_bytes) throw ParseError("labels: truncated payload", labels.size(), byte);
  if (labels.size() > label_bytes) throw ParseError("labels: trailing bytes after payload", label_bytes, byte);

  std::vector<Sample> samples;
  samples.reserve(n_images);
  for (std::size_t i = 0; i < n_images; ++i) {
    const int label = labels[8 + i];
    if (label >= opt.num_classes)
      throw ParseError("labels: label " + std::to_string(label) + " >= num_classes " + std::to_string(opt.num_classes), 8 + i, byte);
    Sample s;
    s.id = opt.id_offset + static_cast<SampleId>(i);
    s.label = label;
    s.features.resize(pixels);
    const std::uint8_t* px = images.data() + 16 + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) s.features[p] = px[p] / 255.0;
    samples.push_back(std::move(s));
  }
  return LabeledDataset(opt.name, opt.num_classes, std::move(samples));
}

inline LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                               const IdxOptions& opt = {}) {
  return parse_idx(detail::read_bytes(images_path), detail::read_bytes(labels_path), opt);
}

// Encodes raw pixel bytes and labels as an IDX pair.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_idx(const std::vector<std::vector<std::uint8_t>>& images,
                                                                                  const std::vector<std::uint8_t>& labels,
                                                                                  int rows = 28, int cols = 28) {
  std::vector<std::uint8_t> img, lab;
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(images.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  for (const auto& im : images) {
    if (im.size() != static_cast<std::size_t>(rows) * cols) throw ShapeError("image has the wrong number of pixels");
    img.insert(img.end(), im.begin(), im.end());
  }
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.insert(lab.end(), labels.begin(), labels.end());
  return {std::move(img), std::move(lab)};
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---- CSV -----------------------------------------------------------------
//
// One sample per line: d feature columns then an integer label. Comma
// separated, '.' decimal point, newline terminated, no header unless asked.

struct CsvOptions {
  bool header = false;
  SampleId id_offset = 0;
  std::string name = "csv";
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Parses CSV text. Ids are id_offset + data-row index; errors carry the
// 1-based line number in the text.
inline LabeledDataset parse_csv(std::string_view text, int num_classes, const CsvOptions& opt = {}) {
  constexpr auto row = ParseError::Unit::row;
  std::vector<Sample> samples;
  std::size_t width = 0;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const std::string_view line = detail::trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (opt.header && line_no == 1) continue;
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() < 2) throw ParseError("need at least one feature and a label", line_no, row);
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw ParseError("ragged row: " + std::to_string(cells.size()) + " columns, expected " + std::to_string(width), line_no, row);
    Sample s;
    s.id = opt.id_offset + static_cast<SampleId>(samples.size());
    s.features.resize(width - 1);
    for (std::size_t c = 0; c + 1 < width; ++c) {
      const auto cell = detail::trim(cells[c]);
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), s.features[c]);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty())
        throw ParseError("non-numeric cell '" + std::string(cell) + "' in column " + std::to_string(c + 1), line_no, row);
    }
    const auto cell = detail::trim(cells.back());
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), s.label);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty())
      throw ParseError("label '" + std::string(cell) + "' is not an integer", line_no, row);
    if (s.label < 0 || s.label >= num_classes)
      throw ParseError("label " + std::to_string(s.label) + " outside [0, " + std::to_string(num_classes) + ")", line_no, row);
    samples.push_back(std::move(s));
  }
  return LabeledDataset(opt.name, num_classes, std::move(samples));
}

inline LabeledDataset load_csv(const std::filesystem::path& path, int num_classes, const CsvOptions& opt = {}) {
  const auto bytes = detail::read_bytes(path);
  return parse_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), num_classes, opt);
}

// Shortest round-trip decimal form.
inline std::string format_exact(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Canonical CSV: shortest round-trip features, integer label, '\n' endings.
inline std::string to_csv(const LabeledDataset& data) {
  std::string out;
  for (const auto& s : data) {
    for (double f : s.features) {
      out += format_exact(f);
      out += ',';
    }
    out += std::to_string(s.label);
    out += '\n';
  }
  return out;
}

// ---- Synthetic data --------------------------------------------------------

struct BlobSpec {
  int num_classes = 4;
  int dim = 20;
  int per_class = 100;
  double spread = 10.0;  // std of the center coordinates
  double sigma = 1.0;    // std of the per-sample noise
  std::uint64_t seed = 0;
};

inline void validate(const BlobSpec& spec) {
  if (spec.num_classes < 2) throw ArgError("blobs: num_classes must be >= 2");
  if (spec.dim < 1) throw ArgError("blobs: dim must be >= 1");
  if (spec.per_class < 1) throw ArgError("blobs: per_class must be >= 1");
  if (!(spec.sigma > 0.0)) throw ArgError("blobs: sigma must be > 0");
  if (spec.spread < 0.0) throw ArgError("blobs: spread must be >= 0");
}

// Class centers with coordinates ~ N(0, spread^2).
inline std::vector<std::vector<double>> blob_centers(const BlobSpec& spec) {
  validate(spec);
  Rng rng(Rng::derive(spec.seed, 0));
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(spec.num_classes), std::vector<double>(spec.dim));
  for (auto& c : centers)
    for (double& v : c) v = spec.spread * rng.normal();
  return centers;
}

// Class-major Gaussian clusters, ids 0..C*per_class-1.
inline LabeledDataset make_blobs(const BlobSpec& spec, std::string name = "blobs") {
  const auto centers = blob_centers(spec);
  Rng rng(Rng::derive(spec.seed, 1));
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(spec.num_classes) * spec.per_class);
  for (int c = 0; c < spec.num_classes; ++c)
    for (int i = 0; i < spec.per_class; ++i) {
      Sample s;
      s.id = static_cast<SampleId>(samples.size());
      s.label = c;
      s.features = centers[static_cast<std::size_t>(c)];
      for (double& v : s.features) v += spec.sigma * rng.normal();
      samples.push_back(std::move(s));
    }
  return LabeledDataset(std::move(name), spec.num_classes, std::move(samples));
}

// First `train_per_class` members of each class (in dataset order) form the
// training split, the rest the test split. Ids are preserved, so the splits
// are disjoint by id.
inline std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& data, int train_per_class) {
  std::vector<int> seen(static_cast<std::size_t>(data.num_classes()), 0);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (seen[static_cast<std::size_t>(data[i].label)]++ < train_per_class)
      train.push_back(i);
    else
      test.push_back(i);
  }
  return {data.select(train).renamed(data.name()), data.select(test).renamed(data.name())};
}

// ---- Sampling ----------------------------------------------------------------

// n samples with per-class counts differing by at most one. The n mod C extra
// slots go to the lowest class indices. Output keeps dataset order.
inline LabeledDataset stratified_sample(const LabeledDataset& data, std::size_t n, std::uint64_t seed) {
  if (n > data.size()) throw SampleError("requested " + std::to_string(n) + " samples from a dataset of " + std::to_string(data.size()));
  const std::size_t classes = static_cast<std::size_t>(data.num_classes());
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < data.size(); ++i) members[static_cast<std::size_t>(data[i].label)].push_back(i);
  Rng rng(seed);
  std::vector<bool> keep(data.size(), false);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t quota = n / classes + (c < n % classes ? 1 : 0);
    if (members[c].size() < quota)
      throw SampleError("class " + std::to_string(c) + " has " + std::to_string(members[c].size()) + " members, needs " +
                        std::to_string(quota));
    rng.shuffle(std::span<std::size_t>(members[c]));
    for (std::size_t i = 0; i < quota; ++i) keep[members[c][i]] = true;
  }
  std::vector<std::size_t> picked;
  picked.reserve(n);
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) picked.push_back(i);
  return data.select(picked);
}

// n distinct samples drawn uniformly without replacement, in draw order.
inline LabeledDataset uniform_subsample(const LabeledDataset& data, std::size_t n, std::uint64_t seed) {
  if (n > data.size()) throw SampleError("requested " + std::to_string(n) + " samples from a dataset of " + std::to_string(data.size()));
  std::vector<std::size_t> pos(data.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pos.size() - i));
    std::swap(pos[i], pos[j]);
  }
  pos.resize(n);
  return data.select(pos);
}

}  // namespace knnx
