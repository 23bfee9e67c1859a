#pragma once

// Labeled image collections: CIFAR-10 binary and MNIST IDX ingestion, a
// seeded synthetic generator, augmentation, normalization and batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ktransfer/error.hpp"
#include "ktransfer/rng.hpp"
#include "ktransfer/tensor.hpp"

namespace ktransfer {

/// Images stored contiguously as [n, C, H, W] floats in [0,1].
struct Dataset {
  std::string name;
  std::string split;  // "train" or "test"
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t class_count = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }

  void validate() const {
    if (pixels.size() != labels.size() * image_size()) {
      throw DataError("dataset '" + name + "': pixel buffer does not match " + std::to_string(labels.size()) +
                      " images of " + std::to_string(image_size()) + " values");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
        throw DataError("dataset '" + name + "': label " + std::to_string(labels[i]) + " at index " +
                        std::to_string(i) + " outside [0," + std::to_string(class_count) + ")");
      }
    }
  }

  /// First `count` samples (all when count is 0 or exceeds the size).
  Dataset head(std::size_t count) const {
    if (count == 0 || count >= size()) return *this;
    Dataset out = *this;
    out.labels.resize(count);
    out.pixels.resize(count * image_size());
    return out;
  }
};

struct Batch {
  Tensor<float> x;
  std::vector<int> y;
  std::size_t size() const { return y.size(); }
};

inline Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("cannot build an empty batch");
  std::vector<float> buf(indices.size() * data.image_size());
  std::vector<int> y(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto img = data.image(indices[b]);
    std::copy(img.begin(), img.end(), buf.begin() + static_cast<std::ptrdiff_t>(b * data.image_size()));
    y[b] = data.labels[indices[b]];
  }
  return {Tensor<float>(Shape{indices.size(), data.channels, data.height, data.width}, std::move(buf)), std::move(y)};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

inline constexpr std::size_t kCifarRecordBytes = 3073;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

}  // namespace detail

/// Parses a sequence of 3073-byte records (label, then R, G, B planes of
/// 32x32) and appends up to `limit` of them (0 = all) to `out`.
inline void parse_cifar_records(std::span<const unsigned char> bytes, const std::string& source, Dataset& out,
                                std::size_t limit = 0) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() / kCifarRecordBytes * kCifarRecordBytes;
    throw FormatError("'" + source + "': truncated CIFAR record at byte offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " trailing bytes, records are 3073 bytes)");
  }
  std::size_t records = bytes.size() / kCifarRecordBytes;
  if (limit != 0) records = std::min(records, limit);
  out.pixels.reserve(out.pixels.size() + records * 3072);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError("'" + source + "': label byte " + std::to_string(rec[0]) + " > 9 in record " +
                      std::to_string(r) + " (offset " + std::to_string(r * kCifarRecordBytes) + ")");
    }
    out.labels.push_back(rec[0]);
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i) out.pixels.push_back(static_cast<float>(rec[i]) / 255.0f);
  }
}

inline Dataset read_cifar_file(const std::filesystem::path& path, std::size_t limit = 0,
                               const std::string& split = "train") {
  Dataset d{"cifar10", split, 3, 32, 32, 10, {}, {}};
  const auto bytes = detail::read_file(path);
  parse_cifar_records(bytes, path.string(), d, limit);
  return d;
}

/// Loads data_batch_1..5.bin and test_batch.bin from `dir`. Limits of 0
/// load everything.
inline std::pair<Dataset, Dataset> load_cifar10_binary(const std::filesystem::path& dir, std::size_t train_limit = 0,
                                                       std::size_t test_limit = 0) {
  Dataset train{"cifar10", "train", 3, 32, 32, 10, {}, {}};
  for (int i = 1; i <= 5; ++i) {
    if (train_limit != 0 && train.size() >= train_limit) break;
    const auto path = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (!std::filesystem::exists(path)) throw DataError("missing CIFAR-10 file '" + path.string() + "'");
    const auto bytes = detail::read_file(path);
    parse_cifar_records(bytes, path.string(), train, train_limit == 0 ? 0 : train_limit - train.size());
  }
  const auto test_path = dir / "test_batch.bin";
  if (!std::filesystem::exists(test_path)) throw DataError("missing CIFAR-10 file '" + test_path.string() + "'");
  Dataset test = read_cifar_file(test_path, test_limit, "test");
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// MNIST IDX

inline Dataset parse_mnist_idx(std::span<const unsigned char> images, std::span<const unsigned char> labels,
                               const std::string& split = "train") {
  if (images.size() < 16) throw FormatError("IDX image file truncated: header needs 16 bytes");
  if (labels.size() < 8) throw FormatError("IDX label file truncated: header needs 8 bytes");
  const std::uint32_t img_magic = detail::read_be32(images.data());
  const std::uint32_t lbl_magic = detail::read_be32(labels.data());
  if (img_magic != 0x00000803) {
    throw FormatError("IDX image file has magic number 0x" + [&] {
      std::ostringstream os;
      os << std::hex << std::setw(8) << std::setfill('0') << img_magic;
      return os.str();
    }() + ", expected 0x00000803");
  }
  if (lbl_magic != 0x00000801) {
    throw FormatError("IDX label file has magic number 0x" + [&] {
      std::ostringstream os;
      os << std::hex << std::setw(8) << std::setfill('0') << lbl_magic;
      return os.str();
    }() + ", expected 0x00000801");
  }
  const std::size_t n = detail::read_be32(images.data() + 4);
  const std::size_t rows = detail::read_be32(images.data() + 8);
  const std::size_t cols = detail::read_be32(images.data() + 12);
  const std::size_t n_labels = detail::read_be32(labels.data() + 4);
  if (n != n_labels) {
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  if (rows == 0 || cols == 0) throw FormatError("IDX image file declares empty images");
  if (images.size() != 16 + n * rows * cols) {
    throw FormatError("IDX image file has " + std::to_string(images.size()) + " bytes, header implies " +
                      std::to_string(16 + n * rows * cols));
  }
  if (labels.size() != 8 + n) {
    throw FormatError("IDX label file has " + std::to_string(labels.size()) + " bytes, header implies " +
                      std::to_string(8 + n));
  }
  Dataset d{"mnist", split, 1, rows, cols, 10, {}, {}};
  d.pixels.resize(n * rows * cols);
  for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = static_cast<float>(images[16 + i]) / 255.0f;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[8 + i] > 9) throw DataError("IDX label " + std::to_string(labels[8 + i]) + " > 9 at index " + std::to_string(i));
    d.labels[i] = labels[8 + i];
  }
  return d;
}

inline Dataset load_mnist_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                              const std::string& split = "train") {
  return parse_mnist_idx(detail::read_file(image_path), detail::read_file(label_path), split);
}

// ---------------------------------------------------------------------------
// Synthetic sinusoid patterns

struct SynthOptions {
  std::size_t n_per_class = 100;
  std::size_t classes = 10;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  double noise = 0.1;          // Gaussian sigma
  bool phase_jitter = false;   // random per-image phase offset
  double contrast_jitter = 0;  // amplitude drawn from [1 - j, 1] * 0.4
  std::size_t channels = 3;
  std::string split = "train";
};

/// Class c is an oriented sinusoid grating (orientation pi*c/classes,
/// frequency cycling through three values, per-channel phase shift) plus
/// clipped Gaussian noise. Samples are class-interleaved.
inline Dataset synth_dataset(const SynthOptions& opt) {
  if (opt.classes < 2 || opt.classes > 16) throw ConfigError("synthetic dataset supports 2..16 classes");
  if (opt.size < 8) throw ConfigError("synthetic image size must be >= 8");
  if (opt.n_per_class < 1) throw ConfigError("synthetic dataset needs at least one sample per class");
  if (opt.noise < 0) throw ConfigError("noise must be non-negative");
  if (opt.contrast_jitter < 0 || opt.contrast_jitter > 1) throw ConfigError("contrast_jitter must lie in [0,1]");
  constexpr double kPi = 3.14159265358979323846;
  Dataset d{"synthetic", opt.split, opt.channels, opt.size, opt.size, opt.classes, {}, {}};
  const std::size_t n = opt.n_per_class * opt.classes;
  const std::size_t plane = opt.size * opt.size;
  d.pixels.resize(n * opt.channels * plane);
  d.labels.resize(n);
  std::mt19937_64 rng(derive_seed(opt.seed, "synthetic/" + opt.split));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % opt.classes;
    d.labels[i] = static_cast<int>(c);
    const double theta = kPi * static_cast<double>(c) / static_cast<double>(opt.classes);
    const double cycles = 2.0 + 0.75 * static_cast<double>(c % 3);
    const double omega = 2.0 * kPi * cycles / static_cast<double>(opt.size);
    const double phase = opt.phase_jitter ? 2.0 * kPi * unit(rng) : 0.0;
    const double amp = 0.4 * (1.0 - opt.contrast_jitter * unit(rng));
    float* img = d.pixels.data() + i * opt.channels * plane;
    for (std::size_t ch = 0; ch < opt.channels; ++ch) {
      const double shift = 2.0 * kPi * static_cast<double>(ch * (c + 1)) / static_cast<double>(opt.classes + 1);
      for (std::size_t y = 0; y < opt.size; ++y)
        for (std::size_t x = 0; x < opt.size; ++x) {
          const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
          double v = 0.5 + amp * std::sin(omega * u + phase + shift);
          if (opt.noise > 0) v += opt.noise * gauss(rng);
          img[ch * plane + y * opt.size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
  }
  return d;
}

inline Dataset synth_dataset(std::size_t n_per_class, std::size_t classes, std::size_t size, std::uint64_t seed) {
  SynthOptions opt;
  opt.n_per_class = n_per_class;
  opt.classes = classes;
  opt.size = size;
  opt.seed = seed;
  return synth_dataset(opt);
}

// ---------------------------------------------------------------------------
// Augmentation and normalization

/// Reflect-pads by `pad`, crops a random window of the original size and,
/// when `flip` is set, mirrors horizontally with probability 1/2.
inline Batch augment(const Batch& batch, std::size_t pad, bool flip, std::uint64_t seed) {
  if (pad == 0 && !flip) return {batch.x.detach(), batch.y};
  const std::size_t N = batch.x.dim(0), C = batch.x.dim(1), H = batch.x.dim(2), W = batch.x.dim(3);
  if (pad >= H || pad >= W) throw ConfigError("augment: reflect padding must be smaller than the image");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
  std::bernoulli_distribution coin(0.5);
  auto reflect = [](long long i, std::size_t n) {
    if (i < 0) i = -i;
    if (i >= static_cast<long long>(n)) i = 2 * static_cast<long long>(n) - 2 - i;
    return static_cast<std::size_t>(i);
  };
  std::vector<float> out(batch.x.size());
  auto in = batch.x.data();
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t dy = pad ? offset(rng) : 0, dx = pad ? offset(rng) : 0;
    const bool mirror = flip && coin(rng);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t sx0 = mirror ? W - 1 - x : x;
          const std::size_t sy = reflect(static_cast<long long>(y + dy) - static_cast<long long>(pad), H);
          const std::size_t sx = reflect(static_cast<long long>(sx0 + dx) - static_cast<long long>(pad), W);
          out[((n * C + c) * H + y) * W + x] = in[((n * C + c) * H + sy) * W + sx];
        }
  }
  return {Tensor<float>(batch.x.shape(), std::move(out)), batch.y};
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

inline ChannelStats compute_channel_stats(const Dataset& data) {
  ChannelStats s{std::vector<double>(data.channels, 0.0), std::vector<double>(data.channels, 0.0)};
  const std::size_t plane = data.height * data.width;
  const double count = static_cast<double>(data.size() * plane);
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t c = 0; c < data.channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) s.mean[c] += data.pixels[(i * data.channels + c) * plane + p];
  for (auto& m : s.mean) m /= count;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t c = 0; c < data.channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = data.pixels[(i * data.channels + c) * plane + p] - s.mean[c];
        s.std[c] += d * d;
      }
  for (auto& v : s.std) v = std::sqrt(v / count);
  return s;
}

inline Batch normalize(const Batch& batch, std::span<const double> mean, std::span<const double> stddev) {
  const std::size_t N = batch.x.dim(0), C = batch.x.dim(1), plane = batch.x.dim(2) * batch.x.dim(3);
  if (mean.size() != C || stddev.size() != C) throw ConfigError("normalize: need one mean/std per channel");
  for (double s : stddev)
    if (!(s > 0)) throw ConfigError("normalize: standard deviations must be positive");
  std::vector<float> out(batch.x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (n * C + c) * plane + p;
        out[i] = static_cast<float>((batch.x[i] - mean[c]) / stddev[c]);
      }
  return {Tensor<float>(batch.x.shape(), std::move(out)), batch.y};
}

inline Batch denormalize(const Batch& batch, std::span<const double> mean, std::span<const double> stddev) {
  const std::size_t N = batch.x.dim(0), C = batch.x.dim(1), plane = batch.x.dim(2) * batch.x.dim(3);
  if (mean.size() != C || stddev.size() != C) throw ConfigError("denormalize: need one mean/std per channel");
  std::vector<float> out(batch.x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (n * C + c) * plane + p;
        out[i] = static_cast<float>(batch.x[i] * stddev[c] + mean[c]);
      }
  return {Tensor<float>(batch.x.shape(), std::move(out)), batch.y};
}

/// Sidecar format: one `mean_<c>= <value>` and `std_<c>= <value>` line per channel.
inline void write_channel_stats(const std::filesystem::path& path, const ChannelStats& stats) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  for (std::size_t c = 0; c < stats.mean.size(); ++c) out << "mean_" << c << "= " << stats.mean[c] << '\n';
  for (std::size_t c = 0; c < stats.std.size(); ++c) out << "std_" << c << "= " << stats.std[c] << '\n';
}

inline ChannelStats read_channel_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  ChannelStats stats;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find("= ");
    const auto us = line.find('_');
    if (eq == std::string::npos || us == std::string::npos || us > eq) {
      throw FormatError("malformed statistics line '" + line + "' in '" + path.string() + "'");
    }
    const std::string key = line.substr(0, us);
    const std::size_t c = std::stoul(line.substr(us + 1, eq - us - 1));
    const double value = std::stod(line.substr(eq + 2));
    if (key != "mean" && key != "std") throw FormatError("unknown statistic '" + key + "' in '" + path.string() + "'");
    auto& vec = key == "mean" ? stats.mean : stats.std;
    if (vec.size() <= c) vec.resize(c + 1, 0.0);
    vec[c] = value;
  }
  if (stats.mean.empty() || stats.mean.size() != stats.std.size()) {
    throw FormatError("statistics file '" + path.string() + "' must list mean and std for every channel");
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Batching

/// Visit order for one epoch: identity, or a seeded permutation.
inline std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

/// Yields consecutive batches covering every sample once; the final batch
/// may be partial.
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, std::size_t batch_size, bool shuffle, std::uint64_t seed)
      : data_(&data), batch_size_(batch_size) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (data.size() == 0) throw DataError("cannot iterate over empty dataset '" + data.name + "'");
    order_ = epoch_order(data.size(), shuffle, seed);
  }

  std::optional<Batch> next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(pos_ + batch_size_, order_.size());
    auto batch = make_batch(*data_, std::span<const std::size_t>(order_).subspan(pos_, end - pos_));
    pos_ = end;
    return batch;
  }

  std::size_t batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace ktransfer
