#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ktransfer/error.hpp"

namespace ktransfer {

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  std::optional<double> l_cls, l_ft, l_kd, l_at, l_rec;
  std::optional<double> train_err, test_err;
  double seconds = 0;
};

/// Per-optimization-step loss values, as logged.
struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  double total = 0;
  std::optional<double> l_cls, l_ft, l_kd, l_at, l_rec;
};

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct Metrics {
  static constexpr const char* kHeader = "epoch,lr,l_cls,l_ft,l_kd,l_at,l_rec,train_err,test_err,seconds";

  std::vector<EpochRecord> records;

  /// Wall time is left blank unless requested so that reruns produce
  /// byte-identical files.
  std::string to_csv(bool with_time = false) const {
    std::string out = std::string(kHeader) + "\n";
    auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
    for (const auto& r : records) {
      out += std::to_string(r.epoch) + "," + format_number(r.lr) + "," + opt(r.l_cls) + "," + opt(r.l_ft) + "," +
             opt(r.l_kd) + "," + opt(r.l_at) + "," + opt(r.l_rec) + "," + opt(r.train_err) + "," + opt(r.test_err) +
             "," + (with_time ? format_number(r.seconds) : std::string()) + "\n";
    }
    return out;
  }

  std::string timing_log() const {
    std::string out;
    for (const auto& r : records) out += "epoch " + std::to_string(r.epoch) + " seconds " + format_number(r.seconds) + "\n";
    return out;
  }
};

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
    out << text;
    if (!out) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace ktransfer
