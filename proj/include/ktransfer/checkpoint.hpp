#pragma once

// Binary checkpoint container. Layout: "FTCK", u32 version, u32 entry count,
// then entries {u16 name length, name, u8 dtype, u8 ndim, u32 dims..., payload}.
// Integers and floats are little-endian. Entries whose names start with "__"
// carry metadata (architecture, step counter, RNG state, input normalization).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ktransfer/error.hpp"
#include "ktransfer/nn.hpp"

namespace ktransfer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class DType : std::uint8_t { f32 = 0, f64 = 1, bytes = 2, u64 = 3 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::bytes: return 1;
    case DType::u64: return 8;
  }
  throw FormatError("unknown dtype tag " + std::to_string(static_cast<int>(t)));
}

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<unsigned char> payload;

  template <class T>
  std::vector<T> values() const {
    std::vector<T> out(numel(shape));
    if (dtype == DType::f32) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        float v;
        std::memcpy(&v, payload.data() + 4 * i, 4);
        out[i] = static_cast<T>(v);
      }
    } else if (dtype == DType::f64) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        double v;
        std::memcpy(&v, payload.data() + 8 * i, 8);
        out[i] = static_cast<T>(v);
      }
    } else {
      throw FormatError("entry '" + name + "' is not a floating-point tensor");
    }
    return out;
  }
};

namespace detail {

template <class T>
CheckpointEntry float_entry(const std::string& name, const Shape& shape, std::span<const T> data) {
  CheckpointEntry e{name, sizeof(T) == 4 ? DType::f32 : DType::f64, shape, {}};
  e.payload.resize(data.size_bytes());
  std::memcpy(e.payload.data(), data.data(), data.size_bytes());
  return e;
}

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.insert(out.end(), buf, buf + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    auto* c = static_cast<const unsigned char*>(p);
    out.insert(out.end(), c, c + n);
  }
  std::vector<unsigned char> out;
};

class ByteReader {
 public:
  ByteReader(std::span<const unsigned char> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const unsigned char> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& source() const { return source_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(source_ + ": truncated while reading " + what + " at byte offset " + std::to_string(pos_) +
                        " (need " + std::to_string(n) + ", have " + std::to_string(bytes_.size() - pos_) + ")");
    }
  }

  std::span<const unsigned char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct Checkpoint {
  static constexpr char kMagic[4] = {'F', 'T', 'C', 'K'};
  static constexpr std::uint32_t kVersion = 1;

  std::string arch;
  std::uint64_t step = 0;
  std::string rng_state;
  std::optional<std::vector<double>> norm_mean;
  std::optional<std::vector<double>> norm_std;
  std::vector<CheckpointEntry> tensors;  // parameters then buffers, network order

  template <class T>
  static Checkpoint from_network(const Network<T>& net, std::uint64_t step = 0, std::string rng_state = {}) {
    Checkpoint ck;
    ck.arch = net.arch();
    ck.step = step;
    ck.rng_state = std::move(rng_state);
    for (const auto& p : net.parameters()) ck.tensors.push_back(detail::float_entry<T>(p.name, p.value.shape(), p.value.data()));
    for (const auto& b : net.buffers()) ck.tensors.push_back(detail::float_entry<T>(b.name, b.value.shape(), b.value.data()));
    return ck;
  }

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return &e;
    return nullptr;
  }

  /// Copies stored values into an already-built network. Every parameter
  /// and buffer must be present with the same shape.
  template <class T>
  void restore_into(Network<T>& net) const {
    auto copy = [&](const std::string& name, Tensor<T>& dst) {
      const CheckpointEntry* e = find(name);
      if (!e) throw FormatError("checkpoint for '" + arch + "' has no entry '" + name + "' required by '" + net.arch() + "'");
      if (e->shape != dst.shape()) {
        throw DimensionError("parameter '" + name + "': checkpoint shape " + to_string(e->shape) + " vs network shape " +
                             to_string(dst.shape()));
      }
      auto v = e->values<T>();
      auto out = dst.mutable_data();
      std::copy(v.begin(), v.end(), out.begin());
    };
    for (auto& p : net.parameters()) copy(p.name, p.value);
    for (auto& b : net.buffers()) copy(b.name, b.value);
    const std::size_t expected = net.parameters().size() + net.buffers().size();
    if (tensors.size() != expected) {
      for (const auto& e : tensors) {
        bool known = false;
        for (const auto& p : net.parameters()) known = known || p.name == e.name;
        for (const auto& b : net.buffers()) known = known || b.name == e.name;
        if (!known) throw FormatError("checkpoint entry '" + e.name + "' has no counterpart in '" + net.arch() + "'");
      }
    }
  }

  template <class T = float>
  Network<T> to_network() const {
    auto net = build_from_arch<T>(arch);
    restore_into(net);
    return net;
  }

  std::vector<unsigned char> serialize() const {
    detail::ByteWriter w;
    w.put_bytes(kMagic, 4);
    w.put<std::uint32_t>(kVersion);
    std::vector<CheckpointEntry> meta;
    meta.push_back(bytes_entry("__arch", arch));
    CheckpointEntry s{"__step", DType::u64, {1}, {}};
    s.payload.resize(8);
    std::memcpy(s.payload.data(), &step, 8);
    meta.push_back(std::move(s));
    if (!rng_state.empty()) meta.push_back(bytes_entry("__rng", rng_state));
    if (norm_mean) meta.push_back(detail::float_entry<double>("__norm_mean", {norm_mean->size()}, *norm_mean));
    if (norm_std) meta.push_back(detail::float_entry<double>("__norm_std", {norm_std->size()}, *norm_std));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size() + tensors.size()));
    auto emit = [&](const CheckpointEntry& e) {
      if (e.name.size() > 0xffff) throw FormatError("entry name too long: " + e.name);
      if (e.shape.size() > 0xff) throw FormatError("entry '" + e.name + "' has too many dimensions");
      w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
      w.put_bytes(e.name.data(), e.name.size());
      w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
      for (auto d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
      w.put_bytes(e.payload.data(), e.payload.size());
    };
    for (const auto& e : meta) emit(e);
    for (const auto& e : tensors) emit(e);
    return std::move(w.out);
  }

  static Checkpoint deserialize(std::span<const unsigned char> bytes, const std::string& source = "checkpoint") {
    detail::ByteReader r(bytes, source);
    auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
      throw FormatError(source + ": bad magic (expected \"FTCK\"), not a checkpoint file");
    }
    const auto version = r.get<std::uint32_t>("version");
    if (version != kVersion) {
      throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                        std::to_string(kVersion) + ")");
    }
    const auto count = r.get<std::uint32_t>("entry count");
    Checkpoint ck;
    bool have_arch = false;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::size_t at = r.position();
      CheckpointEntry e;
      const auto len = r.get<std::uint16_t>("name length");
      auto name = r.take(len, "entry name");
      e.name.assign(name.begin(), name.end());
      const auto tag = r.get<std::uint8_t>("dtype tag");
      if (tag > 3) {
        throw FormatError(source + ": entry '" + e.name + "' at byte offset " + std::to_string(at) +
                          " has unknown dtype tag " + std::to_string(tag));
      }
      e.dtype = static_cast<DType>(tag);
      const auto ndim = r.get<std::uint8_t>("ndim");
      for (std::uint8_t d = 0; d < ndim; ++d) e.shape.push_back(r.get<std::uint32_t>("dimension"));
      auto payload = r.take(numel(e.shape) * dtype_size(e.dtype), "payload");
      e.payload.assign(payload.begin(), payload.end());

      if (e.name == "__arch") {
        ck.arch.assign(e.payload.begin(), e.payload.end());
        have_arch = true;
      } else if (e.name == "__step") {
        if (e.dtype != DType::u64 || e.payload.size() != 8) throw FormatError(source + ": malformed __step entry");
        std::memcpy(&ck.step, e.payload.data(), 8);
      } else if (e.name == "__rng") {
        ck.rng_state.assign(e.payload.begin(), e.payload.end());
      } else if (e.name == "__norm_mean") {
        ck.norm_mean = e.values<double>();
      } else if (e.name == "__norm_std") {
        ck.norm_std = e.values<double>();
      } else {
        ck.tensors.push_back(std::move(e));
      }
    }
    if (!r.done()) {
      throw FormatError(source + ": " + std::to_string(bytes.size() - r.position()) +
                        " trailing bytes after the last entry at offset " + std::to_string(r.position()));
    }
    if (!have_arch) throw FormatError(source + ": missing __arch entry");
    return ck;
  }

  /// Written to a sibling temp file, then renamed into place.
  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw DataError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes, path.string());
  }

 private:
  static CheckpointEntry bytes_entry(const std::string& name, const std::string& text) {
    CheckpointEntry e{name, DType::bytes, {text.size()}, {}};
    e.payload.assign(text.begin(), text.end());
    return e;
  }
};

template <class T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& path, std::uint64_t step = 0,
                     std::string rng_state = {}) {
  Checkpoint::from_network(net, step, std::move(rng_state)).save(path);
}

template <class T = float>
Network<T> load_checkpoint(const std::filesystem::path& path) {
  return Checkpoint::load(path).to_network<T>();
}

}  // namespace ktransfer
