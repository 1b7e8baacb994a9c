#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "segkit/layers.hpp"

namespace segkit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class DType : std::uint8_t { f32 = 1, f64 = 2, i64 = 3, u8 = 4 };

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>, std::vector<std::uint8_t>> data;

  DType dtype() const { return static_cast<DType>(data.index() + 1); }
  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i64: return "i64";
    case DType::u8: return "u8";
  }
  return "?";
}

/// "SEGK", u16 version, u32 entry count, per-entry manifest (u32 name length,
/// name, u8 dtype, u8 rank, u32 dims), the raw element data of every entry in
/// manifest order, then the CRC32 of all preceding bytes.
class Checkpoint {
 public:
  static constexpr std::uint16_t kVersion = 1;

  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  template <typename T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    CheckpointEntry e{name, {}, std::vector<T>(t.data().begin(), t.data().end())};
    for (auto d : t.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
    put(std::move(e));
  }
  void put_int(const std::string& name, std::int64_t v) { put({name, {1}, std::vector<std::int64_t>{v}}); }
  void put_real(const std::string& name, double v) { put({name, {1}, std::vector<double>{v}}); }
  void put_bytes(const std::string& name, const std::string& bytes) {
    put({name, {static_cast<std::uint32_t>(bytes.size())}, std::vector<std::uint8_t>(bytes.begin(), bytes.end())});
  }

  std::int64_t get_int(const std::string& name) const { return scalar<std::int64_t>(name); }
  double get_real(const std::string& name) const { return scalar<double>(name); }
  std::string get_bytes(const std::string& name) const {
    const auto& v = typed<std::uint8_t>(name);
    return {v.begin(), v.end()};
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out{'S', 'E', 'G', 'K'};
    append(out, kVersion);
    append(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
      append(out, static_cast<std::uint32_t>(e.name.size()));
      out.insert(out.end(), e.name.begin(), e.name.end());
      out.push_back(static_cast<std::uint8_t>(e.dtype()));
      out.push_back(static_cast<std::uint8_t>(e.dims.size()));
      for (auto d : e.dims) append(out, d);
    }
    for (const auto& e : entries) {
      std::visit(
          [&](const auto& v) {
            const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
            out.insert(out.end(), p, p + v.size() * sizeof(v[0]));
          },
          e.data);
    }
    append(out, crc32_of(out.data(), out.size()));
    return out;
  }

  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>") {
    auto fail = [&](const std::string& why) -> FormatError { return FormatError("checkpoint " + source + ": " + why); };
    if (bytes.size() < 14 || std::memcmp(bytes.data(), "SEGK", 4) != 0) throw fail("bad magic (not a segkit checkpoint)");
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    if (stored_crc != crc32_of(bytes.data(), bytes.size() - 4)) throw fail("checksum mismatch (file is truncated or corrupt)");
    std::size_t pos = 4;
    const std::size_t end = bytes.size() - 4;
    auto read = [&](void* dst, std::size_t n) {
      if (pos + n > end) throw fail("truncated manifest");
      std::memcpy(dst, bytes.data() + pos, n);
      pos += n;
    };
    std::uint16_t version = 0;
    read(&version, 2);
    if (version != kVersion) throw fail("unsupported format version " + std::to_string(version));
    std::uint32_t count = 0;
    read(&count, 4);
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t len = 0;
      read(&len, 4);
      if (len > end - pos) throw fail("truncated manifest");
      CheckpointEntry e;
      e.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
      pos += len;
      std::uint8_t dtype = 0, rank = 0;
      read(&dtype, 1);
      read(&rank, 1);
      e.dims.resize(rank);
      for (auto& d : e.dims) read(&d, 4);
      switch (static_cast<DType>(dtype)) {
        case DType::f32: e.data = std::vector<float>(); break;
        case DType::f64: e.data = std::vector<double>(); break;
        case DType::i64: e.data = std::vector<std::int64_t>(); break;
        case DType::u8: e.data = std::vector<std::uint8_t>(); break;
        default: throw fail("entry '" + e.name + "' has unknown dtype code " + std::to_string(dtype));
      }
      ck.entries.push_back(std::move(e));
    }
    for (auto& e : ck.entries) {
      std::visit(
          [&](auto& v) {
            const std::size_t n = e.numel();
            if (n > (end - pos) / sizeof(v[0])) throw fail("entry '" + e.name + "' data is truncated");
            v.resize(n);
            read(v.data(), n * sizeof(v[0]));
          },
          e.data);
    }
    if (pos != end) throw fail("trailing bytes after entry data");
    return ck;
  }

  /// Write to a sibling temp file, then rename over the target.
  void save(const std::string& path) const {
    const auto bytes = serialize();
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw EnvironmentError("cannot write checkpoint " + tmp);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw EnvironmentError("write failed for checkpoint " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw EnvironmentError("cannot move checkpoint into place at " + path + ": " + ec.message());
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw EnvironmentError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes, path);
  }

 private:
  template <typename U>
  static void append(std::vector<std::uint8_t>& out, U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
  }

  static std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    while (n > 0) {
      const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
      crc = ::crc32(crc, p, chunk);
      p += chunk;
      n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
  }

  void put(CheckpointEntry e) {
    for (auto& existing : entries)
      if (existing.name == e.name) {
        existing = std::move(e);
        return;
      }
    entries.push_back(std::move(e));
  }

  template <typename U>
  const std::vector<U>& typed(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw FormatError("checkpoint has no entry '" + name + "'");
    const auto* v = std::get_if<std::vector<U>>(&e->data);
    if (!v) throw FormatError("checkpoint entry '" + name + "' has dtype " + dtype_name(e->dtype()));
    return *v;
  }

  template <typename U>
  U scalar(const std::string& name) const {
    const auto& v = typed<U>(name);
    if (v.size() != 1) throw FormatError("checkpoint entry '" + name + "' is not a scalar");
    return v[0];
  }
};

namespace detail {

template <typename T>
bool same_shape(const CheckpointEntry& e, const Tensor<T>& t) {
  if (e.dims.size() != t.rank()) return false;
  for (std::size_t i = 0; i < e.dims.size(); ++i)
    if (e.dims[i] != t.dim(i)) return false;
  return true;
}

template <typename T>
std::string describe(const Tensor<T>& t) {
  return to_string(t.shape());
}

inline std::string describe(const CheckpointEntry& e) {
  std::string s = "(";
  for (std::size_t i = 0; i < e.dims.size(); ++i) s += (i ? "," : "") + std::to_string(e.dims[i]);
  return s + ") " + dtype_name(e.dtype());
}

template <typename T>
void copy_into(const CheckpointEntry& e, const Tensor<T>& dst) {
  auto out = Tensor<T>(dst).data();
  std::visit(
      [&](const auto& v) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(v[i]);
      },
      e.data);
}

}  // namespace detail

/// Adds every tensor under `prefix` + name.
template <typename T>
void put_tensors(Checkpoint& ck, const std::string& prefix, const NamedTensors<T>& tensors) {
  for (const auto& [name, t] : tensors) ck.put_tensor(prefix + name, t);
}

/// Exact restore: every tensor must exist with the same shape and dtype.
template <typename T>
void load_tensors_strict(const Checkpoint& ck, const std::string& prefix, const NamedTensors<T>& tensors) {
  constexpr DType want = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  for (const auto& [name, t] : tensors) {
    const auto* e = ck.find(prefix + name);
    if (!e || e->dtype() != want || !detail::same_shape(*e, t)) {
      throw ConfigError("checkpoint does not match the model: first mismatch at '" + prefix + name + "' (model " + detail::describe(t) +
                        (e ? ", checkpoint " + detail::describe(*e) : ", missing from checkpoint") + ")");
    }
  }
  for (const auto& [name, t] : tensors) detail::copy_into(*ck.find(prefix + name), t);
}

struct FinetuneReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;  // checkpoint entries not used, and model tensors left at init

  std::string format() const {
    std::string s = "loaded " + std::to_string(loaded.size()) + " tensors, skipped " + std::to_string(skipped.size()) + "\n";
    for (const auto& n : skipped) s += "skipped: " + n + "\n";
    return s;
  }
};

/// Loads the model tensors whose name and shape match; everything else is
/// reported as skipped.
template <typename T>
FinetuneReport load_tensors_matching(const Checkpoint& ck, const std::string& prefix, const NamedTensors<T>& tensors) {
  FinetuneReport report;
  std::set<std::string> used;
  for (const auto& [name, t] : tensors) {
    const auto* e = ck.find(prefix + name);
    if (e && e->dtype() != DType::i64 && e->dtype() != DType::u8 && detail::same_shape(*e, t)) {
      detail::copy_into(*e, t);
      report.loaded.push_back(prefix + name);
      used.insert(prefix + name);
    } else {
      report.skipped.push_back(prefix + name + (e ? " (shape " + detail::describe(*e) + " vs " + detail::describe(t) + ")" : " (not in checkpoint)"));
      if (e) used.insert(prefix + name);
    }
  }
  for (const auto& e : ck.entries)
    if (e.name.rfind(prefix, 0) == 0 && !used.count(e.name)) report.skipped.push_back(e.name + " (no such model tensor)");
  return report;
}

}  // namespace segkit
