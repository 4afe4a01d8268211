#include "ensforge/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ensforge {

std::uint64_t shape_fingerprint(const std::vector<std::pair<std::string, std::vector<std::size_t>>>& layout) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  feed(layout.size());
  for (const auto& [name, dims] : layout) {
    feed(name.size());
    for (unsigned char ch : name) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    feed(dims.size());
    for (std::size_t d : dims) feed(d);
  }
  return h;
}

std::string fingerprint_hex(std::uint64_t fp) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fp;
  return os.str();
}

namespace {

constexpr char kParamsMagic[4] = {'E', 'N', 'S', 'W'};
constexpr char kRasterMagic[4] = {'E', 'N', 'S', 'R'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const char* what) : bytes_(bytes), what_(what) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string(what_) + ": truncated at offset " + std::to_string(pos_) + " reading " + field +
                        " (need " + std::to_string(n) + " bytes, have " + std::to_string(bytes_.size() - pos_) + ")");
    }
  }
  void magic(const char (&expected)[4]) {
    need(4, "magic");
    if (std::memcmp(bytes_.data() + pos_, expected, 4) != 0) {
      throw FormatError(std::string(what_) + ": bad magic at offset " + std::to_string(pos_) + " (expected '" +
                        std::string(expected, 4) + "')");
    }
    pos_ += 4;
  }
  std::uint8_t u8(const char* field) {
    need(1, field);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* field) {
    need(2, field);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
  std::string str(std::size_t n, const char* field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void version() {
    const std::size_t at = pos_;
    const std::uint32_t v = u32("version");
    if (v != kFormatVersion) {
      throw FormatError(std::string(what_) + ": unsupported version " + std::to_string(v) + " at offset " +
                        std::to_string(at));
    }
  }
  void finish() const {
    if (pos_ != bytes_.size()) {
      throw FormatError(std::string(what_) + ": " + std::to_string(bytes_.size() - pos_) +
                        " trailing bytes at offset " + std::to_string(pos_));
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_params(const ParamSet& params) {
  Writer w;
  w.bytes(kParamsMagic, 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    if (e.name.size() > 0xffff) throw FormatError("parameter name too long: " + e.name.substr(0, 32));
    if (e.tensor.rank() > 0xff) throw FormatError("tensor rank too large for '" + e.name + "'");
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.dims()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.tensor.values()) w.f32(v);
  }
  return w.take();
}

ParamSet decode_params(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "ENSW");
  r.magic(kParamsMagic);
  r.version();
  const std::uint32_t count = r.u32("tensor count");
  ParamSet out;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16("name length");
    std::string name = r.str(name_len, "name");
    const std::size_t dims_at = r.offset();
    const std::uint8_t ndim = r.u8("ndim");
    std::vector<std::size_t> dims(ndim);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = r.u32("dim");
      if (d == 0) throw FormatError("ENSW: zero dimension in '" + name + "' at offset " + std::to_string(dims_at));
      n *= d;
    }
    r.need(n * 4, "tensor values");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32("value");
    try {
      out.add(std::move(name), Tensor(std::move(dims), std::move(values)));
    } catch (const ValidationError& e) {
      throw FormatError(std::string("ENSW: ") + e.what() + " at offset " + std::to_string(dims_at));
    }
  }
  r.finish();
  return out;
}

std::vector<std::uint8_t> encode_raster(const Tensor& raster) {
  if (!raster.is_raster()) throw DimensionError("ENSR requires a rank-2 raster, got " + shape_string(raster.dims()));
  Writer w;
  w.bytes(kRasterMagic, 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(raster.rows()));
  w.u32(static_cast<std::uint32_t>(raster.cols()));
  for (float v : raster.values()) w.f32(v);
  return w.take();
}

Tensor decode_raster(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "ENSR");
  r.magic(kRasterMagic);
  r.version();
  const std::size_t dims_at = r.offset();
  const std::uint32_t h = r.u32("H");
  const std::uint32_t w = r.u32("W");
  if (h == 0 || w == 0) throw FormatError("ENSR: zero raster dimension at offset " + std::to_string(dims_at));
  const std::size_t n = static_cast<std::size_t>(h) * w;
  r.need(n * 4, "raster values");
  std::vector<float> values(n);
  for (auto& v : values) v = r.f32("value");
  r.finish();
  return Tensor({h, w}, std::move(values));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

void save_params(const ParamSet& params, const std::filesystem::path& path) {
  write_file_bytes(path, encode_params(params));
}

ParamSet load_params(const std::filesystem::path& path) {
  try {
    return decode_params(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_raster(const Tensor& raster, const std::filesystem::path& path) {
  write_file_bytes(path, encode_raster(raster));
}

Tensor load_raster(const std::filesystem::path& path) {
  try {
    return decode_raster(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ensforge
