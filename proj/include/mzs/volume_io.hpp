#pragma once

// HU volumes and the .hvol container.
//
// File layout: one UTF-8 header line of space-separated key=value pairs
//
//   dims=nz,ny,nx spacing=dz,dy,dx dtype=i16le version=1 checksum=<crc32 hex>
//
// a single '\n', then the raw little-endian payload in z-major order
// (x fastest). dtype is i16le for HU volumes and u8 for binary masks.
// The checksum is CRC-32 of the payload bytes and is verified when present.

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mzs/detail/hash.hpp"

namespace mzs {

inline constexpr std::int16_t kMinHu = -1024;
inline constexpr std::int16_t kMaxHu = 3071;

struct Dims3 {
  int nz = 0, ny = 0, nx = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nz) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nx);
  }
  std::size_t plane() const { return static_cast<std::size_t>(ny) * static_cast<std::size_t>(nx); }
  bool valid() const { return nz >= 1 && ny >= 1 && nx >= 1; }
  bool operator==(const Dims3&) const = default;
};

struct Spacing {
  double dz = 1.0, dy = 1.0, dx = 1.0;
  bool operator==(const Spacing&) const = default;
};

enum class VolumeErrc {
  missing_file,
  malformed_header,
  unsupported_version,
  size_mismatch,
  checksum_mismatch,
  out_of_range_voxel,
  invalid_dims,
  unwritable,
  index_out_of_range,
};

class VolumeError : public std::runtime_error {
 public:
  VolumeError(VolumeErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  VolumeErrc code() const noexcept { return code_; }

 private:
  VolumeErrc code_;
};

// Immutable 3D volume of signed 16-bit HU values.
class HuVolume {
 public:
  HuVolume(Dims3 dims, Spacing spacing, std::vector<std::int16_t> voxels)
      : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)) {
    if (!dims_.valid())
      throw VolumeError(VolumeErrc::invalid_dims, "volume dims must all be >= 1");
    if (voxels_.size() != dims_.count())
      throw VolumeError(VolumeErrc::size_mismatch,
                        "voxel count " + std::to_string(voxels_.size()) + " != nz*ny*nx " +
                            std::to_string(dims_.count()));
    for (std::size_t i = 0; i < voxels_.size(); ++i) {
      if (voxels_[i] < kMinHu || voxels_[i] > kMaxHu)
        throw VolumeError(VolumeErrc::out_of_range_voxel,
                          "voxel " + std::to_string(i) + " = " + std::to_string(voxels_[i]) +
                              " outside [-1024, 3071] HU");
    }
  }

  const Dims3& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::span<const std::int16_t> voxels() const { return voxels_; }

  std::int16_t at(int z, int y, int x) const {
    return voxels_[(static_cast<std::size_t>(z) * dims_.ny + y) * dims_.nx + x];
  }
  std::span<const std::int16_t> plane(int z) const {
    return std::span(voxels_).subspan(static_cast<std::size_t>(z) * dims_.plane(), dims_.plane());
  }

  bool operator==(const HuVolume&) const = default;

 private:
  Dims3 dims_;
  Spacing spacing_;
  std::vector<std::int16_t> voxels_;
};

struct Slice2D {
  int ny = 0, nx = 0;
  int z_index = 0;
  std::vector<std::int16_t> pixels;

  std::int16_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * nx + x]; }
};

inline Slice2D slice_axial(const HuVolume& vol, int z) {
  if (z < 0 || z >= vol.dims().nz)
    throw VolumeError(VolumeErrc::index_out_of_range,
                      "slice index " + std::to_string(z) + " outside [0, " +
                          std::to_string(vol.dims().nz) + ")");
  const auto plane = vol.plane(z);
  return Slice2D{vol.dims().ny, vol.dims().nx, z, {plane.begin(), plane.end()}};
}

// ---- container ------------------------------------------------------------

enum class VoxelType { i16le, u8 };

inline const char* to_string(VoxelType t) { return t == VoxelType::i16le ? "i16le" : "u8"; }
inline std::size_t element_size(VoxelType t) { return t == VoxelType::i16le ? 2 : 1; }

struct ContainerHeader {
  Dims3 dims;
  Spacing spacing;
  VoxelType dtype = VoxelType::i16le;
  int version = 1;
  std::optional<std::uint32_t> checksum;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view s, const char* what) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw VolumeError(VolumeErrc::malformed_header, std::string("bad ") + what + ": '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

inline std::string format_header(const ContainerHeader& h) {
  std::string out = "dims=" + std::to_string(h.dims.nz) + "," + std::to_string(h.dims.ny) + "," +
                    std::to_string(h.dims.nx);
  out += " spacing=" + detail::format_double(h.spacing.dz) + "," + detail::format_double(h.spacing.dy) +
         "," + detail::format_double(h.spacing.dx);
  out += std::string(" dtype=") + to_string(h.dtype);
  out += " version=" + std::to_string(h.version);
  if (h.checksum) out += " checksum=" + mzs::detail::hex32(*h.checksum);
  return out;
}

inline ContainerHeader parse_header(std::string_view line) {
  ContainerHeader h;
  bool have_dims = false, have_dtype = false, have_version = false;
  for (const auto& field : detail::split(line, ' ')) {
    if (field.empty()) continue;
    const auto eq = field.find('=');
    if (eq == std::string::npos)
      throw VolumeError(VolumeErrc::malformed_header, "header field without '=': " + field);
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "dims") {
      const auto parts = detail::split(value, ',');
      if (parts.size() != 3) throw VolumeError(VolumeErrc::malformed_header, "dims needs 3 values");
      h.dims = {detail::parse_number<int>(parts[0], "dims"), detail::parse_number<int>(parts[1], "dims"),
                detail::parse_number<int>(parts[2], "dims")};
      have_dims = true;
    } else if (key == "spacing") {
      const auto parts = detail::split(value, ',');
      if (parts.size() != 3) throw VolumeError(VolumeErrc::malformed_header, "spacing needs 3 values");
      h.spacing = {detail::parse_number<double>(parts[0], "spacing"),
                   detail::parse_number<double>(parts[1], "spacing"),
                   detail::parse_number<double>(parts[2], "spacing")};
    } else if (key == "dtype") {
      if (value == "i16le") h.dtype = VoxelType::i16le;
      else if (value == "u8") h.dtype = VoxelType::u8;
      else throw VolumeError(VolumeErrc::malformed_header, "unknown dtype " + value);
      have_dtype = true;
    } else if (key == "version") {
      h.version = detail::parse_number<int>(value, "version");
      have_version = true;
    } else if (key == "checksum") {
      std::uint32_t crc = 0;
      auto res = std::from_chars(value.data(), value.data() + value.size(), crc, 16);
      if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw VolumeError(VolumeErrc::malformed_header, "bad checksum: '" + value + "'");
      h.checksum = crc;
    }
    // unknown keys are ignored so later writers can add fields
  }
  if (!have_version) throw VolumeError(VolumeErrc::malformed_header, "header lacks version");
  if (h.version != 1)
    throw VolumeError(VolumeErrc::unsupported_version, "unsupported container version " + std::to_string(h.version));
  if (!have_dims || !have_dtype) throw VolumeError(VolumeErrc::malformed_header, "header lacks dims or dtype");
  if (!h.dims.valid()) throw VolumeError(VolumeErrc::invalid_dims, "dims must all be >= 1");
  return h;
}

struct RawContainer {
  ContainerHeader header;
  std::vector<std::uint8_t> payload;
};

inline RawContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeError(VolumeErrc::missing_file, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw VolumeError(VolumeErrc::malformed_header, "empty file " + path.string());
  RawContainer c;
  c.header = parse_header(line);
  c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  const std::size_t expected = c.header.dims.count() * element_size(c.header.dtype);
  if (c.payload.size() != expected)
    throw VolumeError(VolumeErrc::size_mismatch, path.string() + ": header declares " + std::to_string(expected) +
                                                     " payload bytes, found " + std::to_string(c.payload.size()));
  if (c.header.checksum && *c.header.checksum != mzs::detail::crc32(c.payload))
    throw VolumeError(VolumeErrc::checksum_mismatch, path.string() + ": payload CRC-32 mismatch");
  return c;
}

inline void write_container(const std::filesystem::path& path, ContainerHeader header,
                            std::span<const std::uint8_t> payload) {
  header.checksum = mzs::detail::crc32(payload);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw VolumeError(VolumeErrc::unwritable, "cannot write " + path.string());
  const std::string line = format_header(header) + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw VolumeError(VolumeErrc::unwritable, "write failed for " + path.string());
}

inline std::uint32_t voxel_checksum(const HuVolume& vol) {
  const auto v = vol.voxels();
  return mzs::detail::crc32(std::span(reinterpret_cast<const std::uint8_t*>(v.data()), v.size_bytes()));
}

inline HuVolume load_volume(const std::filesystem::path& path) {
  auto c = read_container(path);
  if (c.header.dtype != VoxelType::i16le)
    throw VolumeError(VolumeErrc::malformed_header, path.string() + ": expected dtype=i16le");
  std::vector<std::int16_t> voxels(c.header.dims.count());
  std::memcpy(voxels.data(), c.payload.data(), c.payload.size());
  return HuVolume(c.header.dims, c.header.spacing, std::move(voxels));
}

// HuVolume's constructor already enforces the voxel range, so any instance is
// writable as-is.
inline void save_volume(const HuVolume& vol, const std::filesystem::path& path) {
  const auto v = vol.voxels();
  write_container(path, ContainerHeader{vol.dims(), vol.spacing(), VoxelType::i16le, 1, std::nullopt},
                  std::span(reinterpret_cast<const std::uint8_t*>(v.data()), v.size_bytes()));
}

}  // namespace mzs
