#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mzs/volume_io.hpp"

namespace mzs {

// One byte per voxel, values 0/1, same z-major layout as HuVolume.
struct BinaryMask3D {
  Dims3 dims;
  std::vector<std::uint8_t> bits;

  BinaryMask3D() = default;
  explicit BinaryMask3D(Dims3 d, std::uint8_t fill = 0) : dims(d), bits(d.count(), fill) {}

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * dims.ny + y) * dims.nx + x;
  }
  std::uint8_t at(int z, int y, int x) const { return bits[index(z, y, x)]; }
  std::uint8_t& at(int z, int y, int x) { return bits[index(z, y, x)]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

  bool operator==(const BinaryMask3D&) const = default;
};

struct Rect {
  int y0 = 0, x0 = 0, h = 0, w = 0;
  bool operator==(const Rect&) const = default;
};

inline constexpr int kLungHuCutoff = -400;

inline BinaryMask3D threshold_mask(const HuVolume& vol, int hu_cutoff = kLungHuCutoff) {
  BinaryMask3D m(vol.dims());
  const auto v = vol.voxels();
  for (std::size_t i = 0; i < v.size(); ++i) m.bits[i] = v[i] < hu_cutoff ? 1 : 0;
  return m;
}

enum class MorphOp { erode, dilate, open, close };

namespace detail {

// 1D running min/max along one axis with a window of 2r+1. Voxels outside
// the volume count as 0 for both erosion and dilation.
inline void morph_axis(BinaryMask3D& m, int axis, int r, bool dilate) {
  const Dims3 d = m.dims;
  const int len = axis == 0 ? d.nz : axis == 1 ? d.ny : d.nx;
  const std::size_t stride = axis == 0 ? d.plane() : axis == 1 ? static_cast<std::size_t>(d.nx) : 1;
  const int outer_a = axis == 0 ? d.ny : d.nz;
  const int outer_b = axis == 2 ? d.ny : d.nx;
  std::vector<std::uint8_t> line(static_cast<std::size_t>(len));
  std::vector<int> prefix(static_cast<std::size_t>(len) + 1);
  for (int a = 0; a < outer_a; ++a) {
    for (int b = 0; b < outer_b; ++b) {
      std::size_t base;
      if (axis == 0) base = static_cast<std::size_t>(a) * d.nx + b;
      else if (axis == 1) base = static_cast<std::size_t>(a) * d.plane() + b;
      else base = static_cast<std::size_t>(a) * d.plane() + static_cast<std::size_t>(b) * d.nx;
      prefix[0] = 0;
      for (int i = 0; i < len; ++i) {
        line[i] = m.bits[base + i * stride];
        prefix[i + 1] = prefix[i] + line[i];
      }
      for (int i = 0; i < len; ++i) {
        const int lo = std::max(0, i - r), hi = std::min(len - 1, i + r);
        const int ones = prefix[hi + 1] - prefix[lo];
        std::uint8_t out;
        if (dilate) out = ones > 0 ? 1 : 0;
        else out = (ones == 2 * r + 1) ? 1 : 0;  // window clipped by the border => 0
        m.bits[base + i * stride] = out;
      }
    }
  }
}

inline BinaryMask3D box_filter(BinaryMask3D m, int r, bool dilate) {
  for (int axis = 0; axis < 3; ++axis) morph_axis(m, axis, r, dilate);
  return m;
}

}  // namespace detail

// Binary morphology with a cubic box element of side 2*radius+1.
// open = erode then dilate; close = dilate then erode.
inline BinaryMask3D morph(const BinaryMask3D& mask, MorphOp op, int radius) {
  if (radius < 1) throw std::invalid_argument("morph radius must be >= 1");
  switch (op) {
    case MorphOp::erode: return detail::box_filter(mask, radius, false);
    case MorphOp::dilate: return detail::box_filter(mask, radius, true);
    case MorphOp::open: return detail::box_filter(detail::box_filter(mask, radius, false), radius, true);
    case MorphOp::close: return detail::box_filter(detail::box_filter(mask, radius, true), radius, false);
  }
  throw std::invalid_argument("unknown morphology op");
}

struct ComponentInfo {
  std::size_t size = 0;
  bool touches_xy_border = false;
};

struct Components {
  std::vector<std::int32_t> labels;  // 0 = background, k = component k (1-based)
  std::vector<ComponentInfo> info;   // info[k-1] describes label k
};

// 26-connected component labeling by iterative flood fill.
inline Components label_components(const BinaryMask3D& mask) {
  const Dims3 d = mask.dims;
  Components out;
  out.labels.assign(d.count(), 0);
  std::vector<std::size_t> stack;
  std::int32_t next = 0;
  for (std::size_t seed = 0; seed < d.count(); ++seed) {
    if (!mask.bits[seed] || out.labels[seed]) continue;
    ++next;
    ComponentInfo ci;
    out.labels[seed] = next;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++ci.size;
      const int z = static_cast<int>(cur / d.plane());
      const int y = static_cast<int>((cur / d.nx) % d.ny);
      const int x = static_cast<int>(cur % d.nx);
      if (y == 0 || x == 0 || y == d.ny - 1 || x == d.nx - 1) ci.touches_xy_border = true;
      for (int dz = -1; dz <= 1; ++dz) {
        const int zz = z + dz;
        if (zz < 0 || zz >= d.nz) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= d.ny) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= d.nx) continue;
            const std::size_t n = mask.index(zz, yy, xx);
            if (mask.bits[n] && !out.labels[n]) {
              out.labels[n] = next;
              stack.push_back(n);
            }
          }
        }
      }
    }
    out.info.push_back(ci);
  }
  return out;
}

struct LungSegmentation {
  BinaryMask3D mask;
  int components_kept = 0;
  bool degenerate = false;  // no interior low-density component was found
};

// threshold(-400) -> drop components touching the x/y border (exterior air)
// -> keep the two largest 26-connected components -> close(1) -> open(1).
inline LungSegmentation segment_lungs(const HuVolume& vol) {
  const BinaryMask3D thr = threshold_mask(vol, kLungHuCutoff);
  const Components comps = label_components(thr);

  std::vector<std::int32_t> candidates;
  for (std::size_t k = 0; k < comps.info.size(); ++k)
    if (!comps.info[k].touches_xy_border) candidates.push_back(static_cast<std::int32_t>(k + 1));
  // Largest first; equal sizes keep the earlier label.
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::int32_t a, std::int32_t b) {
    return comps.info[a - 1].size > comps.info[b - 1].size;
  });
  if (candidates.size() > 2) candidates.resize(2);

  LungSegmentation out;
  out.components_kept = static_cast<int>(candidates.size());
  if (candidates.empty()) {
    out.mask = BinaryMask3D(vol.dims());
    out.degenerate = true;
    return out;
  }
  BinaryMask3D kept(vol.dims());
  for (std::size_t i = 0; i < kept.bits.size(); ++i) {
    const auto l = comps.labels[i];
    kept.bits[i] = (l != 0 && std::find(candidates.begin(), candidates.end(), l) != candidates.end()) ? 1 : 0;
  }
  out.mask = morph(morph(kept, MorphOp::close, 1), MorphOp::open, 1);
  return out;
}

inline void check_rect(const Dims3& d, int z, const Rect& r) {
  if (z < 0 || z >= d.nz || r.h < 1 || r.w < 1 || r.y0 < 0 || r.x0 < 0 || r.y0 + r.h > d.ny ||
      r.x0 + r.w > d.nx)
    throw std::out_of_range("rect (" + std::to_string(r.y0) + "," + std::to_string(r.x0) + "," +
                            std::to_string(r.h) + "," + std::to_string(r.w) + ") at z=" + std::to_string(z) +
                            " is outside the slice");
}

inline double lung_fraction(const BinaryMask3D& mask, int z, const Rect& rect) {
  check_rect(mask.dims, z, rect);
  std::size_t set = 0;
  for (int y = rect.y0; y < rect.y0 + rect.h; ++y)
    for (int x = rect.x0; x < rect.x0 + rect.w; ++x) set += mask.at(z, y, x);
  return static_cast<double>(set) / (static_cast<double>(rect.h) * rect.w);
}

inline double dice(const BinaryMask3D& a, const BinaryMask3D& b) {
  if (a.dims != b.dims) throw std::invalid_argument("dice: mask dims differ");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] & b.bits[i];
    na += a.bits[i];
    nb += b.bits[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline void save_mask(const BinaryMask3D& mask, const std::filesystem::path& path, Spacing spacing = {}) {
  write_container(path, ContainerHeader{mask.dims, spacing, VoxelType::u8, 1, std::nullopt}, mask.bits);
}

inline BinaryMask3D load_mask(const std::filesystem::path& path) {
  auto c = read_container(path);
  if (c.header.dtype != VoxelType::u8)
    throw VolumeError(VolumeErrc::malformed_header, path.string() + ": expected dtype=u8");
  for (auto b : c.payload)
    if (b > 1) throw VolumeError(VolumeErrc::out_of_range_voxel, path.string() + ": mask values must be 0/1");
  BinaryMask3D m;
  m.dims = c.header.dims;
  m.bits = std::move(c.payload);
  return m;
}

}  // namespace mzs
