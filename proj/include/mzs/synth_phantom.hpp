#pragma once

// Synthetic chest-CT-like phantoms with known lung masks, optional
// subpleural reticulation ("ILD"), and templated radiology reports.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzs/detail/hash.hpp"
#include "mzs/detail/parallel.hpp"
#include "mzs/detail/rng.hpp"
#include "mzs/lung_seg.hpp"
#include "mzs/volume_io.hpp"

namespace mzs {

struct PhantomSpec {
  std::uint64_t seed = 0;
  Dims3 dims{96, 128, 128};
  bool ild = false;
  double amplitude_hu = 250.0;  // checkerboard half-swing around -400 HU
  double noise_hu = 20.0;
  double lung_hu = -850.0;
  double body_hu = 40.0;
  double background_hu = -1000.0;
  // Lung ellipsoid semi-axes as fractions of (nz, ny, nx); jittered +-5%.
  double lung_semi_z = 0.38, lung_semi_y = 0.30, lung_semi_x = 0.15;
  double lung_offset_x = 0.20;  // lung centers at nx/2 -+ offset * nx
  bool single_lung = false;
  double ild_fraction_min = 0.20, ild_fraction_max = 0.30;  // shell share of lung volume

  void validate() const {
    if (dims.ny < 64 || dims.nx < 64 || dims.nz < 8) throw std::invalid_argument("phantom dims must be >= 64 in-plane, >= 8 slices");
    if (ild && !(amplitude_hu > 0.0)) throw std::invalid_argument("phantom texture amplitude must be > 0");
    if (!(noise_hu >= 0.0)) throw std::invalid_argument("phantom noise must be >= 0");
    if (!(ild_fraction_min > 0.0 && ild_fraction_min <= ild_fraction_max && ild_fraction_max < 1.0))
      throw std::invalid_argument("phantom ILD fraction range must satisfy 0 < min <= max < 1");
    for (double f : {lung_semi_z, lung_semi_y, lung_semi_x})
      if (!(f > 0.0 && f < 0.5)) throw std::invalid_argument("lung semi-axes must be in (0, 0.5) of the extent");
  }
};

struct Phantom {
  HuVolume volume;
  BinaryMask3D truth;  // exact ellipsoid membership
  int label = 0;
  double ild_fraction = 0.0;  // measured share of lung voxels carrying texture
  std::uint32_t checksum = 0;
};

namespace detail {

struct Ellipsoid {
  double cz, cy, cx, az, ay, ax;
  // Normalized radius; <= 1 inside.
  double rho(int z, int y, int x) const {
    const double dz = (z - cz) / az, dy = (y - cy) / ay, dx = (x - cx) / ax;
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  }
};

inline std::int16_t to_hu(double v) {
  return static_cast<std::int16_t>(std::clamp<long>(std::lround(v), kMinHu, kMaxHu));
}

}  // namespace detail

inline Phantom generate_volume(const PhantomSpec& spec) {
  spec.validate();
  const Dims3 d = spec.dims;
  detail::SplitMix64 rng(detail::derive_seed(spec.seed, 0xF4A7));
  auto jitter = [&](double v) { return v * (1.0 + 0.05 * (2.0 * rng.uniform() - 1.0)); };

  const detail::Ellipsoid body{(d.nz - 1) / 2.0, (d.ny - 1) / 2.0, (d.nx - 1) / 2.0,
                               0.75 * d.nz, 0.42 * d.ny, 0.46 * d.nx};
  std::vector<detail::Ellipsoid> lungs;
  for (int side : {-1, 1}) {
    if (spec.single_lung && side == 1) break;
    lungs.push_back({(d.nz - 1) / 2.0 + 0.02 * d.nz * (2.0 * rng.uniform() - 1.0),
                     (d.ny - 1) / 2.0 + 0.02 * d.ny * (2.0 * rng.uniform() - 1.0),
                     (d.nx - 1) / 2.0 + side * spec.lung_offset_x * d.nx, jitter(spec.lung_semi_z * d.nz),
                     jitter(spec.lung_semi_y * d.ny), jitter(spec.lung_semi_x * d.nx)});
  }
  const double phi = spec.ild_fraction_min + (spec.ild_fraction_max - spec.ild_fraction_min) * rng.uniform();
  const double shell_rho = std::cbrt(1.0 - phi);

  std::vector<std::int16_t> vox(d.count());
  BinaryMask3D truth(d);
  std::size_t lung_voxels = 0, textured = 0;
  std::size_t i = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x, ++i) {
        double v = body.rho(z, y, x) <= 1.0 ? spec.body_hu : spec.background_hu;
        for (const auto& l : lungs) {
          const double r = l.rho(z, y, x);
          if (r > 1.0) continue;
          truth.bits[i] = 1;
          ++lung_voxels;
          v = spec.lung_hu;
          if (spec.ild && r >= shell_rho) {
            v = -400.0 + (((x + y + z) & 1) ? spec.amplitude_hu : -spec.amplitude_hu);
            ++textured;
          }
          break;
        }
        vox[i] = detail::to_hu(v + spec.noise_hu * rng.normal());
      }

  Phantom p{HuVolume(d, Spacing{}, std::move(vox)), std::move(truth), spec.ild ? 1 : 0,
            lung_voxels ? static_cast<double>(textured) / static_cast<double>(lung_voxels) : 0.0, 0};
  p.checksum = voxel_checksum(p.volume);
  return p;
}

// ---- reports --------------------------------------------------------------

inline constexpr std::array<const char*, 5> kPositiveParenchyma = {
    "Subpleural reticulation with traction bronchiectasis in both lower lobes.",
    "Peripheral reticular opacities with basal predominance and architectural distortion.",
    "Subpleural reticular abnormality with early honeycombing.",
    "Bilateral peripheral fibrotic changes with interlobular septal thickening.",
    "Diffuse subpleural reticulation and ground-glass opacity in keeping with fibrosis.",
};
inline constexpr std::array<const char*, 4> kPositiveImpression = {
    "Findings consistent with interstitial lung disease.",
    "Fibrotic interstitial lung disease with subpleural predominance.",
    "Interstitial lung disease, probable usual interstitial pneumonia pattern.",
    "Subpleural fibrosis compatible with interstitial lung disease.",
};
inline constexpr std::array<const char*, 4> kNegativeParenchyma = {
    "The lungs are clear. No evidence of interstitial lung disease.",
    "No consolidation or suspicious nodule. No evidence of interstitial lung disease.",
    "Normal lung parenchyma without reticulation. No evidence of interstitial lung disease.",
    "Mild dependent atelectasis only. No evidence of interstitial lung disease.",
};
inline constexpr std::array<const char*, 3> kNegativeImpression = {
    "No evidence of interstitial lung disease.",
    "No acute cardiopulmonary abnormality. No evidence of interstitial lung disease.",
    "Normal chest CT. No evidence of interstitial lung disease.",
};

inline std::string make_report(int label, std::uint64_t seed, bool with_impression = true) {
  detail::SplitMix64 rng(detail::derive_seed(seed, 0x8E90));
  auto pick = [&](const auto& bank) { return std::string(bank[rng.below(bank.size())]); };
  std::string r = "CT CHEST WITHOUT CONTRAST\n\n";
  r += "Indication:\nChronic cough and dyspnea.\n\n";
  r += "Technique:\nNon-contrast CT of the chest.\n\n";
  r += "Findings:\n";
  r += "Lung parenchyma:\n" + (label ? pick(kPositiveParenchyma) : pick(kNegativeParenchyma)) + "\n";
  r += "Airways:\nPatent central airways.\n";
  r += "Pleura:\nNo pleural effusion or pneumothorax.\n";
  r += "Heart:\nNormal heart size.\n";
  if (with_impression) r += "\nImpression:\n" + (label ? pick(kPositiveImpression) : pick(kNegativeImpression)) + "\n";
  return r;
}

// ---- study sets -------------------------------------------------------------

enum class Split { pretrain, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "pretrain") return Split::pretrain;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string study_id;
  std::filesystem::path volume, mask, report;  // absolute after read_manifest
  std::optional<int> label;
  Split split = Split::pretrain;
};

struct StudyManifest {
  std::vector<ManifestEntry> entries;
  const ManifestEntry* find(std::string_view id) const {
    for (const auto& e : entries)
      if (e.study_id == id) return &e;
    return nullptr;
  }
};

// Relative paths are resolved against the manifest's directory.
inline StudyManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) -> std::filesystem::path {
    if (p.empty()) return {};
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  StudyManifest m;
  std::set<std::string> ids;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.study_id = j.at("study_id").get<std::string>();
      e.volume = resolve(j.at("volume").get<std::string>());
      e.mask = resolve(j.value("mask", std::string{}));
      e.report = resolve(j.value("report", std::string{}));
      if (j.contains("label") && !j["label"].is_null()) {
        const int l = j["label"].get<int>();
        if (l != 0 && l != 1) throw std::invalid_argument("label must be 0 or 1");
        e.label = l;
      }
      e.split = parse_split(j.value("split", std::string("pretrain")));
      if (!ids.insert(e.study_id).second) throw std::invalid_argument("duplicate study id " + e.study_id);
      m.entries.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

struct StudySetOptions {
  PhantomSpec base;                 // seed and ild are set per study
  double missing_impression = 0.0;  // share of reports written without an impression
  std::size_t workers = 1;
};

// Stratified 80/10/10: positives and negatives are shuffled separately and
// interleaved, then the first max(1, round(n/10)) go to test, the next
// max(1, round(n/10)) to val, the rest to pretrain.
inline std::vector<Split> assign_splits(const std::vector<int>& labels, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  detail::SplitMix64 rng(detail::derive_seed(seed, 0x5B17));
  detail::shuffle(std::span(pos), rng);
  detail::shuffle(std::span(neg), rng);
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < std::max(pos.size(), neg.size()); ++k) {
    if (k < pos.size()) order.push_back(pos[k]);
    if (k < neg.size()) order.push_back(neg[k]);
  }
  const std::size_t n = labels.size();
  const auto tenth = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
  std::vector<Split> out(n, Split::pretrain);
  for (std::size_t k = 0; k < order.size(); ++k)
    out[order[k]] = k < tenth ? Split::test : (k < 2 * tenth ? Split::val : Split::pretrain);
  return out;
}

inline std::string study_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom-%04zu", index);
  return buf;
}

// Writes volumes/, masks/, reports/ and manifest.jsonl under dir. Studies
// [0, n_pos) are positive. Per-study seed = derive_seed(seed, index).
inline StudyManifest generate_study_set(const std::filesystem::path& dir, std::uint64_t seed, int n_pos, int n_neg,
                                        const StudySetOptions& opt = {}) {
  if (n_pos < 0 || n_neg < 0 || n_pos + n_neg < 4) throw std::invalid_argument("study set needs n_pos + n_neg >= 4");
  namespace fs = std::filesystem;
  fs::create_directories(dir / "volumes");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "reports");
  const std::size_t n = static_cast<std::size_t>(n_pos + n_neg);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i < static_cast<std::size_t>(n_pos) ? 1 : 0;
  const auto splits = assign_splits(labels, seed);

  StudyManifest m;
  m.entries.resize(n);
  std::vector<nlohmann::json> records(n);
  detail::parallel_for(n, opt.workers, [&](std::size_t i) {
    PhantomSpec spec = opt.base;
    spec.seed = detail::derive_seed(seed, i);
    spec.ild = labels[i] == 1;
    const Phantom p = generate_volume(spec);
    const std::string id = study_name(i);
    const fs::path vol = fs::path("volumes") / (id + ".hvol");
    const fs::path mask = fs::path("masks") / (id + ".hvol");
    const fs::path rep = fs::path("reports") / (id + ".txt");
    save_volume(p.volume, dir / vol);
    save_mask(p.truth, dir / mask);
    detail::SplitMix64 rr(detail::derive_seed(spec.seed, 0x12E9));
    const bool with_impression = rr.uniform() >= opt.missing_impression;
    {
      std::ofstream out(dir / rep, std::ios::binary | std::ios::trunc);
      out << make_report(p.label, spec.seed, with_impression);
      if (!out) throw std::runtime_error("cannot write report " + (dir / rep).string());
    }
    m.entries[i] = {id, dir / vol, dir / mask, dir / rep, p.label, splits[i]};
    records[i] = {{"study_id", id},
                  {"volume", vol.generic_string()},
                  {"mask", mask.generic_string()},
                  {"report", rep.generic_string()},
                  {"label", p.label},
                  {"split", to_string(splits[i])},
                  {"ild_fraction", p.ild_fraction},
                  {"checksum", detail::hex32(p.checksum)}};
  });
  std::ofstream out(dir / "manifest.jsonl", std::ios::binary | std::ios::trunc);
  for (const auto& r : records) out << r.dump() << "\n";
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  return m;
}

}  // namespace mzs
