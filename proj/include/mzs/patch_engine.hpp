#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzs/detail/parallel.hpp"
#include "mzs/detail/rng.hpp"
#include "mzs/embedder.hpp"
#include "mzs/lung_seg.hpp"
#include "mzs/prompt.hpp"

namespace mzs {

struct PatchCandidate {
  std::string study_id;
  int z = 0;
  Rect rect;
  double lung_fraction = 0.0;

  bool operator==(const PatchCandidate&) const = default;
};

struct ScoredPatch {
  PatchCandidate candidate;
  double p_pos = 0.0;
};

// N x N grid; cell (r, c) holds patches[r * N + c].
struct Montage {
  int grid = 0;
  int cell_px = 0;
  Image2D image;
  std::vector<PatchCandidate> patches;
  std::vector<double> scores;  // parallel to patches for retrieved montages, else empty
};

class InsufficientCandidates : public std::runtime_error {
 public:
  InsufficientCandidates(std::size_t requested, std::size_t available)
      : std::runtime_error("requested " + std::to_string(requested) + " patches but only " +
                           std::to_string(available) + " candidates (short by " +
                           std::to_string(requested - available) + ")"),
        requested_(requested),
        available_(available) {}
  std::size_t shortfall() const { return requested_ - available_; }

 private:
  std::size_t requested_, available_;
};

class PatchScoringError : public std::runtime_error {
 public:
  PatchScoringError(const PatchCandidate& c, const std::string& cause)
      : std::runtime_error("scoring patch study=" + c.study_id + " z=" + std::to_string(c.z) + " rect=(" +
                           std::to_string(c.rect.y0) + "," + std::to_string(c.rect.x0) + "," +
                           std::to_string(c.rect.h) + "," + std::to_string(c.rect.w) + "): " + cause),
        candidate_(c) {}
  const PatchCandidate& candidate() const { return candidate_; }

 private:
  PatchCandidate candidate_;
};

// Slides a P x P window with stride s over every axial slice and keeps
// windows whose lung fraction is >= f. Order is (z, y0, x0).
inline std::vector<PatchCandidate> enumerate_candidates(const HuVolume& vol, const BinaryMask3D& mask, int patch_px,
                                                        int stride, double filter_threshold,
                                                        const std::string& study_id = {}) {
  if (patch_px < 8) throw std::invalid_argument("patch size must be >= 8");
  if (stride < 1 || stride > patch_px) throw std::invalid_argument("stride must be in [1, patch size]");
  if (!(filter_threshold >= 0.0 && filter_threshold <= 1.0))
    throw std::invalid_argument("filter threshold must be in [0, 1]");
  if (mask.dims != vol.dims()) throw std::invalid_argument("mask dims differ from volume dims");
  const Dims3 d = vol.dims();
  std::vector<PatchCandidate> out;
  if (patch_px > d.ny || patch_px > d.nx) return out;

  const double area = static_cast<double>(patch_px) * patch_px;
  const std::size_t iw = static_cast<std::size_t>(d.nx) + 1;
  std::vector<std::uint32_t> integral((static_cast<std::size_t>(d.ny) + 1) * iw);
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      std::uint32_t row = 0;
      for (int x = 0; x < d.nx; ++x) {
        row += mask.at(z, y, x);
        integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
      }
    }
    for (int y0 = 0; y0 + patch_px <= d.ny; y0 += stride) {
      for (int x0 = 0; x0 + patch_px <= d.nx; x0 += stride) {
        const std::size_t y1 = static_cast<std::size_t>(y0) + patch_px, x1 = static_cast<std::size_t>(x0) + patch_px;
        const std::uint32_t set = integral[y1 * iw + x1] - integral[y0 * iw + x1] - integral[y1 * iw + x0] +
                                  integral[static_cast<std::size_t>(y0) * iw + x0];
        const double frac = static_cast<double>(set) / area;
        if (frac >= filter_threshold) out.push_back({study_id, z, Rect{y0, x0, patch_px, patch_px}, frac});
      }
    }
  }
  return out;
}

// Uniform sample without replacement (partial Fisher-Yates), in draw order.
inline std::vector<PatchCandidate> select_random(const std::vector<PatchCandidate>& cands, std::size_t k,
                                                 std::uint64_t seed) {
  if (k > cands.size()) throw InsufficientCandidates(k, cands.size());
  std::vector<std::size_t> idx(cands.size());
  std::iota(idx.begin(), idx.end(), 0);
  detail::SplitMix64 rng(seed);
  std::vector<PatchCandidate> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(idx.size() - i);
    std::swap(idx[i], idx[j]);
    out.push_back(cands[idx[i]]);
  }
  return out;
}

// Window pixels mapped through the shared HU display window.
inline Image2D extract_patch(const HuVolume& vol, const PatchCandidate& c) {
  check_rect(vol.dims(), c.z, c.rect);
  Image2D img(c.rect.h, c.rect.w);
  for (int y = 0; y < c.rect.h; ++y)
    for (int x = 0; x < c.rect.w; ++x) img.at(y, x) = hu_to_unit(vol.at(c.z, c.rect.y0 + y, c.rect.x0 + x));
  return img;
}

struct PromptEmbeddings {
  Embedding positive, negative;
};

inline PromptEmbeddings embed_prompts(const EmbedderBackend& backend, const PromptPair& prompts) {
  return {embed_text(backend, prompts.positive), embed_text(backend, prompts.negative)};
}

inline double prompt_probability(const Embedding& image, const PromptEmbeddings& prompts, double logit_scale) {
  return pn_softmax(logit_scale * cosine(image, prompts.positive), logit_scale * cosine(image, prompts.negative));
}

// p_pos of every candidate against the prompt pair; input order preserved.
inline std::vector<ScoredPatch> score_patches(const EmbedderBackend& backend, const HuVolume& vol,
                                              const std::vector<PatchCandidate>& cands, const PromptPair& prompts,
                                              double logit_scale = kDefaultLogitScale, std::size_t workers = 1) {
  const PromptEmbeddings pe = embed_prompts(backend, prompts);
  std::vector<ScoredPatch> out(cands.size());
  if (!backend.info().concurrent) workers = 1;
  detail::parallel_for(cands.size(), workers, [&](std::size_t i) {
    try {
      const Embedding e = embed_image_resized(backend, extract_patch(vol, cands[i]));
      out[i] = ScoredPatch{cands[i], prompt_probability(e, pe, logit_scale)};
    } catch (const PatchScoringError&) {
      throw;
    } catch (const std::exception& ex) {
      throw PatchScoringError(cands[i], ex.what());
    }
  });
  return out;
}

// Highest p_pos first; ties by (z, y0, x0) ascending.
inline bool score_order(const ScoredPatch& a, const ScoredPatch& b) {
  if (a.p_pos != b.p_pos) return a.p_pos > b.p_pos;
  if (a.candidate.z != b.candidate.z) return a.candidate.z < b.candidate.z;
  if (a.candidate.rect.y0 != b.candidate.rect.y0) return a.candidate.rect.y0 < b.candidate.rect.y0;
  return a.candidate.rect.x0 < b.candidate.rect.x0;
}

inline std::vector<ScoredPatch> select_top(std::vector<ScoredPatch> scored, std::size_t k) {
  if (k > scored.size()) throw InsufficientCandidates(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), score_order);
  scored.resize(k);
  return scored;
}

// Each patch is resized to cell_px x cell_px and placed row-major.
inline Montage assemble_montage(const HuVolume& vol, const std::vector<PatchCandidate>& patches, int grid,
                                int cell_px) {
  if (grid < 1 || cell_px < 1) throw std::invalid_argument("montage grid and cell size must be >= 1");
  const std::size_t k = static_cast<std::size_t>(grid) * grid;
  if (patches.size() != k)
    throw std::invalid_argument("montage of " + std::to_string(grid) + "x" + std::to_string(grid) + " needs " +
                                std::to_string(k) + " patches, got " + std::to_string(patches.size()));
  Montage m;
  m.grid = grid;
  m.cell_px = cell_px;
  m.image = Image2D(grid * cell_px, grid * cell_px);
  m.patches = patches;
  for (std::size_t i = 0; i < k; ++i) {
    const Image2D cell = resize_bilinear(extract_patch(vol, patches[i]), cell_px, cell_px);
    const int r = static_cast<int>(i) / grid, c = static_cast<int>(i) % grid;
    for (int y = 0; y < cell_px; ++y)
      for (int x = 0; x < cell_px; ++x)
        m.image.at(r * cell_px + y, c * cell_px + x) = std::clamp(cell.at(y, x), 0.0f, 1.0f);
  }
  return m;
}

inline Montage assemble_montage(const HuVolume& vol, const std::vector<ScoredPatch>& scored, int grid, int cell_px) {
  std::vector<PatchCandidate> patches;
  patches.reserve(scored.size());
  for (const auto& s : scored) patches.push_back(s.candidate);
  Montage m = assemble_montage(vol, patches, grid, cell_px);
  for (const auto& s : scored) m.scores.push_back(s.p_pos);
  return m;
}

}  // namespace mzs
