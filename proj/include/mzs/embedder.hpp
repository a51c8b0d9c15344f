#pragma once

// Image/text encoder interface, the deterministic reference embedder, and a
// content-addressed embedding cache.
//
// Reference embedder recipe (normative; reproducible in any language):
//
//   image features (70): [1, mean, std, mean|dx|, mean|dy|, frac(p > 0.5),
//                         8x8 block means (row-major)]
//     dx/dy are forward differences; block (by, bx) spans rows
//     [by*h/8, (by+1)*h/8) and cols [bx*w/8, (bx+1)*w/8) (integer division).
//   text features (258): 256 hashed token counts, negation count, 1
//     tokens = maximal runs of ASCII alphanumerics or bytes >= 0x80,
//     ASCII-lowercased; bucket = FNV-1a-64(token) mod 256; the negation
//     count tallies tokens in {no, not, without, negative}.
//   projection: dim x n_features matrix, entry (r, c) = 2u - 1 with u drawn
//     row-major from SplitMix64(derive_seed(seed, 1)) for images and
//     derive_seed(seed, 2) for text.
//   shared prior: a unit direction c (entries 2u - 1 from derive_seed(seed, 3),
//     then normalized) that both encoders write to, standing in for the
//     image-text alignment a pretrained model brings:
//       image += sqrt(dim / 3) * T * c,  T = share of pixels in the density
//                                            band [-700, -200] HU (windowed)
//       text  += sqrt(dim / 3) * s * c,  s = 0 without ILD-lexicon tokens,
//                                            else -1 if any negation token,
//                                            else +1
//     sqrt(dim / 3) is the expected norm of a projected unit feature, so the
//     prior carries the weight of one ordinary feature.
//   Output = L2-normalized sum. Default seed 0x43313150 (ASCII "C11P").

#include <algorithm>
#include <array>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "mzs/detail/hash.hpp"
#include "mzs/detail/rng.hpp"

namespace mzs {

// Row-major grayscale image with intensities in [0, 1].
struct Image2D {
  int height = 0, width = 0;
  std::vector<float> pixels;

  Image2D() = default;
  Image2D(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Image2D&) const = default;
};

// Lung display window shared by every backend.
inline constexpr double kWindowLowHu = -1024.0;
inline constexpr double kWindowHighHu = 200.0;

inline float hu_to_unit(double hu) {
  const double v = (hu - kWindowLowHu) / (kWindowHighHu - kWindowLowHu);
  return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

// Bilinear resize with half-pixel centers and edge clamping. Same-size
// input is returned unchanged.
inline Image2D resize_bilinear(const Image2D& in, int out_h, int out_w) {
  if (in.height == out_h && in.width == out_w) return in;
  if (in.height < 1 || in.width < 1 || out_h < 1 || out_w < 1)
    throw std::invalid_argument("resize_bilinear: empty image");
  Image2D out(out_h, out_w);
  const double sy = static_cast<double>(in.height) / out_h;
  const double sx = static_cast<double>(in.width) / out_w;
  std::vector<int> x0(out_w), x1(out_w);
  std::vector<double> fx(out_w);
  for (int x = 0; x < out_w; ++x) {
    const double src = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.width - 1));
    x0[x] = static_cast<int>(std::floor(src));
    x1[x] = std::min(x0[x] + 1, in.width - 1);
    fx[x] = src - x0[x];
  }
  for (int y = 0; y < out_h; ++y) {
    const double src = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.height - 1));
    const int y0 = static_cast<int>(std::floor(src));
    const int y1 = std::min(y0 + 1, in.height - 1);
    const double fy = src - y0;
    for (int x = 0; x < out_w; ++x) {
      const double top = in.at(y0, x0[x]) * (1.0 - fx[x]) + in.at(y0, x1[x]) * fx[x];
      const double bot = in.at(y1, x0[x]) * (1.0 - fx[x]) + in.at(y1, x1[x]) * fx[x];
      out.at(y, x) = static_cast<float>(top * (1.0 - fy) + bot * fy);
    }
  }
  return out;
}

struct Embedding {
  std::vector<float> values;

  std::size_t dim() const { return values.size(); }
  bool operator==(const Embedding&) const = default;
};

class EmbedderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BackendInfo {
  std::string name;
  int dim = 512;
  int resolution = 128;  // square input side in pixels
  bool image = true;
  bool text = true;
  bool concurrent = true;  // false => callers must serialize embed calls
};

namespace detail {

inline Embedding finish_embedding(std::vector<float> v, const BackendInfo& info, const char* kind) {
  if (static_cast<int>(v.size()) != info.dim)
    throw EmbedderError(info.name + ": " + kind + " output has dim " + std::to_string(v.size()) + ", expected " +
                        std::to_string(info.dim));
  double norm2 = 0.0;
  for (float x : v) {
    if (!std::isfinite(x)) throw EmbedderError(info.name + ": non-finite " + kind + " embedding");
    norm2 += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(norm2);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw EmbedderError(info.name + ": zero-norm " + kind + " embedding");
  for (float& x : v) x = static_cast<float>(x / norm);
  return Embedding{std::move(v)};
}

inline bool blank(std::string_view s) {
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) return false;
  return true;
}

}  // namespace detail

// Backends return raw (unnormalized) vectors from raw_*; the *_embedding
// hooks normalize and are overridden by decorators (cache, projection
// heads). Every backend must be deterministic.
class EmbedderBackend {
 public:
  virtual ~EmbedderBackend() = default;
  virtual const BackendInfo& info() const = 0;
  virtual std::vector<float> raw_image(const Image2D& image) const = 0;
  virtual std::vector<float> raw_text(std::string_view text) const = 0;

  virtual Embedding image_embedding(const Image2D& image) const {
    return detail::finish_embedding(raw_image(image), info(), "image");
  }
  virtual Embedding text_embedding(std::string_view text) const {
    return detail::finish_embedding(raw_text(text), info(), "text");
  }
};

// The caller resizes to info().resolution; intensities must already be in [0, 1].
inline Embedding embed_image(const EmbedderBackend& backend, const Image2D& image) {
  const auto& info = backend.info();
  if (!info.image) throw EmbedderError(info.name + ": backend has no image encoder");
  return backend.image_embedding(image);
}

inline Embedding embed_text(const EmbedderBackend& backend, std::string_view text) {
  const auto& info = backend.info();
  if (!info.text) throw EmbedderError(info.name + ": backend has no text encoder");
  if (detail::blank(text)) throw std::invalid_argument("embed_text: empty text");
  return backend.text_embedding(text);
}

// Resize to the backend resolution, then embed.
inline Embedding embed_image_resized(const EmbedderBackend& backend, const Image2D& image) {
  const int r = backend.info().resolution;
  return embed_image(backend, resize_bilinear(image, r, r));
}

inline double cosine(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim())
    throw std::invalid_argument("cosine: dimension mismatch " + std::to_string(a.dim()) + " vs " +
                                std::to_string(b.dim()));
  double dot = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) dot += static_cast<double>(a.values[i]) * b.values[i];
  return std::clamp(dot, -1.0, 1.0);
}

// ---- reference embedder ---------------------------------------------------

inline constexpr std::uint64_t kReferenceSeed = 0x43313150ULL;
inline constexpr int kImageFeatureCount = 70;
inline constexpr int kTextBuckets = 256;
inline constexpr int kTextFeatureCount = kTextBuckets + 2;

inline std::vector<double> reference_image_features(const Image2D& img) {
  if (img.height < 8 || img.width < 8) throw std::invalid_argument("reference embedder needs images >= 8x8");
  const int h = img.height, w = img.width;
  const double n = static_cast<double>(h) * w;
  double sum = 0.0, bright = 0.0;
  for (float p : img.pixels) {
    sum += p;
    if (p > 0.5f) bright += 1.0;
  }
  const double mean = sum / n;
  double var = 0.0;
  for (float p : img.pixels) var += (p - mean) * (p - mean);
  double gx = 0.0, gy = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x) gx += std::fabs(static_cast<double>(img.at(y, x + 1)) - img.at(y, x));
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x) gy += std::fabs(static_cast<double>(img.at(y + 1, x)) - img.at(y, x));

  std::vector<double> f;
  f.reserve(kImageFeatureCount);
  f.push_back(1.0);
  f.push_back(mean);
  f.push_back(std::sqrt(var / n));
  f.push_back(gx / (static_cast<double>(h) * (w - 1)));
  f.push_back(gy / (static_cast<double>(h - 1) * w));
  f.push_back(bright / n);
  for (int by = 0; by < 8; ++by) {
    for (int bx = 0; bx < 8; ++bx) {
      const int y0 = by * h / 8, y1 = (by + 1) * h / 8;
      const int x0 = bx * w / 8, x1 = (bx + 1) * w / 8;
      double s = 0.0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) s += img.at(y, x);
      f.push_back(s / (static_cast<double>(y1 - y0) * (x1 - x0)));
    }
  }
  return f;
}

inline constexpr double kBandLowHu = -700.0;
inline constexpr double kBandHighHu = -200.0;

// Share of pixels whose windowed intensity falls in the reticular /
// ground-glass density band [-700, -200] HU.
inline double reference_density_score(const Image2D& img) {
  const double lo = (kBandLowHu - kWindowLowHu) / (kWindowHighHu - kWindowLowHu);
  const double hi = (kBandHighHu - kWindowLowHu) / (kWindowHighHu - kWindowLowHu);
  std::size_t in = 0;
  for (float p : img.pixels) in += (p >= lo && p <= hi) ? 1 : 0;
  return img.pixels.empty() ? 0.0 : static_cast<double>(in) / static_cast<double>(img.pixels.size());
}

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

inline bool is_negation_token(std::string_view t) {
  return t == "no" || t == "not" || t == "without" || t == "negative";
}

inline std::vector<double> reference_text_features(std::string_view text) {
  std::vector<double> f(kTextFeatureCount, 0.0);
  for (const auto& tok : tokenize(text)) {
    f[detail::fnv1a64(tok) % kTextBuckets] += 1.0;
    if (is_negation_token(tok)) f[kTextBuckets] += 1.0;
  }
  f[kTextBuckets + 1] = 1.0;
  return f;
}

inline constexpr std::array<std::string_view, 12> kIldLexicon = {
    "interstitial", "fibrosis",  "fibrotic", "reticulation", "reticular", "honeycombing",
    "ild",          "ipf",       "uip",      "pneumonitis",  "sclerosis", "bronchiectasis",
};

inline double reference_text_concept(std::string_view text) {
  bool hit = false, negated = false;
  for (const auto& tok : tokenize(text)) {
    hit = hit || std::find(kIldLexicon.begin(), kIldLexicon.end(), tok) != kIldLexicon.end();
    negated = negated || is_negation_token(tok);
  }
  return hit ? (negated ? -1.0 : 1.0) : 0.0;
}

// Row-major dim x cols projection, entries uniform in [-1, 1).
inline std::vector<double> reference_projection(std::uint64_t seed, int dim, int cols) {
  detail::SplitMix64 rng(seed);
  std::vector<double> p(static_cast<std::size_t>(dim) * cols);
  for (auto& v : p) v = 2.0 * rng.uniform() - 1.0;
  return p;
}

class ReferenceEmbedder final : public EmbedderBackend {
 public:
  // prior_weight scales the shared image-text direction (0 disables it).
  explicit ReferenceEmbedder(int dim = 512, std::uint64_t seed = kReferenceSeed, int resolution = 128,
                             double prior_weight = 1.0)
      : info_{"reference", dim, resolution, true, true, true},
        image_proj_(reference_projection(detail::derive_seed(seed, 1), dim, kImageFeatureCount)),
        text_proj_(reference_projection(detail::derive_seed(seed, 2), dim, kTextFeatureCount)),
        prior_(reference_projection(detail::derive_seed(seed, 3), dim, 1)),
        prior_scale_(prior_weight * std::sqrt(dim / 3.0)) {
    if (dim < 1) throw std::invalid_argument("embedding dim must be >= 1");
    if (!std::isfinite(prior_weight) || prior_weight < 0.0) throw std::invalid_argument("prior weight must be >= 0");
    double norm = 0.0;
    for (double v : prior_) norm += v * v;
    for (double& v : prior_) v /= std::sqrt(norm);
    if (seed != kReferenceSeed) info_.name += "-" + detail::hex32(static_cast<std::uint32_t>(seed));
    if (dim != 512) info_.name += "-d" + std::to_string(dim);
    if (prior_weight != 1.0) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "-p%g", prior_weight);
      info_.name += buf;
    }
  }

  const BackendInfo& info() const override { return info_; }

  std::vector<float> raw_image(const Image2D& image) const override {
    return project(image_proj_, reference_image_features(image), reference_density_score(image));
  }
  std::vector<float> raw_text(std::string_view text) const override {
    return project(text_proj_, reference_text_features(text), reference_text_concept(text));
  }

 private:
  std::vector<float> project(const std::vector<double>& proj, const std::vector<double>& f, double prior_coord) const {
    const std::size_t cols = f.size();
    std::vector<float> out(static_cast<std::size_t>(info_.dim));
    for (int r = 0; r < info_.dim; ++r) {
      double acc = prior_scale_ * prior_coord * prior_[r];
      const double* row = proj.data() + static_cast<std::size_t>(r) * cols;
      for (std::size_t c = 0; c < cols; ++c) acc += row[c] * f[c];
      out[r] = static_cast<float>(acc);
    }
    return out;
  }

  BackendInfo info_;
  std::vector<double> image_proj_;
  std::vector<double> text_proj_;
  std::vector<double> prior_;
  double prior_scale_;
};

// ---- cache ----------------------------------------------------------------

inline std::string image_digest(const std::string& backend, const Image2D& img) {
  detail::Sha256 h;
  h.update(backend).update("\0image\0", 7).update_pod(img.height).update_pod(img.width);
  h.update(img.pixels.data(), img.pixels.size() * sizeof(float));
  return h.hex();
}

inline std::string text_digest(const std::string& backend, std::string_view text) {
  detail::Sha256 h;
  h.update(backend).update("\0text\0", 6).update(text);
  return h.hex();
}

// Content-addressed store: key = SHA-256 over (backend name, kind, content).
// Optionally persisted as <dir>/<digest>.emb = u32 dim + float32 values, LE.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  explicit EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(*dir_);
  }

  template <class Compute>
  Embedding get_or_compute(const std::string& digest, Compute&& compute) {
    if (auto hit = lookup(digest)) return *hit;
    Embedding e = compute();
    store(digest, e);
    return e;
  }

  std::optional<Embedding> lookup(const std::string& digest) {
    {
      std::lock_guard lock(mu_);
      if (auto it = mem_.find(digest); it != mem_.end()) {
        ++hits_;
        return it->second;
      }
    }
    if (!dir_) return std::nullopt;
    auto e = read_file(*dir_ / (digest + ".emb"));
    if (e) {
      std::lock_guard lock(mu_);
      ++hits_;
      mem_.emplace(digest, *e);
    }
    return e;
  }

  // Last writer wins; concurrent writers of one digest write identical bytes.
  void store(const std::string& digest, const Embedding& e) {
    {
      std::lock_guard lock(mu_);
      ++misses_;
      mem_[digest] = e;
    }
    if (dir_) write_file(*dir_ / (digest + ".emb"), e);
  }

  std::size_t hits() const {
    std::lock_guard lock(mu_);
    return hits_;
  }
  std::size_t misses() const {
    std::lock_guard lock(mu_);
    return misses_;
  }

  static void write_file(const std::filesystem::path& path, const Embedding& e) {
    // Write to a temp name then rename so readers never see partial files.
    auto tmp = path;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw EmbedderError("cache: cannot write " + tmp.string());
      const auto dim = static_cast<std::uint32_t>(e.dim());
      out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
      out.write(reinterpret_cast<const char*>(e.values.data()),
                static_cast<std::streamsize>(e.values.size() * sizeof(float)));
    }
    std::filesystem::rename(tmp, path);
  }

  static std::optional<Embedding> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::uint32_t dim = 0;
    if (!in.read(reinterpret_cast<char*>(&dim), sizeof dim)) return std::nullopt;
    Embedding e;
    e.values.resize(dim);
    if (!in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(dim * sizeof(float))))
      return std::nullopt;
    return e;
  }

 private:
  std::optional<std::filesystem::path> dir_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, Embedding> mem_;
  std::size_t hits_ = 0, misses_ = 0;
};

// Memoizes the normalized embeddings of an inner backend.
class CachedEmbedder final : public EmbedderBackend {
 public:
  CachedEmbedder(std::shared_ptr<const EmbedderBackend> inner, std::shared_ptr<EmbeddingCache> cache)
      : inner_(std::move(inner)), cache_(std::move(cache)) {}

  const BackendInfo& info() const override { return inner_->info(); }
  std::vector<float> raw_image(const Image2D& img) const override { return inner_->raw_image(img); }
  std::vector<float> raw_text(std::string_view t) const override { return inner_->raw_text(t); }

  Embedding image_embedding(const Image2D& img) const override {
    return cache_->get_or_compute(image_digest(info().name, img), [&] { return inner_->image_embedding(img); });
  }
  Embedding text_embedding(std::string_view t) const override {
    return cache_->get_or_compute(text_digest(info().name, t), [&] { return inner_->text_embedding(t); });
  }

  EmbeddingCache& cache() const { return *cache_; }

 private:
  std::shared_ptr<const EmbedderBackend> inner_;
  std::shared_ptr<EmbeddingCache> cache_;
};

}  // namespace mzs
