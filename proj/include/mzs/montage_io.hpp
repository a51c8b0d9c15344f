#pragma once

#include <png.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzs/patch_engine.hpp"

namespace mzs {

inline std::vector<std::uint8_t> quantize_u8(const Image2D& img) {
  std::vector<std::uint8_t> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image2D& img) {
  auto bytes = quantize_u8(img);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw std::runtime_error("write_png " + path.string() + ": " + image.message);
}

inline Image2D read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw std::runtime_error("read_png " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("read_png " + path.string() + ": " + image.message);
  }
  Image2D img(static_cast<int>(image.height), static_cast<int>(image.width));
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

// Sidecar metadata stored next to each montage PNG.
struct MontageMeta {
  std::string study_id;
  std::string config_digest;
  std::string mode;  // "random" | "retrieved"
  int variant = 0;   // 0 = canonical montage; >0 = extra pretraining draws
  int grid = 0;
  int cell_px = 0;
  std::vector<PatchCandidate> patches;
  std::vector<double> scores;
};

inline nlohmann::json to_json(const MontageMeta& m) {
  nlohmann::json patches = nlohmann::json::array();
  for (const auto& p : m.patches)
    patches.push_back({{"z", p.z},
                       {"y0", p.rect.y0},
                       {"x0", p.rect.x0},
                       {"h", p.rect.h},
                       {"w", p.rect.w},
                       {"lung_fraction", p.lung_fraction}});
  return {{"study_id", m.study_id}, {"config_digest", m.config_digest}, {"mode", m.mode},
          {"variant", m.variant},   {"grid", m.grid},                   {"cell_px", m.cell_px},
          {"cells", m.grid * m.grid}, {"patches", patches},             {"scores", m.scores}};
}

inline MontageMeta montage_meta_from_json(const nlohmann::json& j) {
  MontageMeta m;
  m.study_id = j.at("study_id").get<std::string>();
  m.config_digest = j.at("config_digest").get<std::string>();
  m.mode = j.at("mode").get<std::string>();
  m.variant = j.value("variant", 0);
  m.grid = j.at("grid").get<int>();
  m.cell_px = j.at("cell_px").get<int>();
  for (const auto& p : j.at("patches"))
    m.patches.push_back({m.study_id, p.at("z").get<int>(),
                         Rect{p.at("y0").get<int>(), p.at("x0").get<int>(), p.at("h").get<int>(), p.at("w").get<int>()},
                         p.at("lung_fraction").get<double>()});
  m.scores = j.value("scores", std::vector<double>{});
  return m;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_montage(const std::filesystem::path& png_path, const Montage& m, MontageMeta meta) {
  meta.grid = m.grid;
  meta.cell_px = m.cell_px;
  meta.patches = m.patches;
  meta.scores = m.scores;
  write_png(png_path, m.image);
  auto side = png_path;
  side.replace_extension(".json");
  write_text_file(side, to_json(meta).dump(2) + "\n");
}

inline MontageMeta load_montage_meta(const std::filesystem::path& png_path) {
  auto side = png_path;
  side.replace_extension(".json");
  return montage_meta_from_json(nlohmann::json::parse(read_text_file(side)));
}

}  // namespace mzs
