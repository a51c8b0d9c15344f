#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzs/detail/hash.hpp"
#include "mzs/embedder.hpp"
#include "mzs/http_embedder.hpp"
#include "mzs/report_parser.hpp"

namespace mzs {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BackendConfig {
  std::string kind = "reference";  // reference | http
  int dim = 512;
  int resolution = 128;
  std::uint64_t seed = kReferenceSeed;
  // http only
  std::string name = "remote";
  std::string host = "127.0.0.1";
  int port = 0;
  std::string path = "/embed";
  int timeout_s = 60;
  bool concurrent = true;
};

struct GenerateConfig {
  int n_pos = 40, n_neg = 40;
  double missing_impression = 0.0;
  int dims_z = 96, dims_y = 128, dims_x = 128;
  double amplitude_hu = 250.0;
};

struct DaptStageConfig {
  std::string montage_mode;  // empty = retrieval_mode
  TextMode text_mode = TextMode::impression;
  int batch_size = 64;
  int max_epochs = 10;
  int patience_steps = 1000;
  int checkpoint_interval = 100;
  double holdout_fraction = 0.10;
  bool lr_search = true;
  double lr = 1e-4;           // used when lr_search is false
  int montages_per_study = 1;  // extra seeded montage draws per pretrain study
};

struct EvalConfig {
  std::string checkpoints = "best";  // best | ensemble
  int ensemble_size = 5;
  std::string montage_mode;  // empty = retrieval_mode
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::map<std::string, std::string> arms;  // arm name -> montage tag under output_dir/montages
  std::vector<std::string> readers;
  std::string split = "test";
  std::filesystem::path static_dir;
  std::filesystem::path annotations;  // default output_dir/reader_study/annotations.jsonl
};

struct PipelineConfig {
  std::filesystem::path manifest, cache_dir, output_dir;
  int montage_size = 4;
  double filter_threshold = 0.5;
  int patch_px = 64;
  int stride = 32;
  int cell_px = 0;  // 0 = patch_px
  BackendConfig backend;
  std::string retrieval_mode = "retrieved";  // random | retrieved
  std::string montage_tag;                   // output subdirectory; default retrieval_mode
  std::filesystem::path retrieval_checkpoint;  // optional adapted retrieval
  std::string retrieval_prompt;                // default diseases[0]
  std::vector<std::string> diseases{"interstitial lung disease"};
  std::string split = "test";  // pretrain | val | test | all
  std::uint64_t seed = 0;
  double logit_scale = 100.0;
  double f1_threshold = 0.5;
  std::size_t workers = 1;
  bool unsafe_config = false;
  GenerateConfig generate;
  DaptStageConfig dapt;
  EvalConfig eval;
  ServeConfig serve;

  int grid_cells() const { return montage_size * montage_size; }
  int effective_cell_px() const { return cell_px > 0 ? cell_px : patch_px; }
  std::string tag() const { return montage_tag.empty() ? retrieval_mode : montage_tag; }
  std::string prompt_disease() const { return retrieval_prompt.empty() ? diseases.front() : retrieval_prompt; }
  std::string dapt_montage_mode() const { return dapt.montage_mode.empty() ? retrieval_mode : dapt.montage_mode; }
  std::string eval_montage_tag() const { return eval.montage_mode.empty() ? tag() : eval.montage_mode; }
  std::string dapt_variant() const { return std::string(to_string(dapt.text_mode)) + "-" + dapt_montage_mode(); }

  void validate() const {
    if (manifest.empty()) throw ConfigError("config: 'manifest' is required");
    if (output_dir.empty()) throw ConfigError("config: 'output_dir' is required");
    if (!unsafe_config) {
      if (montage_size != 4 && montage_size != 8 && montage_size != 16)
        throw ConfigError("config: montage_size must be 4, 8 or 16 (set unsafe_config to override)");
      if (filter_threshold != 0.2 && filter_threshold != 0.5 && filter_threshold != 0.8)
        throw ConfigError("config: filter_threshold must be 0.2, 0.5 or 0.8 (set unsafe_config to override)");
    }
    if (montage_size < 1) throw ConfigError("config: montage_size must be >= 1");
    if (!(filter_threshold >= 0.0 && filter_threshold <= 1.0)) throw ConfigError("config: filter_threshold outside [0, 1]");
    if (patch_px < 8 || stride < 1 || stride > patch_px) throw ConfigError("config: need patch_px >= 8 and 1 <= stride <= patch_px");
    if (retrieval_mode != "random" && retrieval_mode != "retrieved")
      throw ConfigError("config: retrieval_mode must be 'random' or 'retrieved'");
    if (diseases.empty()) throw ConfigError("config: 'diseases' must list at least one disease");
    for (const auto& d : diseases)
      if (detail::trim(d).empty()) throw ConfigError("config: empty disease name");
    if (split != "pretrain" && split != "val" && split != "test" && split != "all")
      throw ConfigError("config: split must be pretrain, val, test or all");
    if (backend.kind != "reference" && backend.kind != "http") throw ConfigError("config: backend.kind must be reference or http");
    if (backend.kind == "http" && backend.port <= 0) throw ConfigError("config: backend.port is required for http");
    if (!(logit_scale > 0.0)) throw ConfigError("config: logit_scale must be > 0");
    if (dapt.montages_per_study < 1) throw ConfigError("config: dapt.montages_per_study must be >= 1");
    if (eval.checkpoints != "best" && eval.checkpoints != "ensemble")
      throw ConfigError("config: eval.checkpoints must be 'best' or 'ensemble'");
    if (eval.ensemble_size < 1) throw ConfigError("config: eval.ensemble_size must be >= 1");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

inline TextMode parse_text_mode(const std::string& s) {
  if (s == "impression") return TextMode::impression;
  if (s == "lung_sections") return TextMode::lung_sections;
  throw ConfigError("config: text_mode must be 'impression' or 'lung_sections'");
}

}  // namespace detail

// Relative paths are resolved against base_dir (normally the config file's directory).
inline PipelineConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::read_opt;
  detail::check_keys(j,
                     {"manifest", "cache_dir", "output_dir", "montage_size", "filter_threshold", "patch_px", "stride",
                      "cell_px", "backend", "retrieval_mode", "montage_tag", "retrieval_checkpoint",
                      "retrieval_prompt", "diseases", "split", "seed", "logit_scale", "f1_threshold", "workers",
                      "unsafe_config", "text_mode", "generate", "dapt", "eval", "serve"},
                     "config");
  PipelineConfig c;
  auto path = [&](const char* key) -> std::filesystem::path {
    if (!j.contains(key)) return {};
    std::filesystem::path p = j.at(key).get<std::string>();
    if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
  };
  c.manifest = path("manifest");
  c.cache_dir = path("cache_dir");
  c.output_dir = path("output_dir");
  c.retrieval_checkpoint = path("retrieval_checkpoint");
  read_opt(j, "montage_size", c.montage_size);
  read_opt(j, "filter_threshold", c.filter_threshold);
  read_opt(j, "patch_px", c.patch_px);
  read_opt(j, "stride", c.stride);
  read_opt(j, "cell_px", c.cell_px);
  read_opt(j, "retrieval_mode", c.retrieval_mode);
  read_opt(j, "montage_tag", c.montage_tag);
  read_opt(j, "retrieval_prompt", c.retrieval_prompt);
  read_opt(j, "diseases", c.diseases);
  read_opt(j, "split", c.split);
  read_opt(j, "seed", c.seed);
  read_opt(j, "logit_scale", c.logit_scale);
  read_opt(j, "f1_threshold", c.f1_threshold);
  read_opt(j, "workers", c.workers);
  read_opt(j, "unsafe_config", c.unsafe_config);
  if (j.contains("text_mode")) c.dapt.text_mode = detail::parse_text_mode(j.at("text_mode").get<std::string>());

  if (j.contains("backend")) {
    const auto& b = j.at("backend");
    detail::check_keys(b, {"kind", "dim", "resolution", "seed", "name", "host", "port", "path", "timeout_s", "concurrent"},
                       "backend");
    read_opt(b, "kind", c.backend.kind);
    read_opt(b, "dim", c.backend.dim);
    read_opt(b, "resolution", c.backend.resolution);
    read_opt(b, "seed", c.backend.seed);
    read_opt(b, "name", c.backend.name);
    read_opt(b, "host", c.backend.host);
    read_opt(b, "port", c.backend.port);
    read_opt(b, "path", c.backend.path);
    read_opt(b, "timeout_s", c.backend.timeout_s);
    read_opt(b, "concurrent", c.backend.concurrent);
  }
  if (j.contains("generate")) {
    const auto& g = j.at("generate");
    detail::check_keys(g, {"n_pos", "n_neg", "missing_impression", "dims", "amplitude_hu"}, "generate");
    read_opt(g, "n_pos", c.generate.n_pos);
    read_opt(g, "n_neg", c.generate.n_neg);
    read_opt(g, "missing_impression", c.generate.missing_impression);
    read_opt(g, "amplitude_hu", c.generate.amplitude_hu);
    if (g.contains("dims")) {
      const auto dims = g.at("dims").get<std::vector<int>>();
      if (dims.size() != 3) throw ConfigError("config: generate.dims must be [nz, ny, nx]");
      c.generate.dims_z = dims[0];
      c.generate.dims_y = dims[1];
      c.generate.dims_x = dims[2];
    }
  }
  if (j.contains("dapt")) {
    const auto& d = j.at("dapt");
    detail::check_keys(d,
                       {"montage_mode", "text_mode", "batch_size", "max_epochs", "patience_steps",
                        "checkpoint_interval", "holdout_fraction", "lr_search", "lr", "montages_per_study"},
                       "dapt");
    read_opt(d, "montage_mode", c.dapt.montage_mode);
    if (d.contains("text_mode")) c.dapt.text_mode = detail::parse_text_mode(d.at("text_mode").get<std::string>());
    read_opt(d, "batch_size", c.dapt.batch_size);
    read_opt(d, "max_epochs", c.dapt.max_epochs);
    read_opt(d, "patience_steps", c.dapt.patience_steps);
    read_opt(d, "checkpoint_interval", c.dapt.checkpoint_interval);
    read_opt(d, "holdout_fraction", c.dapt.holdout_fraction);
    read_opt(d, "lr_search", c.dapt.lr_search);
    read_opt(d, "lr", c.dapt.lr);
    read_opt(d, "montages_per_study", c.dapt.montages_per_study);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"checkpoints", "ensemble_size", "montage_mode"}, "eval");
    read_opt(e, "checkpoints", c.eval.checkpoints);
    read_opt(e, "ensemble_size", c.eval.ensemble_size);
    read_opt(e, "montage_mode", c.eval.montage_mode);
  }
  if (j.contains("serve")) {
    const auto& s = j.at("serve");
    detail::check_keys(s, {"host", "port", "arms", "readers", "split", "static_dir", "annotations"}, "serve");
    read_opt(s, "host", c.serve.host);
    read_opt(s, "port", c.serve.port);
    read_opt(s, "arms", c.serve.arms);
    read_opt(s, "readers", c.serve.readers);
    read_opt(s, "split", c.serve.split);
    auto spath = [&](const char* key) -> std::filesystem::path {
      if (!s.contains(key)) return {};
      std::filesystem::path p = s.at(key).get<std::string>();
      return (p.is_absolute() || base_dir.empty()) ? p : base_dir / p;
    };
    c.serve.static_dir = spath("static_dir");
    c.serve.annotations = spath("annotations");
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
  return parse_config(j, file.parent_path());
}

inline std::shared_ptr<const EmbedderBackend> make_backend(const BackendConfig& b) {
  if (b.kind == "reference") return std::make_shared<ReferenceEmbedder>(b.dim, b.seed, b.resolution);
  BackendInfo info{b.name, b.dim, b.resolution, true, true, b.concurrent};
  return std::make_shared<HttpEmbedder>(info, b.host, b.port, b.path, b.timeout_s);
}

}  // namespace mzs
