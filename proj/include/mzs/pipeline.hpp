#pragma once

// Subcommands of the experiment workflow:
//   generate -> extract -> zeroshot -> dapt -> eval   (serve: see reader_service.hpp)
//
// Output layout under output_dir:
//   montages/<tag>/<study>[.v<j>].png + .json, run.json
//   zeroshot/<tag>/results.jsonl, metrics.json, run.json
//   dapt/<text_mode>-<montage_mode>/ckpt-<step>.bin, train_log.jsonl, lr_search.json, run.json
//   eval/<variant>-<best|ensemble>-<tag>/results.jsonl, metrics.json, run.json
//
// Every stage records a digest of its inputs and configuration in run.json;
// a rerun with a matching digest is a no-op unless forced.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mzs/dapt.hpp"
#include "mzs/detail/hash.hpp"
#include "mzs/detail/parallel.hpp"
#include "mzs/embedder.hpp"
#include "mzs/lung_seg.hpp"
#include "mzs/metrics.hpp"
#include "mzs/montage_io.hpp"
#include "mzs/patch_engine.hpp"
#include "mzs/pipeline_config.hpp"
#include "mzs/report_parser.hpp"
#include "mzs/synth_phantom.hpp"
#include "mzs/volume_io.hpp"
#include "mzs/zeroshot.hpp"

namespace mzs {

namespace fs = std::filesystem;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  bool force = false;
  std::ostream* log = &std::cerr;
};

// ---- small file helpers -----------------------------------------------------

inline nlohmann::json read_json_file(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_text_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw PipelineError(p.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& p, const nlohmann::json& j) {
  auto tmp = p;
  tmp += ".tmp";
  write_text_file(tmp, j.dump(2) + "\n");
  fs::rename(tmp, p);
}

inline std::string file_sha256(const fs::path& p) { return detail::sha256_hex(read_text_file(p)); }

inline std::string digest_of(const nlohmann::json& j) { return detail::sha256_hex(j.dump()); }

inline bool stage_up_to_date(const fs::path& dir, const std::string& digest) {
  const auto run = dir / "run.json";
  if (!fs::exists(run)) return false;
  const auto j = read_json_file(run);
  return j.value("digest", std::string{}) == digest && j.value("complete", false);
}

// Returns false when the stage can be skipped; otherwise clears dir.
inline bool begin_stage(const fs::path& dir, const std::string& digest, const RunOptions& opt, const char* stage) {
  if (!opt.force && stage_up_to_date(dir, digest)) {
    *opt.log << "[" << stage << "] up to date (digest " << digest.substr(0, 12) << "), nothing to do\n";
    return false;
  }
  fs::remove_all(dir);
  fs::create_directories(dir);
  return true;
}

inline std::shared_ptr<const EmbedderBackend> make_cached_backend(const PipelineConfig& c) {
  auto cache = c.cache_dir.empty() ? std::make_shared<EmbeddingCache>() : std::make_shared<EmbeddingCache>(c.cache_dir);
  return std::make_shared<CachedEmbedder>(make_backend(c.backend), cache);
}

inline bool split_selected(const std::string& wanted, Split s) { return wanted == "all" || wanted == to_string(s); }

inline std::uint64_t study_seed(std::uint64_t master, const std::string& study_id) {
  return detail::derive_seed(master, detail::fnv1a64(study_id));
}

inline fs::path montage_dir(const PipelineConfig& c, const std::string& tag) { return c.output_dir / "montages" / tag; }

inline std::string montage_file(const std::string& study_id, int variant) {
  return variant == 0 ? study_id + ".png" : study_id + ".v" + std::to_string(variant) + ".png";
}

// ---- generate ---------------------------------------------------------------

inline int cmd_generate(const PipelineConfig& c, const RunOptions& opt = {}) {
  const fs::path dir = c.manifest.parent_path().empty() ? fs::path(".") : c.manifest.parent_path();
  const auto& g = c.generate;
  const nlohmann::json key = {{"stage", "generate"},     {"seed", c.seed},
                              {"n_pos", g.n_pos},        {"n_neg", g.n_neg},
                              {"missing_impression", g.missing_impression},
                              {"dims", {g.dims_z, g.dims_y, g.dims_x}}, {"amplitude_hu", g.amplitude_hu}};
  const std::string digest = digest_of(key);
  const fs::path record = dir / "generate.json";
  if (!opt.force && fs::exists(record) && fs::exists(c.manifest) &&
      read_json_file(record).value("digest", std::string{}) == digest) {
    *opt.log << "[generate] up to date, nothing to do\n";
    return 0;
  }
  if (c.manifest.filename() != "manifest.jsonl")
    throw PipelineError("generate writes manifest.jsonl; point 'manifest' at <dir>/manifest.jsonl");
  StudySetOptions so;
  so.base.dims = Dims3{g.dims_z, g.dims_y, g.dims_x};
  so.base.amplitude_hu = g.amplitude_hu;
  so.missing_impression = g.missing_impression;
  so.workers = c.workers;
  const auto m = generate_study_set(dir, c.seed, g.n_pos, g.n_neg, so);
  write_json_file(record, {{"stage", "generate"}, {"digest", digest}, {"config", key},
                           {"manifest_sha256", file_sha256(c.manifest)}, {"studies", m.entries.size()}});
  *opt.log << "[generate] wrote " << m.entries.size() << " studies to " << dir.string() << "\n";
  return 0;
}

// ---- extract ----------------------------------------------------------------

inline std::string extract_digest(const PipelineConfig& c, const std::string& backend_name,
                                  const std::string& retrieval_ckpt_sha) {
  return digest_of({{"stage", "extract"},
                    {"manifest", file_sha256(c.manifest)},
                    {"montage_size", c.montage_size},
                    {"filter_threshold", c.filter_threshold},
                    {"patch_px", c.patch_px},
                    {"stride", c.stride},
                    {"cell_px", c.effective_cell_px()},
                    {"backend", backend_name},
                    {"retrieval_mode", c.retrieval_mode},
                    {"retrieval_checkpoint", retrieval_ckpt_sha},
                    {"prompt", c.prompt_disease()},
                    {"logit_scale", c.logit_scale},
                    {"seed", c.seed},
                    {"montages_per_study", c.dapt.montages_per_study}});
}

// Montages for one study. Variant 0 is the canonical montage; pretrain
// studies get montages_per_study - 1 extra seeded draws for DAPT:
// random mode redraws with a new seed, retrieved mode takes the top K from a
// seeded half of the candidates.
inline std::vector<Montage> extract_study(const PipelineConfig& c, const EmbedderBackend& retrieval,
                                          const ManifestEntry& e, int variants, std::size_t* n_candidates = nullptr) {
  const HuVolume vol = load_volume(e.volume);
  const LungSegmentation seg = segment_lungs(vol);
  if (seg.degenerate) throw PipelineError("lung segmentation found no interior low-density component");
  const auto cands = enumerate_candidates(vol, seg.mask, c.patch_px, c.stride, c.filter_threshold, e.study_id);
  if (n_candidates) *n_candidates = cands.size();
  const std::size_t k = static_cast<std::size_t>(c.grid_cells());
  const int cell = c.effective_cell_px();
  const std::uint64_t seed = study_seed(c.seed, e.study_id);
  std::vector<Montage> out;

  if (c.retrieval_mode == "random") {
    for (int j = 0; j < variants; ++j)
      out.push_back(assemble_montage(vol, select_random(cands, k, detail::derive_seed(seed, j)), c.montage_size, cell));
    return out;
  }
  if (cands.size() < k) throw InsufficientCandidates(k, cands.size());
  const auto scored = score_patches(retrieval, vol, cands, build_prompt_pair(c.prompt_disease()), c.logit_scale, 1);
  out.push_back(assemble_montage(vol, select_top(scored, k), c.montage_size, cell));
  for (int j = 1; j < variants; ++j) {
    std::vector<std::size_t> idx(scored.size());
    std::iota(idx.begin(), idx.end(), 0);
    detail::SplitMix64 rng(detail::derive_seed(seed, j));
    detail::shuffle(std::span(idx), rng);
    idx.resize(std::max(k, (scored.size() + 1) / 2));
    std::sort(idx.begin(), idx.end());
    std::vector<ScoredPatch> subset;
    for (auto i : idx) subset.push_back(scored[i]);
    out.push_back(assemble_montage(vol, select_top(std::move(subset), k), c.montage_size, cell));
  }
  return out;
}

inline int cmd_extract(const PipelineConfig& c, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const StudyManifest manifest = read_manifest(c.manifest);
  std::shared_ptr<const EmbedderBackend> retrieval = make_cached_backend(c);
  std::string ckpt_sha;
  if (!c.retrieval_checkpoint.empty()) {
    ckpt_sha = file_sha256(c.retrieval_checkpoint);
    retrieval = std::make_shared<AdaptedEmbedder>(retrieval, load_checkpoint(c.retrieval_checkpoint));
  }
  const std::string digest = extract_digest(c, retrieval->info().name, ckpt_sha);
  const fs::path dir = montage_dir(c, c.tag());
  if (!begin_stage(dir, digest, opt, "extract")) return 0;

  const std::size_t n = manifest.entries.size();
  std::vector<std::string> errors(n);
  std::vector<int> written(n, 0);
  std::vector<std::size_t> n_cands(n, 0);
  detail::parallel_for(n, c.workers, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    try {
      const int variants = e.split == Split::pretrain ? c.dapt.montages_per_study : 1;
      const auto montages = extract_study(c, *retrieval, e, variants, &n_cands[i]);
      for (int j = 0; j < static_cast<int>(montages.size()); ++j) {
        MontageMeta meta{e.study_id, digest, c.retrieval_mode, j, 0, 0, {}, {}};
        save_montage(dir / montage_file(e.study_id, j), montages[j], meta);
      }
      written[i] = static_cast<int>(montages.size());
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });

  nlohmann::json studies = nlohmann::json::array(), failed = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& id = manifest.entries[i].study_id;
    if (errors[i].empty()) {
      studies.push_back({{"study_id", id}, {"variants", written[i]}, {"candidates", n_cands[i]}});
    } else {
      failed.push_back({{"study_id", id}, {"error", errors[i]}});
      *opt.log << "[extract] " << id << ": " << errors[i] << "\n";
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json_file(dir / "run.json", {{"stage", "extract"},
                                     {"digest", digest},
                                     {"tag", c.tag()},
                                     {"mode", c.retrieval_mode},
                                     {"grid", c.montage_size},
                                     {"complete", failed.empty()},
                                     {"studies", studies},
                                     {"failed", failed},
                                     {"seconds", secs}});
  *opt.log << "[extract] " << studies.size() << " studies, " << failed.size() << " failed -> " << dir.string()
           << "\n";
  return failed.empty() ? 0 : 1;
}

// Loaded montage index for a finished extract stage; refuses mixed digests.
struct MontageSet {
  fs::path dir;
  std::string digest;
  std::map<std::string, int> variants;  // study id -> number of variant files

  fs::path png(const std::string& study_id, int variant = 0) const { return dir / montage_file(study_id, variant); }

  Image2D image(const std::string& study_id, int variant = 0) const {
    const auto p = png(study_id, variant);
    const auto meta = load_montage_meta(p);
    if (meta.config_digest != digest)
      throw PipelineError("montage " + p.string() + " carries digest " + meta.config_digest.substr(0, 12) +
                          " but the montage set is " + digest.substr(0, 12) + "; refusing to mix artifacts");
    return read_png(p);
  }
};

inline MontageSet load_montage_set(const fs::path& dir) {
  const auto run = dir / "run.json";
  if (!fs::exists(run)) throw PipelineError("no montages in " + dir.string() + "; run 'extract' first");
  const auto j = read_json_file(run);
  MontageSet s{dir, j.at("digest").get<std::string>(), {}};
  for (const auto& st : j.at("studies")) s.variants[st.at("study_id").get<std::string>()] = st.at("variants").get<int>();
  return s;
}

// ---- classification shared by zeroshot and eval -------------------------------

struct ScoredSplit {
  std::vector<const ManifestEntry*> studies;
  std::vector<std::vector<ZeroShotResult>> by_disease;  // [disease][study]
};

inline ScoredSplit score_split(const PipelineConfig& c, const StudyManifest& manifest, const MontageSet& set,
                               const std::vector<std::shared_ptr<const EmbedderBackend>>& members) {
  ScoredSplit out;
  for (const auto& e : manifest.entries)
    if (split_selected(c.split, e.split)) {
      if (!set.variants.count(e.study_id))
        throw PipelineError("missing montage for study " + e.study_id + " in " + set.dir.string());
      out.studies.push_back(&e);
    }
  if (out.studies.empty()) throw PipelineError("no studies in split '" + c.split + "'");
  std::vector<PromptPair> prompts;
  for (const auto& d : c.diseases) prompts.push_back(build_prompt_pair(d));
  out.by_disease.assign(prompts.size(), std::vector<ZeroShotResult>(out.studies.size()));
  detail::parallel_for(out.studies.size(), c.workers, [&](std::size_t i) {
    const Image2D img = set.image(out.studies[i]->study_id);
    for (std::size_t d = 0; d < prompts.size(); ++d)
      out.by_disease[d][i] = classify_ensemble(members, img, prompts[d], c.logit_scale, out.studies[i]->study_id);
  });
  return out;
}

inline void write_scores(const fs::path& dir, const PipelineConfig& c, const ScoredSplit& s, const std::string& digest,
                         std::ostream& log, nlohmann::json extra = nlohmann::json::object()) {
  std::string jsonl;
  for (const auto& per : s.by_disease)
    for (const auto& r : per) jsonl += to_json(r, digest).dump() + "\n";
  write_text_file(dir / "results.jsonl", jsonl);

  nlohmann::json report = {{"config_digest", digest}, {"split", c.split}, {"threshold", c.f1_threshold}};
  for (auto it = extra.begin(); it != extra.end(); ++it) report[it.key()] = it.value();
  const bool labeled =
      std::all_of(s.studies.begin(), s.studies.end(), [](const ManifestEntry* e) { return e->label.has_value(); });
  if (!labeled) {
    report["metrics"] = nullptr;
    report["notice"] = "manifest has unlabeled studies in this split; metrics skipped";
    log << "[metrics] unlabeled studies in split '" << c.split << "'; scores written, metrics skipped\n";
  } else {
    std::vector<int> labels;
    for (const auto* e : s.studies) labels.push_back(*e->label);
    nlohmann::json blocks = nlohmann::json::array();
    for (std::size_t d = 0; d < s.by_disease.size(); ++d) {
      std::vector<double> scores;
      for (const auto& r : s.by_disease[d]) scores.push_back(r.p_pos);
      auto block = to_json(evaluate_scores(scores, labels, c.f1_threshold));
      block["disease"] = c.diseases[d];
      blocks.push_back(block);
      log << "[metrics] " << c.diseases[d] << ": AUROC " << block["auroc"].dump() << ", AUPRC " << block["auprc"].dump()
          << ", F1@" << c.f1_threshold << " " << block["f1"].dump() << " (n=" << scores.size() << ")\n";
    }
    report["metrics"] = blocks;
  }
  write_text_file(dir / "metrics.json", report.dump(2) + "\n");
}

// ---- zeroshot ---------------------------------------------------------------

inline int cmd_zeroshot(const PipelineConfig& c, const RunOptions& opt = {}) {
  const StudyManifest manifest = read_manifest(c.manifest);
  const MontageSet set = load_montage_set(montage_dir(c, c.tag()));
  const auto backend = make_cached_backend(c);
  const std::string digest = digest_of({{"stage", "zeroshot"},
                                        {"extract", set.digest},
                                        {"backend", backend->info().name},
                                        {"diseases", c.diseases},
                                        {"split", c.split},
                                        {"logit_scale", c.logit_scale},
                                        {"f1_threshold", c.f1_threshold}});
  const fs::path dir = c.output_dir / "zeroshot" / c.tag();
  if (!begin_stage(dir, digest, opt, "zeroshot")) return 0;
  const auto scored = score_split(c, manifest, set, {backend});
  write_scores(dir, c, scored, digest, *opt.log, {{"mode", c.tag()}, {"models", {backend->info().name}}});
  write_json_file(dir / "run.json", {{"stage", "zeroshot"}, {"digest", digest}, {"extract", set.digest}, {"complete", true}});
  return 0;
}

// ---- dapt -------------------------------------------------------------------

struct DaptPairs {
  PairDataset data;
  std::vector<std::string> excluded;  // studies without usable report text
};

inline DaptPairs build_dapt_pairs(const PipelineConfig& c, const StudyManifest& manifest, const MontageSet& set,
                                  const EmbedderBackend& backend) {
  DaptPairs out;
  std::vector<const ManifestEntry*> studies;
  for (const auto& e : manifest.entries)
    if (e.split == Split::pretrain && set.variants.count(e.study_id)) studies.push_back(&e);
  std::vector<std::vector<TrainingPair>> per(studies.size());
  std::vector<char> missing(studies.size(), 0);
  detail::parallel_for(studies.size(), c.workers, [&](std::size_t i) {
    const auto& e = *studies[i];
    if (e.report.empty() || !fs::exists(e.report)) {
      missing[i] = 1;
      return;
    }
    const auto text = extract_text(parse_report(read_text_file(e.report)), c.dapt.text_mode);
    if (text.missing) {
      missing[i] = 1;
      return;
    }
    const Embedding t = embed_text(backend, text.text);
    for (int j = 0; j < set.variants.at(e.study_id); ++j) {
      const Embedding img = embed_image_resized(backend, set.image(e.study_id, j));
      per[i].push_back({img.values, t.values, e.study_id});
    }
  });
  for (std::size_t i = 0; i < studies.size(); ++i) {
    if (missing[i]) out.excluded.push_back(studies[i]->study_id);
    for (auto& p : per[i]) out.data.pairs.push_back(std::move(p));
  }
  return out;
}

inline fs::path dapt_dir(const PipelineConfig& c) { return c.output_dir / "dapt" / c.dapt_variant(); }

inline DaptConfig dapt_base_config(const PipelineConfig& c, const std::string& upstream) {
  DaptConfig d;
  d.lr = c.dapt.lr;
  d.batch_size = c.dapt.batch_size;
  d.max_epochs = c.dapt.max_epochs;
  d.patience_steps = c.dapt.patience_steps;
  d.checkpoint_interval = c.dapt.checkpoint_interval;
  d.holdout_fraction = c.dapt.holdout_fraction;
  d.seed = c.seed;
  d.text_mode = c.dapt.text_mode;
  d.montage_mode = c.dapt_montage_mode();
  d.upstream = upstream;
  return d;
}

inline std::string train_log_jsonl(const CheckpointSet& run) {
  std::string out;
  for (const auto& e : run.log) {
    nlohmann::json j = {{"step", e.step}, {"train_loss", e.train_loss}};
    j["holdout_loss"] = e.holdout_loss ? nlohmann::json(*e.holdout_loss) : nlohmann::json(nullptr);
    out += j.dump() + "\n";
  }
  return out;
}

inline int cmd_dapt(const PipelineConfig& c, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const StudyManifest manifest = read_manifest(c.manifest);
  const MontageSet set = load_montage_set(montage_dir(c, c.dapt_montage_mode()));
  const auto backend = make_cached_backend(c);
  const DaptConfig base = dapt_base_config(c, digest_of({{"extract", set.digest}, {"backend", backend->info().name}}));
  const std::string digest =
      digest_of({{"stage", "dapt"}, {"dapt", base.to_json()}, {"lr_search", c.dapt.lr_search}});
  const fs::path dir = dapt_dir(c);
  if (!begin_stage(dir, digest, opt, "dapt")) return 0;

  const DaptPairs pairs = build_dapt_pairs(c, manifest, set, *backend);
  for (const auto& id : pairs.excluded)
    *opt.log << "[dapt] " << id << ": no " << to_string(c.dapt.text_mode) << " text, excluded\n";
  if (pairs.data.pairs.size() < 2 * static_cast<std::size_t>(c.dapt.batch_size))
    throw DaptError("insufficient DAPT pairs: " + std::to_string(pairs.data.pairs.size()) + " < 2 x batch size " +
                    std::to_string(c.dapt.batch_size));

  CheckpointSet run;
  nlohmann::json trials = nlohmann::json::array();
  if (c.dapt.lr_search) {
    LrSearchResult res = lr_search(base, pairs.data);
    for (const auto& t : res.trials) {
      nlohmann::json tj = {{"lr", t.lr}, {"error", t.error}};
      tj["best_val_loss"] = t.best_val_loss ? nlohmann::json(*t.best_val_loss) : nlohmann::json(nullptr);
      trials.push_back(tj);
      *opt.log << "[dapt] lr " << t.lr << ": "
               << (t.best_val_loss ? "best holdout loss " + std::to_string(*t.best_val_loss) : "failed: " + t.error)
               << "\n";
    }
    write_text_file(dir / "lr_search.json", nlohmann::json({{"trials", trials}, {"best_lr", res.best_lr}}).dump(2) + "\n");
    run = std::move(res.best_run);
  } else {
    run = train(base, pairs.data);
  }

  nlohmann::json ckpts = nlohmann::json::array();
  for (const auto& ck : run.checkpoints) {
    const std::string name = "ckpt-" + std::to_string(ck.step) + ".bin";
    save_checkpoint(ck, dir / name);
    ckpts.push_back({{"step", ck.step}, {"val_loss", ck.val_loss}, {"file", name}});
  }
  write_text_file(dir / "train_log.jsonl", train_log_jsonl(run));
  const auto& best = run.best_checkpoint();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json_file(dir / "run.json", {{"stage", "dapt"},
                                     {"digest", digest},
                                     {"complete", true},
                                     {"variant", c.dapt_variant()},
                                     {"lr", run.lr},
                                     {"checkpoint_digest", best.config_digest},
                                     {"best_step", best.step},
                                     {"best_val_loss", best.val_loss},
                                     {"steps", run.steps},
                                     {"early_stopped", run.early_stopped},
                                     {"pairs", pairs.data.pairs.size()},
                                     {"excluded", pairs.excluded.size()},
                                     {"excluded_studies", pairs.excluded},
                                     {"checkpoints", ckpts},
                                     {"seconds", secs}});
  *opt.log << "[dapt] " << c.dapt_variant() << ": lr " << run.lr << ", " << run.steps << " steps, best step "
           << best.step << " (holdout loss " << best.val_loss << "), " << pairs.excluded.size() << " excluded\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct LoadedCheckpoints {
  std::string dapt_digest;
  std::vector<Checkpoint> members;
  bool truncated = false;
};

inline LoadedCheckpoints load_eval_checkpoints(const PipelineConfig& c) {
  const fs::path dir = dapt_dir(c);
  if (!fs::exists(dir / "run.json")) throw PipelineError("missing checkpoints in " + dir.string() + "; run 'dapt' first");
  const auto run = read_json_file(dir / "run.json");
  if (!run.value("complete", false)) throw PipelineError("DAPT run in " + dir.string() + " is incomplete");
  const auto expect = run.at("checkpoint_digest").get<std::string>();
  CheckpointSet set;
  for (const auto& ck : run.at("checkpoints")) {
    const auto path = dir / ck.at("file").get<std::string>();
    if (!fs::exists(path)) throw PipelineError("missing checkpoint " + path.string());
    Checkpoint loaded = load_checkpoint(path);
    if (loaded.config_digest != expect)
      throw PipelineError("checkpoint " + path.string() + " belongs to a different DAPT configuration");
    set.checkpoints.push_back(std::move(loaded));
  }
  if (set.checkpoints.empty()) throw PipelineError("no checkpoints recorded in " + dir.string());
  LoadedCheckpoints out{run.at("digest").get<std::string>(), {}, false};
  const auto top = select_top_checkpoints(set, c.eval.checkpoints == "best" ? 1 : static_cast<std::size_t>(c.eval.ensemble_size));
  out.members = top.checkpoints;
  out.truncated = top.truncated;
  return out;
}

inline fs::path eval_dir(const PipelineConfig& c) {
  return c.output_dir / "eval" / (c.dapt_variant() + "-" + c.eval.checkpoints + "-" + c.eval_montage_tag());
}

inline int cmd_eval(const PipelineConfig& c, const RunOptions& opt = {}) {
  const StudyManifest manifest = read_manifest(c.manifest);
  const MontageSet set = load_montage_set(montage_dir(c, c.eval_montage_tag()));
  const auto backend = make_cached_backend(c);
  const LoadedCheckpoints ck = load_eval_checkpoints(c);
  if (ck.truncated)
    *opt.log << "[eval] warning: only " << ck.members.size() << " checkpoints available for an ensemble of "
             << c.eval.ensemble_size << "\n";
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& m : ck.members) steps.push_back(m.step);
  const std::string digest = digest_of({{"stage", "eval"},
                                        {"dapt", ck.dapt_digest},
                                        {"extract", set.digest},
                                        {"checkpoints", c.eval.checkpoints},
                                        {"steps", steps},
                                        {"diseases", c.diseases},
                                        {"split", c.split},
                                        {"logit_scale", c.logit_scale},
                                        {"f1_threshold", c.f1_threshold}});
  const fs::path dir = eval_dir(c);
  if (!begin_stage(dir, digest, opt, "eval")) return 0;
  std::vector<std::shared_ptr<const EmbedderBackend>> members;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& m : ck.members) {
    members.push_back(std::make_shared<AdaptedEmbedder>(backend, m));
    names.push_back(members.back()->info().name);
  }
  const auto scored = score_split(c, manifest, set, members);
  write_scores(dir, c, scored, digest, *opt.log,
               {{"mode", c.eval_montage_tag()},
                {"models", names},
                {"checkpoint_steps", steps},
                {"ensemble_truncated", ck.truncated}});
  write_json_file(dir / "run.json", {{"stage", "eval"}, {"digest", digest}, {"dapt", ck.dapt_digest}, {"complete", true}});
  return 0;
}

}  // namespace mzs
