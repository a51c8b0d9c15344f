#pragma once

// Blinded reader-study service. Readers receive montages from every arm in a
// per-reader seeded order under opaque ids; annotations are appended to a
// JSONL log where a later record for the same (reader, montage) replaces the
// earlier one.
//
//   GET  /api/arms                         arm names and sizes
//   GET  /api/queue/{reader}               ordered montage ids with progress
//   GET  /api/montage/{id}                 PNG
//   GET  /api/montage/{id}/meta            grid size only (no arm, study, label)
//   POST /api/annotations                  {reader_id, montage_id, cells: [int]}
//   GET  /api/annotations/{reader}/{id}    stored record
//   GET  /api/agreement                    per-arm marked fraction and ICC(3,1)
//   GET  /                                 static UI assets

#include <chrono>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mzs/http_embedder.hpp"  // httplib, with the Eigen-safe include order
#include "mzs/metrics.hpp"
#include "mzs/pipeline.hpp"

namespace mzs {

struct AnnotationRecord {
  std::string reader_id;
  std::string montage_id;
  std::vector<int> cells;  // sorted, unique, each < grid^2
  std::int64_t timestamp_ms = 0;
};

inline nlohmann::json to_json(const AnnotationRecord& r) {
  return {{"reader_id", r.reader_id}, {"montage_id", r.montage_id}, {"cells", r.cells}, {"timestamp_ms", r.timestamp_ms}};
}

struct ReaderMontage {
  std::string id;  // opaque
  std::string arm;
  std::string study_id;
  int grid = 0;
  fs::path png;
};

class ReaderService {
 public:
  struct Arm {
    std::string name;
    fs::path dir;  // extract-stage montage directory
  };

  ReaderService(std::vector<Arm> arms, std::vector<std::string> readers, std::vector<std::string> studies,
                std::uint64_t seed, fs::path annotations_path, fs::path static_dir = {})
      : readers_(readers.begin(), readers.end()),
        seed_(seed),
        log_path_(std::move(annotations_path)),
        static_dir_(std::move(static_dir)) {
    if (arms.empty()) throw PipelineError("reader study needs at least one arm");
    if (readers_.empty()) throw PipelineError("reader study needs at least one reader id");
    for (const auto& arm : arms) {
      const MontageSet set = load_montage_set(arm.dir);
      arm_names_.push_back(arm.name);
      for (const auto& study : studies) {
        if (!set.variants.count(study)) throw PipelineError("arm '" + arm.name + "' has no montage for " + study);
        const auto meta = load_montage_meta(set.png(study));
        if (meta.config_digest != set.digest) throw PipelineError("arm '" + arm.name + "' mixes digests");
        ReaderMontage m{opaque_id(arm.name, study, set.digest), arm.name, study, meta.grid, set.png(study)};
        montages_.emplace(m.id, std::move(m));
      }
    }
    if (!log_path_.empty()) {
      if (log_path_.has_parent_path()) fs::create_directories(log_path_.parent_path());
      replay();
    }
  }

  static ReaderService from_config(const PipelineConfig& c) {
    std::vector<Arm> arms;
    auto names = c.serve.arms;
    if (names.empty()) names[c.tag()] = c.tag();
    for (const auto& [name, tag] : names) arms.push_back({name, montage_dir(c, tag)});
    const auto manifest = read_manifest(c.manifest);
    std::vector<std::string> studies;
    for (const auto& e : manifest.entries)
      if (split_selected(c.serve.split, e.split)) studies.push_back(e.study_id);
    const auto log = c.serve.annotations.empty() ? c.output_dir / "reader_study" / "annotations.jsonl" : c.serve.annotations;
    return ReaderService(std::move(arms), c.serve.readers, std::move(studies), c.seed, log, c.serve.static_dir);
  }

  // Per-reader order: all montages sorted by id, then a seeded shuffle.
  std::vector<std::string> queue(const std::string& reader) const {
    std::vector<std::string> ids;
    for (const auto& [id, m] : montages_) ids.push_back(id);
    detail::SplitMix64 rng(detail::derive_seed(seed_, detail::fnv1a64(reader)));
    detail::shuffle(std::span(ids), rng);
    return ids;
  }

  bool has_reader(const std::string& r) const { return readers_.count(r) > 0; }
  const ReaderMontage* montage(const std::string& id) const {
    auto it = montages_.find(id);
    return it == montages_.end() ? nullptr : &it->second;
  }

  // Throws std::invalid_argument (-> 400) or std::out_of_range (-> 404).
  AnnotationRecord submit(const nlohmann::json& body) {
    if (!body.is_object()) throw std::invalid_argument("body must be a JSON object");
    for (const char* k : {"reader_id", "montage_id", "cells"})
      if (!body.contains(k)) throw std::invalid_argument(std::string("missing field '") + k + "'");
    if (!body["reader_id"].is_string() || !body["montage_id"].is_string() || !body["cells"].is_array())
      throw std::invalid_argument("reader_id and montage_id must be strings, cells an array");
    AnnotationRecord r;
    r.reader_id = body["reader_id"].get<std::string>();
    r.montage_id = body["montage_id"].get<std::string>();
    if (!has_reader(r.reader_id)) throw std::out_of_range("unknown reader '" + r.reader_id + "'");
    const ReaderMontage* m = montage(r.montage_id);
    if (!m) throw std::out_of_range("unknown montage '" + r.montage_id + "'");
    std::set<int> cells;
    for (const auto& v : body["cells"]) {
      if (!v.is_number_integer()) throw std::invalid_argument("cells must be integers");
      const int cell = v.get<int>();
      if (cell < 0 || cell >= m->grid * m->grid)
        throw std::invalid_argument("cell " + std::to_string(cell) + " outside a " + std::to_string(m->grid) + "x" +
                                    std::to_string(m->grid) + " grid");
      if (!cells.insert(cell).second) throw std::invalid_argument("duplicate cell " + std::to_string(cell));
    }
    r.cells.assign(cells.begin(), cells.end());
    r.timestamp_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    std::lock_guard lock(mu_);
    if (!log_path_.empty()) {
      std::ofstream out(log_path_, std::ios::app | std::ios::binary);
      out << to_json(r).dump() << "\n";
      out.flush();
      if (!out) throw std::runtime_error("cannot append to " + log_path_.string());
    }
    records_[{r.reader_id, r.montage_id}] = r;
    return r;
  }

  std::optional<AnnotationRecord> annotation(const std::string& reader, const std::string& montage_id) const {
    std::lock_guard lock(mu_);
    auto it = records_.find({reader, montage_id});
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  nlohmann::json queue_json(const std::string& reader) const {
    nlohmann::json items = nlohmann::json::array();
    std::size_t done = 0;
    for (const auto& id : queue(reader)) {
      const auto rec = annotation(reader, id);
      done += rec ? 1 : 0;
      nlohmann::json item = {{"id", id}, {"grid", montages_.at(id).grid}, {"done", rec.has_value()}};
      if (rec) item["cells"] = rec->cells;
      items.push_back(item);
    }
    return {{"reader_id", reader}, {"done", done}, {"total", montages_.size()}, {"montages", items}};
  }

  nlohmann::json arms_json() const {
    nlohmann::json arms = nlohmann::json::array();
    for (const auto& name : arm_names_) {
      std::size_t n = 0;
      for (const auto& [id, m] : montages_) n += m.arm == name ? 1 : 0;
      arms.push_back({{"name", name}, {"montages", n}});
    }
    return {{"arms", arms}};
  }

  // Readers who annotated every montage. Per arm: mean percentage of cells
  // marked (all records) and ICC(3,1) over marked-cell counts once at least
  // two readers have completed.
  nlohmann::json agreement_json() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> completed;
    for (const auto& reader : readers_) {
      bool all = true;
      for (const auto& [id, m] : montages_) all = all && records_.count({reader, id});
      if (all) completed.push_back(reader);
    }
    nlohmann::json arms = nlohmann::json::array();
    for (const auto& name : arm_names_) {
      std::vector<std::string> ids;
      for (const auto& [id, m] : montages_)
        if (m.arm == name) ids.push_back(id);
      double frac_sum = 0.0;
      std::size_t n_rec = 0;
      for (const auto& [key, rec] : records_) {
        const auto& m = montages_.at(key.second);
        if (m.arm != name) continue;
        frac_sum += static_cast<double>(rec.cells.size()) / static_cast<double>(m.grid * m.grid);
        ++n_rec;
      }
      nlohmann::json arm = {{"arm", name}, {"montages", ids.size()}, {"annotations", n_rec}};
      arm["mean_marked_percent"] = n_rec ? nlohmann::json(100.0 * frac_sum / static_cast<double>(n_rec)) : nlohmann::json(nullptr);
      arm["icc31"] = nullptr;
      if (completed.size() >= 2 && ids.size() >= 2) {
        std::vector<std::vector<double>> ratings;
        for (const auto& id : ids) {
          std::vector<double> row;
          for (const auto& reader : completed) row.push_back(static_cast<double>(records_.at({reader, id}).cells.size()));
          ratings.push_back(row);
        }
        if (const auto icc = icc31(ratings)) arm["icc31"] = *icc;
        else arm["icc31_note"] = "undefined: no variance in counts";
      }
      arms.push_back(arm);
    }
    return {{"readers_completed", completed}, {"arms", arms}};
  }

  // The service must outlive the server.
  void mount(httplib::Server& server) {
    auto json_reply = [](httplib::Response& res, const nlohmann::json& j, int status = 200) {
      res.status = status;
      res.set_content(j.dump(), "application/json");
    };
    server.Get("/api/arms", [this, json_reply](const httplib::Request&, httplib::Response& res) { json_reply(res, arms_json()); });
    server.Get(R"(/api/queue/([^/]+))", [this, json_reply](const httplib::Request& req, httplib::Response& res) {
      const std::string reader = req.matches[1];
      if (!has_reader(reader)) return json_reply(res, {{"error", "unknown reader '" + reader + "'"}}, 404);
      json_reply(res, queue_json(reader));
    });
    server.Get(R"(/api/montage/([^/]+)/meta)", [this, json_reply](const httplib::Request& req, httplib::Response& res) {
      const ReaderMontage* m = montage(req.matches[1]);
      if (!m) return json_reply(res, {{"error", "unknown montage"}}, 404);
      json_reply(res, {{"id", m->id}, {"grid", m->grid}, {"cells", m->grid * m->grid}});
    });
    server.Get(R"(/api/montage/([^/]+))", [this, json_reply](const httplib::Request& req, httplib::Response& res) {
      const ReaderMontage* m = montage(req.matches[1]);
      if (!m) return json_reply(res, {{"error", "unknown montage"}}, 404);
      res.set_content(read_text_file(m->png), "image/png");
    });
    server.Get(R"(/api/annotations/([^/]+)/([^/]+))", [this, json_reply](const httplib::Request& req, httplib::Response& res) {
      const std::string reader = req.matches[1], id = req.matches[2];
      if (!has_reader(reader) || !montage(id)) return json_reply(res, {{"error", "unknown reader or montage"}}, 404);
      const auto rec = annotation(reader, id);
      if (!rec) return json_reply(res, {{"error", "no annotation"}}, 404);
      json_reply(res, to_json(*rec));
    });
    server.Post("/api/annotations", [this, json_reply](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const std::exception&) {
        return json_reply(res, {{"error", "malformed JSON"}}, 400);
      }
      try {
        json_reply(res, to_json(submit(body)));
      } catch (const std::out_of_range& e) {
        json_reply(res, {{"error", e.what()}}, 404);
      } catch (const std::invalid_argument& e) {
        json_reply(res, {{"error", e.what()}}, 400);
      } catch (const nlohmann::json::exception& e) {
        json_reply(res, {{"error", e.what()}}, 400);
      }
    });
    server.Get("/api/agreement", [this, json_reply](const httplib::Request&, httplib::Response& res) { json_reply(res, agreement_json()); });
    if (!static_dir_.empty() && fs::is_directory(static_dir_)) {
      server.set_mount_point("/", static_dir_.string());
    } else {
      server.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content("<!doctype html><title>reader study</title><p>UI assets not installed; the JSON API is under "
                        "/api/.</p>",
                        "text/html");
      });
    }
  }

  const std::map<std::string, ReaderMontage>& montages() const { return montages_; }

 private:
  static std::string opaque_id(const std::string& arm, const std::string& study, const std::string& digest) {
    return detail::sha256_hex(arm + "\n" + study + "\n" + digest).substr(0, 16);
  }

  void replay() {
    std::ifstream in(log_path_);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      AnnotationRecord r{j.at("reader_id").get<std::string>(), j.at("montage_id").get<std::string>(),
                         j.at("cells").get<std::vector<int>>(), j.value("timestamp_ms", std::int64_t{0})};
      if (montage(r.montage_id) && has_reader(r.reader_id)) records_[{r.reader_id, r.montage_id}] = r;
    }
  }

  std::vector<std::string> arm_names_;
  std::set<std::string> readers_;
  std::uint64_t seed_;
  fs::path log_path_;
  fs::path static_dir_;
  std::map<std::string, ReaderMontage> montages_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, AnnotationRecord> records_;
};

}  // namespace mzs
