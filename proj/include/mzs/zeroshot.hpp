#pragma once

#include <json.hpp>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzs/embedder.hpp"
#include "mzs/patch_engine.hpp"
#include "mzs/prompt.hpp"

namespace mzs {

struct ZeroShotResult {
  std::string study_id;
  std::string disease;
  double p_pos = 0.0;
  std::vector<std::string> models;  // backend names that contributed
};

// p_pos = softmax over scale * cos(image, "X") and scale * cos(image, "no X").
inline ZeroShotResult classify(const EmbedderBackend& backend, const Image2D& montage, const PromptPair& prompts,
                               double logit_scale = kDefaultLogitScale, const std::string& study_id = {}) {
  if (montage.height < 1 || montage.width < 1) throw std::invalid_argument("classify: empty montage image");
  const Embedding img = embed_image_resized(backend, montage);
  const double p = prompt_probability(img, embed_prompts(backend, prompts), logit_scale);
  return {study_id, prompts.positive, p, {backend.info().name}};
}

inline ZeroShotResult classify(const EmbedderBackend& backend, const Montage& montage, const PromptPair& prompts,
                               double logit_scale = kDefaultLogitScale, const std::string& study_id = {}) {
  return classify(backend, montage.image, prompts, logit_scale, study_id);
}

// Mean of member probabilities.
inline ZeroShotResult classify_ensemble(const std::vector<std::shared_ptr<const EmbedderBackend>>& members,
                                        const Image2D& montage, const PromptPair& prompts,
                                        double logit_scale = kDefaultLogitScale, const std::string& study_id = {}) {
  if (members.empty()) throw std::invalid_argument("classify_ensemble: no members");
  ZeroShotResult out{study_id, prompts.positive, 0.0, {}};
  for (const auto& m : members) {
    const auto r = classify(*m, montage, prompts, logit_scale, study_id);
    out.p_pos += r.p_pos;
    out.models.push_back(r.models.front());
  }
  out.p_pos /= static_cast<double>(members.size());
  return out;
}

inline nlohmann::json to_json(const ZeroShotResult& r, const std::string& config_digest) {
  return {{"study_id", r.study_id},
          {"disease", r.disease},
          {"p_pos", r.p_pos},
          {"models", r.models},
          {"config_digest", config_digest}};
}

}  // namespace mzs
