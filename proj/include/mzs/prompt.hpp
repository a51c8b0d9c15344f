#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mzs/report_parser.hpp"

namespace mzs {

struct PromptPair {
  std::string positive;
  std::string negative;

  bool operator==(const PromptPair&) const = default;
};

// ("X", "no X") for a disease name X.
inline PromptPair build_prompt_pair(std::string_view disease_name) {
  const auto name = detail::trim(disease_name);
  if (name.empty()) throw std::invalid_argument("build_prompt_pair: empty disease name");
  return PromptPair{std::string(name), "no " + std::string(name)};
}

// Probability of the positive class from two logits, max-subtracted so
// large logits do not overflow.
inline double pn_softmax(double logit_pos, double logit_neg) {
  if (!std::isfinite(logit_pos) || !std::isfinite(logit_neg))
    throw std::invalid_argument("pn_softmax: non-finite logit");
  const double m = std::max(logit_pos, logit_neg);
  const double ep = std::exp(logit_pos - m);
  const double en = std::exp(logit_neg - m);
  return ep / (ep + en);
}

inline constexpr double kDefaultLogitScale = 100.0;

}  // namespace mzs
