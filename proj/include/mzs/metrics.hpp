#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <json.hpp>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mzs {

namespace detail {

inline void check_labeled(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  if (scores.empty()) throw std::invalid_argument("no scores");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("non-finite score");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument("labels must be 0 or 1");
}

// Indices sorted by descending score (stable).
inline std::vector<std::size_t> order_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

// Mann-Whitney U / (n+ n-) using average ranks for ties.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_labeled(scores, labels);
  const auto idx = detail::order_desc(scores);
  const std::size_t n = idx.size();
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc needs both classes");
  // Ascending rank of position i in descending order is n - i.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = static_cast<double>(n - i + n - j + 1) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]] == 1) rank_sum += avg_rank;
    i = j;
  }
  const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Average precision: sum over descending tie groups of (R_k - R_{k-1}) * P_k.
inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_labeled(scores, labels);
  const auto idx = detail::order_desc(scores);
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (n_pos == 0) throw std::invalid_argument("auprc needs at least one positive");
  std::size_t tp = 0, fp = 0;
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? tp : fp)++;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

// Predictions are score >= threshold. 0 when 2TP + FP + FN = 0.
inline double f1_at(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5) {
  detail::check_labeled(scores, labels);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i] == 1) ++tp;
    else if (pred) ++fp;
    else if (labels[i] == 1) ++fn;
  }
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

// ratings[i][j] = rating of item i by rater j. ICC(3,1), two-way mixed,
// consistency, single measure. nullopt when MSR + (k-1) MSE = 0.
inline std::optional<double> icc31(const std::vector<std::vector<double>>& ratings) {
  const std::size_t n = ratings.size();
  if (n < 2) throw std::invalid_argument("icc31 needs at least 2 items");
  const std::size_t k = ratings.front().size();
  if (k < 2) throw std::invalid_argument("icc31 needs at least 2 raters");
  for (const auto& row : ratings) {
    if (row.size() != k) throw std::invalid_argument("icc31: ragged ratings matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument("icc31: non-finite rating");
  }
  std::vector<double> item_mean(n, 0.0), rater_mean(k, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      item_mean[i] += ratings[i][j];
      rater_mean[j] += ratings[i][j];
      grand += ratings[i][j];
    }
  for (auto& m : item_mean) m /= static_cast<double>(k);
  for (auto& m : rater_mean) m /= static_cast<double>(n);
  grand /= static_cast<double>(n * k);

  double ss_rows = 0.0, ss_err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ss_rows += (item_mean[i] - grand) * (item_mean[i] - grand);
    for (std::size_t j = 0; j < k; ++j) {
      const double r = ratings[i][j] - item_mean[i] - rater_mean[j] + grand;
      ss_err += r * r;
    }
  }
  const double kd = static_cast<double>(k);
  const double msr = kd * ss_rows / static_cast<double>(n - 1);
  const double mse = ss_err / (static_cast<double>(n - 1) * (kd - 1.0));
  const double denom = msr + (kd - 1.0) * mse;
  if (!(denom > 0.0)) return std::nullopt;
  return (msr - mse) / denom;
}

struct ClassificationReport {
  std::size_t n = 0, n_pos = 0;
  double threshold = 0.5;
  std::optional<double> auroc, auprc;  // absent when a class is missing
  double f1 = 0.0;
};

inline ClassificationReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                                            double threshold = 0.5) {
  detail::check_labeled(scores, labels);
  ClassificationReport r;
  r.n = scores.size();
  r.n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  r.threshold = threshold;
  if (r.n_pos > 0 && r.n_pos < r.n) r.auroc = auroc(scores, labels);
  if (r.n_pos > 0) r.auprc = auprc(scores, labels);
  r.f1 = f1_at(scores, labels, threshold);
  return r;
}

inline nlohmann::json to_json(const ClassificationReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"n", r.n},   {"n_pos", r.n_pos}, {"threshold", r.threshold}, {"auroc", opt(r.auroc)},
          {"auprc", opt(r.auprc)}, {"f1", r.f1}};
}

}  // namespace mzs
