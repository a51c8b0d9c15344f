#pragma once

// Domain-adaptive contrastive pretraining over frozen backbone embeddings.
//
// Trainable parameters are two d x d projection heads (image, text), both
// initialized to identity, and a log logit scale initialized to ln(1/0.07).
// Projected rows are L2-normalized on every forward pass and scored with a
// symmetric InfoNCE loss; gradients are analytic.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzs/detail/hash.hpp"
#include "mzs/detail/rng.hpp"
#include "mzs/embedder.hpp"
#include "mzs/report_parser.hpp"

namespace mzs {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DaptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const double kInitLogScale = std::log(1.0 / 0.07);
inline const double kMaxLogScale = std::log(100.0);
inline constexpr double kExplodingLoss = 1e6;

// ---- loss -----------------------------------------------------------------

template <class T>
struct InfoNceResult {
  T loss{};
  Matrix<T> d_img;  // dL/d(img rows)
  Matrix<T> d_txt;  // dL/d(txt rows)
  T d_log_t{};
};

// S = exp(log_t) * img * txt^T; loss = (mean row CE + mean column CE) / 2,
// both against the diagonal. img and txt are B x d with unit rows.
template <class T>
InfoNceResult<T> infonce_with_grad(const Matrix<T>& img, const Matrix<T>& txt, T log_t) {
  const Eigen::Index b = img.rows();
  if (b < 1) throw DaptError("infonce: empty batch");
  if (txt.rows() != b || txt.cols() != img.cols()) throw DaptError("infonce: image/text batch shapes differ");
  const T scale = std::exp(log_t);
  const Matrix<T> s = scale * (img * txt.transpose());
  for (Eigen::Index i = 0; i < b; ++i)
    if (!s.row(i).allFinite()) throw DaptError("infonce: non-finite similarity for pair " + std::to_string(i));

  Matrix<T> p_row(b, b), p_col(b, b);
  T row_ce = 0, col_ce = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const T m = s.row(i).maxCoeff();
    T z = 0;
    for (Eigen::Index j = 0; j < b; ++j) z += (p_row(i, j) = std::exp(s(i, j) - m));
    p_row.row(i) /= z;
    row_ce += m + std::log(z) - s(i, i);
  }
  for (Eigen::Index j = 0; j < b; ++j) {
    const T m = s.col(j).maxCoeff();
    T z = 0;
    for (Eigen::Index i = 0; i < b; ++i) z += (p_col(i, j) = std::exp(s(i, j) - m));
    p_col.col(j) /= z;
    col_ce += m + std::log(z) - s(j, j);
  }

  InfoNceResult<T> r;
  r.loss = T(0.5) * (row_ce + col_ce) / static_cast<T>(b);
  if (!std::isfinite(r.loss)) throw DaptError("infonce: non-finite loss");
  Matrix<T> g = p_row + p_col;
  g.diagonal().array() -= T(2);
  g *= T(0.5) / static_cast<T>(b);
  r.d_img = scale * (g * txt);
  r.d_txt = scale * (g.transpose() * img);
  r.d_log_t = g.cwiseProduct(s).sum();
  return r;
}

template <class T>
T infonce_loss(const Matrix<T>& img, const Matrix<T>& txt, T log_t) {
  return infonce_with_grad(img, txt, log_t).loss;
}

template <class T>
struct ProjectionHeads {
  Matrix<T> w_img;  // d x d
  Matrix<T> w_txt;  // d x d
  T log_t{};

  static ProjectionHeads identity(int d) {
    return {Matrix<T>::Identity(d, d), Matrix<T>::Identity(d, d), static_cast<T>(kInitLogScale)};
  }
};

template <class T>
struct HeadGradients {
  T loss{};
  Matrix<T> d_w_img, d_w_txt;
  T d_log_t{};
};

namespace detail {

template <class T>
struct Normalized {
  Matrix<T> unit;
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms;
};

template <class T>
Normalized<T> normalize_rows(const Matrix<T>& a) {
  Normalized<T> out{a, a.rowwise().norm()};
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (!(out.norms(i) > T(0)) || !std::isfinite(out.norms(i)))
      throw DaptError("projection produced a zero or non-finite row for pair " + std::to_string(i));
    out.unit.row(i) /= out.norms(i);
  }
  return out;
}

// Backprop through u = a / |a|.
template <class T>
Matrix<T> normalize_backward(const Normalized<T>& n, const Matrix<T>& d_unit) {
  Matrix<T> d_a(d_unit.rows(), d_unit.cols());
  for (Eigen::Index i = 0; i < d_unit.rows(); ++i) {
    const T proj = d_unit.row(i).dot(n.unit.row(i));
    d_a.row(i) = (d_unit.row(i) - proj * n.unit.row(i)) / n.norms(i);
  }
  return d_a;
}

}  // namespace detail

// x, y: B x d frozen embeddings (rows). Returns loss and parameter gradients.
template <class T>
HeadGradients<T> heads_loss_and_grad(const ProjectionHeads<T>& p, const Matrix<T>& x, const Matrix<T>& y) {
  const auto a = detail::normalize_rows<T>(x * p.w_img.transpose());
  const auto b = detail::normalize_rows<T>(y * p.w_txt.transpose());
  const auto g = infonce_with_grad<T>(a.unit, b.unit, p.log_t);
  HeadGradients<T> out;
  out.loss = g.loss;
  out.d_w_img = detail::normalize_backward(a, g.d_img).transpose() * x;
  out.d_w_txt = detail::normalize_backward(b, g.d_txt).transpose() * y;
  out.d_log_t = g.d_log_t;
  return out;
}

template <class T>
T heads_loss(const ProjectionHeads<T>& p, const Matrix<T>& x, const Matrix<T>& y) {
  const auto a = detail::normalize_rows<T>(x * p.w_img.transpose());
  const auto b = detail::normalize_rows<T>(y * p.w_txt.transpose());
  return infonce_loss<T>(a.unit, b.unit, p.log_t);
}

// ---- optimizer --------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct TrainState {
  ProjectionHeads<float> params;
  Matrix<float> m_img, v_img, m_txt, v_txt;
  double m_log_t = 0.0, v_log_t = 0.0;
  std::int64_t step = 0;

  static TrainState initial(int d) {
    TrainState s;
    s.params = ProjectionHeads<float>::identity(d);
    s.m_img = s.v_img = s.m_txt = s.v_txt = Matrix<float>::Zero(d, d);
    return s;
  }
};

// One Adam update on one batch. Returns the pre-update batch loss.
inline double train_step(TrainState& state, const Matrix<float>& x, const Matrix<float>& y, double lr,
                         const AdamConfig& adam = {}) {
  const auto g = heads_loss_and_grad<float>(state.params, x, y);
  if (!std::isfinite(g.loss) || g.loss > kExplodingLoss)
    throw DaptError("training diverged at step " + std::to_string(state.step + 1) + ": loss " +
                    std::to_string(g.loss) + ", log_t " + std::to_string(state.params.log_t) + ", lr " +
                    std::to_string(lr));
  ++state.step;
  if (lr == 0.0) return g.loss;  // frozen: moments untouched too
  const double t = static_cast<double>(state.step);
  const float b1 = static_cast<float>(adam.beta1), b2 = static_cast<float>(adam.beta2);
  const float c1 = static_cast<float>(1.0 - std::pow(adam.beta1, t));
  const float c2 = static_cast<float>(1.0 - std::pow(adam.beta2, t));
  const float step_lr = static_cast<float>(lr), eps = static_cast<float>(adam.eps);

  auto update = [&](Matrix<float>& w, Matrix<float>& m, Matrix<float>& v, const Matrix<float>& grad) {
    m = b1 * m + (1.0f - b1) * grad;
    v = b2 * v + (1.0f - b2) * grad.cwiseProduct(grad);
    w.array() -= step_lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  update(state.params.w_img, state.m_img, state.v_img, g.d_w_img);
  update(state.params.w_txt, state.m_txt, state.v_txt, g.d_w_txt);

  state.m_log_t = adam.beta1 * state.m_log_t + (1.0 - adam.beta1) * g.d_log_t;
  state.v_log_t = adam.beta2 * state.v_log_t + (1.0 - adam.beta2) * g.d_log_t * g.d_log_t;
  const double upd = lr * (state.m_log_t / (1.0 - std::pow(adam.beta1, t))) /
                     (std::sqrt(state.v_log_t / (1.0 - std::pow(adam.beta2, t))) + adam.eps);
  // Logit scale capped at 100, as in CLIP training.
  state.params.log_t = static_cast<float>(std::min<double>(state.params.log_t - upd, kMaxLogScale));
  return g.loss;
}

// ---- data -----------------------------------------------------------------

struct TrainingPair {
  std::vector<float> image;  // frozen backbone embedding of the montage
  std::vector<float> text;   // frozen backbone embedding of the report text
  std::string study_id;
};

struct PairDataset {
  std::vector<TrainingPair> pairs;
};

struct DatasetSplit {
  std::vector<std::size_t> train;    // pair indices
  std::vector<std::size_t> holdout;  // pair indices
  std::vector<std::string> holdout_studies;
};

// Study-level split: sorted unique study ids, seeded shuffle, the first
// max(1, round(fraction * n_studies)) studies go to holdout.
inline DatasetSplit split_by_study(const PairDataset& data, double holdout_fraction, std::uint64_t seed) {
  std::set<std::string> unique;
  for (const auto& p : data.pairs) unique.insert(p.study_id);
  std::vector<std::string> studies(unique.begin(), unique.end());
  detail::SplitMix64 rng(detail::derive_seed(seed, 0x5E11));
  detail::shuffle(std::span(studies), rng);
  const auto n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(holdout_fraction * studies.size())));
  if (studies.size() < n_hold + 2)
    throw DaptError("need at least 2 training studies and 1 holdout study, have " + std::to_string(studies.size()) +
                    " studies");
  DatasetSplit split;
  split.holdout_studies.assign(studies.begin(), studies.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::sort(split.holdout_studies.begin(), split.holdout_studies.end());
  const std::set<std::string> hold(split.holdout_studies.begin(), split.holdout_studies.end());
  for (std::size_t i = 0; i < data.pairs.size(); ++i)
    (hold.count(data.pairs[i].study_id) ? split.holdout : split.train).push_back(i);
  return split;
}

inline void gather_batch(const PairDataset& data, std::span<const std::size_t> idx, Matrix<float>& x,
                         Matrix<float>& y) {
  const auto d = static_cast<Eigen::Index>(data.pairs.at(idx[0]).image.size());
  x.resize(static_cast<Eigen::Index>(idx.size()), d);
  y.resize(static_cast<Eigen::Index>(idx.size()), d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& p = data.pairs[idx[r]];
    if (static_cast<Eigen::Index>(p.image.size()) != d || static_cast<Eigen::Index>(p.text.size()) != d)
      throw DaptError("pair " + std::to_string(idx[r]) + " has inconsistent embedding dims");
    x.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const Eigen::RowVectorXf>(p.image.data(), d);
    y.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const Eigen::RowVectorXf>(p.text.data(), d);
  }
}

// ---- schedule -------------------------------------------------------------

struct DaptConfig {
  double lr = 1e-4;
  int batch_size = 64;
  int max_epochs = 10;
  int patience_steps = 1000;
  int checkpoint_interval = 100;
  double holdout_fraction = 0.10;
  std::uint64_t seed = 0;
  TextMode text_mode = TextMode::impression;
  std::string montage_mode = "retrieved";
  std::string upstream;  // digest of the data this run trains on

  void validate() const {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw std::invalid_argument("holdout fraction must be in (0, 1)");
    if (patience_steps < 1 || checkpoint_interval < 1) throw std::invalid_argument("patience and interval must be >= 1");
    if (batch_size < 1 || max_epochs < 1) throw std::invalid_argument("batch size and epochs must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"patience_steps", patience_steps},
            {"checkpoint_interval", checkpoint_interval},
            {"holdout_fraction", holdout_fraction},
            {"seed", seed},
            {"text_mode", to_string(text_mode)},
            {"montage_mode", montage_mode},
            {"upstream", upstream}};
  }
  std::string digest() const { return detail::sha256_hex(to_json().dump()); }
};

struct Checkpoint {
  std::int64_t step = 0;
  Matrix<float> w_img, w_txt;
  float log_t = 0.0f;
  double val_loss = 0.0;
  std::string config_digest;

  int dim() const { return static_cast<int>(w_img.rows()); }
  ProjectionHeads<float> heads() const { return {w_img, w_txt, log_t}; }
};

struct TrainLogEntry {
  std::int64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> holdout_loss;
};

struct CheckpointSet {
  std::vector<Checkpoint> checkpoints;
  std::size_t best = 0;  // index of the lowest validation loss (earliest on ties)
  std::vector<TrainLogEntry> log;
  std::int64_t steps = 0;
  bool early_stopped = false;
  double lr = 0.0;

  const Checkpoint& best_checkpoint() const { return checkpoints.at(best); }
};

inline double holdout_loss(const ProjectionHeads<float>& p, const PairDataset& data,
                           const std::vector<std::size_t>& holdout, int batch_size) {
  Matrix<float> x, y;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t start = 0; start < holdout.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(batch_size), holdout.size() - start);
    gather_batch(data, std::span(holdout).subspan(start, len), x, y);
    total += static_cast<double>(heads_loss<float>(p, x, y)) * static_cast<double>(len);
    n += len;
  }
  return total / static_cast<double>(n);
}

// Up to max_epochs passes in seeded order. Every checkpoint_interval steps the
// holdout loss is measured and a checkpoint saved; training stops once
// patience_steps have passed since the last strict holdout improvement.
inline CheckpointSet train(const DaptConfig& config, const PairDataset& data) {
  config.validate();
  if (data.pairs.empty()) throw DaptError("empty DAPT dataset");
  const DatasetSplit split = split_by_study(data, config.holdout_fraction, config.seed);
  const int d = static_cast<int>(data.pairs.front().image.size());
  const std::string digest = config.digest();

  TrainState state = TrainState::initial(d);
  CheckpointSet out;
  out.lr = config.lr;
  double best_val = std::numeric_limits<double>::infinity();
  std::int64_t last_improvement = 0;
  detail::SplitMix64 rng(detail::derive_seed(config.seed, 0xE90C));
  std::vector<std::size_t> order = split.train;
  Matrix<float> x, y;

  for (int epoch = 0; epoch < config.max_epochs && !out.early_stopped; ++epoch) {
    detail::shuffle(std::span(order), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), order.size() - start);
      gather_batch(data, std::span(order).subspan(start, len), x, y);
      const double loss = train_step(state, x, y, config.lr);
      out.log.push_back({state.step, loss, std::nullopt});

      if (state.step % config.checkpoint_interval == 0) {
        const double val = holdout_loss(state.params, data, split.holdout, config.batch_size);
        out.log.back().holdout_loss = val;
        out.checkpoints.push_back(
            {state.step, state.params.w_img, state.params.w_txt, state.params.log_t, val, digest});
        if (val < best_val) {
          best_val = val;
          out.best = out.checkpoints.size() - 1;
          last_improvement = state.step;
        }
        if (state.step - last_improvement >= config.patience_steps) {
          out.early_stopped = true;
          break;
        }
      }
    }
  }
  out.steps = state.step;
  if (out.checkpoints.empty())
    throw DaptError("training ran " + std::to_string(state.step) + " steps, fewer than the checkpoint interval " +
                    std::to_string(config.checkpoint_interval) + "; use a smaller batch or more pairs");
  return out;
}

// Five learning rates spanning [1e-5, 1e-3], half a decade apart.
inline constexpr std::array<double, 5> kLrGrid = {1e-5, 3.16e-5, 1e-4, 3.16e-4, 1e-3};

struct LrTrial {
  double lr = 0.0;
  std::optional<double> best_val_loss;
  std::string error;
};

struct LrSearchResult {
  std::vector<LrTrial> trials;
  double best_lr = 0.0;
  CheckpointSet best_run;
};

inline LrSearchResult lr_search(const DaptConfig& base, const PairDataset& data) {
  LrSearchResult out;
  std::optional<std::size_t> best;
  for (double lr : kLrGrid) {
    DaptConfig cfg = base;
    cfg.lr = lr;
    LrTrial trial{lr, std::nullopt, {}};
    try {
      CheckpointSet run = train(cfg, data);
      trial.best_val_loss = run.best_checkpoint().val_loss;
      if (!best || *trial.best_val_loss < *out.trials[*best].best_val_loss) {
        best = out.trials.size();
        out.best_run = std::move(run);
      }
    } catch (const std::exception& e) {
      trial.error = e.what();
    }
    out.trials.push_back(std::move(trial));
  }
  if (!best) throw DaptError("learning-rate search failed for every value; first error: " + out.trials.front().error);
  out.best_lr = out.trials[*best].lr;
  return out;
}

struct TopCheckpoints {
  std::vector<Checkpoint> checkpoints;  // ascending validation loss
  bool truncated = false;               // fewer available than requested
};

inline TopCheckpoints select_top_checkpoints(const CheckpointSet& set, std::size_t n = 5) {
  if (set.checkpoints.empty()) throw DaptError("select_top_checkpoints: empty checkpoint set");
  std::vector<std::size_t> idx(set.checkpoints.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = set.checkpoints[a];
    const auto& cb = set.checkpoints[b];
    if (ca.val_loss != cb.val_loss) return ca.val_loss < cb.val_loss;
    return ca.step < cb.step;
  });
  TopCheckpoints out;
  out.truncated = n > idx.size();
  for (std::size_t i = 0; i < std::min(n, idx.size()); ++i) out.checkpoints.push_back(set.checkpoints[idx[i]]);
  return out;
}

// ---- persistence ------------------------------------------------------------

// File = JSON header line {step, d, log_t, val_loss, config_digest} + '\n' +
// image head then text head, each d*d float32 LE row-major.
inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const nlohmann::json header = {{"step", c.step},
                                 {"d", c.dim()},
                                 {"log_t", c.log_t},
                                 {"val_loss", c.val_loss},
                                 {"config_digest", c.config_digest}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DaptError("cannot write checkpoint " + path.string());
  const std::string line = header.dump() + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  for (const auto* w : {&c.w_img, &c.w_txt})
    out.write(reinterpret_cast<const char*>(w->data()), static_cast<std::streamsize>(w->size() * sizeof(float)));
  if (!out) throw DaptError("write failed for checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DaptError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = nlohmann::json::parse(line);
  Checkpoint c;
  c.step = header.at("step").get<std::int64_t>();
  const int d = header.at("d").get<int>();
  c.log_t = header.at("log_t").get<float>();
  c.val_loss = header.at("val_loss").get<double>();
  c.config_digest = header.at("config_digest").get<std::string>();
  for (auto* w : {&c.w_img, &c.w_txt}) {
    w->resize(d, d);
    if (!in.read(reinterpret_cast<char*>(w->data()), static_cast<std::streamsize>(w->size() * sizeof(float))))
      throw DaptError("checkpoint " + path.string() + " is truncated");
    if (!w->allFinite()) throw DaptError("checkpoint " + path.string() + " contains non-finite weights");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DaptError("checkpoint " + path.string() + " has trailing bytes");
  return c;
}

// A backend whose embeddings pass through a checkpoint's projection heads.
class AdaptedEmbedder final : public EmbedderBackend {
 public:
  AdaptedEmbedder(std::shared_ptr<const EmbedderBackend> base, Checkpoint ckpt)
      : base_(std::move(base)), ckpt_(std::move(ckpt)), info_(base_->info()) {
    if (ckpt_.dim() != info_.dim)
      throw DaptError("checkpoint dim " + std::to_string(ckpt_.dim()) + " does not match backend dim " +
                      std::to_string(info_.dim));
    info_.name += "+dapt@" + std::to_string(ckpt_.step) + "-" + ckpt_.config_digest.substr(0, 8);
  }

  const BackendInfo& info() const override { return info_; }
  std::vector<float> raw_image(const Image2D& img) const override {
    return apply(ckpt_.w_img, embed_image(*base_, img));
  }
  std::vector<float> raw_text(std::string_view t) const override { return apply(ckpt_.w_txt, embed_text(*base_, t)); }

  const Checkpoint& checkpoint() const { return ckpt_; }

 private:
  static std::vector<float> apply(const Matrix<float>& w, const Embedding& e) {
    const Eigen::Map<const Eigen::VectorXf> v(e.values.data(), static_cast<Eigen::Index>(e.dim()));
    const Eigen::VectorXf out = w * v;
    return {out.data(), out.data() + out.size()};
  }

  std::shared_ptr<const EmbedderBackend> base_;
  Checkpoint ckpt_;
  BackendInfo info_;
};

}  // namespace mzs
