#pragma once

#include "lift/checkpoint.hpp"
#include "lift/head.hpp"
#include "lift/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lift {

struct LossWeights {
  double keypoints = 1.0;
  double twists = 1.0;
  double beta = 1.0;
};

struct TrainConfig {
  double max_lr = 5e-4;
  std::int64_t warmup_steps = 4000;
  std::int64_t epochs = 200;
  std::int64_t batch_size = 64;
  std::int64_t avg_last_epochs = 10;
  std::uint64_t seed = 0;
  std::int64_t min_keep_patches = 0;  // 0: n_patches / 4
  bool augment = true;
  std::int64_t max_steps = 0;  // 0: no cap
  LossWeights weights;
  std::string checkpoint_dir;  // empty: keep checkpoints in memory only
  bool keep_all_checkpoints = false;
  bool log_wall_time = false;  // false writes 0 in the wall_ms column

  std::int64_t resolved_min_keep(Index n_patches) const {
    return min_keep_patches > 0 ? min_keep_patches : std::max<std::int64_t>(1, n_patches / 4);
  }

  void validate(Index n_patches) const {
    if (!(max_lr > 0.0)) throw ConfigError("train.max_lr", "must be positive");
    if (warmup_steps < 1) throw ConfigError("train.warmup_steps", "must be >= 1");
    if (epochs < 0) throw ConfigError("train.epochs", "must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (avg_last_epochs < 1) throw ConfigError("train.avg_last_epochs", "must be >= 1");
    if (max_steps < 0) throw ConfigError("train.max_steps", "must be >= 0");
    const auto k = resolved_min_keep(n_patches);
    if (k < 1 || k > n_patches) {
      throw ConfigError("train.min_keep_patches", "must lie in [1, n_patches]");
    }
  }
};

template <typename S>
struct Sample {
  Tensor<S> features;
  PoseOutput<S> target;
};

/// Retains a random subset of patch rows: draws k uniformly from
/// [min_keep, n_patches], then k distinct indices uniformly without
/// replacement. Returned sorted ascending.
inline std::vector<Index> sample_patch_subset(Index n_patches, std::int64_t min_keep, Rng& rng) {
  min_keep = std::clamp<std::int64_t>(min_keep, 1, n_patches);
  std::uniform_int_distribution<std::int64_t> count(min_keep, n_patches);
  const auto k = count(rng);
  std::vector<Index> all(static_cast<std::size_t>(n_patches));
  std::iota(all.begin(), all.end(), Index{0});
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(k));
  std::sample(all.begin(), all.end(), std::back_inserter(out), k, rng);
  return out;
}

/// w_kpt * mean|dk| + w_twist * mean|dt| + w_beta * mean(db^2).
template <typename S>
Tensor<S> loss(const PoseOutput<S>& pred, const PoseOutput<S>& target, const LossWeights& w = {}) {
  Tensor<S> kpt = mean(abs(pred.keypoints - target.keypoints));
  Tensor<S> twist = mean(abs(pred.twists - target.twists));
  Tensor<S> beta = mean(square(pred.beta - target.beta));
  return scale(kpt, static_cast<S>(w.keypoints)) + scale(twist, static_cast<S>(w.twists)) +
         scale(beta, static_cast<S>(w.beta));
}

/// Elementwise arithmetic mean of parameter sets with identical structure,
/// accumulated as a running mean so identical inputs reproduce exactly.
template <typename S>
HeadParams<S> average_checkpoints(const std::vector<HeadParams<S>>& sets) {
  if (sets.empty()) throw std::invalid_argument("average_checkpoints: no parameter sets");
  HeadParams<S> out = sets.front().clone();
  auto acc = out.named_parameters();
  for (std::size_t k = 1; k < sets.size(); ++k) {
    const auto other = sets[k].named_parameters();
    if (other.size() != acc.size()) {
      throw std::invalid_argument("average_checkpoints: parameter set " + std::to_string(k) +
                                  " has a different structure");
    }
    const S inv = S(1) / static_cast<S>(k + 1);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      if (other[i].name != acc[i].name || other[i].tensor.rows() != acc[i].tensor.rows() ||
          other[i].tensor.cols() != acc[i].tensor.cols()) {
        throw std::invalid_argument("average_checkpoints: tensor '" + other[i].name +
                                    "' does not match '" + acc[i].name + "'");
      }
      Matrix<S>& m = acc[i].tensor.mutable_value();
      m += (other[i].tensor.value() - m) * inv;
    }
  }
  return out;
}

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

/// Tab-separated metrics: step, epoch, lr, loss, wall_ms.
inline void write_metrics(std::ostream& os, const std::vector<StepRecord>& log) {
  for (const auto& r : log) {
    os << r.step << '\t' << r.epoch << '\t' << std::setprecision(9) << r.lr << '\t'
       << std::setprecision(9) << r.loss << '\t' << std::fixed << std::setprecision(3) << r.wall_ms
       << std::defaultfloat << '\n';
  }
}

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::int64_t step, double lr, double loss)
      : std::runtime_error(describe(step, lr, loss)), step_(step), lr_(lr), loss_(loss) {}
  std::int64_t step() const { return step_; }
  double lr() const { return lr_; }
  double loss() const { return loss_; }

 private:
  static std::string describe(std::int64_t step, double lr, double loss) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << " (lr " << lr << ", loss " << loss << ")";
    return os.str();
  }
  std::int64_t step_;
  double lr_;
  double loss_;
};

template <typename S>
struct TrainResult {
  HeadParams<S> final_params;
  HeadParams<S> averaged;
  AdamState<S> optimizer;
  std::vector<StepRecord> log;
  std::vector<double> epoch_loss;  // mean step loss per epoch
};

/// Mean training loss of one batch under an active record.
template <typename S>
Tensor<S> batch_loss(const HeadParams<S>& params, const std::vector<const Sample<S>*>& batch,
                     const ForwardOptions& opts, const LossWeights& w) {
  Tensor<S> total;
  for (const Sample<S>* s : batch) {
    Tensor<S> l = loss(forward(params, s->features, opts), s->target, w);
    total = total.defined() ? total + l : l;
  }
  return scale(total, S(1) / static_cast<S>(batch.size()));
}

/// Shuffle, batch, augment, forward, loss, backward, schedule, Adam; one
/// checkpoint per epoch; the returned `averaged` model is the mean of the last
/// avg_last_epochs epoch checkpoints.
template <typename S>
TrainResult<S> train(const HeadParams<S>& initial, const std::vector<Sample<S>>& dataset,
                     const TrainConfig& cfg,
                     const std::function<void(const StepRecord&)>& on_step = {}) {
  const HeadConfig& hc = initial.config;
  cfg.validate(hc.n_patches);
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");

  TrainResult<S> result{initial.clone(), initial.clone(), {}, {}, {}};
  HeadParams<S>& params = result.final_params;
  auto named = params.named_parameters();
  Rng rng(cfg.seed);
  std::deque<HeadParams<S>> window;
  std::deque<std::filesystem::path> window_files;
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto start = std::chrono::steady_clock::now();
  const auto min_keep = cfg.resolved_min_keep(hc.n_patches);
  std::int64_t step = 0;
  bool capped = false;

  for (std::int64_t epoch = 1; epoch <= cfg.epochs && !capped; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    std::int64_t epoch_steps = 0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample<S>*> batch;
      for (std::size_t i = first; i < last; ++i) batch.push_back(&dataset[order[i]]);

      std::vector<Index> subset;
      ForwardOptions opts{true, &rng, nullptr};
      if (cfg.augment) {
        subset = sample_patch_subset(hc.n_patches, min_keep, rng);
        opts.patch_subset = &subset;
      }

      ++step;
      const double lr = lr_at(step, cfg.max_lr, cfg.warmup_steps);
      double value = 0.0;
      {
        Tape<S> tape;
        Tensor<S> l = batch_loss(params, batch, opts, cfg.weights);
        value = static_cast<double>(l.item());
        if (!std::isfinite(value)) throw NonFiniteLossError(step, lr, value);
        backward(l, tape);
      }
      adam_step(named, result.optimizer, lr);

      StepRecord rec{step, epoch, lr, value, 0.0};
      if (cfg.log_wall_time) {
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      }
      result.log.push_back(rec);
      if (on_step) on_step(rec);
      epoch_sum += value;
      ++epoch_steps;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) {
        capped = true;
        break;
      }
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));

    window.push_back(params.clone());
    if (!cfg.checkpoint_dir.empty()) {
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
      const auto path = std::filesystem::path(cfg.checkpoint_dir) / name.str();
      save_checkpoint(params, &result.optimizer, path);
      window_files.push_back(path);
    }
    if (static_cast<std::int64_t>(window.size()) > cfg.avg_last_epochs) window.pop_front();
    if (static_cast<std::int64_t>(window_files.size()) > cfg.avg_last_epochs) {
      if (!cfg.keep_all_checkpoints) std::filesystem::remove(window_files.front());
      window_files.pop_front();
    }
  }

  if (!window.empty()) {
    result.averaged = average_checkpoints(std::vector<HeadParams<S>>(window.begin(), window.end()));
  }
  if (!cfg.checkpoint_dir.empty() && !window.empty()) {
    save_checkpoint(result.averaged, static_cast<const AdamState<S>*>(nullptr),
                    std::filesystem::path(cfg.checkpoint_dir) / "averaged.ckpt");
  }
  return result;
}

struct EvalMetrics {
  double keypoint_mse = 0.0;
  double twist_angle_deg = 0.0;  // mean absolute angular error
  double beta_mse = 0.0;
};

/// Group metrics of predictions against targets, accumulated in double.
template <typename S>
EvalMetrics compare_poses(const std::vector<PoseOutput<S>>& preds,
                          const std::vector<PoseOutput<S>>& targets) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw std::invalid_argument("compare_poses: need equal, non-empty prediction and target lists");
  }
  EvalMetrics m;
  double kn = 0.0;
  double tn = 0.0;
  double bn = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const auto& t = targets[i];
    m.keypoint_mse += (p.keypoints.value() - t.keypoints.value()).template cast<double>().squaredNorm();
    kn += static_cast<double>(p.keypoints.size());
    for (Index r = 0; r < p.twists.rows(); ++r) {
      const double pc = p.twists(r, 0), ps = p.twists(r, 1);
      const double tc = t.twists(r, 0), ts = t.twists(r, 1);
      m.twist_angle_deg += std::abs(std::atan2(ps * tc - pc * ts, pc * tc + ps * ts));
      tn += 1.0;
    }
    m.beta_mse += (p.beta.value() - t.beta.value()).template cast<double>().squaredNorm();
    bn += static_cast<double>(p.beta.size());
  }
  m.keypoint_mse /= kn;
  m.twist_angle_deg = m.twist_angle_deg / tn * 180.0 / std::numbers::pi;
  m.beta_mse /= bn;
  return m;
}

/// Eval-mode forward over every sample, all patches retained.
template <typename S>
EvalMetrics evaluate(const HeadParams<S>& params, const std::vector<Sample<S>>& data) {
  std::vector<PoseOutput<S>> preds;
  std::vector<PoseOutput<S>> targets;
  for (const auto& s : data) {
    preds.push_back(forward(params, s.features));
    targets.push_back(s.target);
  }
  return compare_poses(preds, targets);
}

}  // namespace lift
