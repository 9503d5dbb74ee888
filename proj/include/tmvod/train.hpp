#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tmvod/checkpoint.hpp"
#include "tmvod/config.hpp"
#include "tmvod/dataset_io.hpp"
#include "tmvod/evalkit.hpp"
#include "tmvod/model.hpp"

namespace tmvod {

struct DataSplit {
  std::vector<VideoSample> train;
  std::vector<VideoSample> val;
};

// The last round(n * val_fraction) videos form the validation split.
inline DataSplit split_dataset(std::vector<VideoSample> videos, double val_fraction) {
  const auto n_val = static_cast<std::size_t>(std::lround(static_cast<double>(videos.size()) * val_fraction));
  DataSplit s;
  const std::size_t n_train = videos.size() - std::min(n_val, videos.size());
  for (std::size_t i = 0; i < videos.size(); ++i) (i < n_train ? s.train : s.val).push_back(std::move(videos[i]));
  return s;
}

inline std::vector<VideoSample> generate_videos(const SceneConfig& scene, int count, std::uint64_t seed) {
  std::vector<VideoSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(generate_video(scene, seed * 1000003ULL + static_cast<std::uint64_t>(i)));
  return out;
}

// Frames with a full window around them; the others are never scored.
inline std::pair<int, int> scored_frames(const VideoSample& v, int m, int n) { return {m, v.num_frames() - 1 - n}; }

inline std::vector<GroundTruthRecord> evaluation_records(const std::vector<VideoSample>& videos, int m, int n) {
  std::vector<GroundTruthRecord> out;
  for (const auto& v : videos) {
    const auto [lo, hi] = scored_frames(v, m, n);
    for (auto r : ground_truth_records(v)) {
      if (r.frame < lo || r.frame > hi) r.ignore = true;
      out.push_back(std::move(r));
    }
  }
  return out;
}

template <typename T>
std::vector<DetectionRecord> detect_videos(const Detector<T>& det, const std::vector<VideoSample>& videos) {
  const auto& cfg = det.config();
  std::vector<DetectionRecord> out;
  for (const auto& v : videos) {
    const auto [lo, hi] = scored_frames(v, cfg.m, cfg.n);
    for (int t = lo; t <= hi; ++t) {
      auto d = det.detect(det.input_for(window_at(v, t, cfg.m, cfg.n)));
      out.insert(out.end(), d.begin(), d.end());
    }
  }
  return out;
}

struct EvaluationResult {
  EvalReport report;
  std::vector<DetectionRecord> detections;
};

template <typename T>
EvaluationResult evaluate_detector(const Detector<T>& det, const std::vector<VideoSample>& videos, bool apply_seq_nms,
                                   const SeqNmsConfig& seq = {}, int motion_radius = 2) {
  const auto& cfg = det.config();
  EvaluationResult r;
  r.detections = detect_videos(det, videos);
  if (apply_seq_nms) r.detections = seq_nms_all(r.detections, seq);
  r.report = evaluate(r.detections, evaluation_records(videos, cfg.m, cfg.n),
                      {cfg.num_classes, 0.5, motion_radius});
  r.report.seq_nms_applied = apply_seq_nms;
  return r;
}

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochSummary {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double val_map = -1;  // -1 when not evaluated
};

// SGD with momentum over L_total, one optimizer for every stage.
template <typename T>
class Trainer {
 public:
  Trainer(PipelineConfig cfg, const std::vector<VideoSample>* train, const std::vector<VideoSample>* val)
      : cfg_(std::move(cfg)), det_(cfg_.detector, cfg_.seed), rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL), train_(train),
        val_(val) {}

  // Continues from a saved state.
  Trainer(CheckpointBundle<T> b, const std::vector<VideoSample>* train, const std::vector<VideoSample>* val)
      : cfg_(b.config), det_(b.config.detector, std::move(b.params)), rng_(rng_from_state(b.rng_state)),
        momentum_(std::move(b.momentum)), epoch_(b.epoch), train_(train), val_(val) {}

  Detector<T>& detector() { return det_; }
  const PipelineConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }
  long iteration() const { return iter_; }

  void set_metrics_log(std::ostream* os) { metrics_ = os; }
  void set_progress_log(std::ostream* os) { progress_ = os; }
  void set_epoch_callback(std::function<void(const Trainer&, const EpochSummary&)> cb) { on_epoch_ = std::move(cb); }

  double lr_at(int epoch) const {
    double lr = cfg_.lr;
    for (int s : cfg_.lr_steps)
      if (epoch >= s) lr *= cfg_.lr_decay;
    return lr;
  }

  CheckpointBundle<T> snapshot() const {
    CheckpointBundle<T> b;
    b.config = cfg_;
    b.epoch = epoch_;
    b.rng_state = rng_state_string(rng_);
    for (const auto& [name, v] : det_.params().all()) b.params.create(name, v->value.shape())->value = v->value;
    b.momentum = momentum_;
    return b;
  }

  // One window's loss and gradients, accumulated into the parameter grads.
  LossReport accumulate(const WindowInput& in) {
    TrainStep<T> st = [&] {
      try {
        return det_.training_step(in, rng_);
      } catch (const LossDivergenceError& e) {
        throw TrainingDivergedError(std::string("training diverged at iteration ") + std::to_string(iter_) + ": " +
                                    e.what());
      }
    }();
    ag::backward(st.l_total);
    return st.report;
  }

  void apply_update(double lr, int count) {
    auto& ps = det_.params();
    const T inv = T(1) / static_cast<T>(std::max(count, 1));
    double norm2 = 0;
    for (auto& [name, v] : ps.all()) {
      if (!v->has_grad()) continue;
      for (std::size_t i = 0; i < v->grad.size(); ++i) {
        v->grad[i] *= inv;
        norm2 += static_cast<double>(v->grad[i]) * v->grad[i];
      }
    }
    if (!std::isfinite(norm2)) throw TrainingDivergedError("non-finite gradient at iteration " + std::to_string(iter_));
    const double norm = std::sqrt(norm2);
    const T clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? static_cast<T>(cfg_.grad_clip / norm) : T(1);
    const T mu = static_cast<T>(cfg_.momentum), wd = static_cast<T>(cfg_.weight_decay), step = static_cast<T>(lr);
    for (auto& [name, v] : ps.all()) {
      auto [it, fresh] = momentum_.try_emplace(name, Tensor<T>(v->value.shape()));
      Tensor<T>& buf = it->second;
      const bool has = v->has_grad();
      for (std::size_t i = 0; i < v->value.size(); ++i) {
        const T g = (has ? v->grad[i] * clip : T(0)) + wd * v->value[i];
        buf[i] = mu * buf[i] + g;
        v->value[i] -= step * buf[i];
      }
    }
    ps.zero_grad();
  }

  void log_iteration(const std::vector<LossReport>& reports) {
    double rpn = 0, ref = 0, dt = 0, tot = 0;
    for (const auto& r : reports) {
      rpn += r.rpn();
      ref += r.ref;
      dt += r.det;
      tot += r.total;
    }
    const double k = static_cast<double>(reports.size());
    if (metrics_) {
      nlohmann::ordered_json j = {{"iter", iter_}, {"L_rpn", rpn / k}, {"L_ref", ref / k}, {"L_det", dt / k}, {"L_total", tot / k}};
      *metrics_ << j.dump() << '\n';
    }
    ++iter_;
  }

  // Clips of one repeated frame, used before the first epoch when enabled.
  void static_pretrain() {
    const int m = cfg_.detector.m, n = cfg_.detector.n;
    std::uniform_int_distribution<std::size_t> pick_video(0, train_->size() - 1);
    for (int it = 0; it < cfg_.static_pretrain_iters; ++it) {
      std::vector<LossReport> reports;
      for (int b = 0; b < cfg_.batch; ++b) {
        const VideoSample& v = (*train_)[pick_video(rng_)];
        std::uniform_int_distribution<int> pick_t(m, v.num_frames() - 1 - n);
        WindowInput in = det_.input_for(window_at(v, pick_t(rng_), m, n));
        for (auto& f : in.frames) f = in.frames[in.reference];
        for (auto& g : in.gts) g = in.gts[in.reference];
        reports.push_back(accumulate(in));
      }
      apply_update(cfg_.lr, cfg_.batch);
      log_iteration(reports);
    }
  }

  EpochSummary run_epoch() {
    const int m = cfg_.detector.m, n = cfg_.detector.n;
    struct Item {
      std::size_t video;
      int t;
      bool flip;
    };
    std::vector<Item> items;
    for (std::size_t vi = 0; vi < train_->size(); ++vi) {
      const auto [lo, hi] = scored_frames((*train_)[vi], m, n);
      std::uniform_int_distribution<int> pick_t(lo, hi);
      for (int k = 0; k < cfg_.windows_per_video; ++k) {
        const int t = pick_t(rng_);
        const bool flip = cfg_.hflip && std::bernoulli_distribution(0.5)(rng_);
        items.push_back({vi, t, flip});
      }
    }
    std::shuffle(items.begin(), items.end(), rng_);

    EpochSummary s;
    s.epoch = epoch_;
    s.lr = lr_at(epoch_);
    double loss_sum = 0;
    for (std::size_t start = 0; start < items.size(); start += cfg_.batch) {
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(cfg_.batch));
      std::vector<LossReport> reports;
      for (std::size_t i = start; i < end; ++i) {
        const auto& it = items[i];
        reports.push_back(accumulate(det_.input_for(window_at((*train_)[it.video], it.t, m, n), it.flip)));
        loss_sum += reports.back().total;
      }
      apply_update(s.lr, static_cast<int>(end - start));
      log_iteration(reports);
    }
    s.mean_loss = items.empty() ? 0 : loss_sum / static_cast<double>(items.size());
    ++epoch_;
    if (val_ && cfg_.epoch_val_videos > 0 && !val_->empty()) {
      const std::size_t k = std::min(val_->size(), static_cast<std::size_t>(cfg_.epoch_val_videos));
      std::vector<VideoSample> subset(val_->begin(), val_->begin() + static_cast<std::ptrdiff_t>(k));
      s.val_map = evaluate_detector(det_, subset, false, cfg_.seq_nms, cfg_.motion_radius).report.map;
    }
    if (progress_) {
      *progress_ << "epoch " << s.epoch + 1 << "/" << cfg_.epochs << " lr " << s.lr << " loss " << s.mean_loss;
      if (s.val_map >= 0) *progress_ << " val_mAP " << s.val_map;
      *progress_ << std::endl;
    }
    if (on_epoch_) on_epoch_(*this, s);
    return s;
  }

  std::vector<EpochSummary> train() {
    std::vector<EpochSummary> out;
    if (epoch_ == 0 && iter_ == 0 && cfg_.static_pretrain) static_pretrain();
    while (epoch_ < cfg_.epochs) out.push_back(run_epoch());
    return out;
  }

 private:
  PipelineConfig cfg_;
  Detector<T> det_;
  Rng rng_;
  std::map<std::string, Tensor<T>> momentum_;
  int epoch_ = 0;
  long iter_ = 0;
  const std::vector<VideoSample>* train_;
  const std::vector<VideoSample>* val_;
  std::ostream* metrics_ = nullptr;
  std::ostream* progress_ = nullptr;
  std::function<void(const Trainer&, const EpochSummary&)> on_epoch_;
};

// ------------------------------------------------------------------ ablation

struct AblationRow {
  Variant variant = Variant::kA;
  EvalReport report;
  std::string error;  // empty on success
};

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "variant  mAP     slow    medium  fast\n";
  for (const auto& r : rows) {
    os << variant_letter(r.variant) << "        ";
    if (!r.error.empty()) {
      os << "failed: " << r.error << "\n";
      continue;
    }
    os << r.report.map << "  " << r.report.map_slow << "  " << r.report.map_medium << "  " << r.report.map_fast << "\n";
  }
  return os.str();
}

inline nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"variant", std::string(1, variant_letter(r.variant))}};
    if (r.error.empty()) {
      j["report"] = report_json(r.report);
    } else {
      j["error"] = r.error;
    }
    out.push_back(j);
  }
  return out;
}

// Trains every requested variant under one seed and scores it on the
// validation split. Variant f reuses the e model when both are requested.
inline std::vector<AblationRow> run_ablation(const PipelineConfig& base, const std::vector<Variant>& variants,
                                             const DataSplit& data, std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  std::map<Variant, std::unique_ptr<Detector<float>>> trained;
  for (Variant v : variants) {
    AblationRow row;
    row.variant = v;
    const Variant train_as = v == Variant::kF ? Variant::kE : v;
    try {
      if (!trained.count(train_as)) {
        PipelineConfig cfg = base;
        cfg.detector.variant = train_as;
        Trainer<float> tr(cfg, &data.train, &data.val);
        tr.set_progress_log(progress);
        if (progress) *progress << "training variant " << variant_letter(train_as) << std::endl;
        tr.train();
        trained[train_as] = std::make_unique<Detector<float>>(tr.detector());
      }
      row.report = evaluate_detector(*trained[train_as], data.val, v == Variant::kF, base.seq_nms, base.motion_radius)
                       .report;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tmvod
