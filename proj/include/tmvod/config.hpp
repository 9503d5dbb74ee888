#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmvod/datagen.hpp"
#include "tmvod/evalkit.hpp"
#include "tmvod/model.hpp"

namespace tmvod {

struct PipelineConfig {
  DetectorConfig detector;
  SceneConfig scene;
  int num_videos = 200;
  double val_fraction = 0.2;

  // optimizer and schedule
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_decay = 0.1;
  std::vector<int> lr_steps{4, 6};  // epochs (0-based) at which the step size drops
  double grad_clip = 10.0;          // global L2 norm, 0 disables
  int batch = 4;
  int epochs = 8;
  int windows_per_video = 2;  // training windows drawn per video and epoch
  bool hflip = true;
  bool static_pretrain = false;
  int static_pretrain_iters = 100;

  // evaluation
  int epoch_val_videos = 10;  // videos scored after each epoch, 0 disables
  SeqNmsConfig seq_nms;
  int motion_radius = 2;

  std::uint64_t seed = 1;
  std::string data_root = "data";
  std::string out_dir = "run";
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename V>
V parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  is >> v;
  if (!is || !(is >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& text) {
  return text;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_value<int>(key, item));
  }
  return out;
}

inline std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <typename V>
std::string format_value(const V& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string format_value(bool v) { return v ? "true" : "false"; }

// Binds every documented key to a field of the config.
struct Binding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename V>
Binding bind_field(const std::string& key, V& field) {
  return {[&field, key](const std::string& t) { field = parse_value<V>(key, t); },
          [&field] { return format_value(field); }};
}

inline std::map<std::string, Binding> bindings(PipelineConfig& c) {
  auto& d = c.detector;
  std::map<std::string, Binding> b;
  b["variant"] = {[&d](const std::string& t) { d.variant = parse_variant(t); },
                  [&d] { return std::string(1, variant_letter(d.variant)); }};
  b["M"] = bind_field("M", d.m);
  b["N"] = bind_field("N", d.n);
  b["num_classes"] = {[&c](const std::string& t) { c.detector.num_classes = c.scene.num_classes = parse_value<int>("num_classes", t); },
                      [&c] { return format_value(c.detector.num_classes); }};
  b["roi_size"] = bind_field("roi_size", d.roi_size);
  b["backbone_widths"] = {[&d](const std::string& t) {
                            auto v = parse_int_list("backbone_widths", t);
                            if (v.size() != 4) throw ConfigError("backbone_widths needs 4 values");
                            std::copy(v.begin(), v.end(), d.backbone.widths.begin());
                          },
                          [&d] { return join({d.backbone.widths.begin(), d.backbone.widths.end()}); }};
  b["backbone_strides"] = {[&d](const std::string& t) {
                             auto v = parse_int_list("backbone_strides", t);
                             if (v.size() != 4) throw ConfigError("backbone_strides needs 4 values");
                             std::copy(v.begin(), v.end(), d.backbone.strides.begin());
                           },
                           [&d] { return join({d.backbone.strides.begin(), d.backbone.strides.end()}); }};
  b["gate_hidden"] = bind_field("gate_hidden", d.tg.gate_hidden);
  b["motion_hidden"] = bind_field("motion_hidden", d.tg.motion_hidden);
  b["se_reduction"] = bind_field("se_reduction", d.tg.se_reduction);
  b["aggregate"] = {[&d](const std::string& t) {
                      if (t == "sum") d.tg.aggregate = AggregateMode::kSum;
                      else if (t == "mean") d.tg.aggregate = AggregateMode::kMean;
                      else throw ConfigError("aggregate must be sum or mean, got '" + t + "'");
                    },
                    [&d] { return std::string(d.tg.aggregate == AggregateMode::kSum ? "sum" : "mean"); }};
  b["rpn_hidden"] = bind_field("rpn_hidden", d.rpn.hidden);
  b["rpn_nms_iou"] = bind_field("rpn_nms_iou", d.rpn.nms_iou);
  b["rpn_pre_nms_topk"] = bind_field("rpn_pre_nms_topk", d.rpn.pre_nms_topk);
  b["rpn_post_nms_topk_train"] = bind_field("rpn_post_nms_topk_train", d.rpn.post_nms_topk_train);
  b["rpn_post_nms_topk_eval"] = bind_field("rpn_post_nms_topk_eval", d.rpn.post_nms_topk_eval);
  b["tboc_hidden"] = bind_field("tboc_hidden", d.mtbr.offset_hidden);
  b["aggregate_dim"] = bind_field("aggregate_dim", d.jtmg.aggregate_dim);
  b["displacement_dim"] = bind_field("displacement_dim", d.jtmg.displacement_dim);
  b["gru_hidden"] = bind_field("gru_hidden", d.jtmg.gru_hidden);
  b["head_hidden"] = bind_field("head_hidden", d.jtmg.head_hidden);
  b["score_threshold"] = bind_field("score_threshold", d.score_threshold);
  b["det_nms_iou"] = bind_field("det_nms_iou", d.det_nms_iou);
  b["max_detections"] = bind_field("max_detections", d.max_detections);

  b["image_width"] = bind_field("image_width", c.scene.width);
  b["image_height"] = bind_field("image_height", c.scene.height);
  b["frames_per_video"] = bind_field("frames_per_video", c.scene.num_frames);
  b["min_size"] = bind_field("min_size", c.scene.min_size);
  b["max_size"] = bind_field("max_size", c.scene.max_size);
  b["max_speed"] = {[&c](const std::string& t) {
                      const double v = parse_value<double>("max_speed", t);
                      c.scene.min_vx = c.scene.min_vy = -v;
                      c.scene.max_vx = c.scene.max_vy = v;
                    },
                    [&c] { return format_value(c.scene.max_vx); }};
  b["slow_object_prob"] = bind_field("slow_object_prob", c.scene.slow_object_prob);
  b["slow_speed_scale"] = bind_field("slow_speed_scale", c.scene.slow_speed_scale);
  b["velocity_change_prob"] = bind_field("velocity_change_prob", c.scene.velocity_change_prob);
  b["blur_prob"] = bind_field("blur_prob", c.scene.blur_prob);
  b["blur_strength"] = bind_field("blur_strength", c.scene.blur_strength);
  b["occlusion_prob"] = bind_field("occlusion_prob", c.scene.occlusion_prob);
  b["occlusion_duration"] = bind_field("occlusion_duration", c.scene.occlusion_duration);
  b["min_objects"] = bind_field("min_objects", c.scene.min_objects);
  b["max_objects"] = bind_field("max_objects", c.scene.max_objects);
  b["num_videos"] = bind_field("num_videos", c.num_videos);
  b["val_fraction"] = bind_field("val_fraction", c.val_fraction);

  b["lr"] = bind_field("lr", c.lr);
  b["momentum"] = bind_field("momentum", c.momentum);
  b["weight_decay"] = bind_field("weight_decay", c.weight_decay);
  b["lr_decay"] = bind_field("lr_decay", c.lr_decay);
  b["lr_steps"] = {[&c](const std::string& t) { c.lr_steps = parse_int_list("lr_steps", t); },
                   [&c] { return join(c.lr_steps); }};
  b["grad_clip"] = bind_field("grad_clip", c.grad_clip);
  b["batch"] = bind_field("batch", c.batch);
  b["epochs"] = bind_field("epochs", c.epochs);
  b["windows_per_video"] = bind_field("windows_per_video", c.windows_per_video);
  b["hflip"] = bind_field("hflip", c.hflip);
  b["static_pretrain"] = bind_field("static_pretrain", c.static_pretrain);
  b["static_pretrain_iters"] = bind_field("static_pretrain_iters", c.static_pretrain_iters);
  b["epoch_val_videos"] = bind_field("epoch_val_videos", c.epoch_val_videos);
  b["seq_nms_link_iou"] = bind_field("seq_nms_link_iou", c.seq_nms.link_iou);
  b["seq_nms_suppress_iou"] = bind_field("seq_nms_suppress_iou", c.seq_nms.suppress_iou);
  b["motion_radius"] = bind_field("motion_radius", c.motion_radius);
  b["seed"] = bind_field("seed", c.seed);
  b["data_root"] = bind_field("data_root", c.data_root);
  b["out_dir"] = bind_field("out_dir", c.out_dir);
  return b;
}

}  // namespace detail

inline void validate(const PipelineConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.detector.m < 0 || c.detector.n < 0) fail("M and N must be non-negative");
  if (c.detector.uses_gate() && c.detector.m + c.detector.n == 0) fail("temporal variants need M + N > 0");
  if (c.scene.num_frames < c.detector.m + c.detector.n + 1) fail("frames_per_video shorter than the window");
  if (c.batch < 1 || c.epochs < 0 || c.windows_per_video < 1) fail("batch, epochs and windows_per_video must be positive");
  if (c.lr <= 0) fail("lr must be positive");
  if (c.val_fraction <= 0 || c.val_fraction >= 1) fail("val_fraction must be in (0, 1)");
  if (c.detector.num_classes != c.scene.num_classes) fail("num_classes differs between model and scene");
  c.scene.validate();
}

// `key = value` lines; '#' starts a comment. Unknown keys are an error.
inline PipelineConfig parse_config(std::istream& is, const std::string& source = "config") {
  PipelineConfig c;
  auto b = detail::bindings(c);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = b.find(key);
    if (it == b.end()) throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(value);
  }
  c.detector.sync();
  validate(c);
  return c;
}

inline PipelineConfig parse_config_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  return parse_config(is, path.string());
}

inline std::string format_config(const PipelineConfig& config) {
  PipelineConfig c = config;
  std::string out;
  for (const auto& [key, binding] : detail::bindings(c)) out += key + " = " + binding.get() + "\n";
  return out;
}

}  // namespace tmvod
