// tmvod: data generation, training, evaluation, ablation and plotting.
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "tmvod/checkpoint.hpp"
#include "tmvod/config.hpp"
#include "tmvod/dataset_io.hpp"
#include "tmvod/png_io.hpp"
#include "tmvod/train.hpp"

namespace fs = std::filesystem;
using namespace tmvod;

namespace {

PipelineConfig config_or_default(const std::string& path) { return path.empty() ? PipelineConfig{} : load_config(path); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
}

std::string report_text(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "mAP          " << r.map << "\n";
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    os << "AP class " << c << "   ";
    if (r.per_class_ap[c]) {
      os << *r.per_class_ap[c] << "\n";
    } else {
      os << "n/a\n";
    }
  }
  os << "mAP slow     " << r.map_slow << "  (" << r.gt_slow << " objects)\n";
  os << "mAP medium   " << r.map_medium << "  (" << r.gt_medium << " objects)\n";
  os << "mAP fast     " << r.map_fast << "  (" << r.gt_fast << " objects)\n";
  os << "detections   " << r.num_detections << "\n";
  os << "seq-nms      " << (r.seq_nms_applied ? "applied" : "off") << "\n";
  return os.str();
}

std::vector<Variant> parse_variant_list(const std::string& text) {
  std::vector<Variant> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(parse_variant(item));
  }
  if (out.empty()) throw std::invalid_argument("no variants given");
  return out;
}

// ------------------------------------------------------------------ commands

int cmd_gen_data(const std::string& config_path, const std::string& out) {
  const auto cfg = config_or_default(config_path);
  const fs::path root = out.empty() ? fs::path(cfg.data_root) : fs::path(out);
  const auto videos = generate_videos(cfg.scene, cfg.num_videos, cfg.seed);
  const auto manifest = write_dataset(videos, root);
  std::cerr << "wrote " << manifest.videos.size() << " videos to " << root << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& resume) {
  auto cfg = config_or_default(config_path);
  const fs::path root = data.empty() ? fs::path(cfg.data_root) : fs::path(data);
  const auto split = split_dataset(read_dataset(root), cfg.val_fraction);
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  write_text(out / "config.txt", format_config(cfg));

  std::unique_ptr<Trainer<float>> tr;
  if (resume.empty()) {
    tr = std::make_unique<Trainer<float>>(cfg, &split.train, &split.val);
  } else {
    tr = std::make_unique<Trainer<float>>(load_checkpoint<float>(resume), &split.train, &split.val);
    std::cerr << "resuming at epoch " << tr->epoch() << "\n";
  }
  std::ofstream metrics(out / "metrics.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  tr->set_metrics_log(&metrics);
  tr->set_progress_log(&std::cerr);
  tr->set_epoch_callback([&out](const Trainer<float>& t, const EpochSummary&) {
    const auto b = t.snapshot();
    save_checkpoint(out / ("checkpoint_epoch" + std::to_string(b.epoch) + ".ckpt"), b);
    save_checkpoint(out / "checkpoint_last.ckpt", b);
  });
  tr->train();

  const auto result = evaluate_detector(tr->detector(), split.val, cfg.detector.uses_seq_nms(), cfg.seq_nms,
                                        cfg.motion_radius);
  write_text(out / "report.json", report_json(result.report).dump(2) + "\n");
  std::cout << report_text(result.report);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& config_path,
             const std::string& variant, bool seq, const std::string& split_name, const std::string& out_dir) {
  auto bundle = load_checkpoint<float>(checkpoint);
  PipelineConfig cfg = bundle.config;
  if (!config_path.empty()) {
    const auto given = load_config(config_path);
    Detector<float> fresh(given.detector, 0);
    std::ostringstream diff;
    for (const auto& [name, p] : fresh.params().all()) {
      if (!bundle.params.contains(name)) {
        diff << " missing " << name;
      } else if (bundle.params.get(name)->value.shape() != p->value.shape()) {
        diff << " shape of " << name;
      }
    }
    if (fresh.params().all().size() != bundle.params.all().size()) diff << " parameter count";
    if (!diff.str().empty()) throw ConfigError("config does not match checkpoint:" + diff.str());
    cfg.detector = given.detector;
    cfg.seq_nms = given.seq_nms;
    cfg.motion_radius = given.motion_radius;
  }
  if (!variant.empty()) {
    const Variant v = parse_variant(variant);
    const Variant have = cfg.detector.variant;
    const bool same_params = v == have || (v >= Variant::kE && have >= Variant::kE);
    if (!same_params) {
      throw ConfigError(std::string("checkpoint holds variant ") + variant_letter(have) + " parameters, cannot run " +
                        variant_letter(v));
    }
    cfg.detector.variant = v;
  }
  seq = seq || cfg.detector.uses_seq_nms();

  auto videos = read_dataset(data.empty() ? fs::path(cfg.data_root) : fs::path(data));
  if (split_name == "val") {
    videos = split_dataset(std::move(videos), cfg.val_fraction).val;
  } else if (split_name == "train") {
    videos = split_dataset(std::move(videos), cfg.val_fraction).train;
  }
  Detector<float> det(cfg.detector, std::move(bundle.params));
  const auto result = evaluate_detector(det, videos, seq, cfg.seq_nms, cfg.motion_radius);

  const fs::path out(out_dir.empty() ? cfg.out_dir : out_dir);
  fs::create_directories(out);
  {
    std::ofstream os(out / "detections.jsonl");
    write_detections(os, result.detections);
  }
  write_text(out / "report.json", report_json(result.report).dump(2) + "\n");
  write_text(out / "report.txt", report_text(result.report));
  std::cout << report_text(result.report);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& variants, const std::string& data,
               const std::string& out_dir) {
  const auto cfg = config_or_default(config_path);
  std::vector<VideoSample> videos;
  const fs::path root = data.empty() ? fs::path(cfg.data_root) : fs::path(data);
  if (fs::exists(root / "manifest.txt")) {
    videos = read_dataset(root);
  } else {
    std::cerr << "no dataset at " << root << ", generating " << cfg.num_videos << " videos in memory\n";
    videos = generate_videos(cfg.scene, cfg.num_videos, cfg.seed);
  }
  const auto split = split_dataset(std::move(videos), cfg.val_fraction);
  const auto rows = run_ablation(cfg, parse_variant_list(variants), split, &std::cerr);
  const std::string table = format_ablation_table(rows);
  const fs::path out(out_dir.empty() ? cfg.out_dir : out_dir);
  fs::create_directories(out);
  write_text(out / "ablation_table.txt", table);
  write_text(out / "ablation.json", ablation_json(rows).dump(2) + "\n");
  std::cout << table;
  for (const auto& r : rows)
    if (!r.error.empty()) return 1;
  return 0;
}

// Grouped bars: overall, slow, medium, fast per report, gridlines every 0.1.
Image bar_chart(const std::vector<std::array<double, 4>>& groups) {
  const int bar = 14, gap = 4, group_gap = 22, margin = 20, plot_h = 200;
  const int n = static_cast<int>(groups.size());
  const int width = 2 * margin + n * (4 * bar + 3 * gap) + std::max(0, n - 1) * group_gap;
  const int height = plot_h + 2 * margin;
  Image img(width, height);
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{255});
  auto fill = [&](int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    for (int y = std::max(0, y0); y < std::min(height, y1); ++y)
      for (int x = std::max(0, x0); x < std::min(width, x1); ++x) std::copy(c.begin(), c.end(), img.at(x, y));
  };
  const int base = margin + plot_h;
  for (int k = 0; k <= 10; ++k) {
    const int y = base - k * plot_h / 10;
    fill(margin / 2, y, width - margin / 2, y + 1, k == 0 ? std::array<std::uint8_t, 3>{0, 0, 0}
                                                          : std::array<std::uint8_t, 3>{220, 220, 220});
  }
  const std::array<std::array<std::uint8_t, 3>, 4> colors{{{90, 90, 90}, {50, 110, 200}, {60, 170, 90}, {210, 70, 60}}};
  int x = margin;
  for (const auto& g : groups) {
    for (int j = 0; j < 4; ++j) {
      const int h = static_cast<int>(std::lround(std::clamp(g[j], 0.0, 1.0) * plot_h));
      fill(x, base - h, x + bar, base, colors[j]);
      x += bar + (j < 3 ? gap : 0);
    }
    x += group_gap;
  }
  return img;
}

int cmd_plot(const std::string& report_path, const std::string& out) {
  std::ifstream is(report_path);
  if (!is) throw std::runtime_error("cannot open report '" + report_path + "'");
  const auto j = nlohmann::json::parse(is);
  std::vector<std::array<double, 4>> groups;
  auto add = [&](const nlohmann::json& r) {
    groups.push_back({r.at("mAP").get<double>(), r.at("mAP_slow").get<double>(), r.at("mAP_medium").get<double>(),
                      r.at("mAP_fast").get<double>()});
  };
  if (j.is_array()) {
    for (const auto& row : j) {
      if (row.contains("report")) {
        add(row.at("report"));
      } else {
        groups.push_back({0, 0, 0, 0});
      }
    }
  } else {
    add(j);
  }
  if (groups.empty()) throw std::runtime_error("report holds no rows");
  write_png(out, bar_chart(groups));
  std::cerr << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TM-VoD desk-scale video object detector"};
  app.require_subcommand(1);

  std::string config, out, data, resume, checkpoint, variant, variants = "a,b,c,d,e,f", report, split = "val";
  bool seq = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic video set");
  gen->add_option("--config", config, "key = value config file");
  gen->add_option("--out", out, "dataset directory (default: data_root)");

  auto* train = app.add_subcommand("train", "train one variant, checkpointing every epoch");
  train->add_option("--config", config, "key = value config file");
  train->add_option("--data", data, "dataset directory (default: data_root)");
  train->add_option("--resume", resume, "continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "score a checkpoint and dump its detections");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data, "dataset directory (default: data_root of the checkpoint config)");
  eval->add_option("--config", config, "config to check against the checkpoint");
  eval->add_option("--variant", variant, "override the variant (e and f share parameters)");
  eval->add_flag("--seq-nms", seq, "apply Seq-NMS before scoring");
  eval->add_option("--split", split, "val, train or all")->check(CLI::IsMember({"val", "train", "all"}));
  eval->add_option("--out", out, "output directory (default: out_dir)");

  auto* ablate = app.add_subcommand("ablate", "train and score several variants under one seed");
  ablate->add_option("--config", config, "key = value config file");
  ablate->add_option("--variants", variants, "comma separated subset of a..f");
  ablate->add_option("--data", data, "dataset directory; generated in memory when absent");
  ablate->add_option("--out", out, "output directory (default: out_dir)");

  auto* plot = app.add_subcommand("plot", "bar chart of a report or ablation json");
  plot->add_option("--report", report, "report.json or ablation.json")->required();
  plot->add_option("--out", out, "png file")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(config, out);
    if (*train) return cmd_train(config, data, resume);
    if (*eval) return cmd_eval(checkpoint, data, config, variant, seq, split, out);
    if (*ablate) return cmd_ablate(config, variants, data, out);
    if (*plot) return cmd_plot(report, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
