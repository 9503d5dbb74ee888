// Generate a few synthetic clips, train a small variant (e) model for one
// epoch and score it, with and without Seq-NMS.
#include <iostream>

#include "tmvod/train.hpp"

int main() {
  using namespace tmvod;

  PipelineConfig cfg = parse_config_text(
      "variant = e\n"
      "backbone_widths = 8,8,16,16\n"
      "num_videos = 12\n"
      "epochs = 1\n"
      "epoch_val_videos = 0\n");

  const DataSplit data = split_dataset(generate_videos(cfg.scene, cfg.num_videos, cfg.seed), cfg.val_fraction);
  std::cout << data.train.size() << " training clips, " << data.val.size() << " validation clips\n";

  Trainer<float> trainer(cfg, &data.train, &data.val);
  trainer.set_progress_log(&std::cout);
  trainer.train();

  const Detector<float>& det = trainer.detector();
  const VideoSample& clip = data.val.front();
  const auto dets = det.detect(det.input_for(window_at(clip, 4, cfg.detector.m, cfg.detector.n)));
  std::cout << dets.size() << " detections on " << clip.video_id << " frame 4\n";

  for (bool seq : {false, true}) {
    const auto r = evaluate_detector(det, data.val, seq, cfg.seq_nms, cfg.motion_radius).report;
    std::cout << (seq ? "with Seq-NMS " : "plain        ") << report_json(r).dump() << "\n";
  }
}
