#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include <gtest/gtest.h>

#include "tmvod/backbone.hpp"
#include "tmvod/dataset_io.hpp"

using namespace tmvod;
namespace fs = std::filesystem;

namespace {

SceneConfig one_object(double vx, double vy, int frames) {
  SceneConfig c;
  c.min_objects = c.max_objects = 1;
  c.min_vx = c.max_vx = vx;
  c.min_vy = c.max_vy = vy;
  c.velocity_change_prob = 0;
  c.slow_object_prob = 0;
  c.occlusion_prob = 0;
  c.num_frames = frames;
  return c;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("tmvod_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

TEST(Generate, ConstantVelocityAdvancesExactly) {
  const VideoSample v = generate_video(one_object(2, 0, 5), 7);
  ASSERT_EQ(v.num_frames(), 5);
  for (int f = 1; f < 5; ++f) {
    const Box& prev = v.annotations[f - 1].at(0).bbox;
    const Box& cur = v.annotations[f].at(0).bbox;
    EXPECT_DOUBLE_EQ(cur.x1 - prev.x1, 2.0);
    EXPECT_DOUBLE_EQ(cur.y1, prev.y1);
  }
}

TEST(Generate, DeterministicForSeed) {
  SceneConfig c;
  EXPECT_EQ(generate_video(c, 11), generate_video(c, 11));
  EXPECT_FALSE(generate_video(c, 11) == generate_video(c, 12));
}

TEST(Generate, OcclusionSpansExactDuration) {
  SceneConfig c;
  c.occlusion_prob = 1;
  c.occlusion_duration = 2;
  const VideoSample v = generate_video(c, 5);
  std::map<int, std::vector<int>> occluded_frames;
  for (int f = 0; f < v.num_frames(); ++f) {
    for (const auto& g : v.annotations[f]) {
      if (g.occluded) occluded_frames[g.track_id].push_back(f);
    }
  }
  ASSERT_FALSE(occluded_frames.empty());
  for (const auto& [track, frames] : occluded_frames) {
    ASSERT_EQ(frames.size(), 2u);
    EXPECT_EQ(frames[1], frames[0] + 1);
  }
  // boxes persist through the occlusion
  for (int f = 0; f < v.num_frames(); ++f) EXPECT_EQ(v.annotations[f].size(), v.annotations[0].size());
}

TEST(Generate, AnnotationInvariants) {
  SceneConfig c;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const VideoSample v = generate_video(c, seed);
    for (const auto& frame : v.annotations) {
      std::set<int> ids;
      for (const auto& g : frame) {
        EXPECT_LT(g.bbox.x1, g.bbox.x2);
        EXPECT_LT(g.bbox.y1, g.bbox.y2);
        EXPECT_GE(g.bbox.x1, 0);
        EXPECT_LE(g.bbox.x2, c.width);
        EXPECT_GE(g.bbox.y1, 0);
        EXPECT_LE(g.bbox.y2, c.height);
        EXPECT_GE(g.class_id, 0);
        EXPECT_LT(g.class_id, c.num_classes);
        EXPECT_GE(g.blur_level, 0);
        EXPECT_TRUE(ids.insert(g.track_id).second);
      }
    }
  }
}

TEST(Generate, RejectsObjectsThatCannotFit) {
  SceneConfig c;
  c.max_size = 200;
  EXPECT_THROW(generate_video(c, 1), std::invalid_argument);
  SceneConfig p;
  p.blur_prob = 1.5;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Window, ClampsAndOrders) {
  SceneConfig c;
  const VideoSample v = generate_video(c, 3);
  const FrameWindow w = window_at(v, 0, 2, 2);
  EXPECT_EQ(w.center, 2);
  EXPECT_EQ(w.frame_indices, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(w.reference_position, 2);
  SceneConfig shortc;
  shortc.num_frames = 3;
  const VideoSample s = generate_video(shortc, 3);
  EXPECT_THROW(window_at(s, 1, 2, 2), WindowError);
}

TEST(Window, StackRejectsMixedSizes) {
  Image a(8, 8), b(8, 6);
  EXPECT_THROW(stack_frames<float>({&a, &b}), ShapeError);
}

TEST(ImageTensor, StandardizedAndFlipped) {
  SceneConfig c;
  const VideoSample v = generate_video(c, 2);
  const auto t = image_to_tensor<double>(v.frames[0]);
  const auto f = image_to_tensor<double>(v.frames[0], true);
  double mean = 0;
  for (int y = 0; y < c.height; ++y)
    for (int x = 0; x < c.width; ++x) mean += t.at(0, y, x);
  EXPECT_NEAR(mean / (c.width * c.height), 0, 1e-9);
  EXPECT_DOUBLE_EQ(f.at(1, 5, 0), t.at(1, 5, c.width - 1));
}

TEST(DatasetIo, RoundTrip) {
  TempDir dir;
  SceneConfig c;
  c.num_frames = 5;
  std::vector<VideoSample> videos;
  for (int i = 0; i < 10; ++i) videos.push_back(generate_video(c, 100 + i));
  const Manifest m = write_dataset(videos, dir.path());
  EXPECT_EQ(m.videos.size(), 10u);
  EXPECT_EQ(m.total_frames(), 50u);
  EXPECT_FALSE(fs::exists(dir.path() / kIncompleteMarker));
  const auto back = read_dataset(dir.path());
  ASSERT_EQ(back.size(), videos.size());
  for (std::size_t i = 0; i < videos.size(); ++i) EXPECT_EQ(back[i], videos[i]);
}

TEST(DatasetIo, EmptyDataset) {
  TempDir dir;
  EXPECT_TRUE(write_dataset({}, dir.path()).videos.empty());
  EXPECT_TRUE(read_dataset(dir.path()).empty());
}

TEST(DatasetIo, DistinctErrors) {
  TempDir dir;
  SceneConfig c;
  c.num_frames = 3;
  write_dataset({generate_video(c, 1)}, dir.path());
  const fs::path vdir = dir.path() / "video_1";

  {  // incomplete marker
    std::ofstream(dir.path() / kIncompleteMarker) << "x";
    EXPECT_THROW(read_dataset(dir.path()), IncompleteDatasetError);
    fs::remove(dir.path() / kIncompleteMarker);
  }
  {  // malformed annotation
    fs::copy_file(vdir / "annotations.jsonl", dir.path() / "ann.bak");
    std::ofstream(vdir / "annotations.jsonl", std::ios::app) << "{not json\n";
    EXPECT_THROW(read_dataset(dir.path()), DatasetParseError);
    fs::copy_file(dir.path() / "ann.bak", vdir / "annotations.jsonl", fs::copy_options::overwrite_existing);
  }
  {  // x2 < x1
    std::ofstream(vdir / "annotations.jsonl", std::ios::app)
        << R"({"frame":0,"track_id":9,"class_id":0,"bbox":[10,0,5,5],"occluded":false,"blur":0})" << "\n";
    EXPECT_THROW(read_dataset(dir.path()), AnnotationValidationError);
    fs::copy_file(dir.path() / "ann.bak", vdir / "annotations.jsonl", fs::copy_options::overwrite_existing);
  }
  {  // annotation beyond the frame count
    std::ofstream(vdir / "annotations.jsonl", std::ios::app)
        << R"({"frame":7,"track_id":9,"class_id":0,"bbox":[0,0,5,5],"occluded":false,"blur":0})" << "\n";
    EXPECT_THROW(read_dataset(dir.path()), FrameCountMismatchError);
    fs::copy_file(dir.path() / "ann.bak", vdir / "annotations.jsonl", fs::copy_options::overwrite_existing);
  }
  {  // missing frame
    fs::rename(vdir / frame_file_name(1), dir.path() / "f.bak");
    EXPECT_THROW(read_dataset(dir.path()), MissingFrameError);
    fs::rename(dir.path() / "f.bak", vdir / frame_file_name(1));
  }
  {  // truncated manifest
    std::ofstream(dir.path() / "manifest.txt") << "video_1 3\n";
    EXPECT_THROW(read_dataset(dir.path()), DatasetParseError);
  }
  EXPECT_THROW(read_dataset(dir.path() / "nowhere"), DatasetIoError);
}
