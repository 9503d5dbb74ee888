#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tmvod/datagen.hpp"
#include "tmvod/png_io.hpp"

namespace tmvod {

// Dataset directory layout:
//
//   root/manifest.txt                one "<video_id> <frame_count>" per line,
//                                    closed by "#end <video_count>"
//   root/<video_id>/frame_%04d.png   8-bit RGB
//   root/<video_id>/annotations.jsonl
//       {"frame", "track_id", "class_id", "bbox": [x1,y1,x2,y2], "occluded", "blur"}
//
// A ".incomplete" marker exists in root while a write is in progress.

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DatasetIoError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class IncompleteDatasetError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class DatasetParseError : public DatasetError {
 public:
  DatasetParseError(const std::string& file, int line, const std::string& what)
      : DatasetError(file + ":" + std::to_string(line) + ": " + what), file_(file), line_(line) {}
  const std::string& file() const { return file_; }
  int line() const { return line_; }

 private:
  std::string file_;
  int line_;
};
class AnnotationValidationError : public DatasetParseError {
 public:
  using DatasetParseError::DatasetParseError;
};
class MissingFrameError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class FrameCountMismatchError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

struct ManifestEntry {
  std::string video_id;
  int num_frames = 0;
};

struct Manifest {
  std::vector<ManifestEntry> videos;
  std::size_t total_frames() const {
    std::size_t n = 0;
    for (const auto& v : videos) n += static_cast<std::size_t>(v.num_frames);
    return n;
  }
};

inline const char* kIncompleteMarker = ".incomplete";

inline std::string frame_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04d.png", index);
  return buf;
}

inline nlohmann::json annotation_record(int frame, const GroundTruthObject& gt) {
  return {{"frame", frame},
          {"track_id", gt.track_id},
          {"class_id", gt.class_id},
          {"bbox", {gt.bbox.x1, gt.bbox.y1, gt.bbox.x2, gt.bbox.y2}},
          {"occluded", gt.occluded},
          {"blur", gt.blur_level}};
}

inline Manifest write_dataset(const std::vector<VideoSample>& samples, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw DatasetIoError("cannot create dataset root '" + root.string() + "': " + ec.message());
  auto open_out = [](const fs::path& p) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw DatasetIoError("cannot open '" + p.string() + "' for writing");
    return os;
  };
  open_out(root / kIncompleteMarker) << "write in progress\n";

  Manifest manifest;
  for (const auto& s : samples) {
    const fs::path dir = root / s.video_id;
    fs::create_directories(dir, ec);
    if (ec) throw DatasetIoError("cannot create '" + dir.string() + "': " + ec.message());
    for (int f = 0; f < s.num_frames(); ++f) {
      try {
        write_png(dir / frame_file_name(f), s.frames[f]);
      } catch (const ImageIoError& e) {
        throw DatasetIoError(e.what());
      }
    }
    auto os = open_out(dir / "annotations.jsonl");
    for (int f = 0; f < static_cast<int>(s.annotations.size()); ++f) {
      for (const auto& gt : s.annotations[f]) os << annotation_record(f, gt).dump() << '\n';
    }
    if (!os) throw DatasetIoError("write failed for '" + (dir / "annotations.jsonl").string() + "'");
    manifest.videos.push_back({s.video_id, s.num_frames()});
  }
  {
    auto os = open_out(root / "manifest.txt");
    for (const auto& v : manifest.videos) os << v.video_id << ' ' << v.num_frames << '\n';
    os << "#end " << manifest.videos.size() << '\n';
    if (!os) throw DatasetIoError("write failed for manifest");
  }
  fs::remove(root / kIncompleteMarker, ec);
  if (ec) throw DatasetIoError("cannot remove incomplete marker: " + ec.message());
  return manifest;
}

inline Manifest read_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.txt";
  if (std::filesystem::exists(root / kIncompleteMarker)) {
    throw IncompleteDatasetError("dataset at '" + root.string() + "' was not completely written");
  }
  std::ifstream is(path);
  if (!is) throw DatasetIoError("cannot open manifest '" + path.string() + "'");
  Manifest m;
  std::string line;
  int lineno = 0;
  bool closed = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (closed) throw DatasetParseError(path.string(), lineno, "content after #end trailer");
    if (line.rfind("#end", 0) == 0) {
      std::istringstream ls(line.substr(4));
      std::size_t count = 0;
      if (!(ls >> count) || count != m.videos.size()) {
        throw DatasetParseError(path.string(), lineno, "trailer count does not match the listed videos");
      }
      closed = true;
      continue;
    }
    std::istringstream ls(line);
    ManifestEntry e;
    std::string extra;
    if (!(ls >> e.video_id >> e.num_frames) || (ls >> extra) || e.num_frames < 0) {
      throw DatasetParseError(path.string(), lineno, "expected '<video_id> <frame_count>', got '" + line + "'");
    }
    m.videos.push_back(e);
  }
  if (!closed) throw DatasetParseError(path.string(), lineno + 1, "manifest truncated: missing #end trailer");
  return m;
}

inline GroundTruthObject parse_annotation(const std::string& file, int lineno, const std::string& line,
                                          int& frame) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetParseError(file, lineno, std::string("malformed JSON: ") + e.what());
  }
  GroundTruthObject gt;
  try {
    frame = j.at("frame").get<int>();
    gt.track_id = j.at("track_id").get<int>();
    gt.class_id = j.at("class_id").get<int>();
    const auto& b = j.at("bbox");
    if (!b.is_array() || b.size() != 4) throw DatasetParseError(file, lineno, "bbox must have 4 numbers");
    gt.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    gt.occluded = j.at("occluded").get<bool>();
    gt.blur_level = j.at("blur").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetParseError(file, lineno, std::string("bad annotation record: ") + e.what());
  }
  if (!(gt.bbox.x1 < gt.bbox.x2 && gt.bbox.y1 < gt.bbox.y2)) {
    throw AnnotationValidationError(file, lineno, "bbox must satisfy x1 < x2 and y1 < y2");
  }
  if (frame < 0) throw AnnotationValidationError(file, lineno, "negative frame index");
  if (gt.class_id < 0) throw AnnotationValidationError(file, lineno, "negative class id");
  if (gt.blur_level < 0) throw AnnotationValidationError(file, lineno, "negative blur level");
  return gt;
}

inline VideoSample read_video(const std::filesystem::path& root, const ManifestEntry& entry) {
  namespace fs = std::filesystem;
  VideoSample s;
  s.video_id = entry.video_id;
  const fs::path dir = root / entry.video_id;
  for (int f = 0; f < entry.num_frames; ++f) {
    const fs::path p = dir / frame_file_name(f);
    if (!fs::exists(p)) throw MissingFrameError("missing frame file '" + p.string() + "'");
    try {
      s.frames.push_back(read_png(p));
    } catch (const ImageIoError& e) {
      throw DatasetIoError(e.what());
    }
  }
  if (fs::exists(dir / frame_file_name(entry.num_frames))) {
    throw FrameCountMismatchError("video '" + entry.video_id + "' has more frame files than the manifest lists");
  }
  s.annotations.resize(entry.num_frames);
  const fs::path ann = dir / "annotations.jsonl";
  std::ifstream is(ann);
  if (!is) throw DatasetIoError("cannot open '" + ann.string() + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    int frame = 0;
    GroundTruthObject gt = parse_annotation(ann.string(), lineno, line, frame);
    if (frame >= entry.num_frames) {
      throw FrameCountMismatchError(ann.string() + ":" + std::to_string(lineno) + ": annotation for frame " +
                                    std::to_string(frame) + " but video has " + std::to_string(entry.num_frames) +
                                    " frames");
    }
    s.annotations[frame].push_back(gt);
  }
  return s;
}

inline std::vector<VideoSample> read_dataset(const std::filesystem::path& root) {
  const Manifest m = read_manifest(root);
  std::vector<VideoSample> out;
  out.reserve(m.videos.size());
  for (const auto& e : m.videos) out.push_back(read_video(root, e));
  return out;
}

}  // namespace tmvod
