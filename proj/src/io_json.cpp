#include "implantformer/io_json.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace implantformer {

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot create file: " + path);
  os << text;
  if (!os) throw IoError("failed writing file: " + path);
}

namespace {

json parse_or_throw(const std::string& text, const std::string& path) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("bad JSON in " + path + ": " + e.what());
  }
}

}  // namespace

KeypointTrack load_track(const std::string& path) {
  const json j = parse_or_throw(read_text_file(path), path);
  KeypointTrack track;
  try {
    track.patient = j.value("patient", std::string());
    track.region = region_from_name(j.at("region").get<std::string>());
    for (const auto& p : j.at("points")) {
      track.points.push_back(
          {p.at("x").get<double>(), p.at("y").get<double>(), p.at("z").get<int>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("bad track file " + path + ": " + e.what());
  }
  track.validate();
  return track;
}

void save_track(const KeypointTrack& track, const std::string& path) {
  track.validate();
  json points = json::array();
  for (const auto& p : track.points)
    points.push_back({{"x", p.x}, {"y", p.y}, {"z", p.z}});
  json j{{"patient", track.patient},
         {"region", region_name(track.region)},
         {"points", points}};
  write_text_file(path, j.dump(2) + "\n");
}

DetectionFile load_detections(const std::string& path) {
  const json j = parse_or_throw(read_text_file(path), path);
  DetectionFile file;
  try {
    file.patient = j.value("patient", std::string());
    file.fold = j.value("fold", -1);
    for (const auto& s : j.at("slices")) {
      SliceDetections sd;
      sd.z = s.at("z").get<int>();
      for (const auto& d : s.at("detections")) {
        sd.detections.push_back({d.at("x").get<double>(), d.at("y").get<double>(),
                                 d.at("confidence").get<double>()});
      }
      file.slices.push_back(std::move(sd));
    }
  } catch (const json::exception& e) {
    throw FormatError("bad detections file " + path + ": " + e.what());
  }
  return file;
}

void save_detections(const DetectionFile& file, const std::string& path) {
  json slices = json::array();
  for (const auto& s : file.slices) {
    json dets = json::array();
    for (const auto& d : s.detections)
      dets.push_back({{"x", d.x}, {"y", d.y}, {"confidence", d.confidence}});
    slices.push_back({{"z", s.z}, {"detections", dets}});
  }
  json j{{"patient", file.patient}, {"slices", slices}};
  if (file.fold >= 0) j["fold"] = file.fold;
  write_text_file(path, j.dump(2) + "\n");
}

PhantomConfig load_phantom_config(const std::string& path) {
  const json j = parse_or_throw(read_text_file(path), path);
  PhantomConfig cfg;
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.depth = j.value("depth", cfg.depth);
  cfg.crown_boundary = j.value("crown_boundary", cfg.depth / 2);
  cfg.tooth_count = j.value("tooth_count", cfg.tooth_count);
  cfg.gap_index = j.value("gap_index", cfg.gap_index);
  if (j.contains("tilt")) {
    cfg.tilt_x = j["tilt"].at(0).get<double>();
    cfg.tilt_y = j["tilt"].at(1).get<double>();
  }
  cfg.root_blur_level = j.value("root_blur_level", cfg.root_blur_level);
  cfg.noise_level = j.value("noise_level", cfg.noise_level);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

void save_phantom_config(const PhantomConfig& cfg, const std::string& path) {
  json j{{"image_size", cfg.image_size},
         {"depth", cfg.depth},
         {"crown_boundary", cfg.crown_boundary},
         {"tooth_count", cfg.tooth_count},
         {"gap_index", cfg.gap_index},
         {"tilt", {cfg.tilt_x, cfg.tilt_y}},
         {"root_blur_level", cfg.root_blur_level},
         {"noise_level", cfg.noise_level},
         {"seed", cfg.seed}};
  write_text_file(path, j.dump(2) + "\n");
}

namespace {

bool wildcard_match(const std::string& pattern, const std::string& text) {
  size_t p = 0, t = 0, star = std::string::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

}  // namespace

std::vector<std::string> expand_glob(const std::string& pattern) {
  const fs::path pat(pattern);
  const std::string leaf = pat.filename().string();
  if (leaf.find('*') == std::string::npos && leaf.find('?') == std::string::npos)
    return {pattern};

  const fs::path dir = pat.parent_path().empty() ? fs::path(".") : pat.parent_path();
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) throw IoError("glob directory does not exist: " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (wildcard_match(leaf, entry.path().filename().string()))
      out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace implantformer
