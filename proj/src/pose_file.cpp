// Line-delimited JSON pose files.
//
//   {"format":"liftpose-poses","version":1,"topology":"h36m17","joints":17,
//    "units_2d":"px","units_3d":"mm"}
//   {"id":"...","source":"walk","frame_2d":"raw","y2d":[x0,y0,...],
//    "frame_3d":"raw","y3d":[x0,y0,z0,...],"visible":[1,1,0,...]}
//
// The header may carry a "config" object. y3d/frame_3d, visible and reproj_2d
// are optional. A 2d joint may be written
// as null only when its visibility flag is 0.

#include "liftpose/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

namespace liftpose {

namespace {

using json = nlohmann::ordered_json;
using Kind = PoseFileError::Kind;

constexpr const char* kFormat = "liftpose-poses";

Frame parse_frame(const json& value, long record) {
  if (!value.is_string()) {
    throw PoseFileError(Kind::malformed, record, "frame must be a string");
  }
  const auto s = value.get<std::string>();
  if (s == "raw") {
    return Frame::raw;
  }
  if (s == "root_centered") {
    return Frame::root_centered;
  }
  if (s == "normalized") {
    return Frame::normalized;
  }
  throw PoseFileError(Kind::malformed, record, "unknown frame '" + s + "'");
}

json coords_to_json(const Eigen::VectorXd& v, long record, const char* field) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw PoseFileError(Kind::non_finite, record, std::string("non-finite value in ") + field);
    }
    arr.push_back(v[i]);
  }
  return arr;
}

// Returns coordinates; entries of invisible joints may be null (stored as 0).
Eigen::VectorXd coords_from_json(const json& arr, int dim, int joints,
                                 const std::vector<bool>* visible, long record,
                                 const char* field) {
  if (!arr.is_array()) {
    throw PoseFileError(Kind::malformed, record, std::string(field) + " must be an array");
  }
  if (static_cast<int>(arr.size()) != dim * joints) {
    throw PoseFileError(Kind::topology_mismatch, record,
                        std::string(field) + " has " + std::to_string(arr.size() / static_cast<std::size_t>(dim)) +
                            " joints, topology expects " + std::to_string(joints));
  }
  Eigen::VectorXd v(dim * joints);
  for (int i = 0; i < dim * joints; ++i) {
    const auto& x = arr[static_cast<std::size_t>(i)];
    const int joint = i / dim;
    if (x.is_null()) {
      if (visible != nullptr && !(*visible)[static_cast<std::size_t>(joint)]) {
        v[i] = 0.0;
        continue;
      }
      throw PoseFileError(Kind::non_finite, record,
                          std::string(field) + " joint " + std::to_string(joint) +
                              " is missing and not marked invisible");
    }
    if (!x.is_number()) {
      throw PoseFileError(Kind::malformed, record, std::string(field) + " entries must be numbers");
    }
    v[i] = x.get<double>();
    if (!std::isfinite(v[i])) {
      throw PoseFileError(Kind::non_finite, record, std::string("non-finite value in ") + field);
    }
  }
  return v;
}

bool mentions_non_finite(std::string line) {
  std::transform(line.begin(), line.end(), line.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return line.find("nan") != std::string::npos || line.find("inf") != std::string::npos;
}

json parse_line(const std::string& line, long record) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    if (mentions_non_finite(line)) {
      throw PoseFileError(Kind::non_finite, record, "non-finite coordinate");
    }
    throw PoseFileError(Kind::malformed, record, std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

void save_poses(std::span<const Sample> samples, const SkeletonTopology& topo,
                const std::filesystem::path& path, std::string_view config_json) {
  const int joints = topo.joint_count();
  std::string text;
  json header;
  header["format"] = kFormat;
  header["version"] = kPoseFileVersion;
  header["topology"] = topo.name();
  header["joints"] = joints;
  header["units_2d"] = "px";
  header["units_3d"] = "mm";
  if (!config_json.empty()) {
    header["config"] = json::parse(config_json);
  }
  text += header.dump();
  text += '\n';

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const long rec = static_cast<long>(i);
    if (s.y2d.joint_count() != joints || (s.y3d && s.y3d->joint_count() != joints)) {
      throw PoseFileError(Kind::topology_mismatch, rec, "joint count differs from topology");
    }
    json r;
    r["id"] = s.id;
    r["source"] = s.source_tag;
    r["frame_2d"] = std::string(to_string(s.y2d.frame));
    r["y2d"] = coords_to_json(s.y2d.coords, rec, "y2d");
    if (s.y3d) {
      r["frame_3d"] = std::string(to_string(s.y3d->frame));
      r["y3d"] = coords_to_json(s.y3d->coords, rec, "y3d");
    }
    if (!s.visibility.empty() && !s.fully_visible()) {
      if (static_cast<int>(s.visibility.size()) != joints) {
        throw PoseFileError(Kind::topology_mismatch, rec, "visibility length differs from topology");
      }
      json vis = json::array();
      for (bool v : s.visibility) {
        vis.push_back(v ? 1 : 0);
      }
      r["visible"] = std::move(vis);
    }
    if (s.reprojection) {
      r["reproj_2d"] = coords_to_json(s.reprojection->coords, rec, "reproj_2d");
    }
    text += r.dump();
    text += '\n';
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw PoseFileError(Kind::io, -1, "cannot open " + path.string() + " for writing");
  }
  out << text;
  if (!out) {
    throw PoseFileError(Kind::io, -1, "write failed for " + path.string());
  }
}

std::vector<Sample> load_poses(const std::filesystem::path& path, const SkeletonTopology& topo) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw PoseFileError(Kind::io, -1, "cannot open " + path.string());
  }
  const int joints = topo.joint_count();
  std::string line;
  if (!std::getline(in, line)) {
    throw PoseFileError(Kind::malformed, -1, "empty pose file " + path.string());
  }
  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error&) {
    throw PoseFileError(Kind::malformed, -1, "unreadable header in " + path.string());
  }
  if (!header.is_object() || header.value("format", std::string()) != kFormat) {
    throw PoseFileError(Kind::malformed, -1, "not a liftpose pose file: " + path.string());
  }
  if (!header.contains("version") || !header["version"].is_number_integer() ||
      header["version"].get<int>() != kPoseFileVersion) {
    throw PoseFileError(Kind::version, -1,
                        "unsupported pose file version (reader supports " +
                            std::to_string(kPoseFileVersion) + ")");
  }
  static const std::set<std::string> header_keys = {"format",   "version",  "topology",
                                                    "joints",   "units_2d", "units_3d", "config"};
  for (const auto& [key, _] : header.items()) {
    if (!header_keys.count(key)) {
      throw PoseFileError(Kind::unknown_field, -1,
                          "unknown header field '" + key + "' for pose file version " +
                              std::to_string(kPoseFileVersion));
    }
  }
  if (header.value("joints", -1) != joints || header.value("topology", std::string()) != topo.name()) {
    throw PoseFileError(Kind::topology_mismatch, -1,
                        "file topology " + header.value("topology", std::string("?")) + " with " +
                            std::to_string(header.value("joints", -1)) + " joints does not match " +
                            topo.name() + " with " + std::to_string(joints));
  }

  static const std::set<std::string> record_keys = {"id",       "source", "frame_2d", "y2d",
                                                    "frame_3d", "y3d",    "visible",  "reproj_2d"};
  std::vector<Sample> samples;
  long rec = 0;
  while (std::getline(in, line)) {
    const json r = parse_line(line, rec);
    if (!r.is_object()) {
      throw PoseFileError(Kind::malformed, rec, "record must be an object");
    }
    for (const auto& [key, _] : r.items()) {
      if (!record_keys.count(key)) {
        throw PoseFileError(Kind::unknown_field, rec,
                            "unknown field '" + key + "' for pose file version " +
                                std::to_string(kPoseFileVersion));
      }
    }
    if (!r.contains("y2d")) {
      throw PoseFileError(Kind::malformed, rec, "missing y2d");
    }
    Sample s;
    s.id = r.contains("id") && r["id"].is_string() ? r["id"].get<std::string>() : std::to_string(rec);
    s.source_tag = r.contains("source") && r["source"].is_string() ? r["source"].get<std::string>() : "";
    s.visibility.assign(static_cast<std::size_t>(joints), true);
    if (r.contains("visible")) {
      const auto& vis = r["visible"];
      if (!vis.is_array() || static_cast<int>(vis.size()) != joints) {
        throw PoseFileError(Kind::topology_mismatch, rec, "visible must list one flag per joint");
      }
      for (int j = 0; j < joints; ++j) {
        const auto& f = vis[static_cast<std::size_t>(j)];
        if (!f.is_number_integer() && !f.is_boolean()) {
          throw PoseFileError(Kind::malformed, rec, "visibility flags must be 0/1");
        }
        s.visibility[static_cast<std::size_t>(j)] = f.is_boolean() ? f.get<bool>() : f.get<int>() != 0;
      }
    }
    const Frame f2 = r.contains("frame_2d") ? parse_frame(r["frame_2d"], rec) : Frame::raw;
    s.y2d = Pose2D(coords_from_json(r["y2d"], 2, joints, &s.visibility, rec, "y2d"), f2);
    if (r.contains("y3d")) {
      const Frame f3 = r.contains("frame_3d") ? parse_frame(r["frame_3d"], rec) : Frame::raw;
      s.y3d = Pose3D(coords_from_json(r["y3d"], 3, joints, nullptr, rec, "y3d"), f3);
    }
    if (r.contains("reproj_2d")) {
      s.reprojection =
          Pose2D(coords_from_json(r["reproj_2d"], 2, joints, nullptr, rec, "reproj_2d"), f2);
    }
    samples.push_back(std::move(s));
    ++rec;
  }
  return samples;
}

}  // namespace liftpose
