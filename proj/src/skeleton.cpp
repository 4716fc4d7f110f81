#include "liftpose/skeleton.hpp"

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cmath>
#include <sstream>

namespace liftpose {

namespace {

constexpr std::string_view kTopologyMagic = "liftpose-topology";
constexpr int kTopologyVersion = 1;

std::vector<std::string_view> split_words(std::string_view line) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) {
      ++i;
    }
    std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) {
      ++i;
    }
    if (i > start) {
      words.push_back(line.substr(start, i - start));
    }
  }
  return words;
}

int parse_int(std::string_view word, int line_no) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(word.data(), word.data() + word.size(), value);
  if (ec != std::errc() || ptr != word.data() + word.size()) {
    throw TopologyError(
        "topology line " + std::to_string(line_no) + ": expected integer, got '" +
        std::string(word) + "'");
  }
  return value;
}

void check_frame(Frame actual, Frame expected, std::string_view op) {
  if (actual != expected) {
    throw PreconditionError(
        std::string(op) + ": expected frame " + std::string(to_string(expected)) + ", got " +
        std::string(to_string(actual)));
  }
}

void check_dims(Eigen::Index actual, Eigen::Index expected, std::string_view op) {
  if (actual != expected) {
    throw PreconditionError(
        std::string(op) + ": dimension mismatch (" + std::to_string(actual) + " vs " +
        std::to_string(expected) + ")");
  }
}

}  // namespace

std::string_view to_string(Frame frame) {
  switch (frame) {
    case Frame::raw:
      return "raw";
    case Frame::root_centered:
      return "root_centered";
    case Frame::normalized:
      return "normalized";
  }
  return "unknown";
}

SkeletonTopology::SkeletonTopology(
    std::string name,
    std::vector<std::string> joint_names,
    std::vector<int> parent,
    std::vector<SymmetricSegment> segments,
    int root_index,
    int neck_index)
    : name_(std::move(name)),
      joint_names_(std::move(joint_names)),
      parent_(std::move(parent)),
      segments_(std::move(segments)),
      root_(root_index),
      neck_(neck_index) {
  const int n = joint_count();
  if (n == 0) {
    throw TopologyError("topology has no joints");
  }
  if (static_cast<int>(parent_.size()) != n) {
    throw TopologyError("parent table size does not match joint count");
  }
  if (root_ < 0 || root_ >= n || neck_ < 0 || neck_ >= n) {
    throw TopologyError("root or neck index out of range");
  }
  for (int j = 0; j < n; ++j) {
    const int p = parent_[static_cast<std::size_t>(j)];
    if (j == root_) {
      if (p != -1) {
        throw TopologyError("root joint must not have a parent");
      }
    } else if (p < 0 || p >= n || p == j) {
      throw TopologyError("joint " + joint_names_[static_cast<std::size_t>(j)] + " has invalid parent");
    }
  }

  // Breadth-first from the root; any joint not reached sits on a cycle or a
  // second tree.
  std::vector<std::vector<int>> children(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    if (j != root_) {
      children[static_cast<std::size_t>(parent_[static_cast<std::size_t>(j)])].push_back(j);
    }
  }
  order_.reserve(static_cast<std::size_t>(n));
  order_.push_back(root_);
  for (std::size_t head = 0; head < order_.size(); ++head) {
    for (int c : children[static_cast<std::size_t>(order_[head])]) {
      order_.push_back(c);
    }
  }
  if (static_cast<int>(order_.size()) != n) {
    throw TopologyError("parent table contains a cycle or unreachable joints");
  }
  for (int j : order_) {
    if (j != root_) {
      bones_.push_back(j);
    }
  }

  for (const auto& seg : segments_) {
    if (seg.left.size() != seg.right.size() || seg.left.empty()) {
      throw TopologyError("segment " + seg.name + " needs equally many left and right bones");
    }
    for (const auto* side : {&seg.left, &seg.right}) {
      for (int b : *side) {
        if (b < 0 || b >= n || b == root_) {
          throw TopologyError("segment " + seg.name + " references a bone not in the tree");
        }
      }
    }
  }
}

const SkeletonTopology& SkeletonTopology::h36m17() {
  static const SkeletonTopology topo(
      "h36m17",
      {"pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine", "neck",
       "nose", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist"},
      {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15},
      {
          {"arm", {12, 13}, {15, 16}},
          {"leg", {5, 6}, {2, 3}},
          {"neck_shoulder", {11}, {14}},
          {"hip_pelvis", {4}, {1}},
      },
      0,
      8);
  return topo;
}

std::vector<int> SkeletonTopology::hip_joints() const {
  for (const auto& seg : segments_) {
    if (seg.name == "hip_pelvis") {
      std::vector<int> hips = seg.left;
      hips.insert(hips.end(), seg.right.begin(), seg.right.end());
      return hips;
    }
  }
  return {};
}

int SkeletonTopology::joint_index(std::string_view joint_name) const {
  auto it = std::find(joint_names_.begin(), joint_names_.end(), joint_name);
  if (it == joint_names_.end()) {
    throw TopologyError("unknown joint '" + std::string(joint_name) + "'");
  }
  return static_cast<int>(it - joint_names_.begin());
}

bool SkeletonTopology::operator==(const SkeletonTopology& other) const {
  if (name_ != other.name_ || joint_names_ != other.joint_names_ || parent_ != other.parent_ ||
      root_ != other.root_ || neck_ != other.neck_ || segments_.size() != other.segments_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.name != b.name || a.left != b.left || a.right != b.right) {
      return false;
    }
  }
  return true;
}

std::string SkeletonTopology::to_text() const {
  std::ostringstream out;
  out << kTopologyMagic << ' ' << kTopologyVersion << '\n';
  out << "name " << name_ << '\n';
  for (int j = 0; j < joint_count(); ++j) {
    out << "joint " << joint_names_[static_cast<std::size_t>(j)] << ' '
        << parent_[static_cast<std::size_t>(j)] << '\n';
  }
  out << "root " << root_ << '\n';
  out << "neck " << neck_ << '\n';
  for (const auto& seg : segments_) {
    out << "segment " << seg.name << " left";
    for (int b : seg.left) {
      out << ' ' << b;
    }
    out << " right";
    for (int b : seg.right) {
      out << ' ' << b;
    }
    out << '\n';
  }
  return out.str();
}

SkeletonTopology SkeletonTopology::from_text(std::string_view text) {
  std::string name;
  std::vector<std::string> names;
  std::vector<int> parents;
  std::vector<SymmetricSegment> segments;
  int root = -1;
  int neck = -1;
  bool saw_header = false;

  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;

    if (auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    auto words = split_words(line);
    if (words.empty()) {
      continue;
    }
    const auto key = words[0];
    auto fail = [&](const std::string& what) {
      throw TopologyError("topology line " + std::to_string(line_no) + ": " + what);
    };

    if (!saw_header) {
      if (key != kTopologyMagic || words.size() != 2) {
        fail("missing 'liftpose-topology <version>' header");
      }
      if (parse_int(words[1], line_no) != kTopologyVersion) {
        fail("unsupported topology version " + std::string(words[1]));
      }
      saw_header = true;
    } else if (key == "name" && words.size() == 2) {
      name = std::string(words[1]);
    } else if (key == "joint" && words.size() == 3) {
      names.emplace_back(words[1]);
      parents.push_back(parse_int(words[2], line_no));
    } else if (key == "root" && words.size() == 2) {
      root = parse_int(words[1], line_no);
    } else if (key == "neck" && words.size() == 2) {
      neck = parse_int(words[1], line_no);
    } else if (key == "segment" && words.size() >= 6) {
      SymmetricSegment seg;
      seg.name = std::string(words[1]);
      std::vector<int>* side = nullptr;
      for (std::size_t i = 2; i < words.size(); ++i) {
        if (words[i] == "left") {
          side = &seg.left;
        } else if (words[i] == "right") {
          side = &seg.right;
        } else if (side == nullptr) {
          fail("segment bones must follow 'left' or 'right'");
        } else {
          side->push_back(parse_int(words[i], line_no));
        }
      }
      segments.push_back(std::move(seg));
    } else {
      fail("unrecognized entry '" + std::string(key) + "'");
    }
    if (end == text.size()) {
      break;
    }
  }
  if (!saw_header) {
    throw TopologyError("empty topology description");
  }
  return SkeletonTopology(std::move(name), std::move(names), std::move(parents),
                          std::move(segments), root, neck);
}

template <int Dim>
Pose<Dim> root_center(const Pose<Dim>& pose, const SkeletonTopology& topo) {
  if (pose.frame == Frame::normalized) {
    throw PreconditionError("root_center: expected a raw or root_centered pose, got normalized");
  }
  check_dims(pose.coords.size(), topo.joint_count() * Dim, "root_center");
  Pose<Dim> out = pose;
  const Eigen::Matrix<double, Dim, 1> root = pose.joint(topo.root_index());
  for (int j = 0; j < out.joint_count(); ++j) {
    out.joint(j) -= root;
  }
  out.frame = Frame::root_centered;
  return out;
}

NormalizationStats fit_normalization_rows(const Eigen::MatrixXd& rows) {
  if (rows.rows() == 0) {
    throw PreconditionError("fit_normalization: empty collection");
  }
  NormalizationStats stats;
  stats.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - stats.mean.transpose();
  stats.std = (centered.array().square().colwise().sum() / static_cast<double>(rows.rows()))
                  .sqrt()
                  .transpose();
  for (Eigen::Index i = 0; i < stats.std.size(); ++i) {
    if (stats.std[i] < kStdFloor) {
      stats.std[i] = 1.0;
    }
  }
  return stats;
}

template <int Dim>
NormalizationStats fit_normalization(std::span<const Pose<Dim>> poses) {
  if (poses.empty()) {
    throw PreconditionError("fit_normalization: empty collection");
  }
  const Frame frame = poses.front().frame;
  const Eigen::Index width = poses.front().coords.size();
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(poses.size()), width);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (poses[i].frame != frame) {
      throw PreconditionError("fit_normalization: mixed frames in collection");
    }
    check_dims(poses[i].coords.size(), width, "fit_normalization");
    rows.row(static_cast<Eigen::Index>(i)) = poses[i].coords.transpose();
  }
  return fit_normalization_rows(rows);
}

template <int Dim>
Pose<Dim> normalize(const Pose<Dim>& pose, const NormalizationStats& stats) {
  check_frame(pose.frame, Frame::root_centered, "normalize");
  check_dims(pose.coords.size(), stats.size(), "normalize");
  return Pose<Dim>(((pose.coords - stats.mean).array() / stats.std.array()).matrix(),
                   Frame::normalized);
}

template <int Dim>
Pose<Dim> denormalize(const Pose<Dim>& pose, const NormalizationStats& stats) {
  check_frame(pose.frame, Frame::normalized, "denormalize");
  check_dims(pose.coords.size(), stats.size(), "denormalize");
  return Pose<Dim>((pose.coords.array() * stats.std.array()).matrix() + stats.mean,
                   Frame::root_centered);
}

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& rows, const NormalizationStats& stats) {
  check_dims(rows.cols(), stats.size(), "normalize_rows");
  return ((rows.rowwise() - stats.mean.transpose()).array().rowwise() /
          stats.std.transpose().array())
      .matrix();
}

Eigen::MatrixXd denormalize_rows(const Eigen::MatrixXd& rows, const NormalizationStats& stats) {
  check_dims(rows.cols(), stats.size(), "denormalize_rows");
  return (rows.array().rowwise() * stats.std.transpose().array()).matrix().rowwise() +
         stats.mean.transpose();
}

Eigen::VectorXd bone_lengths(const Pose3D& pose, const SkeletonTopology& topo) {
  if (pose.frame == Frame::normalized) {
    throw PreconditionError("bone_lengths: normalized poses have no metric lengths");
  }
  check_dims(pose.coords.size(), topo.joint_count() * 3, "bone_lengths");
  const auto& bones = topo.bones();
  Eigen::VectorXd lengths(static_cast<Eigen::Index>(bones.size()));
  for (std::size_t b = 0; b < bones.size(); ++b) {
    const int child = bones[b];
    lengths[static_cast<Eigen::Index>(b)] =
        (pose.joint(child) - pose.joint(topo.parent(child))).norm();
  }
  return lengths;
}

Eigen::VectorXd bone_lengths_by_joint(const Pose3D& pose, const SkeletonTopology& topo) {
  const Eigen::VectorXd by_bone = bone_lengths(pose, topo);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(topo.joint_count());
  for (std::size_t b = 0; b < topo.bones().size(); ++b) {
    out[topo.bones()[b]] = by_bone[static_cast<Eigen::Index>(b)];
  }
  return out;
}

template Pose2D root_center<2>(const Pose2D&, const SkeletonTopology&);
template Pose3D root_center<3>(const Pose3D&, const SkeletonTopology&);
template NormalizationStats fit_normalization<2>(std::span<const Pose2D>);
template NormalizationStats fit_normalization<3>(std::span<const Pose3D>);
template Pose2D normalize<2>(const Pose2D&, const NormalizationStats&);
template Pose3D normalize<3>(const Pose3D&, const NormalizationStats&);
template Pose2D denormalize<2>(const Pose2D&, const NormalizationStats&);
template Pose3D denormalize<3>(const Pose3D&, const NormalizationStats&);

}  // namespace liftpose
