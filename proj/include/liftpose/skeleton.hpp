#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace liftpose {

/// Thrown when an operation receives a pose in the wrong coordinate frame or
/// with the wrong dimensionality.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown for malformed or inconsistent topology descriptions.
class TopologyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Frame { raw, root_centered, normalized };

std::string_view to_string(Frame frame);

/// One contralateral segment class, e.g. "arm". Bones are named by their child
/// joint; left[k] is compared against right[k].
struct SymmetricSegment {
  std::string name;
  std::vector<int> left;
  std::vector<int> right;
};

/// Joint tree plus the left/right segment table used by the symmetry loss.
class SkeletonTopology {
 public:
  SkeletonTopology(
      std::string name,
      std::vector<std::string> joint_names,
      std::vector<int> parent,
      std::vector<SymmetricSegment> segments,
      int root_index,
      int neck_index);

  /// 17-joint Human3.6m ordering:
  ///   0 pelvis, 1 r_hip, 2 r_knee, 3 r_ankle, 4 l_hip, 5 l_knee, 6 l_ankle,
  ///   7 spine, 8 neck, 9 nose, 10 head, 11 l_shoulder, 12 l_elbow,
  ///   13 l_wrist, 14 r_shoulder, 15 r_elbow, 16 r_wrist.
  static const SkeletonTopology& h36m17();

  /// Parses the versioned text description written by to_text().
  static SkeletonTopology from_text(std::string_view text);
  std::string to_text() const;

  const std::string& name() const { return name_; }
  int joint_count() const { return static_cast<int>(joint_names_.size()); }
  const std::vector<std::string>& joint_names() const { return joint_names_; }
  const std::vector<int>& parents() const { return parent_; }
  int parent(int joint) const { return parent_.at(static_cast<std::size_t>(joint)); }
  const std::vector<SymmetricSegment>& segments() const { return segments_; }
  int root_index() const { return root_; }
  int neck_index() const { return neck_; }

  /// Child joints of every bone, i.e. all non-root joints, in parent-before-child order.
  const std::vector<int>& bones() const { return bones_; }
  /// Joint ordering in which every parent precedes its children.
  const std::vector<int>& topological_order() const { return order_; }
  /// Joints of the segment class named "hip_pelvis" (the hips); empty if absent.
  std::vector<int> hip_joints() const;
  int joint_index(std::string_view joint_name) const;

  bool operator==(const SkeletonTopology& other) const;

 private:
  std::string name_;
  std::vector<std::string> joint_names_;
  std::vector<int> parent_;
  std::vector<SymmetricSegment> segments_;
  int root_;
  int neck_;
  std::vector<int> order_;
  std::vector<int> bones_;
};

/// Fixed-ordering joint coordinates, flattened as [x0, y0, (z0,) x1, ...].
template <int Dim>
struct Pose {
  static constexpr int kDim = Dim;

  Eigen::VectorXd coords;
  Frame frame = Frame::raw;

  Pose() = default;
  Pose(Eigen::VectorXd c, Frame f) : coords(std::move(c)), frame(f) {
    if (coords.size() % Dim != 0) {
      throw PreconditionError("pose coordinate count is not a multiple of the dimension");
    }
  }

  static Pose zeros(int joints, Frame f = Frame::raw) {
    return Pose(Eigen::VectorXd::Zero(joints * Dim), f);
  }

  int joint_count() const { return static_cast<int>(coords.size() / Dim); }
  auto joint(int j) { return coords.template segment<Dim>(j * Dim); }
  auto joint(int j) const { return coords.template segment<Dim>(j * Dim); }
  bool all_finite() const { return coords.allFinite(); }
};

using Pose2D = Pose<2>;
using Pose3D = Pose<3>;

/// Per-coordinate statistics over a flattened pose collection.
struct NormalizationStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  Eigen::Index size() const { return mean.size(); }
  bool operator==(const NormalizationStats&) const = default;
};

/// Std entries below this value are replaced by 1.
inline constexpr double kStdFloor = 1e-8;

template <int Dim>
Pose<Dim> root_center(const Pose<Dim>& pose, const SkeletonTopology& topo);

template <int Dim>
NormalizationStats fit_normalization(std::span<const Pose<Dim>> poses);

/// Same as fit_normalization but over rows of a matrix (one flattened pose per row).
NormalizationStats fit_normalization_rows(const Eigen::MatrixXd& rows);

template <int Dim>
Pose<Dim> normalize(const Pose<Dim>& pose, const NormalizationStats& stats);

template <int Dim>
Pose<Dim> denormalize(const Pose<Dim>& pose, const NormalizationStats& stats);

/// Row-wise (x - mean) / std on a batch matrix.
Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& rows, const NormalizationStats& stats);
Eigen::MatrixXd denormalize_rows(const Eigen::MatrixXd& rows, const NormalizationStats& stats);

/// Length of every bone in topo.bones() order (indexed by position, not joint).
Eigen::VectorXd bone_lengths(const Pose3D& pose, const SkeletonTopology& topo);

/// Lengths indexed by child joint; the root entry is 0.
Eigen::VectorXd bone_lengths_by_joint(const Pose3D& pose, const SkeletonTopology& topo);

}  // namespace liftpose
