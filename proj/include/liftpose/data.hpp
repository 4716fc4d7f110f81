#pragma once

#include "liftpose/skeleton.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace liftpose {

struct Sample {
  std::string id;
  Pose2D y2d;
  std::optional<Pose3D> y3d;
  /// Per-joint annotation flags; all true for fully annotated poses.
  std::vector<bool> visibility;
  /// Dataset or activity identifier; metrics break results down by it.
  std::string source_tag;
  /// Re-projected 2d pose written by prediction; absent on training data.
  std::optional<Pose2D> reprojection;

  bool has_3d() const { return y3d.has_value(); }
  bool fully_visible() const;
  bool operator==(const Sample&) const;
};

enum class CameraKind { orthographic, pinhole };

/// Intrinsics plus the placement the synthetic generator uses. Only kind,
/// focal and principal point take part in project().
struct CameraModel {
  CameraKind kind = CameraKind::pinhole;
  double focal = 1145.0;
  Eigen::Vector2d principal{500.0, 500.0};
  /// Nominal camera-to-pelvis distance (mm), jittered +-10% per sample.
  double distance = 5000.0;
  /// Camera height above the subject expressed as a downward viewing angle.
  double elevation_deg = 0.0;
};

class ProjectionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Orthographic: drops z. Pinhole: (cx + f x/z, cy + f y/z); every joint must
/// satisfy z > 0.
Pose2D project(const Pose3D& pose, const CameraModel& camera);

/// Forward-kinematic samples of the default 17-joint skeleton, seen through
/// `camera`. y3d is in camera coordinates (mm), y2d its projection. Bone
/// lengths are fixed per synthetic subject and left/right symmetric.
std::vector<Sample> generate_synthetic(int count, std::uint64_t seed, const CameraModel& camera,
                                       const SkeletonTopology& topo);

/// Activity names the generator assigns to source_tag.
const std::vector<std::string>& synthetic_activities();

struct AugmentationSpec {
  double max_rotation_deg = 30.0;
  double min_scale = 0.8;
  double max_scale = 1.2;
  int copies = 35;
};

/// Independent in-plane rotation + isotropic scale per copy. Copies carry no
/// 3d pose.
std::vector<Sample> augment_2d(const Sample& sample, const AugmentationSpec& spec,
                               std::uint64_t seed);

/// Applies one fixed similarity (rotation in degrees, scale) about the origin.
Pose2D rotate_scale(const Pose2D& pose, double rotation_deg, double scale);

class PoseFileError : public std::runtime_error {
 public:
  enum class Kind { io, malformed, version, unknown_field, topology_mismatch, non_finite };

  PoseFileError(Kind kind, long record, const std::string& message);

  Kind kind() const { return kind_; }
  /// Zero-based record index, or -1 for header/file-level problems.
  long record() const { return record_; }

 private:
  Kind kind_;
  long record_;
};

inline constexpr int kPoseFileVersion = 1;

/// `config_json`, when given, must be a JSON object; it is stored in the
/// header and ignored by load_poses.
void save_poses(std::span<const Sample> samples, const SkeletonTopology& topo,
                const std::filesystem::path& path, std::string_view config_json = {});
std::vector<Sample> load_poses(const std::filesystem::path& path, const SkeletonTopology& topo);

struct Batch {
  std::vector<std::size_t> source;
  std::vector<std::size_t> index;
  std::vector<bool> has_3d;

  std::size_t size() const { return index.size(); }
};

/// One epoch of mixed batches. Each full batch holds exactly
/// batch_size * ratio[s] / sum(ratio) samples from source s. The source with
/// the most samples per share sets the epoch length and is visited exactly
/// once; smaller sources are cycled through fresh permutations. With
/// drop_last the trailing partial batch is omitted.
std::vector<Batch> make_batches(std::span<const std::span<const Sample>> sources,
                                std::span<const int> ratio, int batch_size, std::uint64_t seed,
                                bool drop_last);

}  // namespace liftpose
