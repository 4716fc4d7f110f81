#pragma once

#include "liftpose/losses.hpp"
#include "liftpose/skeleton.hpp"

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

namespace liftpose {

inline constexpr double kDefaultPckThresholdMm = 150.0;

/// Mean per-joint Euclidean error (mm), no alignment.
double mpje(const PoseBatch3D& pred, const PoseBatch3D& gt);

/// Percentage of joints whose error is strictly below threshold_mm.
double pck(const PoseBatch3D& pred, const PoseBatch3D& gt,
           double threshold_mm = kDefaultPckThresholdMm);

/// Mean of pck/100 over an ascending threshold grid.
double auc(const PoseBatch3D& pred, const PoseBatch3D& gt, std::span<const double> grid);

/// 31 thresholds k * 150/31 mm, k = 1..31.
std::vector<double> default_auc_grid();

/// Rescales every bone to target_lengths (topo.bones() order) keeping its
/// direction, walking parent before child from the root.
Pose3D retarget(const Pose3D& pred, const Eigen::VectorXd& target_lengths,
                const SkeletonTopology& topo);

/// Moves the pelvis and both hips toward the neck by ratio * (neck - joint).
Pose3D pelvis_adjust(const Pose3D& pose, const SkeletonTopology& topo, double ratio = 0.2);

struct GroupMetrics {
  std::string tag;
  std::size_t samples = 0;
  double mpje = 0.0;
  double pck = 0.0;
  double auc = 0.0;
};

struct EvalReport {
  std::size_t samples = 0;
  double mpje = 0.0;
  double pck = 0.0;
  double auc = 0.0;
  double pck_threshold_mm = kDefaultPckThresholdMm;
  std::vector<double> auc_grid;
  /// Mean error per joint (mm).
  Eigen::VectorXd per_joint_mpje;
  /// One row per distinct tag, sorted by tag.
  std::vector<GroupMetrics> groups;
};

EvalReport evaluate(const PoseBatch3D& pred, const PoseBatch3D& gt,
                    std::span<const std::string> tags,
                    double pck_threshold_mm = kDefaultPckThresholdMm,
                    std::span<const double> auc_grid = {});

/// JSON lines: one "summary" record, one per joint, one per group.
std::string report_to_jsonl(const EvalReport& report, const SkeletonTopology& topo);
std::string report_to_table(const EvalReport& report, const SkeletonTopology& topo);

}  // namespace liftpose
