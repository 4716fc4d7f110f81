#pragma once

#include "liftpose/skeleton.hpp"

#include <Eigen/Core>

#include <span>

namespace liftpose {

/// A batch of flattened poses, one sample per row.
template <int Dim>
struct PoseBatch {
  Eigen::MatrixXd rows;
  Frame frame = Frame::raw;

  Eigen::Index size() const { return rows.rows(); }
  int joint_count() const { return static_cast<int>(rows.cols() / Dim); }
};

using PoseBatch2D = PoseBatch<2>;
using PoseBatch3D = PoseBatch<3>;

/// N x J, true where the joint is annotated.
using VisibilityMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct LossWeights {
  double alpha = 0.5;
  double beta = 0.5;
  double gamma = 1.0;
};

/// Value, per-sample decomposition (before the 1/N) and gradient w.r.t. the
/// prediction.
struct LossTerm {
  double value = 0.0;
  Eigen::VectorXd per_sample;
  Eigen::MatrixXd gradient;
};

struct LossReport {
  double l3d = 0.0;
  double l2d = 0.0;
  double lsymm = 0.0;
  double total = 0.0;
  /// Weights actually applied; alpha is 0 when no 3d ground truth was present.
  LossWeights applied;
  Eigen::Index batch_size = 0;
};

/// (1/N) sum_i g_i * ||pred_i - gt_i||^2 with optional per-sample gates g_i
/// (1 when the sample carries 3d ground truth, 0 otherwise).
LossTerm loss_3d(const PoseBatch3D& pred, const PoseBatch3D& gt,
                 std::span<const double> sample_gates = {});

/// (1/N) sum_i sum_{visible j} ||reproj_ij - target_ij||^2.
LossTerm loss_reproj(const PoseBatch2D& reproj, const PoseBatch2D& target,
                     const VisibilityMask* visibility = nullptr);

/// (1/N) sum_i (1/|classes|) sum_{class} sum_{k} (B_left_k - B_right_k)^2,
/// comparing bones pairwise within each segment class. The subgradient of a
/// zero-length bone is taken as 0.
LossTerm loss_symmetry(const PoseBatch3D& pred, const SkeletonTopology& topo);

LossReport total_loss(double l3d, double l2d, double lsymm, const LossWeights& weights,
                      bool has_3d_gt, Eigen::Index batch_size = 0);

}  // namespace liftpose
