#include "liftpose/losses.hpp"

#include <cmath>
#include <string>

namespace liftpose {

namespace {

template <int Dim>
void check_pair(const PoseBatch<Dim>& a, const PoseBatch<Dim>& b, const char* op) {
  if (a.frame != b.frame) {
    throw PreconditionError(std::string(op) + ": frame mismatch (" +
                            std::string(to_string(a.frame)) + " vs " +
                            std::string(to_string(b.frame)) + ")");
  }
  if (a.rows.rows() != b.rows.rows() || a.rows.cols() != b.rows.cols()) {
    throw PreconditionError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

LossTerm loss_3d(const PoseBatch3D& pred, const PoseBatch3D& gt,
                 std::span<const double> sample_gates) {
  check_pair(pred, gt, "loss_3d");
  const Eigen::Index n = pred.size();
  if (!sample_gates.empty() && static_cast<Eigen::Index>(sample_gates.size()) != n) {
    throw PreconditionError("loss_3d: one gate per sample required");
  }
  LossTerm term;
  term.per_sample = Eigen::VectorXd::Zero(n);
  term.gradient = Eigen::MatrixXd::Zero(pred.rows.rows(), pred.rows.cols());
  if (n == 0) {
    return term;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double gate = sample_gates.empty() ? 1.0 : sample_gates[static_cast<std::size_t>(i)];
    if (gate == 0.0) {
      continue;
    }
    const Eigen::RowVectorXd diff = pred.rows.row(i) - gt.rows.row(i);
    term.per_sample[i] = gate * diff.squaredNorm();
    term.gradient.row(i) = 2.0 * gate * inv_n * diff;
  }
  term.value = term.per_sample.sum() * inv_n;
  return term;
}

LossTerm loss_reproj(const PoseBatch2D& reproj, const PoseBatch2D& target,
                     const VisibilityMask* visibility) {
  check_pair(reproj, target, "loss_reproj");
  const Eigen::Index n = reproj.size();
  const int joints = reproj.joint_count();
  if (visibility != nullptr && (visibility->rows() != n || visibility->cols() != joints)) {
    throw PreconditionError("loss_reproj: visibility mask must be N x J");
  }
  LossTerm term;
  term.per_sample = Eigen::VectorXd::Zero(n);
  term.gradient = Eigen::MatrixXd::Zero(reproj.rows.rows(), reproj.rows.cols());
  if (n == 0) {
    return term;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int j = 0; j < joints; ++j) {
      if (visibility != nullptr && !(*visibility)(i, j)) {
        continue;
      }
      for (int d = 0; d < 2; ++d) {
        const Eigen::Index c = 2 * j + d;
        const double diff = reproj.rows(i, c) - target.rows(i, c);
        sum += diff * diff;
        term.gradient(i, c) = 2.0 * inv_n * diff;
      }
    }
    term.per_sample[i] = sum;
  }
  term.value = term.per_sample.sum() * inv_n;
  return term;
}

LossTerm loss_symmetry(const PoseBatch3D& pred, const SkeletonTopology& topo) {
  if (pred.frame == Frame::normalized) {
    throw PreconditionError("loss_symmetry: bone lengths need a metric frame, got normalized");
  }
  if (pred.rows.cols() != 3 * topo.joint_count()) {
    throw PreconditionError("loss_symmetry: pose width does not match topology");
  }
  const Eigen::Index n = pred.size();
  LossTerm term;
  term.per_sample = Eigen::VectorXd::Zero(n);
  term.gradient = Eigen::MatrixXd::Zero(pred.rows.rows(), pred.rows.cols());
  const auto& segments = topo.segments();
  if (n == 0 || segments.empty()) {
    return term;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_classes = 1.0 / static_cast<double>(segments.size());

  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = pred.rows.row(i);
    auto grad = term.gradient.row(i);
    auto bone = [&](int child) -> Eigen::Vector3d {
      const int parent = topo.parent(child);
      return (row.segment<3>(3 * child) - row.segment<3>(3 * parent)).transpose();
    };
    // d|v|/dv = v/|v|, taken as 0 at |v| = 0.
    auto push_length_grad = [&](int child, const Eigen::Vector3d& v, double len, double scale) {
      if (len == 0.0) {
        return;
      }
      const Eigen::Vector3d dv = scale * v / len;
      const int parent = topo.parent(child);
      grad.segment<3>(3 * child) += dv.transpose();
      grad.segment<3>(3 * parent) -= dv.transpose();
    };

    double sample = 0.0;
    for (const auto& seg : segments) {
      for (std::size_t k = 0; k < seg.left.size(); ++k) {
        const Eigen::Vector3d vl = bone(seg.left[k]);
        const Eigen::Vector3d vr = bone(seg.right[k]);
        const double bl = vl.norm();
        const double br = vr.norm();
        const double diff = bl - br;
        sample += diff * diff;
        const double d_len = 2.0 * diff * inv_classes * inv_n;
        push_length_grad(seg.left[k], vl, bl, d_len);
        push_length_grad(seg.right[k], vr, br, -d_len);
      }
    }
    term.per_sample[i] = sample * inv_classes;
  }
  term.value = term.per_sample.sum() * inv_n;
  return term;
}

LossReport total_loss(double l3d, double l2d, double lsymm, const LossWeights& weights,
                      bool has_3d_gt, Eigen::Index batch_size) {
  LossReport r;
  r.applied = weights;
  if (!has_3d_gt) {
    r.applied.alpha = 0.0;
  }
  r.l3d = l3d;
  r.l2d = l2d;
  r.lsymm = lsymm;
  r.total = r.applied.alpha * l3d + r.applied.beta * l2d + r.applied.gamma * lsymm;
  r.batch_size = batch_size;
  return r;
}

}  // namespace liftpose
