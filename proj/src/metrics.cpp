#include "liftpose/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace liftpose {

namespace {

void check_metric_pair(const PoseBatch3D& pred, const PoseBatch3D& gt, const char* op) {
  if (pred.frame != gt.frame) {
    throw PreconditionError(std::string(op) + ": frame mismatch");
  }
  if (pred.frame == Frame::normalized) {
    throw PreconditionError(std::string(op) + ": metrics need metric (non-normalized) poses");
  }
  if (pred.rows.rows() != gt.rows.rows() || pred.rows.cols() != gt.rows.cols()) {
    throw PreconditionError(std::string(op) + ": shape mismatch");
  }
}

// N x J matrix of per-joint Euclidean errors.
Eigen::MatrixXd joint_errors(const PoseBatch3D& pred, const PoseBatch3D& gt) {
  const Eigen::Index n = pred.size();
  const int joints = pred.joint_count();
  Eigen::MatrixXd err(n, joints);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < joints; ++j) {
      err(i, j) = (pred.rows.row(i).segment<3>(3 * j) - gt.rows.row(i).segment<3>(3 * j)).norm();
    }
  }
  return err;
}

double pck_of(const Eigen::MatrixXd& err, double threshold) {
  if (err.size() == 0) {
    return 0.0;
  }
  return 100.0 * static_cast<double>((err.array() < threshold).count()) /
         static_cast<double>(err.size());
}

void check_grid(std::span<const double> grid) {
  if (grid.empty()) {
    throw std::invalid_argument("auc: empty threshold grid");
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0) || (i > 0 && !(grid[i] > grid[i - 1]))) {
      throw std::invalid_argument("auc: grid must be positive and strictly ascending");
    }
  }
}

double auc_of(const Eigen::MatrixXd& err, std::span<const double> grid) {
  double sum = 0.0;
  for (double t : grid) {
    sum += pck_of(err, t) / 100.0;
  }
  return sum / static_cast<double>(grid.size());
}

}  // namespace

double mpje(const PoseBatch3D& pred, const PoseBatch3D& gt) {
  check_metric_pair(pred, gt, "mpje");
  const Eigen::MatrixXd err = joint_errors(pred, gt);
  return err.size() == 0 ? 0.0 : err.mean();
}

double pck(const PoseBatch3D& pred, const PoseBatch3D& gt, double threshold_mm) {
  if (!(threshold_mm > 0.0)) {
    throw std::invalid_argument("pck: threshold must be positive");
  }
  check_metric_pair(pred, gt, "pck");
  return pck_of(joint_errors(pred, gt), threshold_mm);
}

double auc(const PoseBatch3D& pred, const PoseBatch3D& gt, std::span<const double> grid) {
  check_grid(grid);
  check_metric_pair(pred, gt, "auc");
  return auc_of(joint_errors(pred, gt), grid);
}

std::vector<double> default_auc_grid() {
  std::vector<double> grid(31);
  for (int k = 1; k <= 31; ++k) {
    grid[static_cast<std::size_t>(k - 1)] = 150.0 * k / 31.0;
  }
  return grid;
}

Pose3D retarget(const Pose3D& pred, const Eigen::VectorXd& target_lengths,
                const SkeletonTopology& topo) {
  if (pred.frame == Frame::normalized) {
    throw PreconditionError("retarget: expects a metric pose");
  }
  const auto& bones = topo.bones();
  if (target_lengths.size() != static_cast<Eigen::Index>(bones.size()) ||
      pred.joint_count() != topo.joint_count()) {
    throw PreconditionError("retarget: one target length per bone required");
  }
  Eigen::VectorXd by_joint = Eigen::VectorXd::Zero(topo.joint_count());
  for (std::size_t b = 0; b < bones.size(); ++b) {
    const double len = target_lengths[static_cast<Eigen::Index>(b)];
    if (!(len > 0.0)) {
      throw std::invalid_argument("retarget: target length of bone " +
                                  topo.joint_names()[static_cast<std::size_t>(bones[b])] +
                                  " must be positive");
    }
    by_joint[bones[b]] = len;
  }
  Pose3D out = pred;
  for (int j : topo.topological_order()) {
    const int p = topo.parent(j);
    if (p < 0) {
      continue;
    }
    const Eigen::Vector3d v = pred.joint(j) - pred.joint(p);
    const double len = v.norm();
    if (len == 0.0) {
      throw std::invalid_argument("retarget: bone " +
                                  topo.joint_names()[static_cast<std::size_t>(j)] +
                                  " has zero length, direction undefined");
    }
    out.joint(j) = out.joint(p) + by_joint[j] * (v / len);
  }
  return out;
}

Pose3D pelvis_adjust(const Pose3D& pose, const SkeletonTopology& topo, double ratio) {
  Pose3D out = pose;
  const Eigen::Vector3d neck = pose.joint(topo.neck_index());
  std::vector<int> moved = topo.hip_joints();
  moved.push_back(topo.root_index());
  for (int j : moved) {
    out.joint(j) = pose.joint(j) + ratio * (neck - pose.joint(j));
  }
  return out;
}

EvalReport evaluate(const PoseBatch3D& pred, const PoseBatch3D& gt,
                    std::span<const std::string> tags, double pck_threshold_mm,
                    std::span<const double> auc_grid) {
  if (!(pck_threshold_mm > 0.0)) {
    throw std::invalid_argument("evaluate: threshold must be positive");
  }
  check_metric_pair(pred, gt, "evaluate");
  if (!tags.empty() && static_cast<Eigen::Index>(tags.size()) != pred.size()) {
    throw PreconditionError("evaluate: one tag per sample required");
  }
  EvalReport r;
  r.auc_grid = auc_grid.empty() ? default_auc_grid()
                                : std::vector<double>(auc_grid.begin(), auc_grid.end());
  check_grid(r.auc_grid);
  r.pck_threshold_mm = pck_threshold_mm;
  r.samples = static_cast<std::size_t>(pred.size());

  const Eigen::MatrixXd err = joint_errors(pred, gt);
  r.mpje = err.size() == 0 ? 0.0 : err.mean();
  r.pck = pck_of(err, pck_threshold_mm);
  r.auc = auc_of(err, r.auc_grid);
  r.per_joint_mpje =
      err.rows() == 0 ? Eigen::VectorXd::Zero(err.cols()) : Eigen::VectorXd(err.colwise().mean());

  std::map<std::string, std::vector<Eigen::Index>> by_tag;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    by_tag[tags[i]].push_back(static_cast<Eigen::Index>(i));
  }
  for (const auto& [tag, rows] : by_tag) {
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), err.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      sub.row(static_cast<Eigen::Index>(k)) = err.row(rows[k]);
    }
    r.groups.push_back({tag, rows.size(), sub.mean(), pck_of(sub, pck_threshold_mm),
                        auc_of(sub, r.auc_grid)});
  }
  return r;
}

std::string report_to_jsonl(const EvalReport& r, const SkeletonTopology& topo) {
  using json = nlohmann::ordered_json;
  std::string out;
  json summary;
  summary["kind"] = "summary";
  summary["samples"] = r.samples;
  summary["mpje_mm"] = r.mpje;
  summary["pck"] = r.pck;
  summary["pck_threshold_mm"] = r.pck_threshold_mm;
  summary["auc"] = r.auc;
  summary["auc_grid_mm"] = r.auc_grid;
  out += summary.dump() + "\n";
  for (Eigen::Index j = 0; j < r.per_joint_mpje.size(); ++j) {
    json row;
    row["kind"] = "joint";
    row["joint"] = topo.joint_names()[static_cast<std::size_t>(j)];
    row["mpje_mm"] = r.per_joint_mpje[j];
    out += row.dump() + "\n";
  }
  for (const auto& g : r.groups) {
    json row;
    row["kind"] = "group";
    row["tag"] = g.tag;
    row["samples"] = g.samples;
    row["mpje_mm"] = g.mpje;
    row["pck"] = g.pck;
    row["auc"] = g.auc;
    out += row.dump() + "\n";
  }
  return out;
}

std::string report_to_table(const EvalReport& r, const SkeletonTopology& topo) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-16s %8s %10s %8s %7s\n", "group", "samples", "MPJE(mm)",
                "PCK", "AUC");
  out << line;
  for (const auto& g : r.groups) {
    std::snprintf(line, sizeof(line), "%-16s %8zu %10.2f %8.2f %7.4f\n", g.tag.c_str(), g.samples,
                  g.mpje, g.pck, g.auc);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-16s %8zu %10.2f %8.2f %7.4f\n", "all", r.samples, r.mpje,
                r.pck, r.auc);
  out << line;
  out << "\nPCK threshold " << r.pck_threshold_mm << " mm, AUC over " << r.auc_grid.size()
      << " thresholds\n\n";
  std::snprintf(line, sizeof(line), "%-16s %10s\n", "joint", "MPJE(mm)");
  out << line;
  for (Eigen::Index j = 0; j < r.per_joint_mpje.size(); ++j) {
    std::snprintf(line, sizeof(line), "%-16s %10.2f\n",
                  topo.joint_names()[static_cast<std::size_t>(j)].c_str(), r.per_joint_mpje[j]);
    out << line;
  }
  return out.str();
}

}  // namespace liftpose
