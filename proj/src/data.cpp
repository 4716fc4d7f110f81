#include "liftpose/data.hpp"

#include "liftpose/random.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

namespace liftpose {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Range {
  double lo;
  double hi;
};

// Joint-angle ranges in degrees. Flexion is forward for hips/shoulders,
// backward for knees; abduction moves the limb away from the midline.
struct ActivityRanges {
  const char* name;
  Range hip_flex;
  Range hip_abd;
  Range knee_flex;
  Range shoulder_flex;
  Range shoulder_abd;
  Range elbow_flex;
  Range spine_bend;
  Range spine_twist;
  Range spine_side;
};

constexpr std::array<ActivityRanges, 5> kActivities = {{
    {"stand", {-10, 15}, {0, 15}, {0, 15}, {-20, 40}, {5, 40}, {0, 60}, {-5, 15}, {-15, 15}, {-8, 8}},
    {"walk", {-30, 40}, {0, 10}, {0, 70}, {-40, 40}, {5, 20}, {10, 70}, {0, 15}, {-20, 20}, {-5, 5}},
    {"sit", {70, 100}, {0, 25}, {70, 110}, {-10, 60}, {5, 30}, {20, 100}, {0, 30}, {-20, 20}, {-10, 10}},
    {"reach", {-10, 30}, {0, 15}, {0, 30}, {30, 170}, {10, 90}, {0, 60}, {-10, 25}, {-30, 30}, {-15, 15}},
    {"crouch", {60, 120}, {5, 30}, {80, 140}, {0, 90}, {5, 40}, {20, 120}, {15, 45}, {-20, 20}, {-10, 10}},
}};

// Rest offsets (mm) from parent to child in the subject frame: x to the
// subject's left, y up, z forward. Indexed by joint of the default topology.
const std::array<Eigen::Vector3d, 17> kRestOffsets = {{
    {0, 0, 0},          // pelvis
    {-130, 0, 0},       // r_hip
    {0, -440, 0},       // r_knee
    {0, -440, 0},       // r_ankle
    {130, 0, 0},        // l_hip
    {0, -440, 0},       // l_knee
    {0, -440, 0},       // l_ankle
    {0, 230, 0},        // spine
    {0, 250, 0},        // neck
    {0, 120, 90},       // nose
    {0, 110, -50},      // head
    {150, -20, 0},      // l_shoulder
    {0, -280, 0},       // l_elbow
    {0, -250, 0},       // l_wrist
    {-150, -20, 0},     // r_shoulder
    {0, -280, 0},       // r_elbow
    {0, -250, 0},       // r_wrist
}};

// Joints sharing one length scale; left/right pairs share a group.
constexpr std::array<int, 17> kLengthGroup = {0, 1, 2, 3, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 8, 9, 10};
constexpr int kLengthGroups = 11;

Eigen::Matrix3d rot_x(double deg) {
  return Eigen::AngleAxisd(deg * kDeg, Eigen::Vector3d::UnitX()).toRotationMatrix();
}
Eigen::Matrix3d rot_y(double deg) {
  return Eigen::AngleAxisd(deg * kDeg, Eigen::Vector3d::UnitY()).toRotationMatrix();
}
Eigen::Matrix3d rot_z(double deg) {
  return Eigen::AngleAxisd(deg * kDeg, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

double draw(Rng& rng, Range r) {
  return uniform(rng, r.lo, r.hi);
}

struct Subject {
  std::array<double, kLengthGroups> scale;
};

Subject make_subject(Rng& rng) {
  Subject s;
  const double global = uniform(rng, 0.88, 1.12);
  for (auto& g : s.scale) {
    g = global * uniform(rng, 0.94, 1.06);
  }
  return s;
}

// World-frame joint positions (y up) with the pelvis at the origin.
std::array<Eigen::Vector3d, 17> pose_subject(const Subject& subject, const ActivityRanges& act,
                                             double yaw_deg, const SkeletonTopology& topo,
                                             Rng& rng) {
  std::array<Eigen::Matrix3d, 17> local;
  local.fill(Eigen::Matrix3d::Identity());

  // Pelvis tilt (anterior/posterior) and lateral drop.
  local[0] = rot_z(uniform(rng, -8, 8)) * rot_x(uniform(rng, -10, 10));

  // Hips: left abducts toward +x, right toward -x.
  local[4] = rot_z(draw(rng, act.hip_abd)) * rot_x(-draw(rng, act.hip_flex));
  local[1] = rot_z(-draw(rng, act.hip_abd)) * rot_x(-draw(rng, act.hip_flex));
  local[5] = rot_x(draw(rng, act.knee_flex));
  local[2] = rot_x(draw(rng, act.knee_flex));
  local[7] = rot_y(draw(rng, act.spine_twist)) * rot_z(draw(rng, act.spine_side)) *
             rot_x(draw(rng, act.spine_bend));
  local[8] = rot_y(uniform(rng, -10, 10)) * rot_x(uniform(rng, -10, 15));
  local[9] = rot_y(uniform(rng, -30, 30)) * rot_x(uniform(rng, -15, 20));
  local[11] = rot_z(draw(rng, act.shoulder_abd)) * rot_x(-draw(rng, act.shoulder_flex));
  local[14] = rot_z(-draw(rng, act.shoulder_abd)) * rot_x(-draw(rng, act.shoulder_flex));
  local[12] = rot_x(-draw(rng, act.elbow_flex));
  local[15] = rot_x(-draw(rng, act.elbow_flex));

  std::array<Eigen::Matrix3d, 17> global;
  std::array<Eigen::Vector3d, 17> pos;
  const int root = topo.root_index();
  global[root] = rot_y(yaw_deg) * local[root];
  pos[root] = Eigen::Vector3d::Zero();
  for (int j : topo.bones()) {
    const int p = topo.parent(j);
    pos[j] = pos[p] + global[p] * (subject.scale[kLengthGroup[j]] * kRestOffsets[j]);
    global[j] = global[p] * local[j];
  }
  return pos;
}

}  // namespace

bool Sample::fully_visible() const {
  return std::all_of(visibility.begin(), visibility.end(), [](bool v) { return v; });
}

bool Sample::operator==(const Sample& o) const {
  auto same2 = [](const Pose2D& a, const Pose2D& b) {
    return a.frame == b.frame && a.coords == b.coords;
  };
  auto same3 = [](const Pose3D& a, const Pose3D& b) {
    return a.frame == b.frame && a.coords == b.coords;
  };
  if (id != o.id || source_tag != o.source_tag || visibility != o.visibility ||
      !same2(y2d, o.y2d) || y3d.has_value() != o.y3d.has_value() ||
      reprojection.has_value() != o.reprojection.has_value()) {
    return false;
  }
  if (y3d && !same3(*y3d, *o.y3d)) {
    return false;
  }
  return !reprojection || same2(*reprojection, *o.reprojection);
}

Pose2D project(const Pose3D& pose, const CameraModel& camera) {
  const int n = pose.joint_count();
  Pose2D out = Pose2D::zeros(n, Frame::raw);
  if (camera.kind == CameraKind::orthographic) {
    for (int j = 0; j < n; ++j) {
      out.joint(j) = pose.joint(j).head<2>();
    }
    return out;
  }
  if (!(camera.focal > 0.0)) {
    throw std::invalid_argument("project: focal length must be positive");
  }
  for (int j = 0; j < n; ++j) {
    const Eigen::Vector3d p = pose.joint(j);
    if (!(p.z() > 0.0)) {
      throw ProjectionError("project: joint " + std::to_string(j) +
                            " lies at or behind the camera plane");
    }
    out.joint(j) = camera.principal + camera.focal * p.head<2>() / p.z();
  }
  return out;
}

const std::vector<std::string>& synthetic_activities() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& a : kActivities) {
      v.emplace_back(a.name);
    }
    return v;
  }();
  return names;
}

std::vector<Sample> generate_synthetic(int count, std::uint64_t seed, const CameraModel& camera,
                                       const SkeletonTopology& topo) {
  if (count <= 0) {
    throw std::invalid_argument("generate_synthetic: count must be positive");
  }
  if (!(topo == SkeletonTopology::h36m17())) {
    throw std::invalid_argument("generate_synthetic: kinematic model is defined for h36m17 only");
  }
  if (!(camera.distance > 0.0)) {
    throw std::invalid_argument("generate_synthetic: camera distance must be positive");
  }
  Rng rng(mix_seed(seed, 0));
  constexpr int kSubjects = 7;
  std::array<Subject, kSubjects> subjects;
  for (auto& s : subjects) {
    s = make_subject(rng);
  }

  // Camera looks at the world origin from `distance`, tilted down by the
  // elevation angle. Rows are the camera axes (x right, y down, z forward).
  const double elev = camera.elevation_deg * kDeg;
  const Eigen::Vector3d forward(0.0, -std::sin(elev), std::cos(elev));
  const Eigen::Vector3d right = forward.cross(Eigen::Vector3d::UnitY()).normalized();
  const Eigen::Vector3d down = forward.cross(right);
  Eigen::Matrix3d world_to_cam;
  world_to_cam.row(0) = right.transpose();
  world_to_cam.row(1) = down.transpose();
  world_to_cam.row(2) = forward.transpose();

  const int joints = topo.joint_count();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto& subject = subjects[uniform_index(rng, kSubjects)];
    const auto& act = kActivities[uniform_index(rng, kActivities.size())];
    const double yaw = uniform(rng, 0.0, 360.0);
    const auto world = pose_subject(subject, act, yaw, topo, rng);

    const double dist = camera.distance * uniform(rng, 0.9, 1.1);
    const Eigen::Vector3d center = -dist * forward;
    const Eigen::Vector3d offset(uniform(rng, -300, 300), uniform(rng, -150, 150),
                                 uniform(rng, -300, 300));

    Pose3D y3d = Pose3D::zeros(joints, Frame::raw);
    for (int j = 0; j < joints; ++j) {
      y3d.joint(j) = world_to_cam * (world[static_cast<std::size_t>(j)] + offset - center);
    }
    Sample s;
    s.id = "syn-" + std::to_string(seed) + "-" + std::to_string(i);
    s.y2d = project(y3d, camera);
    s.y3d = std::move(y3d);
    s.visibility.assign(static_cast<std::size_t>(joints), true);
    s.source_tag = act.name;
    out.push_back(std::move(s));
  }
  return out;
}

Pose2D rotate_scale(const Pose2D& pose, double rotation_deg, double scale) {
  const double c = std::cos(rotation_deg * kDeg);
  const double s = std::sin(rotation_deg * kDeg);
  Eigen::Matrix2d m;
  m << c, -s, s, c;
  m *= scale;
  Pose2D out = pose;
  for (int j = 0; j < out.joint_count(); ++j) {
    out.joint(j) = m * pose.joint(j);
  }
  return out;
}

std::vector<Sample> augment_2d(const Sample& sample, const AugmentationSpec& spec,
                               std::uint64_t seed) {
  if (sample.y2d.frame != Frame::root_centered) {
    throw PreconditionError("augment_2d: expects a root-centered 2d pose");
  }
  if (!(spec.min_scale > 0.0) || spec.max_scale < spec.min_scale || spec.copies < 0) {
    throw std::invalid_argument("augment_2d: invalid augmentation spec");
  }
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.copies));
  for (int k = 0; k < spec.copies; ++k) {
    const double angle = uniform(rng, -spec.max_rotation_deg, spec.max_rotation_deg);
    const double scale = uniform(rng, spec.min_scale, spec.max_scale);
    Sample copy;
    copy.id = sample.id + "#aug" + std::to_string(k);
    copy.y2d = rotate_scale(sample.y2d, angle, scale);
    copy.visibility = sample.visibility;
    copy.source_tag = sample.source_tag;
    out.push_back(std::move(copy));
  }
  return out;
}

std::vector<Batch> make_batches(std::span<const std::span<const Sample>> sources,
                                std::span<const int> ratio, int batch_size, std::uint64_t seed,
                                bool drop_last) {
  if (sources.empty() || sources.size() != ratio.size()) {
    throw std::invalid_argument("make_batches: one ratio entry per source required");
  }
  if (batch_size <= 0) {
    throw std::invalid_argument("make_batches: batch size must be positive");
  }
  const int parts = std::accumulate(ratio.begin(), ratio.end(), 0);
  if (parts <= 0 || std::any_of(ratio.begin(), ratio.end(), [](int r) { return r < 0; })) {
    throw std::invalid_argument("make_batches: ratio entries must be nonnegative with a positive sum");
  }
  if (batch_size % parts != 0) {
    throw std::invalid_argument("make_batches: batch size " + std::to_string(batch_size) +
                                " is not divisible by the mix ratio total " +
                                std::to_string(parts));
  }
  const std::size_t n_src = sources.size();
  std::vector<std::size_t> share(n_src);
  for (std::size_t s = 0; s < n_src; ++s) {
    share[s] = static_cast<std::size_t>(batch_size / parts * ratio[s]);
    if (share[s] > 0 && sources[s].empty()) {
      throw std::invalid_argument("make_batches: source " + std::to_string(s) + " is empty");
    }
  }

  // The source needing the most batches to be seen once defines the epoch.
  std::size_t lead = n_src;
  double lead_batches = -1.0;
  for (std::size_t s = 0; s < n_src; ++s) {
    if (share[s] == 0) {
      continue;
    }
    const double b = static_cast<double>(sources[s].size()) / static_cast<double>(share[s]);
    if (b > lead_batches) {
      lead_batches = b;
      lead = s;
    }
  }
  const std::size_t lead_n = sources[lead].size();
  const std::size_t full = lead_n / share[lead];
  const std::size_t rest = lead_n % share[lead];

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> perm(n_src);
  std::vector<std::size_t> cursor(n_src, 0);
  for (std::size_t s = 0; s < n_src; ++s) {
    perm[s].resize(sources[s].size());
    std::iota(perm[s].begin(), perm[s].end(), std::size_t{0});
    shuffle(perm[s], rng);
  }
  auto take = [&](std::size_t s, Batch& batch) {
    if (cursor[s] == perm[s].size()) {
      shuffle(perm[s], rng);
      cursor[s] = 0;
    }
    const std::size_t idx = perm[s][cursor[s]++];
    batch.source.push_back(s);
    batch.index.push_back(idx);
    batch.has_3d.push_back(sources[s][idx].has_3d());
  };

  std::vector<Batch> batches;
  batches.reserve(full + 1);
  auto emit = [&](std::size_t lead_count) {
    Batch batch;
    for (std::size_t s = 0; s < n_src; ++s) {
      const std::size_t k =
          s == lead ? lead_count : (share[s] * lead_count + share[lead] - 1) / share[lead];
      for (std::size_t i = 0; i < k; ++i) {
        take(s, batch);
      }
    }
    batches.push_back(std::move(batch));
  };
  for (std::size_t b = 0; b < full; ++b) {
    emit(share[lead]);
  }
  if (rest > 0 && !drop_last) {
    emit(rest);
  }
  return batches;
}

PoseFileError::PoseFileError(Kind kind, long record, const std::string& message)
    : std::runtime_error(record >= 0 ? "record " + std::to_string(record) + ": " + message
                                     : message),
      kind_(kind),
      record_(record) {}

}  // namespace liftpose
