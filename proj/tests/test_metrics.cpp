#include "liftpose/metrics.hpp"

#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <sstream>

using namespace liftpose;
using namespace testing_support;

namespace {

const SkeletonTopology& topo() { return SkeletonTopology::h36m17(); }

PoseBatch3D batch(Rng& rng, int n, double s = 300.0) {
  return {random_matrix(rng, n, 51, -s, s), Frame::root_centered};
}

double joint_error(const PoseBatch3D& a, const PoseBatch3D& b, Eigen::Index i, int j) {
  double ss = 0.0;
  for (int d = 0; d < 3; ++d) {
    const double diff = a.rows(i, 3 * j + d) - b.rows(i, 3 * j + d);
    ss += diff * diff;
  }
  return std::sqrt(ss);
}

double mpje_oracle(const PoseBatch3D& a, const PoseBatch3D& b) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    for (int j = 0; j < a.joint_count(); ++j) {
      sum += joint_error(a, b, i, j);
    }
  }
  return sum / static_cast<double>(a.size() * a.joint_count());
}

double pck_oracle(const PoseBatch3D& a, const PoseBatch3D& b, double t) {
  double hits = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    for (int j = 0; j < a.joint_count(); ++j) {
      hits += joint_error(a, b, i, j) < t ? 1.0 : 0.0;
    }
  }
  return 100.0 * hits / static_cast<double>(a.size() * a.joint_count());
}

// Prediction near the ground truth with errors spread over 0..300 mm.
PoseBatch3D noisy(Rng& rng, const PoseBatch3D& gt) {
  PoseBatch3D p = gt;
  p.rows += random_matrix(rng, gt.rows.rows(), gt.rows.cols(), -170, 170);
  return p;
}

}  // namespace

TEST_CASE("mpje examples") {
  Rng rng(1);
  const auto g = batch(rng, 4);
  CHECK(mpje(g, g) == 0.0);
  PoseBatch3D shifted = g;
  for (int j = 0; j < 17; ++j) {
    shifted.rows.col(3 * j).array() += 3.0;
    shifted.rows.col(3 * j + 1).array() += 4.0;
  }
  CHECK(mpje(shifted, g) == doctest::Approx(5.0).epsilon(1e-12));
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = noisy(rng, g);
    CHECK(rel_diff(mpje(p, g), mpje_oracle(p, g)) < 1e-10);
  }
  CHECK_THROWS_AS(mpje(PoseBatch3D{g.rows, Frame::raw}, g), PreconditionError);
  CHECK_THROWS_AS(mpje(PoseBatch3D{g.rows, Frame::normalized}, PoseBatch3D{g.rows, Frame::normalized}),
                  PreconditionError);
}

TEST_CASE("mpje is invariant under a shared rigid motion") {
  Rng rng(2);
  const auto g = batch(rng, 3);
  const auto p = noisy(rng, g);
  const Eigen::Matrix3d r = random_rotation(rng);
  const Eigen::Vector3d t = random_vector(rng, 3, -500, 500);
  auto move = [&](const PoseBatch3D& b) {
    PoseBatch3D out = b;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      out.rows.row(i) = transform(Pose3D(b.rows.row(i).transpose(), b.frame), r, t).coords.transpose();
    }
    return out;
  };
  CHECK(rel_diff(mpje(move(p), move(g)), mpje(p, g)) < 1e-10);
}

TEST_CASE("pck examples") {
  PoseBatch3D g{Eigen::MatrixXd::Zero(1, 6), Frame::root_centered};
  PoseBatch3D p = g;
  CHECK(pck(p, g) == 100.0);
  p.rows(0, 3) = 200.0;
  CHECK(pck(p, g, 150.0) == 50.0);
  p.rows(0, 3) = 150.0;
  CHECK(pck(p, g, 150.0) == 50.0);
  CHECK_THROWS_AS(pck(p, g, 0.0), std::invalid_argument);

  Rng rng(3);
  const auto gt = batch(rng, 10);
  const auto pr = noisy(rng, gt);
  double prev = -1.0;
  for (double t = 5.0; t <= 400.0; t += 5.0) {
    const double v = pck(pr, gt, t);
    CHECK(v >= prev);
    CHECK(rel_diff(v + 1e-300, pck_oracle(pr, gt, t) + 1e-300) < 1e-10);
    prev = v;
  }
}

TEST_CASE("auc examples") {
  Rng rng(4);
  const auto g = batch(rng, 5);
  const auto grid = default_auc_grid();
  REQUIRE(grid.size() == 31);
  CHECK(grid.front() == doctest::Approx(150.0 / 31.0));
  CHECK(grid.back() == doctest::Approx(150.0));
  CHECK(auc(g, g, grid) == 1.0);

  PoseBatch3D far = g;
  far.rows.array() += 1000.0;
  CHECK(auc(far, g, grid) == 0.0);

  const auto p = noisy(rng, g);
  double mean = 0.0;
  for (double t : grid) {
    mean += pck_oracle(p, g, t) / 100.0;
  }
  mean /= static_cast<double>(grid.size());
  const double a = auc(p, g, grid);
  CHECK(std::abs(a - mean) < 1e-10);
  CHECK(a <= pck(p, g, grid.back()) / 100.0 + 1e-12);

  CHECK_THROWS_AS(auc(p, g, std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(auc(p, g, std::vector<double>{10, 5}), std::invalid_argument);
}

TEST_CASE("retarget on a hand-walked chain") {
  const SkeletonTopology chain("chain3", {"a", "b", "c"}, {-1, 0, 1}, {}, 0, 1);
  Pose3D p = Pose3D::zeros(3, Frame::root_centered);
  p.joint(1) = Eigen::Vector3d(3, 4, 0);
  p.joint(2) = Eigen::Vector3d(3, 4, 12);
  Eigen::VectorXd lengths(2);
  lengths << 10, 24;
  const Pose3D r = retarget(p, lengths, chain);
  CHECK((r.joint(0) - Eigen::Vector3d::Zero()).norm() < 1e-12);
  CHECK((r.joint(1) - Eigen::Vector3d(6, 8, 0)).norm() < 1e-12);
  CHECK((r.joint(2) - Eigen::Vector3d(6, 8, 24)).norm() < 1e-12);

  Eigen::VectorXd same(2);
  same << 5, 12;
  CHECK((retarget(p, same, chain).coords - p.coords).cwiseAbs().maxCoeff() < 1e-12);

  Pose3D degenerate = p;
  degenerate.joint(2) = degenerate.joint(1);
  CHECK_THROWS_AS(retarget(degenerate, lengths, chain), std::invalid_argument);
  Eigen::VectorXd negative(2);
  negative << 10, -1;
  CHECK_THROWS_AS(retarget(p, negative, chain), std::invalid_argument);
  CHECK_THROWS_AS(retarget(p, Eigen::VectorXd::Ones(3), chain), PreconditionError);
}

TEST_CASE("retarget contract on random poses") {
  Rng rng(5);
  const auto& t = topo();
  for (int trial = 0; trial < 50; ++trial) {
    Pose3D p = random_pose<3>(rng, 17, Frame::root_centered);
    p.joint(0).setZero();
    const Eigen::VectorXd target = random_vector(rng, 16, 50, 500);
    const Pose3D r = retarget(p, target, t);
    CHECK((bone_lengths(r, t) - target).cwiseAbs().maxCoeff() < 1e-9);
    for (int j : t.bones()) {
      const Eigen::Vector3d before = (p.joint(j) - p.joint(t.parent(j))).normalized();
      const Eigen::Vector3d after = (r.joint(j) - r.joint(t.parent(j))).normalized();
      CHECK((before - after).cwiseAbs().maxCoeff() < 1e-9);
    }
    CHECK((retarget(r, target, t).coords - r.coords).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("pelvis_adjust examples") {
  const auto& t = topo();
  Rng rng(6);
  const Pose3D p = random_pose<3>(rng, 17, Frame::root_centered);
  CHECK(pelvis_adjust(p, t, 0.0).coords == p.coords);

  const Pose3D one = pelvis_adjust(p, t, 1.0);
  for (int j : {t.root_index(), t.joint_index("l_hip"), t.joint_index("r_hip")}) {
    CHECK((one.joint(j) - p.joint(t.neck_index())).norm() < 1e-12);
  }

  Pose3D simple = p;
  simple.joint(t.root_index()).setZero();
  simple.joint(t.neck_index()) = Eigen::Vector3d(0, 500, 0);
  CHECK((pelvis_adjust(simple, t).joint(t.root_index()) - Eigen::Vector3d(0, 100, 0)).norm() <
        1e-12);

  const Pose3D adj = pelvis_adjust(p, t, 0.2);
  const Eigen::Vector3d neck = p.joint(t.neck_index());
  for (int j = 0; j < 17; ++j) {
    const bool moved = j == t.root_index() || j == t.joint_index("l_hip") ||
                       j == t.joint_index("r_hip");
    for (int d = 0; d < 3; ++d) {
      const double a = p.coords[3 * j + d];
      const double expected = moved ? a + 0.2 * (neck[d] - a) : a;
      CHECK(std::abs(adj.coords[3 * j + d] - expected) < 1e-12);
    }
  }
}

TEST_CASE("evaluate aggregates groups by sample weight") {
  Rng rng(7);
  const auto g = batch(rng, 9);
  const auto p = noisy(rng, g);
  const std::vector<std::string> tags{"walk", "sit", "walk", "jump", "sit",
                                      "walk", "walk", "jump", "sit"};
  const auto r = evaluate(p, g, tags);
  CHECK(r.samples == 9);
  CHECK(rel_diff(r.mpje, mpje_oracle(p, g)) < 1e-10);
  CHECK(rel_diff(r.pck, pck_oracle(p, g, 150.0)) < 1e-10);
  CHECK(r.auc >= 0.0);
  CHECK(r.auc <= 1.0);
  REQUIRE(r.groups.size() == 3);
  CHECK(r.groups[0].tag == "jump");
  CHECK(r.groups[1].tag == "sit");
  CHECK(r.groups[2].tag == "walk");
  double wm = 0.0;
  double wp = 0.0;
  std::size_t n = 0;
  for (const auto& grp : r.groups) {
    wm += grp.mpje * static_cast<double>(grp.samples);
    wp += grp.pck * static_cast<double>(grp.samples);
    n += grp.samples;
  }
  CHECK(n == 9);
  CHECK(std::abs(wm / 9.0 - r.mpje) < 1e-10);
  CHECK(std::abs(wp / 9.0 - r.pck) < 1e-10);
  REQUIRE(r.per_joint_mpje.size() == 17);
  CHECK(std::abs(r.per_joint_mpje.mean() - r.mpje) < 1e-10);

  const std::vector<std::string> short_tags{"a"};
  CHECK_THROWS_AS(evaluate(p, g, short_tags), PreconditionError);
}

TEST_CASE("report serialization") {
  Rng rng(8);
  const auto g = batch(rng, 4);
  const auto p = noisy(rng, g);
  const std::vector<std::string> tags{"a", "b", "a", "b"};
  const auto r = evaluate(p, g, tags);
  std::istringstream in(report_to_jsonl(r, topo()));
  std::string line;
  int summaries = 0;
  int joints = 0;
  int groups = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "summary") {
      ++summaries;
      CHECK(j.at("mpje_mm").get<double>() == r.mpje);
      CHECK(j.at("auc_grid_mm").size() == 31);
    } else if (kind == "joint") {
      ++joints;
    } else if (kind == "group") {
      ++groups;
    }
  }
  CHECK(summaries == 1);
  CHECK(joints == 17);
  CHECK(groups == 2);
  const auto table = report_to_table(r, topo());
  CHECK(table.find("MPJE") != std::string::npos);
  CHECK(table.find("pelvis") != std::string::npos);
}
