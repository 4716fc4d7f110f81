#include "liftpose/losses.hpp"

#include "support.hpp"

#include <doctest.h>

using namespace liftpose;
using namespace testing_support;

namespace {

const SkeletonTopology& topo() { return SkeletonTopology::h36m17(); }

PoseBatch3D random_batch3(Rng& rng, int n, Frame f = Frame::root_centered, double s = 300.0) {
  return {random_matrix(rng, n, 51, -s, s), f};
}

PoseBatch2D random_batch2(Rng& rng, int n, double s = 300.0) {
  return {random_matrix(rng, n, 34, -s, s), Frame::root_centered};
}

double length(const Eigen::MatrixXd& rows, Eigen::Index i, int a, int b) {
  double ss = 0.0;
  for (int d = 0; d < 3; ++d) {
    const double diff = rows(i, 3 * a + d) - rows(i, 3 * b + d);
    ss += diff * diff;
  }
  return std::sqrt(ss);
}

double symmetry_oracle(const Eigen::MatrixXd& rows) {
  const auto& t = topo();
  double total = 0.0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    double sample = 0.0;
    for (const auto& seg : t.segments()) {
      for (std::size_t k = 0; k < seg.left.size(); ++k) {
        const double bl = length(rows, i, seg.left[k], t.parent(seg.left[k]));
        const double br = length(rows, i, seg.right[k], t.parent(seg.right[k]));
        sample += (bl - br) * (bl - br);
      }
    }
    total += sample / static_cast<double>(t.segments().size());
  }
  return total / static_cast<double>(rows.rows());
}

// A pose whose left side mirrors the right side through the x = 0 plane.
Pose3D mirror_symmetric(Rng& rng) {
  const auto& t = topo();
  Pose3D p = random_pose<3>(rng, 17, Frame::root_centered);
  p.joint(t.root_index()).setZero();
  for (const auto& seg : t.segments()) {
    for (std::size_t k = 0; k < seg.left.size(); ++k) {
      Eigen::Vector3d r = p.joint(seg.right[k]);
      r.x() = -r.x();
      p.joint(seg.left[k]) = r;
    }
  }
  // Central chain on the mirror plane.
  for (int j = 0; j < 17; ++j) {
    bool sided = false;
    for (const auto& seg : t.segments()) {
      for (std::size_t k = 0; k < seg.left.size(); ++k) {
        sided = sided || seg.left[k] == j || seg.right[k] == j;
      }
    }
    if (!sided) {
      p.joint(j).x() = 0.0;
    }
  }
  return p;
}

template <class F>
double fd_worst(Eigen::MatrixXd x, const Eigen::MatrixXd& analytic, F&& f) {
  const double h = 1e-4;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    auto at = [&](double d) {
      x.data()[i] = orig + d;
      return f(x);
    };
    const double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
    x.data()[i] = orig;
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-3}));
  }
  return worst;
}

}  // namespace

TEST_CASE("loss_3d examples") {
  Rng rng(1);
  const auto p = random_batch3(rng, 4);
  const auto zero = loss_3d(p, p);
  CHECK(zero.value == 0.0);
  CHECK(zero.gradient.isZero(0.0));

  PoseBatch3D a{Eigen::MatrixXd::Zero(1, 3), Frame::root_centered};
  PoseBatch3D b = a;
  a.rows(0, 0) = 1.0;
  const auto one = loss_3d(a, b);
  CHECK(one.value == 1.0);
  CHECK(one.gradient(0, 0) == 2.0);
  CHECK(one.gradient(0, 1) == 0.0);
  CHECK(one.gradient(0, 2) == 0.0);

  const auto q = random_batch3(rng, 4);
  const auto l = loss_3d(p, q);
  double oracle = 0.0;
  for (Eigen::Index i = 0; i < 4; ++i) {
    for (Eigen::Index k = 0; k < 51; ++k) {
      oracle += (p.rows(i, k) - q.rows(i, k)) * (p.rows(i, k) - q.rows(i, k));
    }
  }
  CHECK(rel_diff(l.value, oracle / 4.0) < 1e-10);
  CHECK((l.gradient - 2.0 * (p.rows - q.rows) / 4.0).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(rel_diff(l.per_sample.sum() / 4.0, l.value) < 1e-12);

  CHECK_THROWS_AS(loss_3d(p, PoseBatch3D{q.rows, Frame::raw}), PreconditionError);
  CHECK_THROWS_AS(loss_3d(p, random_batch3(rng, 3)), PreconditionError);
}

TEST_CASE("loss_3d gates drop samples but keep the full-batch mean") {
  Rng rng(2);
  const auto p = random_batch3(rng, 4);
  const auto q = random_batch3(rng, 4);
  const std::vector<double> gates{1, 0, 1, 0};
  const auto l = loss_3d(p, q, gates);
  const double s0 = (p.rows.row(0) - q.rows.row(0)).squaredNorm();
  const double s2 = (p.rows.row(2) - q.rows.row(2)).squaredNorm();
  CHECK(rel_diff(l.value, (s0 + s2) / 4.0) < 1e-12);
  CHECK(l.gradient.row(1).isZero(0.0));
  CHECK(l.gradient.row(3).isZero(0.0));
  CHECK(l.per_sample[1] == 0.0);
  const std::vector<double> short_gates{1, 0};
  CHECK_THROWS_AS(loss_3d(p, q, short_gates), PreconditionError);
}

TEST_CASE("loss_reproj masking") {
  Rng rng(3);
  const auto r = random_batch2(rng, 6);
  const auto t = random_batch2(rng, 6);
  CHECK(loss_reproj(t, t).value == 0.0);

  VisibilityMask none = VisibilityMask::Constant(6, 17, false);
  const auto masked = loss_reproj(r, t, &none);
  CHECK(masked.value == 0.0);
  CHECK(masked.gradient.isZero(0.0));

  VisibilityMask half(6, 17);
  for (Eigen::Index i = 0; i < 6; ++i) {
    for (Eigen::Index j = 0; j < 17; ++j) {
      half(i, j) = (i + j) % 2 == 0;
    }
  }
  const auto l = loss_reproj(r, t, &half);
  double oracle = 0.0;
  for (Eigen::Index i = 0; i < 6; ++i) {
    for (Eigen::Index j = 0; j < 17; ++j) {
      if (!half(i, j)) {
        continue;
      }
      for (int d = 0; d < 2; ++d) {
        const double diff = r.rows(i, 2 * j + d) - t.rows(i, 2 * j + d);
        oracle += diff * diff;
      }
    }
  }
  CHECK(rel_diff(l.value, oracle / 6.0) < 1e-10);
  for (Eigen::Index i = 0; i < 6; ++i) {
    for (Eigen::Index j = 0; j < 17; ++j) {
      for (int d = 0; d < 2; ++d) {
        const double expected =
            half(i, j) ? 2.0 * (r.rows(i, 2 * j + d) - t.rows(i, 2 * j + d)) / 6.0 : 0.0;
        CHECK(std::abs(l.gradient(i, 2 * j + d) - expected) <= 1e-12);
      }
    }
  }

  VisibilityMask wrong = VisibilityMask::Constant(5, 17, true);
  CHECK_THROWS_AS(loss_reproj(r, t, &wrong), PreconditionError);
  CHECK_THROWS_AS(loss_reproj(r, PoseBatch2D{random_matrix(rng, 6, 32), Frame::root_centered}),
                  PreconditionError);
}

TEST_CASE("loss_symmetry examples") {
  Rng rng(4);
  const Pose3D sym = mirror_symmetric(rng);
  PoseBatch3D batch{sym.coords.transpose(), Frame::root_centered};
  CHECK(loss_symmetry(batch, topo()).value < 1e-12);

  // Lengthen the left forearm by exactly 10 mm along its own direction.
  const int lw = topo().joint_index("l_wrist");
  const int le = topo().parent(lw);
  Pose3D longer = sym;
  const Eigen::Vector3d dir = (sym.joint(lw) - sym.joint(le)).normalized();
  longer.joint(lw) = sym.joint(lw) + 10.0 * dir;
  PoseBatch3D b2{longer.coords.transpose(), Frame::root_centered};
  const auto l = loss_symmetry(b2, topo());
  CHECK(l.value == doctest::Approx(100.0 / 4.0).epsilon(1e-9));

  CHECK_THROWS_AS(loss_symmetry(PoseBatch3D{batch.rows, Frame::normalized}, topo()),
                  PreconditionError);
  CHECK_THROWS_AS(
      loss_symmetry(PoseBatch3D{random_matrix(rng, 1, 48), Frame::root_centered}, topo()),
      PreconditionError);
}

TEST_CASE("loss_symmetry matches the oracle and is rigid-motion invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_batch3(rng, 3, Frame::raw);
    const auto l = loss_symmetry(b, topo());
    CHECK(rel_diff(l.value, symmetry_oracle(b.rows)) < 1e-10);

    PoseBatch3D moved = b;
    for (Eigen::Index i = 0; i < 3; ++i) {
      const Pose3D p(b.rows.row(i).transpose(), Frame::raw);
      moved.rows.row(i) =
          transform(p, random_rotation(rng), random_vector(rng, 3, -2e3, 2e3)).coords.transpose();
    }
    CHECK(rel_diff(loss_symmetry(moved, topo()).value, l.value) < 1e-9);
  }
}

TEST_CASE("zero-length bones get a zero subgradient") {
  const auto b = PoseBatch3D{Eigen::MatrixXd::Zero(2, 51), Frame::root_centered};
  const auto l = loss_symmetry(b, topo());
  CHECK(l.value == 0.0);
  CHECK(l.gradient.allFinite());
  CHECK(l.gradient.isZero(0.0));
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_batch3(rng, 3, Frame::root_centered, 2.0);
    const auto q = random_batch3(rng, 3, Frame::root_centered, 2.0);
    const std::vector<double> gates{1, 0, 1};
    CHECK(fd_worst(p.rows, loss_3d(p, q, gates).gradient, [&](const Eigen::MatrixXd& x) {
            return loss_3d({x, p.frame}, q, gates).value;
          }) < 1e-5);

    const auto r = random_batch2(rng, 3, 2.0);
    const auto t = random_batch2(rng, 3, 2.0);
    VisibilityMask vis(3, 17);
    for (Eigen::Index i = 0; i < vis.size(); ++i) {
      vis.data()[i] = uniform01(rng) < 0.7;
    }
    CHECK(fd_worst(r.rows, loss_reproj(r, t, &vis).gradient, [&](const Eigen::MatrixXd& x) {
            return loss_reproj({x, r.frame}, t, &vis).value;
          }) < 1e-5);

    CHECK(fd_worst(p.rows, loss_symmetry(p, topo()).gradient, [&](const Eigen::MatrixXd& x) {
            return loss_symmetry({x, p.frame}, topo()).value;
          }) < 1e-5);
  }
}

TEST_CASE("total_loss weighting") {
  const LossWeights w{0.5, 0.5, 1.0};
  const auto r = total_loss(1, 1, 1, w, true, 8);
  CHECK(r.total == 2.0);
  CHECK(r.applied.alpha == 0.5);
  CHECK(r.batch_size == 8);

  const auto no3d = total_loss(123.0, 1, 1, w, false);
  CHECK(no3d.total == 1.5);
  CHECK(no3d.applied.alpha == 0.0);
  CHECK(no3d.l3d == 123.0);

  CHECK(total_loss(0, 0, 0, w, true).total == 0.0);

  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const double a = uniform(rng, 0, 10);
    const double b = uniform(rng, 0, 10);
    const double c = uniform(rng, 0, 10);
    const auto rep = total_loss(a, b, c, w, true);
    CHECK(std::abs(rep.total - (0.5 * a + 0.5 * b + 1.0 * c)) <= 1e-12);
  }
}

TEST_CASE("loss components are nonnegative") {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const auto p = random_batch3(rng, 2);
    const auto q = random_batch3(rng, 2);
    CHECK(loss_3d(p, q).value >= 0.0);
    CHECK(loss_symmetry(p, topo()).value >= 0.0);
    CHECK(loss_reproj(random_batch2(rng, 2), random_batch2(rng, 2)).value >= 0.0);
  }
}
