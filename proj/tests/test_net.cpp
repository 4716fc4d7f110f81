#include "liftpose/net.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace liftpose;
using namespace liftpose::net;
using namespace testing_support;

namespace {

ModuleConfig small_config(bool bn = true, double dropout = 0.0) {
  ModuleConfig c;
  c.input_dim = 4;
  c.output_dim = 3;
  c.hidden = 6;
  c.blocks = 2;
  c.batch_norm = bn;
  c.dropout_rate = dropout;
  return c;
}

// Scalar-loop evaluation of the eval-mode network.
Eigen::VectorXd naive_eval(const NetworkParams& p, const Eigen::VectorXd& x) {
  auto dense = [](const DenseLayer& d, const Eigen::VectorXd& in) {
    Eigen::VectorXd out(d.weight.rows());
    for (Eigen::Index o = 0; o < d.weight.rows(); ++o) {
      double s = d.bias[o];
      for (Eigen::Index i = 0; i < d.weight.cols(); ++i) {
        s += d.weight(o, i) * in[i];
      }
      out[o] = s;
    }
    return out;
  };
  auto stage = [&](const Stage& st, const RunningStats* rs, const Eigen::VectorXd& in) {
    Eigen::VectorXd z = dense(st.dense, in);
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      if (rs != nullptr) {
        z[k] = (z[k] - rs->mean[k]) / std::sqrt(rs->var[k] + p.config.bn_epsilon) *
                   st.norm.scale[k] +
               st.norm.shift[k];
      }
      z[k] = z[k] > 0.0 ? z[k] : 0.0;
    }
    return z;
  };
  Eigen::VectorXd h = dense(p.weights.input, x);
  for (std::size_t b = 0; b < p.weights.blocks.size(); ++b) {
    const RunningStats* r1 = p.config.batch_norm ? &p.running[2 * b] : nullptr;
    const RunningStats* r2 = p.config.batch_norm ? &p.running[2 * b + 1] : nullptr;
    const Eigen::VectorXd a = stage(p.weights.blocks[b].first, r1, h);
    h += stage(p.weights.blocks[b].second, r2, a);
  }
  return dense(p.weights.output, h);
}

void perturb(NetworkParams& p, Rng& rng) {
  for (auto& t : tensors(p.weights)) {
    for (double& v : t.values) {
      v += uniform(rng, -0.3, 0.3);
    }
  }
  for (auto& r : p.running) {
    r.mean = random_vector(rng, r.mean.size());
    r.var = random_vector(rng, r.var.size(), 0.5, 2.0);
  }
}

double weighted_sum(const Eigen::MatrixXd& out, const Eigen::MatrixXd& g) {
  return (out.array() * g.array()).sum();
}

using Pattern = std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>>;

Pattern relu_pattern(const ForwardTrace& trace) {
  Pattern p;
  for (const auto& st : trace.stages) {
    p.push_back(st.pre_activation.array() > 0.0);
  }
  return p;
}

bool same_pattern(const Pattern& a, const Pattern& b) {
  if (a.size() != b.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] != b[i]).any()) {
      return false;
    }
  }
  return true;
}

struct GradCheck {
  double worst = 0.0;
  int checked = 0;
  int skipped = 0;
};

// Relative error of backward() against a fourth-order central difference over
// every parameter and input. Coordinates whose stencil crosses a ReLU kink are
// skipped.
GradCheck grad_check(NetworkParams params, const Eigen::MatrixXd& x, Mode mode,
                     std::uint64_t mask_seed, const Eigen::MatrixXd& g) {
  Rng rng(mask_seed);
  auto saved = params.running;
  auto fr = forward(params, x, mode, rng);
  params.running = saved;
  const Pattern base = relu_pattern(fr.trace);
  const Gradients grads = backward(params, fr.trace, g);

  bool crossed = false;
  auto loss = [&](NetworkParams& p, const Eigen::MatrixXd& in) {
    Rng r(mask_seed);
    auto keep = p.running;
    auto res = forward(p, in, mode, r);
    p.running = keep;
    crossed = crossed || !same_pattern(relu_pattern(res.trace), base);
    return weighted_sum(res.output, g);
  };

  const double h = 1e-4;
  GradCheck out;
  auto check = [&](double& slot, double analytic, auto&& eval) {
    const double orig = slot;
    crossed = false;
    auto at = [&](double d) {
      slot = orig + d;
      return eval();
    };
    const double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
    slot = orig;
    if (crossed) {
      ++out.skipped;
      return;
    }
    ++out.checked;
    const double err = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-3});
    out.worst = std::max(out.worst, err);
  };

  auto theta = tensors(params.weights);
  const auto dtheta = tensors(grads.params);
  for (std::size_t t = 0; t < theta.size(); ++t) {
    for (std::size_t i = 0; i < theta[t].values.size(); ++i) {
      check(theta[t].values[i], dtheta[t].values[i], [&] { return loss(params, x); });
    }
  }
  Eigen::MatrixXd xin = x;
  for (Eigen::Index i = 0; i < xin.size(); ++i) {
    check(xin.data()[i], grads.input.data()[i], [&] { return loss(params, xin); });
  }
  return out;
}

}  // namespace

TEST_CASE("parameter count matches the closed form and the tensors") {
  for (bool bn : {true, false}) {
    ModuleConfig c;
    c.input_dim = 34;
    c.output_dim = 51;
    c.hidden = 1024;
    c.batch_norm = bn;
    const std::size_t h = 1024;
    const std::size_t stage = h * h + h + (bn ? 2 * h : 0);
    const std::size_t expected = (34 * h + h) + 4 * stage + (h * 51 + 51);
    CHECK(parameter_count(c) == expected);
    CHECK(parameter_count(build_module(c, 1).weights) == expected);
  }
}

TEST_CASE("build_module initialization") {
  const ModuleConfig c = small_config();
  const NetworkParams a = build_module(c, 7);
  CHECK(a == build_module(c, 7));
  CHECK_FALSE(a == build_module(c, 8));

  CHECK(a.weights.input.weight.rows() == 6);
  CHECK(a.weights.input.weight.cols() == 4);
  CHECK(a.weights.output.weight.rows() == 3);
  CHECK(a.weights.blocks.size() == 2);
  CHECK(a.running.size() == 4);
  CHECK(a.weights.input.weight.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 4));
  CHECK(a.weights.blocks[0].first.dense.weight.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 6));
  CHECK(a.weights.output.weight.cwiseAbs().maxCoeff() <= std::sqrt(3.0 / 6));
  CHECK(a.weights.input.bias.isZero(0.0));
  CHECK(a.weights.output.bias.isZero(0.0));
  for (const auto& b : a.weights.blocks) {
    CHECK(b.first.norm.scale.isOnes(0.0));
    CHECK(b.first.norm.shift.isZero(0.0));
  }
  for (const auto& r : a.running) {
    CHECK(r.mean.isZero(0.0));
    CHECK(r.var.isOnes(0.0));
  }

  const NetworkParams plain = build_module(small_config(false), 7);
  CHECK(plain.running.empty());
  CHECK(plain.weights.blocks[0].first.norm.scale.size() == 0);

  std::set<std::string> names;
  for (const auto& t : tensors(a.weights)) {
    names.insert(t.name);
  }
  CHECK(names.size() == tensors(a.weights).size());
  CHECK(names.count("input.weight") == 1);
  CHECK(names.count("block1.second.bn_scale") == 1);
  CHECK(names.count("output.bias") == 1);
}

TEST_CASE("architecture hash separates configs") {
  const ModuleConfig a = small_config();
  ModuleConfig b = a;
  CHECK(architecture_hash(a) == architecture_hash(b));
  b.hidden = 7;
  CHECK(architecture_hash(a) != architecture_hash(b));
  b = a;
  b.batch_norm = false;
  CHECK(architecture_hash(a) != architecture_hash(b));
  b = a;
  b.dropout_rate = 0.25;
  CHECK(architecture_hash(a) != architecture_hash(b));
}

TEST_CASE("eval forward agrees with a scalar oracle") {
  Rng rng(11);
  for (bool bn : {true, false}) {
    NetworkParams p = build_module(small_config(bn, 0.5), 3);
    perturb(p, rng);
    const Eigen::MatrixXd x = random_matrix(rng, 5, 4, -2, 2);
    const auto out = forward_eval(p, x).output;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::VectorXd ref = naive_eval(p, x.row(i).transpose());
      CHECK((out.row(i).transpose() - ref).cwiseAbs().maxCoeff() <= 1e-12);
    }
    // Eval rows are independent of the rest of the batch.
    const auto single = forward_eval(p, x.topRows(1)).output;
    CHECK((single.row(0) - out.row(0)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("train forward statistics") {
  Rng rng(12);
  NetworkParams p = build_module(small_config(true, 0.0), 4);
  const Eigen::MatrixXd x = random_matrix(rng, 8, 4, -2, 2);
  const NetworkParams before = p;
  Rng mask(1);
  const auto fr = forward_train(p, x, mask);

  const auto& cache = fr.trace.stages[0];
  for (Eigen::Index k = 0; k < cache.normalized.cols(); ++k) {
    const double mean = cache.normalized.col(k).mean();
    const double var = (cache.normalized.col(k).array() - mean).square().mean();
    CHECK(std::abs(mean) < 1e-12);
    // Biased variance with epsilon inside the square root.
    Eigen::VectorXd z = cache.input * before.weights.blocks[0].first.dense.weight.row(k).transpose();
    z.array() += before.weights.blocks[0].first.dense.bias[k];
    const double zm = z.mean();
    const double zv = (z.array() - zm).square().mean();
    CHECK(var == doctest::Approx(zv / (zv + 1e-5)).epsilon(1e-9));
    CHECK(p.running[0].mean[k] == doctest::Approx(0.1 * zm).epsilon(1e-12));
    CHECK(p.running[0].var[k] == doctest::Approx(0.9 + 0.1 * zv).epsilon(1e-12));
  }

  CHECK_THROWS_AS(forward_train(p, x.topRows(1), mask), std::invalid_argument);
  Eigen::MatrixXd bad = x;
  bad(2, 1) = std::nan("");
  CHECK_THROWS_AS(forward_train(p, bad, mask), NumericalError);
  CHECK_THROWS_AS(forward_eval(p, bad), NumericalError);
  CHECK_THROWS_AS(forward_eval(p, random_matrix(rng, 3, 5)), std::invalid_argument);
}

TEST_CASE("eval forward leaves running statistics alone") {
  Rng rng(13);
  NetworkParams p = build_module(small_config(true, 0.5), 4);
  perturb(p, rng);
  const NetworkParams before = p;
  Rng mask(2);
  forward(p, random_matrix(rng, 4, 4), Mode::eval, mask);
  CHECK(p == before);
}

TEST_CASE("dropout masks") {
  Rng rng(14);
  NetworkParams p = build_module(small_config(true, 0.25), 4);
  const Eigen::MatrixXd x = random_matrix(rng, 64, 4);
  Rng mask(3);
  const auto fr = forward_train(p, x, mask);
  std::size_t zeros = 0;
  std::size_t total = 0;
  for (const auto& st : fr.trace.stages) {
    REQUIRE(st.dropout_mask.size() == x.rows() * 6);
    for (Eigen::Index i = 0; i < st.dropout_mask.size(); ++i) {
      const double v = st.dropout_mask.data()[i];
      CHECK((v == 0.0 || v == 1.0 / 0.75));
      zeros += v == 0.0 ? 1 : 0;
      ++total;
    }
  }
  const double rate = static_cast<double>(zeros) / static_cast<double>(total);
  CHECK(rate > 0.15);
  CHECK(rate < 0.35);

  Rng m1(5);
  Rng m2(5);
  NetworkParams p1 = p;
  NetworkParams p2 = p;
  CHECK(forward_train(p1, x, m1).output == forward_train(p2, x, m2).output);

  NetworkParams q = build_module(small_config(true, 0.0), 4);
  Rng m3(6);
  for (const auto& st : forward_train(q, x, m3).trace.stages) {
    CHECK(st.dropout_mask.size() == 0);
  }
}

TEST_CASE("backward matches finite differences") {
  Rng rng(15);
  struct Case {
    bool bn;
    double dropout;
    Mode mode;
  };
  for (const Case c : {Case{true, 0.0, Mode::train}, Case{true, 0.3, Mode::train},
                       Case{false, 0.3, Mode::train}, Case{true, 0.3, Mode::eval},
                       Case{false, 0.0, Mode::eval}}) {
    NetworkParams p = build_module(small_config(c.bn, c.dropout), 21);
    perturb(p, rng);
    const Eigen::MatrixXd x = random_matrix(rng, 6, 4, -2, 2);
    const Eigen::MatrixXd g = random_matrix(rng, 6, 3);
    CAPTURE(c.bn);
    CAPTURE(c.dropout);
    const GradCheck r = grad_check(p, x, c.mode, 99, g);
    CHECK(r.worst < 1e-5);
    CHECK(r.skipped * 10 < r.checked);
  }
}

TEST_CASE("backward consumes its trace") {
  Rng rng(16);
  NetworkParams p = build_module(small_config(), 1);
  auto fr = forward_train(p, random_matrix(rng, 3, 4), rng);
  const Eigen::MatrixXd g = random_matrix(rng, 3, 3);
  CHECK_NOTHROW(backward(p, fr.trace, g));
  CHECK(fr.trace.consumed);
  CHECK_THROWS_AS(backward(p, fr.trace, g), std::logic_error);

  auto fr2 = forward_train(p, random_matrix(rng, 3, 4), rng);
  CHECK_THROWS_AS(backward(p, fr2.trace, random_matrix(rng, 2, 3)), std::invalid_argument);
}

TEST_CASE("adam step against a scalar oracle") {
  Rng rng(17);
  NetworkParams p = build_module(small_config(), 2);
  AdamState s = make_adam(p, 1e-3);
  CHECK(s.step == 0);
  CHECK(s.beta1 == 0.9);
  CHECK(s.beta2 == 0.999);
  CHECK(s.epsilon == 1e-8);

  NetworkParams ref = p;
  std::vector<double> m(parameter_count(p.weights), 0.0);
  std::vector<double> v(m.size(), 0.0);
  for (int step = 1; step <= 3; ++step) {
    Weights g = p.weights.zeros_like();
    for (auto& t : tensors(g)) {
      for (double& x : t.values) {
        x = uniform(rng, -2, 2);
      }
    }
    adam_step(p, g, s);
    std::size_t k = 0;
    auto rt = tensors(ref.weights);
    const auto gt = tensors(g);
    for (std::size_t t = 0; t < rt.size(); ++t) {
      for (std::size_t i = 0; i < rt[t].values.size(); ++i, ++k) {
        const double gi = gt[t].values[i];
        m[k] = 0.9 * m[k] + 0.1 * gi;
        v[k] = 0.999 * v[k] + 0.001 * gi * gi;
        const double mh = m[k] / (1 - std::pow(0.9, step));
        const double vh = v[k] / (1 - std::pow(0.999, step));
        rt[t].values[i] -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
      }
    }
    CHECK(s.step == step);
    const auto pt = tensors(p.weights);
    double worst = 0.0;
    for (std::size_t t = 0; t < rt.size(); ++t) {
      for (std::size_t i = 0; i < rt[t].values.size(); ++i) {
        worst = std::max(worst, std::abs(rt[t].values[i] - pt[t].values[i]));
      }
    }
    CHECK(worst <= 1e-15);
  }
}

TEST_CASE("first adam step moves every parameter by about the learning rate") {
  NetworkParams p = build_module(small_config(), 2);
  const NetworkParams before = p;
  AdamState s = make_adam(p, 1e-4);
  Weights g = p.weights.zeros_like();
  for (auto& t : tensors(g)) {
    for (double& x : t.values) {
      x = 0.5;
    }
  }
  adam_step(p, g, s);
  const auto a = tensors(before.weights);
  const auto b = tensors(p.weights);
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t i = 0; i < a[t].values.size(); ++i) {
      CHECK(a[t].values[i] - b[t].values[i] == doctest::Approx(1e-4).epsilon(1e-6));
    }
  }
}

TEST_CASE("adam rejects non-finite gradients without side effects") {
  NetworkParams p = build_module(small_config(), 2);
  AdamState s = make_adam(p, 1e-4);
  const NetworkParams p0 = p;
  const AdamState s0 = s;
  Weights g = p.weights.zeros_like();
  g.blocks[1].second.dense.bias[2] = std::numeric_limits<double>::infinity();
  try {
    adam_step(p, g, s);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("block1.second.bias") != std::string::npos);
  }
  CHECK(p == p0);
  CHECK(s == s0);
  CHECK_THROWS_AS(make_adam(p, 0.0), std::invalid_argument);
}
