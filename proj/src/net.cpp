#include "liftpose/net.hpp"

#include <cmath>
#include <cstring>

namespace liftpose::net {

namespace {

void fill_uniform(Eigen::MatrixXd& m, double limit, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = (2.0 * uniform01(rng) - 1.0) * limit;
  }
}

DenseLayer make_dense(int in, int out, double limit, Rng& rng) {
  DenseLayer d;
  d.weight.resize(out, in);
  fill_uniform(d.weight, limit, rng);
  d.bias = Eigen::VectorXd::Zero(out);
  return d;
}

NormLayer make_norm(int width, bool enabled) {
  if (!enabled) {
    return {};
  }
  return {Eigen::VectorXd::Ones(width), Eigen::VectorXd::Zero(width)};
}

DenseLayer zeros_like(const DenseLayer& d) {
  return {Eigen::MatrixXd::Zero(d.weight.rows(), d.weight.cols()),
          Eigen::VectorXd::Zero(d.bias.size())};
}

NormLayer zeros_like(const NormLayer& n) {
  return {Eigen::VectorXd::Zero(n.scale.size()), Eigen::VectorXd::Zero(n.shift.size())};
}

template <class W, class Out, class MakeSpan>
void collect(W& w, Out& out, MakeSpan make) {
  auto dense = [&](auto& d, const std::string& prefix) {
    out.push_back({prefix + ".weight", make(d.weight)});
    out.push_back({prefix + ".bias", make(d.bias)});
  };
  auto norm = [&](auto& n, const std::string& prefix) {
    if (n.scale.size() > 0) {
      out.push_back({prefix + ".bn_scale", make(n.scale)});
      out.push_back({prefix + ".bn_shift", make(n.shift)});
    }
  };
  dense(w.input, "input");
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b);
    dense(w.blocks[b].first.dense, prefix + ".first");
    norm(w.blocks[b].first.norm, prefix + ".first");
    dense(w.blocks[b].second.dense, prefix + ".second");
    norm(w.blocks[b].second.norm, prefix + ".second");
  }
  dense(w.output, "output");
}

void check_finite_input(const Eigen::MatrixXd& batch, const ModuleConfig& config) {
  if (batch.cols() != config.input_dim) {
    throw std::invalid_argument(
        "forward: batch width " + std::to_string(batch.cols()) + " does not match input_dim " +
        std::to_string(config.input_dim));
  }
  if (!batch.allFinite()) {
    throw NumericalError("forward: non-finite input");
  }
}

Eigen::MatrixXd affine(const DenseLayer& d, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd z = x * d.weight.transpose();
  z.rowwise() += d.bias.transpose();
  return z;
}

// dense -> [batch norm] -> ReLU -> [dropout]
Eigen::MatrixXd stage_forward(const Stage& stage, RunningStats* running, const ModuleConfig& cfg,
                              Mode mode, Rng* rng, const Eigen::MatrixXd& x, StageCache& cache) {
  cache.input = x;
  Eigen::MatrixXd y = affine(stage.dense, x);
  if (cfg.batch_norm) {
    const double batch = static_cast<double>(x.rows());
    Eigen::VectorXd mean;
    Eigen::VectorXd var;
    if (mode == Mode::train) {
      mean = y.colwise().mean().transpose();
      var = ((y.rowwise() - mean.transpose()).array().square().colwise().sum() / batch)
                .transpose();
      running->mean = (1.0 - cfg.bn_momentum) * running->mean + cfg.bn_momentum * mean;
      running->var = (1.0 - cfg.bn_momentum) * running->var + cfg.bn_momentum * var;
    } else {
      mean = running->mean;
      var = running->var;
    }
    cache.inv_std = (var.array() + cfg.bn_epsilon).rsqrt();
    cache.normalized =
        ((y.rowwise() - mean.transpose()).array().rowwise() * cache.inv_std.transpose().array())
            .matrix();
    y = (cache.normalized.array().rowwise() * stage.norm.scale.transpose().array()).matrix();
    y.rowwise() += stage.norm.shift.transpose();
  }
  cache.pre_activation = y;
  Eigen::MatrixXd a = y.cwiseMax(0.0);
  if (mode == Mode::train && cfg.dropout_rate > 0.0) {
    const double keep = 1.0 - cfg.dropout_rate;
    cache.dropout_mask.resize(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < cache.dropout_mask.size(); ++i) {
      cache.dropout_mask.data()[i] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
    }
    a.array() *= cache.dropout_mask.array();
  }
  return a;
}

Eigen::MatrixXd stage_backward(const Stage& stage, const ModuleConfig& cfg, Mode mode,
                               const StageCache& cache, const Eigen::MatrixXd& grad_out,
                               Stage& grads) {
  Eigen::MatrixXd g = grad_out;
  if (cache.dropout_mask.size() > 0) {
    g.array() *= cache.dropout_mask.array();
  }
  g = (cache.pre_activation.array() > 0.0).select(g, 0.0);
  if (cfg.batch_norm) {
    grads.norm.scale = (g.array() * cache.normalized.array()).colwise().sum().transpose();
    grads.norm.shift = g.colwise().sum().transpose();
    Eigen::MatrixXd gx = (g.array().rowwise() * stage.norm.scale.transpose().array()).matrix();
    if (mode == Mode::train) {
      const double batch = static_cast<double>(gx.rows());
      const Eigen::RowVectorXd sum_g = gx.colwise().sum();
      const Eigen::RowVectorXd sum_gx = (gx.array() * cache.normalized.array()).colwise().sum();
      Eigen::MatrixXd t = (batch * gx).rowwise() - sum_g;
      t -= (cache.normalized.array().rowwise() * sum_gx.array()).matrix();
      g = (t.array().rowwise() * (cache.inv_std.transpose().array() / batch)).matrix();
    } else {
      g = (gx.array().rowwise() * cache.inv_std.transpose().array()).matrix();
    }
  }
  grads.dense.weight = g.transpose() * cache.input;
  grads.dense.bias = g.colwise().sum().transpose();
  return g * stage.dense.weight;
}

ForwardResult run_forward(const NetworkParams& params, std::vector<RunningStats>* running,
                          const Eigen::MatrixXd& batch, Mode mode, Rng* rng) {
  const auto& cfg = params.config;
  const auto& w = params.weights;
  ForwardResult result;
  auto& trace = result.trace;
  trace.mode = mode;
  trace.input = batch;
  trace.stages.resize(2 * w.blocks.size());

  Eigen::MatrixXd h = affine(w.input, batch);
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    RunningStats* first = running != nullptr && cfg.batch_norm ? &(*running)[2 * b] : nullptr;
    RunningStats* second = running != nullptr && cfg.batch_norm ? &(*running)[2 * b + 1] : nullptr;
    Eigen::MatrixXd a =
        stage_forward(w.blocks[b].first, first, cfg, mode, rng, h, trace.stages[2 * b]);
    a = stage_forward(w.blocks[b].second, second, cfg, mode, rng, a, trace.stages[2 * b + 1]);
    h += a;
  }
  trace.output_input = h;
  result.output = affine(w.output, h);
  return result;
}

bool same(const DenseLayer& a, const DenseLayer& b) {
  return a.weight == b.weight && a.bias == b.bias;
}

bool same(const NormLayer& a, const NormLayer& b) {
  return a.scale == b.scale && a.shift == b.shift;
}

}  // namespace

std::uint64_t architecture_hash(const ModuleConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::int64_t ints[] = {c.input_dim, c.output_dim, c.hidden, c.blocks, c.batch_norm ? 1 : 0};
  const double reals[] = {c.dropout_rate, c.bn_momentum, c.bn_epsilon};
  mix(ints, sizeof(ints));
  mix(reals, sizeof(reals));
  return h;
}

Weights Weights::zeros_like() const {
  Weights z;
  z.input = net::zeros_like(input);
  for (const auto& b : blocks) {
    z.blocks.push_back({{net::zeros_like(b.first.dense), net::zeros_like(b.first.norm)},
                        {net::zeros_like(b.second.dense), net::zeros_like(b.second.norm)}});
  }
  z.output = net::zeros_like(output);
  return z;
}

bool Weights::operator==(const Weights& other) const {
  if (blocks.size() != other.blocks.size() || !same(input, other.input) ||
      !same(output, other.output)) {
    return false;
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& x = blocks[b];
    const auto& y = other.blocks[b];
    if (!same(x.first.dense, y.first.dense) || !same(x.first.norm, y.first.norm) ||
        !same(x.second.dense, y.second.dense) || !same(x.second.norm, y.second.norm)) {
      return false;
    }
  }
  return true;
}

std::vector<NamedTensor> tensors(Weights& weights) {
  std::vector<NamedTensor> out;
  collect(weights, out, [](auto& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); });
  return out;
}

std::vector<ConstNamedTensor> tensors(const Weights& weights) {
  std::vector<ConstNamedTensor> out;
  collect(weights, out, [](const auto& m) {
    return std::span<const double>(m.data(), static_cast<std::size_t>(m.size()));
  });
  return out;
}

std::size_t parameter_count(const Weights& weights) {
  std::size_t n = 0;
  for (const auto& t : tensors(weights)) {
    n += t.values.size();
  }
  return n;
}

std::size_t parameter_count(const ModuleConfig& c) {
  const auto in = static_cast<std::size_t>(c.input_dim);
  const auto out = static_cast<std::size_t>(c.output_dim);
  const auto h = static_cast<std::size_t>(c.hidden);
  const std::size_t stage = h * h + h + (c.batch_norm ? 2 * h : 0);
  return (in * h + h) + static_cast<std::size_t>(c.blocks) * 2 * stage + (h * out + out);
}

bool NetworkParams::operator==(const NetworkParams& other) const {
  if (!(config == other.config) || !(weights == other.weights) ||
      running.size() != other.running.size()) {
    return false;
  }
  for (std::size_t i = 0; i < running.size(); ++i) {
    if (running[i].mean != other.running[i].mean || running[i].var != other.running[i].var) {
      return false;
    }
  }
  return true;
}

NetworkParams build_module(const ModuleConfig& config, std::uint64_t seed) {
  if (config.input_dim <= 0 || config.output_dim <= 0 || config.hidden <= 0 || config.blocks < 0) {
    throw std::invalid_argument("build_module: dimensions must be positive");
  }
  if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0) {
    throw std::invalid_argument("build_module: dropout rate must lie in [0, 1)");
  }
  Rng rng(seed);
  NetworkParams p;
  p.config = config;
  const int h = config.hidden;
  const double he_hidden = std::sqrt(6.0 / h);
  p.weights.input = make_dense(config.input_dim, h, std::sqrt(6.0 / config.input_dim), rng);
  for (int b = 0; b < config.blocks; ++b) {
    Block block;
    block.first = {make_dense(h, h, he_hidden, rng), make_norm(h, config.batch_norm)};
    block.second = {make_dense(h, h, he_hidden, rng), make_norm(h, config.batch_norm)};
    p.weights.blocks.push_back(std::move(block));
    if (config.batch_norm) {
      for (int s = 0; s < 2; ++s) {
        p.running.push_back({Eigen::VectorXd::Zero(h), Eigen::VectorXd::Ones(h)});
      }
    }
  }
  p.weights.output = make_dense(h, config.output_dim, std::sqrt(3.0 / h), rng);
  return p;
}

ForwardResult forward_train(NetworkParams& params, const Eigen::MatrixXd& batch, Rng& rng) {
  check_finite_input(batch, params.config);
  if (params.config.batch_norm && batch.rows() < 2) {
    throw std::invalid_argument("forward: train mode needs a batch of at least 2 rows");
  }
  return run_forward(params, &params.running, batch, Mode::train, &rng);
}

ForwardResult forward_eval(const NetworkParams& params, const Eigen::MatrixXd& batch) {
  check_finite_input(batch, params.config);
  auto running = params.running;
  return run_forward(params, &running, batch, Mode::eval, nullptr);
}

ForwardResult forward(NetworkParams& params, const Eigen::MatrixXd& batch, Mode mode, Rng& rng) {
  return mode == Mode::train ? forward_train(params, batch, rng) : forward_eval(params, batch);
}

Gradients backward(const NetworkParams& params, ForwardTrace& trace,
                   const Eigen::MatrixXd& output_gradient) {
  if (trace.consumed) {
    throw std::logic_error("backward: trace already consumed");
  }
  if (output_gradient.rows() != trace.output_input.rows() ||
      output_gradient.cols() != params.config.output_dim) {
    throw std::invalid_argument("backward: output gradient shape does not match forward output");
  }
  trace.consumed = true;
  const auto& cfg = params.config;
  const auto& w = params.weights;
  Gradients g;
  g.params = w.zeros_like();

  g.params.output.weight = output_gradient.transpose() * trace.output_input;
  g.params.output.bias = output_gradient.colwise().sum().transpose();
  Eigen::MatrixXd dh = output_gradient * w.output.weight;

  for (std::size_t b = w.blocks.size(); b-- > 0;) {
    Eigen::MatrixXd da = stage_backward(w.blocks[b].second, cfg, trace.mode,
                                        trace.stages[2 * b + 1], dh, g.params.blocks[b].second);
    da = stage_backward(w.blocks[b].first, cfg, trace.mode, trace.stages[2 * b], da,
                        g.params.blocks[b].first);
    dh += da;
  }

  g.params.input.weight = dh.transpose() * trace.input;
  g.params.input.bias = dh.colwise().sum().transpose();
  g.input = dh * w.input.weight;
  return g;
}

bool AdamState::operator==(const AdamState& other) const {
  return first_moment == other.first_moment && second_moment == other.second_moment &&
         step == other.step && beta1 == other.beta1 && beta2 == other.beta2 &&
         epsilon == other.epsilon && learning_rate == other.learning_rate;
}

AdamState make_adam(const NetworkParams& params, double learning_rate) {
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("make_adam: learning rate must be positive");
  }
  AdamState s;
  s.first_moment = params.weights.zeros_like();
  s.second_moment = params.weights.zeros_like();
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(NetworkParams& params, const Weights& grads, AdamState& state) {
  auto theta = tensors(params.weights);
  const auto g = tensors(grads);
  auto m = tensors(state.first_moment);
  auto v = tensors(state.second_moment);
  if (g.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
    throw std::invalid_argument("adam_step: gradient layout does not match parameters");
  }
  for (std::size_t t = 0; t < theta.size(); ++t) {
    if (g[t].values.size() != theta[t].values.size() ||
        m[t].values.size() != theta[t].values.size()) {
      throw std::invalid_argument("adam_step: shape mismatch in " + theta[t].name);
    }
    for (double x : g[t].values) {
      if (!std::isfinite(x)) {
        throw NumericalError("adam_step: non-finite gradient in " + g[t].name);
      }
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < theta.size(); ++k) {
    auto p = theta[k].values;
    auto gk = g[k].values;
    auto mk = m[k].values;
    auto vk = v[k].values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      mk[i] = state.beta1 * mk[i] + (1.0 - state.beta1) * gk[i];
      vk[i] = state.beta2 * vk[i] + (1.0 - state.beta2) * gk[i] * gk[i];
      const double m_hat = mk[i] / c1;
      const double v_hat = vk[i] / c2;
      p[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

}  // namespace liftpose::net
