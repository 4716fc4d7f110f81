#pragma once

#include "liftpose/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace liftpose::net {

using liftpose::Rng;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { train, eval };

/// Shape of one lifting/re-projection module:
///   dense(in->H) -> blocks x [stage, stage, skip-add] -> dense(H->out)
/// where a stage is dense(H->H) + batch norm + ReLU + dropout.
struct ModuleConfig {
  int input_dim = 0;
  int output_dim = 0;
  int hidden = 1024;
  int blocks = 2;
  double dropout_rate = 0.5;
  bool batch_norm = true;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  bool operator==(const ModuleConfig&) const = default;
};

/// FNV-1a digest of every ModuleConfig field; stored in checkpoints.
std::uint64_t architecture_hash(const ModuleConfig& config);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
};

/// Learnable batch-norm affine. Empty vectors when batch norm is disabled.
struct NormLayer {
  Eigen::VectorXd scale;
  Eigen::VectorXd shift;
};

struct Stage {
  DenseLayer dense;
  NormLayer norm;
};

struct Block {
  Stage first;
  Stage second;
};

/// Every learnable tensor of one module. The same layout holds parameters,
/// gradients and optimizer moments.
struct Weights {
  DenseLayer input;
  std::vector<Block> blocks;
  DenseLayer output;

  Weights zeros_like() const;
  bool operator==(const Weights& other) const;
};

struct NamedTensor {
  std::string name;
  std::span<double> values;
};

struct ConstNamedTensor {
  std::string name;
  std::span<const double> values;
};

/// Flat views of every tensor in declaration order: input, blocks, output.
std::vector<NamedTensor> tensors(Weights& weights);
std::vector<ConstNamedTensor> tensors(const Weights& weights);

std::size_t parameter_count(const Weights& weights);
/// Closed-form learnable parameter count for a config.
std::size_t parameter_count(const ModuleConfig& config);

struct RunningStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

struct NetworkParams {
  ModuleConfig config;
  Weights weights;
  /// Two entries per block (first, second stage); empty without batch norm.
  std::vector<RunningStats> running;

  bool operator==(const NetworkParams& other) const;
};

/// He-uniform weights for layers feeding a ReLU, LeCun-uniform for the output
/// layer, zero biases, unit BN scale. Deterministic in the seed.
NetworkParams build_module(const ModuleConfig& config, std::uint64_t seed);

struct StageCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd normalized;  // x-hat, empty without batch norm
  Eigen::VectorXd inv_std;
  Eigen::MatrixXd pre_activation;
  Eigen::MatrixXd dropout_mask;  // already scaled by 1/keep; empty when inactive
};

struct ForwardTrace {
  Mode mode = Mode::eval;
  Eigen::MatrixXd input;
  std::vector<StageCache> stages;
  Eigen::MatrixXd output_input;
  bool consumed = false;
};

struct ForwardResult {
  Eigen::MatrixXd output;
  ForwardTrace trace;
};

/// Train-mode pass: batch statistics, fresh dropout masks drawn from rng, and
/// an EMA update of the running statistics. Requires at least two rows.
ForwardResult forward_train(NetworkParams& params, const Eigen::MatrixXd& batch, Rng& rng);

/// Eval-mode pass: running statistics, no dropout.
ForwardResult forward_eval(const NetworkParams& params, const Eigen::MatrixXd& batch);

ForwardResult forward(NetworkParams& params, const Eigen::MatrixXd& batch, Mode mode, Rng& rng);

struct Gradients {
  Weights params;
  Eigen::MatrixXd input;
};

/// Reverse pass through a trace produced by forward_*; marks it consumed.
Gradients backward(const NetworkParams& params, ForwardTrace& trace,
                   const Eigen::MatrixXd& output_gradient);

struct AdamState {
  Weights first_moment;
  Weights second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-4;

  bool operator==(const AdamState& other) const;
};

AdamState make_adam(const NetworkParams& params, double learning_rate);

/// One bias-corrected Adam update. Throws NumericalError naming the tensor if
/// any gradient entry is not finite; params and state are untouched then.
void adam_step(NetworkParams& params, const Weights& grads, AdamState& state);

}  // namespace liftpose::net
