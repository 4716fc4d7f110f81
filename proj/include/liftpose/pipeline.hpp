#pragma once

#include "liftpose/data.hpp"
#include "liftpose/losses.hpp"
#include "liftpose/metrics.hpp"
#include "liftpose/net.hpp"
#include "liftpose/skeleton.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace liftpose {

struct TrainConfig {
  LossWeights weights{0.5, 0.5, 1.0};
  double learning_rate = 1e-4;
  int batch_size = 64;
  int phase1_epochs = 50;  // lifter, supervised
  int phase2_epochs = 50;  // re-projector, ground-truth 3d input
  int joint_epochs = 100;  // both modules, full weighted loss
  int hidden = 1024;
  double dropout_rate = 0.5;
  bool batch_norm = true;
  std::uint64_t seed = 0;
  /// Per-source batch shares for joint training (3d-annotated first).
  std::vector<int> mix_ratio{1, 1};
  /// Unit (in mm) of the coordinates the symmetry loss sees; 1000 means
  /// bone lengths are compared in meters.
  double symmetry_unit_mm = 1000.0;

  std::string to_json() const;
  std::uint64_t hash() const;
};

struct Provenance {
  std::uint64_t config_hash = 0;
  std::string config_json;
  int lifter_epochs = 0;
  int reprojector_epochs = 0;
  int joint_epochs = 0;

  bool operator==(const Provenance&) const = default;
};

struct ModelBundle {
  SkeletonTopology topology;
  net::NetworkParams lifter;       // 2J -> 3J
  net::NetworkParams reprojector;  // 3J -> 2J
  NormalizationStats stats2d;
  NormalizationStats stats3d;
  net::AdamState lifter_adam;
  net::AdamState reprojector_adam;
  Provenance provenance;

  bool operator==(const ModelBundle& other) const;
};

/// Fits normalization statistics on `training` (root-centered 2d and 3d of
/// the 3d-annotated samples) and builds both modules from the config seed.
ModelBundle make_bundle(const SkeletonTopology& topo, std::span<const Sample> training,
                        const TrainConfig& config);

/// Root-centered, normalized matrices for a sample list. 3d rows of samples
/// without ground truth are zero; invisible 2d joints sit at the mean (0).
struct PreparedSet {
  Eigen::MatrixXd x2d;
  Eigen::MatrixXd x3d;
  VisibilityMask visible;
  std::vector<bool> has_3d;
  /// Raw-frame root position of every 2d input, used to map predictions back.
  Eigen::MatrixXd root2d;
};

PreparedSet prepare(const ModelBundle& bundle, std::span<const Sample> samples);

struct SourceLosses {
  std::size_t samples = 0;
  double l3d = 0.0;
  double l2d = 0.0;
  double lsymm = 0.0;
};

struct EpochRecord {
  std::string phase;
  int epoch = 0;  // 1-based within the phase
  std::size_t batches = 0;
  LossReport mean;  // batch-averaged components and total
  std::map<std::string, SourceLosses> per_source;
  double wall_seconds = 0.0;

  std::string to_json() const;
};

struct TrainHooks {
  std::function<void(const EpochRecord&, const ModelBundle&)> on_epoch;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Supervised lifter pretraining with the 3d loss, up to config.phase1_epochs
/// total (epochs already recorded in the bundle are skipped).
void train_phase_lifter(ModelBundle& bundle, std::span<const Sample> data,
                        const TrainConfig& config, const TrainHooks& hooks = {});

/// Re-projector pretraining from ground-truth 3d to 2d.
void train_phase_reprojector(ModelBundle& bundle, std::span<const Sample> data,
                             const TrainConfig& config, const TrainHooks& hooks = {});

/// Both modules together on mixed sources; samples without 3d ground truth
/// get alpha = 0. Adam moments restart at joint epoch 0. On a non-finite loss
/// the bundle is restored to its state at the start of the failing epoch and
/// net::NumericalError is rethrown.
void train_joint(ModelBundle& bundle, std::span<const std::span<const Sample>> sources,
                 const TrainConfig& config, const TrainHooks& hooks = {});

/// Runs all three phases in order.
void train_all(ModelBundle& bundle, std::span<const Sample> supervised,
               std::span<const std::span<const Sample>> joint_sources, const TrainConfig& config,
               const TrainHooks& hooks = {});

/// One mini-batch of the joint objective in normalized coordinates.
struct JointBatch {
  Eigen::MatrixXd x2d;
  Eigen::MatrixXd x3d;
  VisibilityMask visible;
  std::vector<double> gate3d;  // 1 with 3d ground truth, else 0
};

struct JointObjective {
  LossReport report;
  /// Per-sample terms before the 1/N mean; l3d already gated.
  Eigen::VectorXd l3d;
  Eigen::VectorXd l2d;
  Eigen::VectorXd lsymm;
  net::Weights lifter_grad;
  net::Weights reprojector_grad;
};

/// Forward (train mode) and backward through lifter -> re-projector for the
/// weighted loss. Dropout masks come from `rng`; parameters are not updated
/// but batch-norm running statistics are.
JointObjective joint_objective(net::NetworkParams& lifter, net::NetworkParams& reprojector,
                               const ModelBundle& context, const JointBatch& batch,
                               const LossWeights& weights, double symmetry_unit_mm, Rng& rng);

struct StepOptions {
  bool update_lifter = true;
  bool update_reprojector = true;
};

JointObjective joint_step(ModelBundle& bundle, const JointBatch& batch, const TrainConfig& config,
                          Rng& rng, const StepOptions& options = {});

struct Prediction {
  Pose3D pose3d;        // root-centered, mm, root exactly at the origin
  Pose2D reprojection;  // raw pixel frame of the input
};

Prediction predict(const ModelBundle& bundle, const Pose2D& y2d);
std::vector<Prediction> predict_batch(const ModelBundle& bundle, std::span<const Sample> samples);

struct EvalOptions {
  double pck_threshold_mm = kDefaultPckThresholdMm;
  bool retarget = false;
  std::optional<double> pelvis_ratio;
};

/// Lifts every sample and scores it against its root-centered ground truth.
EvalReport evaluate_bundle(const ModelBundle& bundle, std::span<const Sample> samples,
                           const EvalOptions& options = {});

/// Mean 2d joint distance (px) between the re-projector's output for
/// ground-truth 3d input and the root-centered 2d ground truth.
double reprojector_error(const ModelBundle& bundle, std::span<const Sample> samples);

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version, truncated, corrupt };
  CheckpointError(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const ModelBundle& bundle);
ModelBundle deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);
/// Human-readable dump with every value printed to 17 significant digits.
std::string checkpoint_to_text(const ModelBundle& bundle);

}  // namespace liftpose
