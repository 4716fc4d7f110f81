#include "liftpose/pipeline.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>

namespace liftpose {

namespace {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kLifterPhase = 1;
constexpr std::uint64_t kReprojectorPhase = 2;
constexpr std::uint64_t kJointPhase = 3;

// Independent streams per (phase, epoch): even for batch order, odd for dropout.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t phase, int epoch, bool dropout) {
  return mix_seed(seed, phase * 1'000'000ULL + 2ULL * static_cast<std::uint64_t>(epoch) +
                            (dropout ? 1 : 0));
}

net::ModuleConfig module_config(int in, int out, const TrainConfig& c) {
  net::ModuleConfig m;
  m.input_dim = in;
  m.output_dim = out;
  m.hidden = c.hidden;
  m.dropout_rate = c.dropout_rate;
  m.batch_norm = c.batch_norm;
  return m;
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& m, const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

VisibilityMask gather(const VisibilityMask& m, const std::vector<std::size_t>& rows) {
  VisibilityMask out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

void require_3d(std::span<const Sample> data, const char* phase) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].has_3d()) {
      throw TrainingError(std::string(phase) + ": sample " + std::to_string(i) + " (" +
                          data[i].id + ") has no 3d ground truth");
    }
  }
}

int single_source_batch(std::span<const Sample> data, const TrainConfig& config, const char* phase) {
  const int b = std::min<int>(config.batch_size, static_cast<int>(data.size()));
  if (b < 2) {
    throw TrainingError(std::string(phase) + ": need at least 2 samples per batch");
  }
  return b;
}

void check_finite(const LossReport& r, const char* phase) {
  if (!std::isfinite(r.total)) {
    throw net::NumericalError(std::string(phase) + ": non-finite loss");
  }
}

struct EpochAccumulator {
  EpochRecord record;
  Clock::time_point start = Clock::now();
  double total_sum = 0.0;
  double l3d_sum = 0.0;
  double l2d_sum = 0.0;
  double lsymm_sum = 0.0;

  void add(const LossReport& r) {
    ++record.batches;
    total_sum += r.total;
    l3d_sum += r.l3d;
    l2d_sum += r.l2d;
    lsymm_sum += r.lsymm;
  }

  void add_sample(const std::string& source, double l3d, double l2d, double lsymm) {
    auto& s = record.per_source[source];
    s.samples += 1;
    s.l3d += l3d;
    s.l2d += l2d;
    s.lsymm += lsymm;
  }

  EpochRecord finish(const LossWeights& applied) {
    const double n = record.batches > 0 ? static_cast<double>(record.batches) : 1.0;
    record.mean.l3d = l3d_sum / n;
    record.mean.l2d = l2d_sum / n;
    record.mean.lsymm = lsymm_sum / n;
    record.mean.total = total_sum / n;
    record.mean.applied = applied;
    for (auto& [_, s] : record.per_source) {
      const double k = s.samples > 0 ? static_cast<double>(s.samples) : 1.0;
      s.l3d /= k;
      s.l2d /= k;
      s.lsymm /= k;
    }
    record.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return record;
  }
};

}  // namespace

std::string TrainConfig::to_json() const {
  json j;
  j["alpha"] = weights.alpha;
  j["beta"] = weights.beta;
  j["gamma"] = weights.gamma;
  j["lr"] = learning_rate;
  j["batch"] = batch_size;
  j["phase1_epochs"] = phase1_epochs;
  j["phase2_epochs"] = phase2_epochs;
  j["joint_epochs"] = joint_epochs;
  j["hidden"] = hidden;
  j["dropout"] = dropout_rate;
  j["batch_norm"] = batch_norm;
  j["seed"] = seed;
  j["mix_ratio"] = mix_ratio;
  j["symmetry_unit_mm"] = symmetry_unit_mm;
  return j.dump();
}

std::uint64_t TrainConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool ModelBundle::operator==(const ModelBundle& o) const {
  return topology == o.topology && lifter == o.lifter && reprojector == o.reprojector &&
         stats2d == o.stats2d && stats3d == o.stats3d && lifter_adam == o.lifter_adam &&
         reprojector_adam == o.reprojector_adam && provenance == o.provenance;
}

std::string EpochRecord::to_json() const {
  json j;
  j["phase"] = phase;
  j["epoch"] = epoch;
  j["batches"] = batches;
  j["l3d"] = mean.l3d;
  j["l2d"] = mean.l2d;
  j["lsymm"] = mean.lsymm;
  j["total"] = mean.total;
  j["alpha"] = mean.applied.alpha;
  j["beta"] = mean.applied.beta;
  j["gamma"] = mean.applied.gamma;
  json sources = json::object();
  for (const auto& [name, s] : per_source) {
    sources[name] = {{"samples", s.samples}, {"l3d", s.l3d}, {"l2d", s.l2d}, {"lsymm", s.lsymm}};
  }
  j["sources"] = std::move(sources);
  j["wall_s"] = wall_seconds;
  return j.dump();
}

ModelBundle make_bundle(const SkeletonTopology& topo, std::span<const Sample> training,
                        const TrainConfig& config) {
  std::vector<Pose2D> poses2d;
  std::vector<Pose3D> poses3d;
  for (const auto& s : training) {
    if (!s.has_3d()) {
      continue;
    }
    poses2d.push_back(root_center(s.y2d, topo));
    poses3d.push_back(root_center(*s.y3d, topo));
  }
  if (poses3d.empty()) {
    throw TrainingError("make_bundle: normalization needs 3d-annotated training samples");
  }
  const int joints = topo.joint_count();
  ModelBundle b{
      topo,
      net::build_module(module_config(2 * joints, 3 * joints, config), mix_seed(config.seed, 101)),
      net::build_module(module_config(3 * joints, 2 * joints, config), mix_seed(config.seed, 102)),
      fit_normalization<2>(poses2d),
      fit_normalization<3>(poses3d),
      {},
      {},
      {},
  };
  b.lifter_adam = net::make_adam(b.lifter, config.learning_rate);
  b.reprojector_adam = net::make_adam(b.reprojector, config.learning_rate);
  b.provenance.config_hash = config.hash();
  b.provenance.config_json = config.to_json();
  return b;
}

PreparedSet prepare(const ModelBundle& bundle, std::span<const Sample> samples) {
  const auto& topo = bundle.topology;
  const int joints = topo.joint_count();
  const auto n = static_cast<Eigen::Index>(samples.size());
  PreparedSet p;
  p.x2d.resize(n, 2 * joints);
  p.x3d = Eigen::MatrixXd::Zero(n, 3 * joints);
  p.visible.resize(n, joints);
  p.root2d.resize(n, 2);
  p.has_3d.resize(samples.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (s.y2d.joint_count() != joints) {
      throw PreconditionError("prepare: sample " + s.id + " does not match the topology");
    }
    if (!s.y2d.all_finite()) {
      throw net::NumericalError("prepare: sample " + s.id + " has non-finite 2d coordinates");
    }
    for (int j = 0; j < joints; ++j) {
      p.visible(i, j) = s.visibility.empty() || s.visibility[static_cast<std::size_t>(j)];
    }
    if (!p.visible(i, topo.root_index())) {
      throw PreconditionError("prepare: sample " + s.id + " has no visible root joint");
    }
    p.root2d.row(i) = s.y2d.joint(topo.root_index()).transpose();
    Eigen::VectorXd x = normalize(root_center(s.y2d, topo), bundle.stats2d).coords;
    for (int j = 0; j < joints; ++j) {
      if (!p.visible(i, j)) {
        x.segment<2>(2 * j).setZero();
      }
    }
    p.x2d.row(i) = x.transpose();
    p.has_3d[static_cast<std::size_t>(i)] = s.has_3d();
    if (s.has_3d()) {
      p.x3d.row(i) = normalize(root_center(*s.y3d, topo), bundle.stats3d).coords.transpose();
    }
  }
  return p;
}

void train_phase_lifter(ModelBundle& bundle, std::span<const Sample> data,
                        const TrainConfig& config, const TrainHooks& hooks) {
  if (bundle.provenance.lifter_epochs >= config.phase1_epochs) {
    return;
  }
  require_3d(data, "train_phase_lifter");
  const int batch_size = single_source_batch(data, config, "train_phase_lifter");
  const PreparedSet set = prepare(bundle, data);
  const std::span<const Sample> sources[] = {data};
  const int ratio[] = {1};

  for (int epoch = bundle.provenance.lifter_epochs; epoch < config.phase1_epochs; ++epoch) {
    EpochAccumulator acc;
    acc.record.phase = "lifter";
    acc.record.epoch = epoch + 1;
    Rng rng(stream_seed(config.seed, kLifterPhase, epoch, true));
    const auto batches =
        make_batches(sources, ratio, batch_size, stream_seed(config.seed, kLifterPhase, epoch, false), true);
    for (const auto& batch : batches) {
      const PoseBatch3D gt{gather(set.x3d, batch.index), Frame::normalized};
      auto fwd = net::forward_train(bundle.lifter, gather(set.x2d, batch.index), rng);
      const LossTerm l3d = loss_3d({fwd.output, Frame::normalized}, gt);
      const LossReport report = total_loss(l3d.value, 0.0, 0.0, {1.0, 0.0, 0.0}, true, gt.size());
      check_finite(report, "train_phase_lifter");
      const auto grads = net::backward(bundle.lifter, fwd.trace, l3d.gradient);
      net::adam_step(bundle.lifter, grads.params, bundle.lifter_adam);
      acc.add(report);
      for (Eigen::Index i = 0; i < gt.size(); ++i) {
        acc.add_sample("s0", l3d.per_sample[i], 0.0, 0.0);
      }
    }
    bundle.provenance.lifter_epochs = epoch + 1;
    const EpochRecord rec = acc.finish({1.0, 0.0, 0.0});
    if (hooks.on_epoch) {
      hooks.on_epoch(rec, bundle);
    }
  }
}

void train_phase_reprojector(ModelBundle& bundle, std::span<const Sample> data,
                             const TrainConfig& config, const TrainHooks& hooks) {
  if (bundle.provenance.reprojector_epochs >= config.phase2_epochs) {
    return;
  }
  require_3d(data, "train_phase_reprojector");
  const int batch_size = single_source_batch(data, config, "train_phase_reprojector");
  const PreparedSet set = prepare(bundle, data);
  const std::span<const Sample> sources[] = {data};
  const int ratio[] = {1};

  for (int epoch = bundle.provenance.reprojector_epochs; epoch < config.phase2_epochs; ++epoch) {
    EpochAccumulator acc;
    acc.record.phase = "reprojector";
    acc.record.epoch = epoch + 1;
    Rng rng(stream_seed(config.seed, kReprojectorPhase, epoch, true));
    const auto batches = make_batches(sources, ratio, batch_size,
                                      stream_seed(config.seed, kReprojectorPhase, epoch, false), true);
    for (const auto& batch : batches) {
      const PoseBatch2D target{gather(set.x2d, batch.index), Frame::normalized};
      const VisibilityMask vis = gather(set.visible, batch.index);
      auto fwd = net::forward_train(bundle.reprojector, gather(set.x3d, batch.index), rng);
      const LossTerm l2d = loss_reproj({fwd.output, Frame::normalized}, target, &vis);
      const LossReport report = total_loss(0.0, l2d.value, 0.0, {0.0, 1.0, 0.0}, false, target.size());
      check_finite(report, "train_phase_reprojector");
      const auto grads = net::backward(bundle.reprojector, fwd.trace, l2d.gradient);
      net::adam_step(bundle.reprojector, grads.params, bundle.reprojector_adam);
      acc.add(report);
      for (Eigen::Index i = 0; i < target.size(); ++i) {
        acc.add_sample("s0", 0.0, l2d.per_sample[i], 0.0);
      }
    }
    bundle.provenance.reprojector_epochs = epoch + 1;
    const EpochRecord rec = acc.finish({0.0, 1.0, 0.0});
    if (hooks.on_epoch) {
      hooks.on_epoch(rec, bundle);
    }
  }
}

JointObjective joint_objective(net::NetworkParams& lifter, net::NetworkParams& reprojector,
                               const ModelBundle& context, const JointBatch& batch,
                               const LossWeights& weights, double symmetry_unit_mm, Rng& rng) {
  if (!(symmetry_unit_mm > 0.0)) {
    throw std::invalid_argument("joint_objective: symmetry unit must be positive");
  }
  const Eigen::Index n = batch.x2d.rows();
  JointObjective obj;

  auto lift = net::forward_train(lifter, batch.x2d, rng);
  auto reproj = net::forward_train(reprojector, lift.output, rng);

  const LossTerm l3d =
      loss_3d({lift.output, Frame::normalized}, {batch.x3d, Frame::normalized}, batch.gate3d);
  const LossTerm l2d = loss_reproj({reproj.output, Frame::normalized},
                                   {batch.x2d, Frame::normalized}, &batch.visible);

  // Symmetry on the metric prediction: mm = x * std + mean, then / unit.
  const Eigen::RowVectorXd std3d = context.stats3d.std.transpose();
  const Eigen::MatrixXd metric = denormalize_rows(lift.output, context.stats3d) / symmetry_unit_mm;
  const LossTerm lsym = loss_symmetry({metric, Frame::root_centered}, context.topology);

  const bool any_gt = std::any_of(batch.gate3d.begin(), batch.gate3d.end(),
                                  [](double g) { return g != 0.0; });
  obj.report = total_loss(l3d.value, l2d.value, lsym.value, weights, any_gt, n);
  obj.l3d = l3d.per_sample;
  obj.l2d = l2d.per_sample;
  obj.lsymm = lsym.per_sample;
  const LossWeights& w = obj.report.applied;

  auto reproj_grads = net::backward(reprojector, reproj.trace, w.beta * l2d.gradient);
  Eigen::MatrixXd d_lift = w.alpha * l3d.gradient + reproj_grads.input;
  d_lift += (w.gamma / symmetry_unit_mm) * (lsym.gradient.array().rowwise() * std3d.array()).matrix();
  auto lift_grads = net::backward(lifter, lift.trace, d_lift);

  obj.lifter_grad = std::move(lift_grads.params);
  obj.reprojector_grad = std::move(reproj_grads.params);
  return obj;
}

JointObjective joint_step(ModelBundle& bundle, const JointBatch& batch, const TrainConfig& config,
                          Rng& rng, const StepOptions& options) {
  JointObjective obj = joint_objective(bundle.lifter, bundle.reprojector, bundle, batch,
                                       config.weights, config.symmetry_unit_mm, rng);
  check_finite(obj.report, "train_joint");
  if (options.update_lifter) {
    net::adam_step(bundle.lifter, obj.lifter_grad, bundle.lifter_adam);
  }
  if (options.update_reprojector) {
    net::adam_step(bundle.reprojector, obj.reprojector_grad, bundle.reprojector_adam);
  }
  return obj;
}

void train_joint(ModelBundle& bundle, std::span<const std::span<const Sample>> sources,
                 const TrainConfig& config, const TrainHooks& hooks) {
  if (bundle.provenance.joint_epochs >= config.joint_epochs) {
    return;
  }
  if (sources.empty()) {
    throw TrainingError("train_joint: no training sources");
  }
  std::vector<int> ratio = config.mix_ratio;
  if (sources.size() == 1) {
    ratio = {1};
  } else if (ratio.size() != sources.size()) {
    throw TrainingError("train_joint: mix ratio has " + std::to_string(ratio.size()) +
                        " entries for " + std::to_string(sources.size()) + " sources");
  }
  std::vector<PreparedSet> sets;
  for (const auto& src : sources) {
    sets.push_back(prepare(bundle, src));
  }
  if (bundle.provenance.joint_epochs == 0) {
    bundle.lifter_adam = net::make_adam(bundle.lifter, config.learning_rate);
    bundle.reprojector_adam = net::make_adam(bundle.reprojector, config.learning_rate);
  }
  const int joints = bundle.topology.joint_count();

  for (int epoch = bundle.provenance.joint_epochs; epoch < config.joint_epochs; ++epoch) {
    const ModelBundle snapshot = bundle;
    EpochAccumulator acc;
    acc.record.phase = "joint";
    acc.record.epoch = epoch + 1;
    Rng rng(stream_seed(config.seed, kJointPhase, epoch, true));
    const auto batches = make_batches(sources, ratio, config.batch_size,
                                      stream_seed(config.seed, kJointPhase, epoch, false), true);
    if (batches.empty()) {
      throw TrainingError("train_joint: not enough samples for one batch of " +
                          std::to_string(config.batch_size));
    }
    try {
      for (const auto& b : batches) {
        const auto n = static_cast<Eigen::Index>(b.size());
        JointBatch jb;
        jb.x2d.resize(n, 2 * joints);
        jb.x3d.resize(n, 3 * joints);
        jb.visible.resize(n, joints);
        jb.gate3d.resize(b.size());
        for (std::size_t i = 0; i < b.size(); ++i) {
          const auto& set = sets[b.source[i]];
          const auto row = static_cast<Eigen::Index>(b.index[i]);
          const auto r = static_cast<Eigen::Index>(i);
          jb.x2d.row(r) = set.x2d.row(row);
          jb.x3d.row(r) = set.x3d.row(row);
          jb.visible.row(r) = set.visible.row(row);
          jb.gate3d[i] = b.has_3d[i] ? 1.0 : 0.0;
        }
        const JointObjective obj = joint_step(bundle, jb, config, rng);
        acc.add(obj.report);
        for (std::size_t i = 0; i < b.size(); ++i) {
          const auto r = static_cast<Eigen::Index>(i);
          acc.add_sample("s" + std::to_string(b.source[i]), obj.l3d[r], obj.l2d[r], obj.lsymm[r]);
        }
      }
    } catch (const net::NumericalError&) {
      bundle = snapshot;
      throw;
    }
    bundle.provenance.joint_epochs = epoch + 1;
    const EpochRecord rec = acc.finish(config.weights);
    if (hooks.on_epoch) {
      hooks.on_epoch(rec, bundle);
    }
  }
}

void train_all(ModelBundle& bundle, std::span<const Sample> supervised,
               std::span<const std::span<const Sample>> joint_sources, const TrainConfig& config,
               const TrainHooks& hooks) {
  train_phase_lifter(bundle, supervised, config, hooks);
  train_phase_reprojector(bundle, supervised, config, hooks);
  train_joint(bundle, joint_sources, config, hooks);
}

std::vector<Prediction> predict_batch(const ModelBundle& bundle, std::span<const Sample> samples) {
  std::vector<Prediction> out;
  if (samples.empty()) {
    return out;
  }
  const PreparedSet set = prepare(bundle, samples);
  const auto& topo = bundle.topology;
  const int joints = topo.joint_count();
  const auto lifted = net::forward_eval(bundle.lifter, set.x2d);
  const auto reproj = net::forward_eval(bundle.reprojector, lifted.output);
  const Eigen::MatrixXd mm = denormalize_rows(lifted.output, bundle.stats3d);
  const Eigen::MatrixXd px = denormalize_rows(reproj.output, bundle.stats2d);
  out.reserve(samples.size());
  for (Eigen::Index i = 0; i < set.x2d.rows(); ++i) {
    Prediction p;
    p.pose3d = Pose3D(mm.row(i).transpose(), Frame::root_centered);
    p.pose3d.joint(topo.root_index()).setZero();
    p.reprojection = Pose2D(px.row(i).transpose(), Frame::raw);
    for (int j = 0; j < joints; ++j) {
      p.reprojection.joint(j) += set.root2d.row(i).transpose();
    }
    out.push_back(std::move(p));
  }
  return out;
}

Prediction predict(const ModelBundle& bundle, const Pose2D& y2d) {
  if (y2d.frame != Frame::raw) {
    throw PreconditionError("predict: expects a raw 2d pose");
  }
  if (!y2d.all_finite()) {
    throw net::NumericalError("predict: non-finite input");
  }
  Sample s;
  s.y2d = y2d;
  s.visibility.assign(static_cast<std::size_t>(y2d.joint_count()), true);
  return predict_batch(bundle, std::span<const Sample>(&s, 1)).front();
}

EvalReport evaluate_bundle(const ModelBundle& bundle, std::span<const Sample> samples,
                           const EvalOptions& options) {
  const auto& topo = bundle.topology;
  const int joints = topo.joint_count();
  require_3d(samples, "evaluate_bundle");
  const auto preds = predict_batch(bundle, samples);
  const auto n = static_cast<Eigen::Index>(samples.size());
  PoseBatch3D pred{Eigen::MatrixXd(n, 3 * joints), Frame::root_centered};
  PoseBatch3D gt{Eigen::MatrixXd(n, 3 * joints), Frame::root_centered};
  std::vector<std::string> tags;
  tags.reserve(samples.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    const Pose3D truth = root_center(*s.y3d, topo);
    Pose3D p = preds[static_cast<std::size_t>(i)].pose3d;
    if (options.pelvis_ratio) {
      p = pelvis_adjust(p, topo, *options.pelvis_ratio);
    }
    if (options.retarget) {
      p = retarget(p, bone_lengths(truth, topo), topo);
    }
    pred.rows.row(i) = p.coords.transpose();
    gt.rows.row(i) = truth.coords.transpose();
    tags.push_back(s.source_tag);
  }
  return evaluate(pred, gt, tags, options.pck_threshold_mm);
}

double reprojector_error(const ModelBundle& bundle, std::span<const Sample> samples) {
  require_3d(samples, "reprojector_error");
  const PreparedSet set = prepare(bundle, samples);
  const auto out = net::forward_eval(bundle.reprojector, set.x3d);
  const Eigen::MatrixXd px = denormalize_rows(out.output, bundle.stats2d);
  const Eigen::MatrixXd truth = denormalize_rows(set.x2d, bundle.stats2d);
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < px.rows(); ++i) {
    for (Eigen::Index j = 0; j < set.visible.cols(); ++j) {
      if (set.visible(i, j)) {
        sum += (px.row(i).segment<2>(2 * j) - truth.row(i).segment<2>(2 * j)).norm();
        ++count;
      }
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace liftpose
