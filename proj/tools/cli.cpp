#include "cli.hpp"

#include "liftpose/data.hpp"
#include "liftpose/metrics.hpp"
#include "liftpose/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <memory>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace liftpose::cli {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { real, integer, boolean, text };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* fallback;
};

// Every key a config file or --set may name.
constexpr KeySpec kKeys[] = {
    {"train.alpha", Kind::real, "0.5"},
    {"train.beta", Kind::real, "0.5"},
    {"train.gamma", Kind::real, "1.0"},
    {"train.lr", Kind::real, "1e-4"},
    {"train.batch", Kind::integer, "64"},
    {"train.phase1_epochs", Kind::integer, "50"},
    {"train.phase2_epochs", Kind::integer, "50"},
    {"train.joint_epochs", Kind::integer, "100"},
    {"train.hidden", Kind::integer, "1024"},
    {"train.dropout", Kind::real, "0.5"},
    {"train.batch_norm", Kind::boolean, "true"},
    {"train.seed", Kind::integer, "0"},
    {"train.mix_ratio", Kind::text, "1:1"},
    {"train.symmetry_unit_mm", Kind::real, "1000"},
    {"camera.kind", Kind::text, "pinhole"},
    {"camera.focal", Kind::real, "1145"},
    {"camera.cx", Kind::real, "500"},
    {"camera.cy", Kind::real, "500"},
    {"camera.distance", Kind::real, "5000"},
    {"camera.elevation_deg", Kind::real, "0"},
    {"synth.train", Kind::integer, "5000"},
    {"synth.val", Kind::integer, "500"},
    {"synth.test", Kind::integer, "1000"},
    {"synth.weak", Kind::integer, "0"},
    {"synth.seed", Kind::integer, "0"},
    {"synth.test_elevation_deg", Kind::text, ""},
    {"synth.weak_elevation_deg", Kind::text, ""},
    {"augment.copies", Kind::integer, "0"},
    {"augment.max_rotation_deg", Kind::real, "30"},
    {"augment.min_scale", Kind::real, "0.8"},
    {"augment.max_scale", Kind::real, "1.2"},
    {"eval.pck_threshold_mm", Kind::real, "150"},
    {"eval.retarget", Kind::boolean, "false"},
    {"eval.pelvis_adjust", Kind::text, ""},
};

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : kKeys) {
    if (key == k.key) {
      return &k;
    }
  }
  return nullptr;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) {
    return "";
  }
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size() && std::isfinite(x)) {
      return x;
    }
  } catch (const std::exception&) {
  }
  throw UsageError(key + ": expected a number, got '" + v + "'");
}

long long parse_integer(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) {
      return x;
    }
  } catch (const std::exception&) {
  }
  throw UsageError(key + ": expected an integer, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") {
    return true;
  }
  if (v == "false" || v == "0" || v == "no" || v == "off") {
    return false;
  }
  throw UsageError(key + ": expected true/false, got '" + v + "'");
}

class Settings {
 public:
  Settings() {
    for (const auto& k : kKeys) {
      values_[k.key] = k.fallback;
    }
  }

  void set(const std::string& key, const std::string& value) {
    const KeySpec* spec = find_key(key);
    if (spec == nullptr) {
      throw UsageError("unknown config key '" + key + "'");
    }
    switch (spec->kind) {
      case Kind::real:
        parse_real(key, value);
        break;
      case Kind::integer:
        parse_integer(key, value);
        break;
      case Kind::boolean:
        parse_bool(key, value);
        break;
      case Kind::text:
        break;
    }
    values_[key] = value;
  }

  void set_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw UsageError("expected key=value, got '" + text + "'");
    }
    set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }

  void load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
      throw UsageError("cannot read config file " + path.string());
    }
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) {
        line.erase(hash);
      }
      line = trim(line);
      if (line.empty()) {
        continue;
      }
      if (line.find('=') == std::string::npos) {
        throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
      }
      set_assignment(line);
    }
  }

  const std::string& text(const std::string& key) const { return values_.at(key); }
  double real(const std::string& key) const { return parse_real(key, text(key)); }
  long long integer(const std::string& key) const { return parse_integer(key, text(key)); }
  bool boolean(const std::string& key) const { return parse_bool(key, text(key)); }

  std::optional<double> optional_real(const std::string& key) const {
    if (text(key).empty()) {
      return std::nullopt;
    }
    return parse_real(key, text(key));
  }

  /// Keys under the given prefixes, typed.
  json to_json(std::initializer_list<const char*> prefixes) const {
    json j = json::object();
    for (const auto& k : kKeys) {
      const std::string key = k.key;
      const bool wanted = std::any_of(prefixes.begin(), prefixes.end(), [&](const char* p) {
        return key.rfind(p, 0) == 0;
      });
      if (!wanted) {
        continue;
      }
      switch (k.kind) {
        case Kind::real:
          j[key] = real(key);
          break;
        case Kind::integer:
          j[key] = integer(key);
          break;
        case Kind::boolean:
          j[key] = boolean(key);
          break;
        case Kind::text:
          j[key] = text(key);
          break;
      }
    }
    return j;
  }

 private:
  std::map<std::string, std::string> values_;
};

// A flag that, when given, overrides one config key.
struct FlagBinding {
  CLI::Option* option = nullptr;
  std::string key;
  std::string value;
};

class Flags {
 public:
  void add(CLI::App* app, const std::string& name, const std::string& key,
           const std::string& help) {
    auto binding = std::make_unique<FlagBinding>();
    binding->key = key;
    const KeySpec* spec = find_key(key);
    const std::string full = help + " [" + (spec != nullptr ? spec->fallback : "") + "]";
    binding->option = app->add_option(name, binding->value, full);
    bindings_.push_back(std::move(binding));
  }

  void add_switch(CLI::App* app, const std::string& name, const std::string& key,
                  const std::string& help) {
    auto binding = std::make_unique<FlagBinding>();
    binding->key = key;
    binding->value = "true";
    binding->option = app->add_flag(name, help);
    bindings_.push_back(std::move(binding));
  }

  void apply(Settings& s) const {
    for (const auto& b : bindings_) {
      if (b->option->count() > 0) {
        s.set(b->key, b->value);
      }
    }
  }

 private:
  std::vector<std::unique_ptr<FlagBinding>> bindings_;
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "flat key = value config file");
  app->add_option("--set", c.overrides, "override one config key (key=value)");
}

Settings resolve(const Common& c, const Flags& flags) {
  Settings s;
  if (!c.config.empty()) {
    s.load_file(c.config);
  }
  for (const auto& o : c.overrides) {
    s.set_assignment(o);
  }
  flags.apply(s);
  return s;
}

std::vector<int> parse_ratio(const std::string& text) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ':')) {
    const long long v = parse_integer("train.mix_ratio", trim(part));
    if (v < 0 || v > 1000) {
      throw UsageError("train.mix_ratio: entries must lie in [0, 1000]");
    }
    out.push_back(static_cast<int>(v));
  }
  if (out.empty()) {
    throw UsageError("train.mix_ratio: empty ratio");
  }
  return out;
}

TrainConfig train_config(const Settings& s) {
  TrainConfig c;
  c.weights = {s.real("train.alpha"), s.real("train.beta"), s.real("train.gamma")};
  c.learning_rate = s.real("train.lr");
  c.batch_size = static_cast<int>(s.integer("train.batch"));
  c.phase1_epochs = static_cast<int>(s.integer("train.phase1_epochs"));
  c.phase2_epochs = static_cast<int>(s.integer("train.phase2_epochs"));
  c.joint_epochs = static_cast<int>(s.integer("train.joint_epochs"));
  c.hidden = static_cast<int>(s.integer("train.hidden"));
  c.dropout_rate = s.real("train.dropout");
  c.batch_norm = s.boolean("train.batch_norm");
  c.seed = static_cast<std::uint64_t>(s.integer("train.seed"));
  c.mix_ratio = parse_ratio(s.text("train.mix_ratio"));
  c.symmetry_unit_mm = s.real("train.symmetry_unit_mm");

  if (c.weights.alpha < 0 || c.weights.beta < 0 || c.weights.gamma < 0) {
    throw UsageError("loss weights must be nonnegative");
  }
  if (!(c.learning_rate > 0)) {
    throw UsageError("train.lr must be positive");
  }
  if (c.batch_size < 2) {
    throw UsageError("train.batch must be at least 2");
  }
  if (c.phase1_epochs < 0 || c.phase2_epochs < 0 || c.joint_epochs < 0) {
    throw UsageError("epoch counts must be nonnegative");
  }
  if (c.hidden < 1) {
    throw UsageError("train.hidden must be positive");
  }
  if (c.dropout_rate < 0 || c.dropout_rate >= 1) {
    throw UsageError("train.dropout must lie in [0, 1)");
  }
  if (!(c.symmetry_unit_mm > 0)) {
    throw UsageError("train.symmetry_unit_mm must be positive");
  }
  return c;
}

CameraModel camera_model(const Settings& s) {
  CameraModel cam;
  const std::string kind = s.text("camera.kind");
  if (kind == "pinhole") {
    cam.kind = CameraKind::pinhole;
  } else if (kind == "orthographic") {
    cam.kind = CameraKind::orthographic;
  } else {
    throw UsageError("camera.kind must be pinhole or orthographic");
  }
  cam.focal = s.real("camera.focal");
  cam.principal = {s.real("camera.cx"), s.real("camera.cy")};
  cam.distance = s.real("camera.distance");
  cam.elevation_deg = s.real("camera.elevation_deg");
  if (!(cam.focal > 0) || !(cam.distance > 0)) {
    throw UsageError("camera.focal and camera.distance must be positive");
  }
  return cam;
}

AugmentationSpec augmentation(const Settings& s) {
  AugmentationSpec a;
  a.copies = static_cast<int>(s.integer("augment.copies"));
  a.max_rotation_deg = s.real("augment.max_rotation_deg");
  a.min_scale = s.real("augment.min_scale");
  a.max_scale = s.real("augment.max_scale");
  if (a.copies < 0 || !(a.min_scale > 0) || a.max_scale < a.min_scale) {
    throw UsageError("invalid augment.* settings");
  }
  return a;
}

EvalOptions eval_options(const Settings& s) {
  EvalOptions o;
  o.pck_threshold_mm = s.real("eval.pck_threshold_mm");
  if (!(o.pck_threshold_mm > 0)) {
    throw UsageError("eval.pck_threshold_mm must be positive");
  }
  o.retarget = s.boolean("eval.retarget");
  o.pelvis_ratio = s.optional_real("eval.pelvis_adjust");
  return o;
}

std::string config_text(const json& j) { return j.dump(); }

// ---------------------------------------------------------------- synth

int cmd_synth(const Settings& s, const std::string& out_dir, std::ostream& out) {
  const CameraModel cam = camera_model(s);
  const AugmentationSpec aug = augmentation(s);
  const auto seed = static_cast<std::uint64_t>(s.integer("synth.seed"));
  const auto& topo = SkeletonTopology::h36m17();
  const std::string cfg = config_text(s.to_json({"synth.", "camera.", "augment."}));

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    throw DataError("cannot create " + out_dir + ": " + ec.message());
  }

  struct Split {
    const char* name;
    const char* count_key;
    std::uint64_t stream;
  };
  const Split splits[] = {{"train", "synth.train", 1}, {"val", "synth.val", 2},
                          {"test", "synth.test", 3}, {"weak", "synth.weak", 4}};
  for (const auto& split : splits) {
    const long long count = s.integer(split.count_key);
    if (count < 0) {
      throw UsageError(std::string(split.count_key) + " must be nonnegative");
    }
    if (count == 0) {
      continue;
    }
    CameraModel c = cam;
    if (std::string(split.name) == "test") {
      c.elevation_deg = s.optional_real("synth.test_elevation_deg").value_or(cam.elevation_deg);
    } else if (std::string(split.name) == "weak") {
      c.elevation_deg = s.optional_real("synth.weak_elevation_deg").value_or(cam.elevation_deg);
    }
    auto samples = generate_synthetic(static_cast<int>(count), mix_seed(seed, split.stream), c, topo);
    if (std::string(split.name) == "weak") {
      std::vector<Sample> all;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        samples[i].y3d.reset();
        all.push_back(samples[i]);
        if (aug.copies > 0) {
          Sample centered = samples[i];
          centered.y2d = root_center(centered.y2d, topo);
          for (auto& copy : augment_2d(centered, aug, mix_seed(seed, 100 + i))) {
            all.push_back(std::move(copy));
          }
        }
      }
      samples = std::move(all);
    }
    const fs::path path = fs::path(out_dir) / (std::string(split.name) + ".jsonl");
    save_poses(samples, topo, path, cfg);
    out << split.name << " " << samples.size() << " " << path.string() << "\n";
  }
  return ok;
}

// ---------------------------------------------------------------- train

std::vector<Sample> load_data(const std::string& path, const SkeletonTopology& topo) {
  return load_poses(path, topo);
}

int cmd_train(const Settings& s, const std::string& data_path,
              const std::vector<std::string>& weak_paths, const std::string& out_path,
              const std::string& log_path, const std::string& resume_path, std::ostream& out) {
  const TrainConfig config = train_config(s);
  const auto& topo = SkeletonTopology::h36m17();

  const std::vector<Sample> data = load_data(data_path, topo);
  if (data.empty()) {
    throw DataError(data_path + ": no samples");
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].has_3d()) {
      throw DataError(data_path + ": sample " + std::to_string(i) + " (" + data[i].id +
                      ") has no 3d pose; supervised phases need 3d-annotated data, pass "
                      "2d-only files with --weak");
    }
  }
  std::vector<std::vector<Sample>> weak;
  for (const auto& p : weak_paths) {
    weak.push_back(load_data(p, topo));
  }
  std::vector<std::span<const Sample>> sources{data};
  for (const auto& w : weak) {
    sources.emplace_back(w);
  }
  if (sources.size() > 1 && config.mix_ratio.size() != sources.size()) {
    throw UsageError("train.mix_ratio has " + std::to_string(config.mix_ratio.size()) +
                     " entries for " + std::to_string(sources.size()) + " sources");
  }

  ModelBundle bundle =
      resume_path.empty() ? make_bundle(topo, data, config) : load_checkpoint(resume_path);
  if (!resume_path.empty()) {
    if (bundle.provenance.config_hash != config.hash()) {
      throw UsageError("--resume: checkpoint was trained with a different config " +
                       bundle.provenance.config_json);
    }
    if (!(bundle.topology == topo)) {
      throw DataError("--resume: checkpoint topology differs from the data");
    }
  }

  json header;
  header["kind"] = "run";
  header["config"] = json::parse(config.to_json());
  header["data"] = data_path;
  header["weak"] = weak_paths;
  header["resumed"] = !resume_path.empty();
  header["start"] = {{"lifter", bundle.provenance.lifter_epochs},
                     {"reprojector", bundle.provenance.reprojector_epochs},
                     {"joint", bundle.provenance.joint_epochs}};
  out << "liftpose train " << header["config"].dump() << "\n";

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!log) {
      throw DataError("cannot open log " + log_path);
    }
    log << header.dump() << "\n" << std::flush;
  }

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec, const ModelBundle& b) {
    if (log.is_open()) {
      json j = json::parse(rec.to_json());
      j["kind"] = "epoch";
      log << j.dump() << "\n" << std::flush;
    }
    save_checkpoint(b, out_path);
    char line[160];
    std::snprintf(line, sizeof(line), "%-11s %4d  l3d %.6g  l2d %.6g  lsymm %.6g  total %.6g\n",
                  rec.phase.c_str(), rec.epoch, rec.mean.l3d, rec.mean.l2d, rec.mean.lsymm,
                  rec.mean.total);
    out << line;
  };
  train_all(bundle, data, sources, config, hooks);
  save_checkpoint(bundle, out_path);
  out << "checkpoint " << out_path << "\n";
  return ok;
}

// ---------------------------------------------------------------- eval

void write_report(const EvalReport& r, const SkeletonTopology& topo, const json& cfg,
                  const std::string& path, std::ostream& out) {
  out << report_to_table(r, topo);
  if (path.empty()) {
    return;
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) {
    throw DataError("cannot write " + path);
  }
  json head;
  head["kind"] = "config";
  head["config"] = cfg;
  f << head.dump() << "\n" << report_to_jsonl(r, topo);
  if (!f) {
    throw DataError("write failed for " + path);
  }
}

int cmd_eval(const Settings& s, const std::string& checkpoint, const std::string& predictions,
             const std::string& data_path, const std::string& out_path, std::ostream& out) {
  const EvalOptions opts = eval_options(s);
  if (checkpoint.empty() == predictions.empty()) {
    throw UsageError("eval needs exactly one of --checkpoint or --predictions");
  }
  json cfg = s.to_json({"eval."});
  if (!checkpoint.empty()) {
    const ModelBundle bundle = load_checkpoint(checkpoint);
    const auto data = load_data(data_path, bundle.topology);
    cfg["checkpoint"] = checkpoint;
    cfg["train_config"] = json::parse(bundle.provenance.config_json);
    write_report(evaluate_bundle(bundle, data, opts), bundle.topology, cfg, out_path, out);
    return ok;
  }

  const auto& topo = SkeletonTopology::h36m17();
  const auto preds = load_data(predictions, topo);
  const auto data = load_data(data_path, topo);
  if (preds.size() != data.size()) {
    throw DataError("predictions hold " + std::to_string(preds.size()) + " samples, data " +
                    std::to_string(data.size()));
  }
  const auto n = static_cast<Eigen::Index>(data.size());
  PoseBatch3D pred{Eigen::MatrixXd(n, 3 * topo.joint_count()), Frame::root_centered};
  PoseBatch3D gt = pred;
  std::vector<std::string> tags;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = preds[static_cast<std::size_t>(i)];
    const auto& d = data[static_cast<std::size_t>(i)];
    if (p.id != d.id) {
      throw DataError("record " + std::to_string(i) + ": prediction id " + p.id +
                      " does not match data id " + d.id);
    }
    if (!p.has_3d() || !d.has_3d()) {
      throw DataError("record " + std::to_string(i) + ": missing 3d pose");
    }
    const Pose3D truth = root_center(*d.y3d, topo);
    Pose3D est = root_center(*p.y3d, topo);
    if (opts.pelvis_ratio) {
      est = pelvis_adjust(est, topo, *opts.pelvis_ratio);
    }
    if (opts.retarget) {
      est = retarget(est, bone_lengths(truth, topo), topo);
    }
    pred.rows.row(i) = est.coords.transpose();
    gt.rows.row(i) = truth.coords.transpose();
    tags.push_back(d.source_tag);
  }
  cfg["predictions"] = predictions;
  write_report(evaluate(pred, gt, tags, opts.pck_threshold_mm), topo, cfg, out_path, out);
  return ok;
}

// ---------------------------------------------------------------- predict

int cmd_predict(const std::string& checkpoint, const std::string& input,
                const std::string& out_path, std::ostream& out) {
  const ModelBundle bundle = load_checkpoint(checkpoint);
  const auto samples = load_data(input, bundle.topology);
  const auto preds = predict_batch(bundle, samples);
  std::vector<Sample> result = samples;
  double residual = 0.0;
  std::size_t joints = 0;
  for (std::size_t i = 0; i < result.size(); ++i) {
    result[i].y3d = preds[i].pose3d;
    result[i].reprojection = preds[i].reprojection;
    const Pose2D& input2d = samples[i].y2d;
    for (int j = 0; j < bundle.topology.joint_count(); ++j) {
      if (samples[i].visibility.empty() || samples[i].visibility[static_cast<std::size_t>(j)]) {
        residual += (preds[i].reprojection.joint(j) - input2d.joint(j)).norm();
        ++joints;
      }
    }
  }
  json cfg;
  cfg["checkpoint"] = checkpoint;
  cfg["input"] = input;
  cfg["train_config"] = json::parse(bundle.provenance.config_json);
  save_poses(result, bundle.topology, out_path, cfg.dump());
  char line[128];
  std::snprintf(line, sizeof(line), "predicted %zu poses; mean reprojection residual %.4f px\n",
                result.size(), joints > 0 ? residual / static_cast<double>(joints) : 0.0);
  out << line << "predictions " << out_path << "\n";
  return ok;
}

// ---------------------------------------------------------------- plot

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double span() const { return hi > lo ? hi - lo : 1.0; }
};

constexpr double kWidth = 640;
constexpr double kHeight = 400;
constexpr double kMargin = 50;

std::string svg_open(const Range& x, const Range& y, const std::string& title,
                     const std::string& cfg) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" data-x-min=\"" << fmt(x.lo) << "\" data-x-max=\"" << fmt(x.hi) << "\" data-y-min=\""
    << fmt(y.lo) << "\" data-y-max=\"" << fmt(y.hi) << "\">\n";
  s << "<metadata>" << cfg << "</metadata>\n";
  s << "<title>" << title << "</title>\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" fill=\"white\"/>\n";
  return s.str();
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
  if (!f) {
    throw DataError("cannot write " + path.string());
  }
}

std::vector<fs::path> plot_log(const std::string& log_path, const fs::path& dir) {
  std::ifstream in(log_path);
  if (!in) {
    throw DataError("cannot open log " + log_path);
  }
  std::vector<json> epochs;
  json run = json::object();
  std::string line;
  long rec = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) {
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw DataError(log_path + ": line " + std::to_string(rec + 1) + " is not JSON");
    }
    if (j.value("kind", std::string()) == "run") {
      run = j;
    } else if (j.contains("phase")) {
      epochs.push_back(std::move(j));
    }
    ++rec;
  }
  if (epochs.empty()) {
    throw DataError(log_path + ": no epoch records to plot");
  }
  const std::string cfg = escape(run.contains("config") ? run["config"].dump() : "{}");

  std::vector<fs::path> written;
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  for (const char* component : {"l3d", "l2d", "lsymm", "total"}) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    Range xr;
    Range yr;
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      const std::string phase = epochs[i]["phase"].get<std::string>();
      if (!series.count(phase)) {
        order.push_back(phase);
      }
      const double x = static_cast<double>(i + 1);
      const double y = epochs[i].value(component, 0.0);
      series[phase].emplace_back(x, y);
      xr.add(x);
      yr.add(y);
    }
    auto px = [&](double x) { return kMargin + (x - xr.lo) / xr.span() * (kWidth - 2 * kMargin); };
    auto py = [&](double y) {
      return kHeight - kMargin - (y - yr.lo) / yr.span() * (kHeight - 2 * kMargin);
    };
    std::ostringstream s;
    s << svg_open(xr, yr, std::string("loss ") + component, cfg);
    s << "<line class=\"axis\" x1=\"" << kMargin << "\" y1=\"" << kHeight - kMargin << "\" x2=\""
      << kWidth - kMargin << "\" y2=\"" << kHeight - kMargin << "\" stroke=\"black\"/>\n";
    s << "<line class=\"axis\" x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin
      << "\" y2=\"" << kHeight - kMargin << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << kMargin << "\" y=\"" << kHeight - 20 << "\">" << fmt(xr.lo) << "</text>\n";
    s << "<text x=\"" << kWidth - kMargin << "\" y=\"" << kHeight - 20 << "\">" << fmt(xr.hi)
      << "</text>\n";
    s << "<text x=\"4\" y=\"" << kHeight - kMargin << "\">" << fmt(yr.lo) << "</text>\n";
    s << "<text x=\"4\" y=\"" << kMargin << "\">" << fmt(yr.hi) << "</text>\n";
    s << "<text x=\"" << kWidth / 2 << "\" y=\"24\">" << component << " per epoch</text>\n";
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& pts = series[order[k]];
      const char* color = palette[k % 5];
      s << "<polyline class=\"series\" data-series=\"" << order[k] << "\" fill=\"none\" stroke=\""
        << color << "\" points=\"";
      for (const auto& [x, y] : pts) {
        s << fmt(px(x)) << "," << fmt(py(y)) << " ";
      }
      s << "\"/>\n";
      for (const auto& [x, y] : pts) {
        s << "<circle class=\"point\" data-series=\"" << order[k] << "\" data-x=\"" << fmt(x)
          << "\" data-y=\"" << fmt(y) << "\" cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y))
          << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
      }
      s << "<text x=\"" << kWidth - kMargin - 90 << "\" y=\"" << kMargin + 16 * k << "\" fill=\""
        << color << "\">" << order[k] << "</text>\n";
    }
    s << "</svg>\n";
    const fs::path path = dir / (std::string("loss_") + component + ".svg");
    write_file(path, s.str());
    written.push_back(path);
  }
  return written;
}

std::vector<fs::path> plot_poses(const std::string& pose_path, const fs::path& dir, int max_poses) {
  const auto& topo = SkeletonTopology::h36m17();
  const auto samples = load_data(pose_path, topo);
  if (samples.empty()) {
    throw DataError(pose_path + ": no poses to plot");
  }
  std::vector<fs::path> written;
  const std::size_t n = std::min(samples.size(), static_cast<std::size_t>(std::max(max_poses, 0)));
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = samples[i];
    // Front view of the 3d pose when present, else the 2d pose.
    std::vector<Eigen::Vector2d> pts(static_cast<std::size_t>(topo.joint_count()));
    for (int j = 0; j < topo.joint_count(); ++j) {
      pts[static_cast<std::size_t>(j)] =
          s.has_3d() ? Eigen::Vector2d(s.y3d->joint(j).head<2>()) : Eigen::Vector2d(s.y2d.joint(j));
    }
    Range xr;
    Range yr;
    for (const auto& p : pts) {
      xr.add(p.x());
      yr.add(p.y());
    }
    const double scale =
        std::min((kWidth - 2 * kMargin) / xr.span(), (kHeight - 2 * kMargin) / yr.span());
    auto px = [&](double x) { return kMargin + (x - xr.lo) * scale; };
    auto py = [&](double y) { return kMargin + (y - yr.lo) * scale; };
    std::ostringstream o;
    o << svg_open(xr, yr, escape(s.id), escape(json{{"source", pose_path}, {"id", s.id}}.dump()));
    for (int j : topo.bones()) {
      const auto& a = pts[static_cast<std::size_t>(topo.parent(j))];
      const auto& b = pts[static_cast<std::size_t>(j)];
      o << "<line class=\"bone\" data-joint=\"" << topo.joint_names()[static_cast<std::size_t>(j)]
        << "\" x1=\"" << fmt(px(a.x())) << "\" y1=\"" << fmt(py(a.y())) << "\" x2=\""
        << fmt(px(b.x())) << "\" y2=\"" << fmt(py(b.y())) << "\" stroke=\"#333\" stroke-width=\"3\"/>\n";
    }
    for (const auto& p : pts) {
      o << "<circle class=\"joint\" cx=\"" << fmt(px(p.x())) << "\" cy=\"" << fmt(py(p.y()))
        << "\" r=\"3\" fill=\"#d62728\"/>\n";
    }
    o << "</svg>\n";
    const fs::path path = dir / ("skeleton_" + std::to_string(i) + ".svg");
    write_file(path, o.str());
    written.push_back(path);
  }
  return written;
}

int cmd_plot(const std::string& log_path, const std::string& pose_path, const std::string& out_dir,
             int max_poses, std::ostream& out) {
  if (log_path.empty() && pose_path.empty()) {
    throw UsageError("plot needs --log and/or --poses");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    throw DataError("cannot create " + out_dir + ": " + ec.message());
  }
  std::vector<fs::path> written;
  if (!log_path.empty()) {
    const auto w = plot_log(log_path, out_dir);
    written.insert(written.end(), w.begin(), w.end());
  }
  if (!pose_path.empty()) {
    const auto w = plot_poses(pose_path, out_dir, max_poses);
    written.insert(written.end(), w.begin(), w.end());
  }
  for (const auto& p : written) {
    out << p.string() << "\n";
  }
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"liftpose: weakly supervised 2d-to-3d human pose lifting"};
  app.require_subcommand(1);

  Common common;
  Flags flags;

  auto* synth = app.add_subcommand("synth", "write synthetic train/val/test/weak pose files");
  add_common(synth, common);
  std::string synth_dir;
  synth->add_option("--out-dir", synth_dir, "output directory")->required();
  flags.add(synth, "--train", "synth.train", "train samples");
  flags.add(synth, "--val", "synth.val", "validation samples");
  flags.add(synth, "--test", "synth.test", "test samples");
  flags.add(synth, "--weak", "synth.weak", "2d-only samples");
  flags.add(synth, "--seed", "synth.seed", "generator seed");
  flags.add(synth, "--elevation", "camera.elevation_deg", "camera elevation (deg)");
  flags.add(synth, "--test-elevation", "synth.test_elevation_deg", "test camera elevation (deg)");
  flags.add(synth, "--weak-elevation", "synth.weak_elevation_deg", "weak-set camera elevation (deg)");
  flags.add(synth, "--augment-copies", "augment.copies", "rotated/scaled copies per weak sample");

  auto* train = app.add_subcommand("train", "run lifter, re-projector and joint training");
  add_common(train, common);
  std::string data_path;
  std::vector<std::string> weak_paths;
  std::string ckpt_out;
  std::string log_path;
  std::string resume_path;
  train->add_option("--data", data_path, "3d-annotated pose file")->required();
  train->add_option("--weak", weak_paths, "2d-only pose file (repeatable)");
  train->add_option("--out", ckpt_out, "checkpoint path")->required();
  train->add_option("--log", log_path, "per-epoch JSON-lines log");
  train->add_option("--resume", resume_path, "continue from this checkpoint");
  flags.add(train, "--phase1-epochs", "train.phase1_epochs", "lifter pretraining epochs");
  flags.add(train, "--phase2-epochs", "train.phase2_epochs", "re-projector pretraining epochs");
  flags.add(train, "--joint-epochs", "train.joint_epochs", "joint training epochs");
  flags.add(train, "--lr", "train.lr", "Adam learning rate");
  flags.add(train, "--batch", "train.batch", "batch size");
  flags.add(train, "--alpha", "train.alpha", "3d loss weight");
  flags.add(train, "--beta", "train.beta", "re-projection loss weight");
  flags.add(train, "--gamma", "train.gamma", "symmetry loss weight");
  flags.add(train, "--hidden", "train.hidden", "hidden width");
  flags.add(train, "--dropout", "train.dropout", "dropout rate");
  flags.add(train, "--seed", "train.seed", "training seed");
  flags.add(train, "--mix-ratio", "train.mix_ratio", "per-source batch shares, e.g. 1:1");

  auto* eval = app.add_subcommand("eval", "score a checkpoint or a prediction file");
  add_common(eval, common);
  std::string eval_ckpt;
  std::string eval_pred;
  std::string eval_data;
  std::string eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate");
  eval->add_option("--predictions", eval_pred, "pose file of predicted 3d poses");
  eval->add_option("--data", eval_data, "labeled pose file")->required();
  eval->add_option("--out", eval_out, "JSON-lines report");
  flags.add(eval, "--pck-threshold", "eval.pck_threshold_mm", "PCK threshold (mm)");
  flags.add_switch(eval, "--retarget", "eval.retarget", "rescale bones to ground-truth lengths");
  flags.add(eval, "--pelvis-adjust", "eval.pelvis_adjust", "move pelvis and hips toward the neck");

  auto* predict_cmd = app.add_subcommand("predict", "lift a 2d pose file");
  add_common(predict_cmd, common);
  std::string pred_ckpt;
  std::string pred_in;
  std::string pred_out;
  predict_cmd->add_option("--checkpoint", pred_ckpt, "checkpoint")->required();
  predict_cmd->add_option("--input", pred_in, "2d pose file")->required();
  predict_cmd->add_option("--out", pred_out, "output pose file")->required();

  auto* plot = app.add_subcommand("plot", "render loss curves and skeletons as SVG");
  add_common(plot, common);
  std::string plot_log_path;
  std::string plot_poses_path;
  std::string plot_dir;
  int max_poses = 8;
  plot->add_option("--log", plot_log_path, "training log");
  plot->add_option("--poses", plot_poses_path, "pose file");
  plot->add_option("--out-dir", plot_dir, "output directory")->required();
  plot->add_option("--max-poses", max_poses, "skeleton renders to write")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    if (!app.get_subcommands().empty()) {
      out << app.get_subcommands().front()->help();
    }
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "liftpose: " << e.what() << "\n";
    return usage;
  }

  try {
    const Settings settings = resolve(common, flags);
    if (synth->parsed()) {
      return cmd_synth(settings, synth_dir, out);
    }
    if (train->parsed()) {
      return cmd_train(settings, data_path, weak_paths, ckpt_out, log_path, resume_path, out);
    }
    if (eval->parsed()) {
      return cmd_eval(settings, eval_ckpt, eval_pred, eval_data, eval_out, out);
    }
    if (predict_cmd->parsed()) {
      return cmd_predict(pred_ckpt, pred_in, pred_out, out);
    }
    return cmd_plot(plot_log_path, plot_poses_path, plot_dir, max_poses, out);
  } catch (const UsageError& e) {
    err << "liftpose: " << e.what() << "\n";
    return usage;
  } catch (const net::NumericalError& e) {
    err << "liftpose: numerical failure: " << e.what() << "\n";
    return numerical;
  } catch (const std::exception& e) {
    err << "liftpose: " << e.what() << "\n";
    return data_error;
  }
}

}  // namespace liftpose::cli
