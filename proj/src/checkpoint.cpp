// Binary checkpoint layout, all integers and doubles little-endian:
//
//   "LIFTPOSE"  u32 version  u64 payload_bytes
//   payload:
//     str topology_text
//     u64 config_hash  str config_json  i32 lifter/reprojector/joint epochs
//     stats2d, stats3d            (vec mean, vec std)
//     lifter, reprojector         (module config, named tensors, running stats)
//     lifter_adam, reprojector_adam (i64 step, 4 x f64, moments as named tensors)
//   u64 fnv1a(payload)
//
// str = u64 length + bytes, vec = u64 length + f64 values.

#include "liftpose/pipeline.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace liftpose {

namespace {

using Kind = CheckpointError::Kind;

constexpr char kMagic[8] = {'L', 'I', 'F', 'T', 'P', 'O', 'S', 'E'};
constexpr std::size_t kHeaderBytes = 8 + 4 + 8;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
  void i64(std::int64_t v) { put(static_cast<std::uint64_t>(v), 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  void vec(std::span<const double> v) {
    u64(v.size());
    for (double x : v) {
      f64(x);
    }
  }
  void vec(const Eigen::VectorXd& v) { vec(std::span<const double>(v.data(), static_cast<std::size_t>(v.size()))); }
  std::string& bytes() { return out_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) {
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : in_(bytes) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> vec() {
    const std::uint64_t n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (auto& x : v) {
      x = f64();
    }
    return v;
  }
  Eigen::VectorXd eigen_vec() {
    const auto v = vec();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) {
      throw CheckpointError(Kind::corrupt, "checkpoint payload ends inside a field");
    }
  }
  std::uint64_t get(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

void write_stats(Writer& w, const NormalizationStats& s) {
  w.vec(s.mean);
  w.vec(s.std);
}

NormalizationStats read_stats(Reader& r) {
  NormalizationStats s;
  s.mean = r.eigen_vec();
  s.std = r.eigen_vec();
  if (s.mean.size() != s.std.size()) {
    throw CheckpointError(Kind::corrupt, "normalization mean and std differ in length");
  }
  return s;
}

void write_tensors(Writer& w, const net::Weights& weights) {
  const auto views = net::tensors(weights);
  w.u64(views.size());
  for (const auto& t : views) {
    w.str(t.name);
    w.vec(t.values);
  }
}

// Fills `weights` (already shaped) from the stream; names and sizes must match.
void read_tensors(Reader& r, net::Weights& weights) {
  auto views = net::tensors(weights);
  if (r.u64() != views.size()) {
    throw CheckpointError(Kind::corrupt, "tensor count does not match the module config");
  }
  for (auto& t : views) {
    const std::string name = r.str();
    const auto values = r.vec();
    if (name != t.name || values.size() != t.values.size()) {
      throw CheckpointError(Kind::corrupt, "tensor '" + name + "' does not match expected '" +
                                               t.name + "'");
    }
    std::copy(values.begin(), values.end(), t.values.begin());
  }
}

void write_config(Writer& w, const net::ModuleConfig& c) {
  w.i32(c.input_dim);
  w.i32(c.output_dim);
  w.i32(c.hidden);
  w.i32(c.blocks);
  w.f64(c.dropout_rate);
  w.u32(c.batch_norm ? 1 : 0);
  w.f64(c.bn_momentum);
  w.f64(c.bn_epsilon);
  w.u64(net::architecture_hash(c));
}

net::ModuleConfig read_config(Reader& r) {
  net::ModuleConfig c;
  c.input_dim = r.i32();
  c.output_dim = r.i32();
  c.hidden = r.i32();
  c.blocks = r.i32();
  c.dropout_rate = r.f64();
  c.batch_norm = r.u32() != 0;
  c.bn_momentum = r.f64();
  c.bn_epsilon = r.f64();
  if (r.u64() != net::architecture_hash(c)) {
    throw CheckpointError(Kind::corrupt, "module architecture hash mismatch");
  }
  if (c.input_dim <= 0 || c.output_dim <= 0 || c.hidden <= 0 || c.blocks < 0 ||
      c.input_dim > (1 << 20) || c.output_dim > (1 << 20) || c.hidden > (1 << 16) ||
      c.blocks > 64) {
    throw CheckpointError(Kind::corrupt, "implausible module dimensions");
  }
  return c;
}

void write_module(Writer& w, const net::NetworkParams& p) {
  write_config(w, p.config);
  write_tensors(w, p.weights);
  w.u64(p.running.size());
  for (const auto& rs : p.running) {
    w.vec(rs.mean);
    w.vec(rs.var);
  }
}

net::NetworkParams read_module(Reader& r) {
  net::NetworkParams p = net::build_module(read_config(r), 0);
  read_tensors(r, p.weights);
  if (r.u64() != p.running.size()) {
    throw CheckpointError(Kind::corrupt, "running statistics count mismatch");
  }
  for (auto& rs : p.running) {
    Eigen::VectorXd mean = r.eigen_vec();
    Eigen::VectorXd var = r.eigen_vec();
    if (mean.size() != rs.mean.size() || var.size() != rs.var.size()) {
      throw CheckpointError(Kind::corrupt, "running statistics shape mismatch");
    }
    rs.mean = std::move(mean);
    rs.var = std::move(var);
  }
  return p;
}

void write_adam(Writer& w, const net::AdamState& a) {
  w.i64(a.step);
  w.f64(a.beta1);
  w.f64(a.beta2);
  w.f64(a.epsilon);
  w.f64(a.learning_rate);
  write_tensors(w, a.first_moment);
  write_tensors(w, a.second_moment);
}

net::AdamState read_adam(Reader& r, const net::NetworkParams& module) {
  net::AdamState a = net::make_adam(module, 1.0);
  a.step = r.i64();
  a.beta1 = r.f64();
  a.beta2 = r.f64();
  a.epsilon = r.f64();
  a.learning_rate = r.f64();
  read_tensors(r, a.first_moment);
  read_tensors(r, a.second_moment);
  return a;
}

}  // namespace

std::string serialize_checkpoint(const ModelBundle& b) {
  Writer w;
  w.str(b.topology.to_text());
  w.u64(b.provenance.config_hash);
  w.str(b.provenance.config_json);
  w.i32(b.provenance.lifter_epochs);
  w.i32(b.provenance.reprojector_epochs);
  w.i32(b.provenance.joint_epochs);
  write_stats(w, b.stats2d);
  write_stats(w, b.stats3d);
  write_module(w, b.lifter);
  write_module(w, b.reprojector);
  write_adam(w, b.lifter_adam);
  write_adam(w, b.reprojector_adam);
  const std::string payload = std::move(w.bytes());

  Writer out;
  out.bytes().append(kMagic, sizeof(kMagic));
  out.u32(kCheckpointVersion);
  out.u64(payload.size());
  out.bytes().append(payload);
  out.u64(fnv1a(payload));
  return std::move(out.bytes());
}

ModelBundle deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(Kind::bad_magic, "not a liftpose checkpoint");
  }
  if (bytes.size() < kHeaderBytes) {
    throw CheckpointError(Kind::truncated, "checkpoint header is truncated");
  }
  Reader header(bytes.substr(sizeof(kMagic), kHeaderBytes - sizeof(kMagic)));
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version, "checkpoint version " + std::to_string(version) +
                                             " is not supported (expected " +
                                             std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t payload_bytes = header.u64();
  if (bytes.size() - kHeaderBytes < payload_bytes ||
      bytes.size() - kHeaderBytes - payload_bytes < 8) {
    throw CheckpointError(Kind::truncated, "checkpoint is truncated");
  }
  if (bytes.size() - kHeaderBytes - payload_bytes != 8) {
    throw CheckpointError(Kind::corrupt, "trailing bytes after checkpoint");
  }
  const std::string_view payload = bytes.substr(kHeaderBytes, payload_bytes);
  Reader trailer(bytes.substr(kHeaderBytes + payload_bytes));
  if (trailer.u64() != fnv1a(payload)) {
    throw CheckpointError(Kind::corrupt, "checkpoint checksum mismatch");
  }

  Reader r(payload);
  std::optional<SkeletonTopology> topo;
  try {
    topo = SkeletonTopology::from_text(r.str());
  } catch (const TopologyError& e) {
    throw CheckpointError(Kind::corrupt, std::string("invalid topology: ") + e.what());
  }
  Provenance prov;
  prov.config_hash = r.u64();
  prov.config_json = r.str();
  prov.lifter_epochs = r.i32();
  prov.reprojector_epochs = r.i32();
  prov.joint_epochs = r.i32();
  NormalizationStats s2 = read_stats(r);
  NormalizationStats s3 = read_stats(r);
  net::NetworkParams lifter = read_module(r);
  net::NetworkParams reprojector = read_module(r);
  net::AdamState la = read_adam(r, lifter);
  net::AdamState ra = read_adam(r, reprojector);
  if (!r.done()) {
    throw CheckpointError(Kind::corrupt, "unread bytes in checkpoint payload");
  }
  const auto j = static_cast<Eigen::Index>(topo->joint_count());
  if (s2.size() != 2 * j || s3.size() != 3 * j || lifter.config.input_dim != 2 * j ||
      lifter.config.output_dim != 3 * j || reprojector.config.input_dim != 3 * j ||
      reprojector.config.output_dim != 2 * j) {
    throw CheckpointError(Kind::corrupt, "module shapes do not match the topology");
  }
  return ModelBundle{*topo,         std::move(lifter), std::move(reprojector),
                     std::move(s2), std::move(s3),     std::move(la),
                     std::move(ra), std::move(prov)};
}

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(bundle);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw CheckpointError(Kind::io, "cannot open " + tmp.string() + " for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw CheckpointError(Kind::io, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw CheckpointError(Kind::io, "cannot move checkpoint into place: " + ec.message());
  }
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(Kind::io, "cannot open " + path.string());
  }
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::string checkpoint_to_text(const ModelBundle& b) {
  std::ostringstream out;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  auto vec = [&](const std::string& name, std::span<const double> v) {
    out << name << " " << v.size();
    for (double x : v) {
      out << " " << num(x);
    }
    out << "\n";
  };
  auto evec = [&](const std::string& name, const Eigen::VectorXd& v) {
    vec(name, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  };
  auto module = [&](const std::string& prefix, const net::NetworkParams& p) {
    const auto& c = p.config;
    out << prefix << ".config input=" << c.input_dim << " output=" << c.output_dim
        << " hidden=" << c.hidden << " blocks=" << c.blocks << " dropout=" << num(c.dropout_rate)
        << " batch_norm=" << (c.batch_norm ? 1 : 0) << " bn_momentum=" << num(c.bn_momentum)
        << " bn_epsilon=" << num(c.bn_epsilon) << "\n";
    for (const auto& t : net::tensors(p.weights)) {
      vec(prefix + "." + t.name, t.values);
    }
    for (std::size_t i = 0; i < p.running.size(); ++i) {
      evec(prefix + ".running." + std::to_string(i) + ".mean", p.running[i].mean);
      evec(prefix + ".running." + std::to_string(i) + ".var", p.running[i].var);
    }
  };
  auto adam = [&](const std::string& prefix, const net::AdamState& a) {
    out << prefix << ".step " << a.step << "\n";
    out << prefix << ".hyper beta1=" << num(a.beta1) << " beta2=" << num(a.beta2)
        << " epsilon=" << num(a.epsilon) << " lr=" << num(a.learning_rate) << "\n";
    for (const auto& t : net::tensors(a.first_moment)) {
      vec(prefix + ".m." + t.name, t.values);
    }
    for (const auto& t : net::tensors(a.second_moment)) {
      vec(prefix + ".v." + t.name, t.values);
    }
  };

  out << "liftpose-checkpoint-text " << kCheckpointVersion << "\n";
  out << "config " << b.provenance.config_json << "\n";
  out << "config_hash " << b.provenance.config_hash << "\n";
  out << "epochs lifter=" << b.provenance.lifter_epochs
      << " reprojector=" << b.provenance.reprojector_epochs
      << " joint=" << b.provenance.joint_epochs << "\n";
  out << b.topology.to_text();
  evec("stats2d.mean", b.stats2d.mean);
  evec("stats2d.std", b.stats2d.std);
  evec("stats3d.mean", b.stats3d.mean);
  evec("stats3d.std", b.stats3d.std);
  module("lifter", b.lifter);
  module("reprojector", b.reprojector);
  adam("lifter_adam", b.lifter_adam);
  adam("reprojector_adam", b.reprojector_adam);
  return out.str();
}

}  // namespace liftpose
