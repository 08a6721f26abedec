#pragma once

// Binary checkpoint layout (all integers little-endian):
//   "DSPE" | u32 version | records... | u64 FNV-1a checksum of all preceding bytes
// record: u32 name length | name bytes | u64 rows | u64 cols | rows*cols f64

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dspe/error.hpp"
#include "dspe/matrix.hpp"
#include "dspe/network.hpp"
#include "dspe/optimizer.hpp"

namespace dspe {

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'P', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian");

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(const T& v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_bytes(std::string_view s) { out_.append(s); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view get_bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("checkpoint: unexpected end of data");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

inline void put_tensor(ByteWriter& w, std::string_view name, std::size_t rows, std::size_t cols,
                       std::span<const double> data) {
  w.put(static_cast<std::uint32_t>(name.size()));
  w.put_bytes(name);
  w.put(static_cast<std::uint64_t>(rows));
  w.put(static_cast<std::uint64_t>(cols));
  for (double v : data) w.put(v);
}

inline void put_branch(ByteWriter& w, const std::string& prefix, const BranchParams& p) {
  put_tensor(w, prefix + ".w1", p.w1.rows(), p.w1.cols(), p.w1.values());
  put_tensor(w, prefix + ".b1", 1, p.b1.size(), p.b1);
  put_tensor(w, prefix + ".w2", p.w2.rows(), p.w2.cols(), p.w2.values());
  put_tensor(w, prefix + ".b2", 1, p.b2.size(), p.b2);
  put_tensor(w, prefix + ".gamma", 1, p.gamma.size(), p.gamma);
  put_tensor(w, prefix + ".beta", 1, p.beta.size(), p.beta);
  put_tensor(w, prefix + ".running_mean", 1, p.running.mean.size(), p.running.mean);
  put_tensor(w, prefix + ".running_var", 1, p.running.var.size(), p.running.var);
}

inline void put_velocity(ByteWriter& w, const std::string& prefix, const BranchGrads& g) {
  put_tensor(w, prefix + ".w1", g.w1.rows(), g.w1.cols(), g.w1.values());
  put_tensor(w, prefix + ".b1", 1, g.b1.size(), g.b1);
  put_tensor(w, prefix + ".w2", g.w2.rows(), g.w2.cols(), g.w2.values());
  put_tensor(w, prefix + ".b2", 1, g.b2.size(), g.b2);
  put_tensor(w, prefix + ".gamma", 1, g.gamma.size(), g.gamma);
  put_tensor(w, prefix + ".beta", 1, g.beta.size(), g.beta);
}

using TensorTable = std::map<std::string, Matrix, std::less<>>;

inline const Matrix& take(const TensorTable& t, const std::string& name, std::size_t rows,
                          std::size_t cols) {
  auto it = t.find(name);
  if (it == t.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
  if (it->second.rows() != rows || it->second.cols() != cols) {
    throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                      std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                      ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  return it->second;
}

inline Vector take_vector(const TensorTable& t, const std::string& name, std::size_t n) {
  return take(t, name, 1, n).storage();
}

inline std::size_t as_count(double v, const char* what) {
  if (!(v >= 0.0) || v != std::floor(v) || v > 9.0e15) {
    throw FormatError(std::string("checkpoint: invalid ") + what);
  }
  return static_cast<std::size_t>(v);
}

inline BranchSpec take_spec(const TensorTable& t, const std::string& name) {
  const Matrix& m = take(t, name, 1, 4);
  BranchSpec s{as_count(m(0, 0), "input_dim"), as_count(m(0, 1), "hidden_dim"),
               as_count(m(0, 2), "embed_dim"), m(0, 3)};
  try {
    s.validate(name.c_str());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return s;
}

inline BranchParams take_branch(const TensorTable& t, const std::string& prefix,
                                const BranchSpec& s) {
  BranchParams p;
  p.w1 = take(t, prefix + ".w1", s.input_dim, s.hidden_dim);
  p.b1 = take_vector(t, prefix + ".b1", s.hidden_dim);
  p.w2 = take(t, prefix + ".w2", s.hidden_dim, s.embed_dim);
  p.b2 = take_vector(t, prefix + ".b2", s.embed_dim);
  p.gamma = take_vector(t, prefix + ".gamma", s.embed_dim);
  p.beta = take_vector(t, prefix + ".beta", s.embed_dim);
  p.running.mean = take_vector(t, prefix + ".running_mean", s.embed_dim);
  p.running.var = take_vector(t, prefix + ".running_var", s.embed_dim);
  for (double v : p.running.var)
    if (v < 0.0) throw FormatError("checkpoint: negative running variance in " + prefix);
  return p;
}

inline BranchGrads take_velocity(const TensorTable& t, const std::string& prefix,
                                 const BranchSpec& s) {
  BranchGrads g;
  g.w1 = take(t, prefix + ".w1", s.input_dim, s.hidden_dim);
  g.b1 = take_vector(t, prefix + ".b1", s.hidden_dim);
  g.w2 = take(t, prefix + ".w2", s.hidden_dim, s.embed_dim);
  g.b2 = take_vector(t, prefix + ".b2", s.embed_dim);
  g.gamma = take_vector(t, prefix + ".gamma", s.embed_dim);
  g.beta = take_vector(t, prefix + ".beta", s.embed_dim);
  return g;
}

}  // namespace detail

/// Serializes parameters and optimizer state to the checkpoint byte layout.
inline std::string serialize_checkpoint(const NetworkParams& params, const OptimizerState& opt) {
  using detail::put_tensor;
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put(kCheckpointVersion);
  auto spec_row = [](const BranchSpec& s) {
    return Vector{static_cast<double>(s.input_dim), static_cast<double>(s.hidden_dim),
                  static_cast<double>(s.embed_dim), s.dropout_p};
  };
  const Vector seed{static_cast<double>(params.seed >> 32),
                    static_cast<double>(params.seed & 0xffffffffULL)};
  put_tensor(w, "meta.seed", 1, 2, seed);
  put_tensor(w, "meta.spec_x", 1, 4, spec_row(params.spec_x));
  put_tensor(w, "meta.spec_y", 1, 4, spec_row(params.spec_y));
  const Vector opt_cfg{opt.cfg.lr0, opt.cfg.momentum, opt.cfg.weight_decay, opt.cfg.decay_factor,
                       static_cast<double>(opt.cfg.decay_every)};
  put_tensor(w, "opt.config", 1, opt_cfg.size(), opt_cfg);
  const Vector counters{opt.lr, static_cast<double>(opt.epoch), static_cast<double>(opt.step)};
  put_tensor(w, "opt.counters", 1, counters.size(), counters);
  detail::put_branch(w, "x", params.x);
  detail::put_branch(w, "y", params.y);
  detail::put_velocity(w, "opt.vx", opt.velocity_x);
  detail::put_velocity(w, "opt.vy", opt.velocity_y);
  const std::uint64_t sum = fnv1a64(w.str());
  w.put(sum);
  return std::move(w.str());
}

struct Checkpoint {
  NetworkParams params;
  OptimizerState optimizer;
};

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 + 4 + 8) throw ChecksumError("checkpoint: file too short");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  if (fnv1a64(body) != stored) throw ChecksumError("checkpoint: checksum mismatch");

  detail::ByteReader r(body);
  if (r.get_bytes(4) != std::string_view(kCheckpointMagic, 4))
    throw FormatError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));

  detail::TensorTable tensors;
  while (!r.done()) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.get_bytes(name_len));
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (cols != 0 && rows > (std::uint64_t{1} << 40) / cols)
      throw FormatError("checkpoint: tensor '" + name + "' is implausibly large");
    std::vector<double> data(rows * cols);
    for (double& v : data) v = r.get<double>();
    if (!tensors.emplace(name, Matrix(rows, cols, std::move(data))).second)
      throw FormatError("checkpoint: duplicate tensor '" + name + "'");
  }

  Checkpoint ck;
  const Matrix& seed = detail::take(tensors, "meta.seed", 1, 2);
  ck.params.seed = (static_cast<std::uint64_t>(detail::as_count(seed(0, 0), "seed")) << 32) |
                   static_cast<std::uint64_t>(detail::as_count(seed(0, 1), "seed"));
  ck.params.spec_x = detail::take_spec(tensors, "meta.spec_x");
  ck.params.spec_y = detail::take_spec(tensors, "meta.spec_y");
  if (ck.params.spec_x.embed_dim != ck.params.spec_y.embed_dim)
    throw FormatError("checkpoint: branches disagree on the embedding dimension");
  ck.params.x = detail::take_branch(tensors, "x", ck.params.spec_x);
  ck.params.y = detail::take_branch(tensors, "y", ck.params.spec_y);

  const Matrix& cfg = detail::take(tensors, "opt.config", 1, 5);
  ck.optimizer.cfg = {cfg(0, 0), cfg(0, 1), cfg(0, 2), cfg(0, 3),
                      detail::as_count(cfg(0, 4), "decay interval")};
  const Matrix& counters = detail::take(tensors, "opt.counters", 1, 3);
  ck.optimizer.lr = counters(0, 0);
  ck.optimizer.epoch = detail::as_count(counters(0, 1), "epoch");
  ck.optimizer.step = detail::as_count(counters(0, 2), "step");
  ck.optimizer.velocity_x = detail::take_velocity(tensors, "opt.vx", ck.params.spec_x);
  ck.optimizer.velocity_y = detail::take_velocity(tensors, "opt.vy", ck.params.spec_y);
  return ck;
}

inline void save_checkpoint(const NetworkParams& params, const OptimizerState& opt,
                            const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params, opt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace dspe
