#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fairmask/errors.hpp"
#include "fairmask/rng.hpp"
#include "fairmask/search_space.hpp"

namespace fairmask {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC0 = 0.7978845608;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;

struct Architecture {
  int d_in = 16;
  int d_model = 16;
  int n_blocks = 12;
  int mlp_hidden = 32;
  int n_classes = 2;

  void validate() const {
    if (d_in < 1 || d_model < 1 || n_blocks < 1 || mlp_hidden < 1)
      throw ConfigError("architecture: dimensions must be positive");
    if (n_classes != 2) throw ConfigError("architecture: binary classification only");
  }

  bool operator==(const Architecture&) const = default;
};

struct DenseParams {
  Eigen::MatrixXd w;
  Eigen::VectorXd b;
};

// One block: pre-norm residual pair. MIX is a single dense layer standing in
// for MHSA; one LN mask bit governs both LN1 and LN2.
struct BlockParams {
  Eigen::VectorXd ln1_gain, ln1_bias;
  Eigen::MatrixXd mix_w;   // d_model x d_model
  Eigen::VectorXd mix_b;
  Eigen::VectorXd ln2_gain, ln2_bias;
  Eigen::MatrixXd mlp_w1;  // d_model x mlp_hidden
  Eigen::VectorXd mlp_b1;
  Eigen::MatrixXd mlp_w2;  // mlp_hidden x d_model
  Eigen::VectorXd mlp_b2;
};

struct ParamSet {
  DenseParams stem;  // d_in x d_model; never masked, never updated
  std::vector<BlockParams> blocks;
  DenseParams head;  // d_model x 2
};

// Delta covers the maskable modules plus the head; the stem has no delta.
struct DeltaSet {
  std::vector<BlockParams> blocks;
  DenseParams head;
};

struct ModelParams {
  Architecture arch;
  ParamSet base;    // theta_0
  DeltaSet delta;   // delta_phi, applied as theta_0 + mask * delta
};

namespace detail {

inline BlockParams zero_block(const Architecture& a) {
  BlockParams p;
  p.ln1_gain = Eigen::VectorXd::Zero(a.d_model);
  p.ln1_bias = Eigen::VectorXd::Zero(a.d_model);
  p.mix_w = Eigen::MatrixXd::Zero(a.d_model, a.d_model);
  p.mix_b = Eigen::VectorXd::Zero(a.d_model);
  p.ln2_gain = Eigen::VectorXd::Zero(a.d_model);
  p.ln2_bias = Eigen::VectorXd::Zero(a.d_model);
  p.mlp_w1 = Eigen::MatrixXd::Zero(a.d_model, a.mlp_hidden);
  p.mlp_b1 = Eigen::VectorXd::Zero(a.mlp_hidden);
  p.mlp_w2 = Eigen::MatrixXd::Zero(a.mlp_hidden, a.d_model);
  p.mlp_b2 = Eigen::VectorXd::Zero(a.d_model);
  return p;
}

inline void fill_uniform(Eigen::MatrixXd& m, double scale, Rng& rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-scale, scale);
}

}  // namespace detail

inline DeltaSet zero_delta(const Architecture& a) {
  DeltaSet d;
  d.blocks.assign(static_cast<std::size_t>(a.n_blocks), detail::zero_block(a));
  d.head.w = Eigen::MatrixXd::Zero(a.d_model, a.n_classes);
  d.head.b = Eigen::VectorXd::Zero(a.n_classes);
  return d;
}

/// Fan-in scaled uniform weights, unit LN gains, zero biases, zero delta.
inline ModelParams init_random(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, 0x1A));
  ModelParams p;
  p.arch = arch;

  auto dense = [&](int fan_in, int fan_out) {
    DenseParams d;
    d.w.resize(fan_in, fan_out);
    detail::fill_uniform(d.w, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    d.b = Eigen::VectorXd::Zero(fan_out);
    return d;
  };

  p.base.stem = dense(arch.d_in, arch.d_model);
  for (int b = 0; b < arch.n_blocks; ++b) {
    BlockParams blk = detail::zero_block(arch);
    blk.ln1_gain.setOnes();
    blk.ln2_gain.setOnes();
    const double s_mix = 1.0 / std::sqrt(static_cast<double>(arch.d_model));
    detail::fill_uniform(blk.mix_w, s_mix, rng);
    detail::fill_uniform(blk.mlp_w1, s_mix, rng);
    detail::fill_uniform(blk.mlp_w2, 1.0 / std::sqrt(static_cast<double>(arch.mlp_hidden)), rng);
    p.base.blocks.push_back(std::move(blk));
  }
  p.base.head = dense(arch.d_model, arch.n_classes);
  p.delta = zero_delta(arch);
  return p;
}

/// Materialized theta_0 + mask * delta. Head is always theta_0 + delta,
/// stem always theta_0.
inline ParamSet effective_params(const ModelParams& p, const Mask& mask) {
  if (mask.n_blocks() != p.arch.n_blocks)
    throw ConfigError("effective_params: mask block count does not match architecture");
  ParamSet eff;
  eff.stem = p.base.stem;
  eff.blocks.reserve(p.base.blocks.size());
  for (int b = 0; b < p.arch.n_blocks; ++b) {
    const BlockParams& base = p.base.blocks[static_cast<std::size_t>(b)];
    const BlockParams& del = p.delta.blocks[static_cast<std::size_t>(b)];
    BlockParams e = base;
    if (mask.get(b, ModuleKind::kLn)) {
      e.ln1_gain += del.ln1_gain;
      e.ln1_bias += del.ln1_bias;
      e.ln2_gain += del.ln2_gain;
      e.ln2_bias += del.ln2_bias;
    }
    if (mask.get(b, ModuleKind::kMhsa)) {
      e.mix_w += del.mix_w;
      e.mix_b += del.mix_b;
    }
    if (mask.get(b, ModuleKind::kMlp)) {
      e.mlp_w1 += del.mlp_w1;
      e.mlp_b1 += del.mlp_b1;
      e.mlp_w2 += del.mlp_w2;
      e.mlp_b2 += del.mlp_b2;
    }
    eff.blocks.push_back(std::move(e));
  }
  eff.head.w = p.base.head.w + p.delta.head.w;
  eff.head.b = p.base.head.b + p.delta.head.b;
  return eff;
}

// Per-block activations a backward pass needs.
struct BlockCache {
  Eigen::MatrixXd xhat1;   // n x d
  Eigen::VectorXd inv1;    // n
  Eigen::MatrixXd ln1_out; // n x d, input to MIX
  Eigen::MatrixXd xhat2;
  Eigen::VectorXd inv2;
  Eigen::MatrixXd ln2_out;   // n x d, input to the MLP
  Eigen::MatrixXd mlp_pre;   // n x H, pre-GELU
  Eigen::MatrixXd mlp_act;   // n x H, post-GELU
};

struct ForwardCache {
  Architecture arch;
  Eigen::Index n_rows = 0;
  std::vector<BlockCache> blocks;
  Eigen::MatrixXd final_hidden;  // n x d_model, head input
};

namespace detail {

// Row-wise layer norm. Fills xhat and inv for backward.
inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                                  const Eigen::VectorXd& bias, Eigen::MatrixXd& xhat,
                                  Eigen::VectorXd& inv) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  inv.resize(n);
  Eigen::MatrixXd out(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double s = 1.0 / std::sqrt(var + kLnEps);
    inv(i) = s;
    xhat.row(i) = (x.row(i).array() - mu) * s;
    out.row(i) = xhat.row(i).array() * gain.transpose().array() + bias.transpose().array();
  }
  return out;
}

// dL/dx given dL/d(ln output), reusing cached xhat and inv.
inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dout, const Eigen::VectorXd& gain,
                                           const Eigen::MatrixXd& xhat, const Eigen::VectorXd& inv,
                                           Eigen::VectorXd* dgain, Eigen::VectorXd* dbias) {
  const Eigen::Index n = dout.rows(), d = dout.cols();
  if (dgain) {
    *dgain = (dout.array() * xhat.array()).colwise().sum().transpose();
    *dbias = dout.colwise().sum().transpose();
  }
  Eigen::MatrixXd dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::ArrayXd dxhat = dout.row(i).transpose().array() * gain.array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * xhat.row(i).transpose().array()).mean();
    dx.row(i) = (inv(i) * (dxhat - m1 - xhat.row(i).transpose().array() * m2)).transpose();
  }
  return dx;
}

inline double gelu(double x) {
  const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline void check_finite(const Eigen::MatrixXd& m, const char* layer, int block) {
  if (!m.allFinite())
    throw NumericError(std::string("forward: non-finite activation in ") + layer + " of block " +
                       std::to_string(block));
}

}  // namespace detail

/// Forward pass: stem -> pre-norm residual blocks -> head logits.
inline Eigen::MatrixXd forward(const ModelParams& p, const Mask& mask, const Eigen::MatrixXd& x,
                               ForwardCache* cache = nullptr) {
  if (x.cols() != p.arch.d_in) throw ConfigError("forward: input width != d_in");
  const ParamSet eff = effective_params(p, mask);
  const Eigen::Index n = x.rows();

  if (cache) {
    cache->arch = p.arch;
    cache->n_rows = n;
    cache->blocks.assign(static_cast<std::size_t>(p.arch.n_blocks), BlockCache{});
  }

  Eigen::MatrixXd h = (x * eff.stem.w).rowwise() + eff.stem.b.transpose();
  detail::check_finite(h, "stem", -1);

  for (int b = 0; b < p.arch.n_blocks; ++b) {
    const BlockParams& blk = eff.blocks[static_cast<std::size_t>(b)];
    BlockCache local;
    BlockCache& c = cache ? cache->blocks[static_cast<std::size_t>(b)] : local;

    c.ln1_out = detail::layer_norm(h, blk.ln1_gain, blk.ln1_bias, c.xhat1, c.inv1);
    h += ((c.ln1_out * blk.mix_w).rowwise() + blk.mix_b.transpose()).eval();
    detail::check_finite(h, "mix", b);

    c.ln2_out = detail::layer_norm(h, blk.ln2_gain, blk.ln2_bias, c.xhat2, c.inv2);
    c.mlp_pre = (c.ln2_out * blk.mlp_w1).rowwise() + blk.mlp_b1.transpose();
    c.mlp_act = c.mlp_pre.unaryExpr([](double v) { return detail::gelu(v); });
    h += ((c.mlp_act * blk.mlp_w2).rowwise() + blk.mlp_b2.transpose()).eval();
    detail::check_finite(h, "mlp", b);
  }

  if (cache) cache->final_hidden = h;
  Eigen::MatrixXd logits = (h * eff.head.w).rowwise() + eff.head.b.transpose();
  detail::check_finite(logits, "head", p.arch.n_blocks);
  return logits;
}

/// Gradients of the loss w.r.t. delta. Unselected block modules keep empty
/// tensors; the head gradient is always present.
struct DeltaGrads {
  std::vector<BlockParams> blocks;  // empty tensors where the mask is off
  DenseParams head;
};

inline DeltaGrads backward(const ModelParams& p, const Mask& mask, const ForwardCache& cache,
                           const Eigen::MatrixXd& dlogits) {
  if (cache.arch != p.arch) throw ConfigError("backward: cache architecture mismatch");
  if (dlogits.rows() != cache.n_rows || dlogits.cols() != p.arch.n_classes)
    throw ConfigError("backward: dlogits shape does not match cache");
  if (mask.n_blocks() != p.arch.n_blocks)
    throw ConfigError("backward: mask block count does not match architecture");

  const ParamSet eff = effective_params(p, mask);
  DeltaGrads g;
  g.blocks.assign(static_cast<std::size_t>(p.arch.n_blocks), BlockParams{});

  g.head.w = cache.final_hidden.transpose() * dlogits;
  g.head.b = dlogits.colwise().sum().transpose();
  Eigen::MatrixXd dh = dlogits * eff.head.w.transpose();

  for (int b = p.arch.n_blocks - 1; b >= 0; --b) {
    const BlockParams& blk = eff.blocks[static_cast<std::size_t>(b)];
    const BlockCache& c = cache.blocks[static_cast<std::size_t>(b)];
    BlockParams& gb = g.blocks[static_cast<std::size_t>(b)];
    const bool want_ln = mask.get(b, ModuleKind::kLn);
    const bool want_mix = mask.get(b, ModuleKind::kMhsa);
    const bool want_mlp = mask.get(b, ModuleKind::kMlp);

    // MLP sublayer: h_out = h_mid + W2 gelu(W1 ln2(h_mid)).
    const Eigen::MatrixXd& d_out = dh;  // gradient at h_out; residual carries it to h_mid too
    if (want_mlp) {
      gb.mlp_w2 = c.mlp_act.transpose() * d_out;
      gb.mlp_b2 = d_out.colwise().sum().transpose();
    }
    Eigen::MatrixXd d_act = d_out * blk.mlp_w2.transpose();
    Eigen::MatrixXd d_pre =
        d_act.array() * c.mlp_pre.unaryExpr([](double v) { return detail::gelu_grad(v); }).array();
    if (want_mlp) {
      gb.mlp_w1 = c.ln2_out.transpose() * d_pre;
      gb.mlp_b1 = d_pre.colwise().sum().transpose();
    }
    Eigen::MatrixXd d_ln2 = d_pre * blk.mlp_w1.transpose();
    Eigen::VectorXd dg2, db2;
    Eigen::MatrixXd d_mid_ln = detail::layer_norm_backward(d_ln2, blk.ln2_gain, c.xhat2, c.inv2,
                                                           want_ln ? &dg2 : nullptr,
                                                           want_ln ? &db2 : nullptr);
    if (want_ln) {
      gb.ln2_gain = std::move(dg2);
      gb.ln2_bias = std::move(db2);
    }
    Eigen::MatrixXd d_mid = dh + d_mid_ln;

    // MIX sublayer: h_mid = h_in + W_m ln1(h_in).
    if (want_mix) {
      gb.mix_w = c.ln1_out.transpose() * d_mid;
      gb.mix_b = d_mid.colwise().sum().transpose();
    }
    Eigen::MatrixXd d_ln1 = d_mid * blk.mix_w.transpose();
    Eigen::VectorXd dg1, db1;
    Eigen::MatrixXd d_in_ln = detail::layer_norm_backward(d_ln1, blk.ln1_gain, c.xhat1, c.inv1,
                                                          want_ln ? &dg1 : nullptr,
                                                          want_ln ? &db1 : nullptr);
    if (want_ln) {
      gb.ln1_gain = std::move(dg1);
      gb.ln1_bias = std::move(db1);
    }
    dh = d_mid + d_in_ln;
  }
  return g;
}

// --- checkpoint I/O: little-endian binary, versioned ---

namespace detail {

inline constexpr char kCkptMagic[4] = {'F', 'M', 'C', 'P'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw IoError("checkpoint: truncated file");
  return v;
}

inline void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
}

inline Eigen::MatrixXd read_matrix(std::istream& in) {
  const auto rows = static_cast<Eigen::Index>(read_u64(in));
  const auto cols = static_cast<Eigen::Index>(read_u64(in));
  if (rows < 0 || cols < 0 || rows > (1 << 24) || cols > (1 << 24))
    throw IoError("checkpoint: implausible tensor shape");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v = 0;
      if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw IoError("checkpoint: truncated tensor data");
      m(i, j) = v;
    }
  return m;
}

inline void write_vector(std::ostream& out, const Eigen::VectorXd& v) {
  write_matrix(out, v);
}

inline Eigen::VectorXd read_vector(std::istream& in) {
  Eigen::MatrixXd m = read_matrix(in);
  if (m.cols() != 1) throw IoError("checkpoint: expected column vector");
  return m.col(0);
}

template <typename WriteFn>
inline void visit_block_write(const BlockParams& b, WriteFn&& w) {
  w(b.ln1_gain);
  w(b.ln1_bias);
  w(b.mix_w);
  w(b.mix_b);
  w(b.ln2_gain);
  w(b.ln2_bias);
  w(b.mlp_w1);
  w(b.mlp_b1);
  w(b.mlp_w2);
  w(b.mlp_b2);
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out.write(detail::kCkptMagic, 4);
  const std::uint32_t ver = detail::kCkptVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  for (int v : {p.arch.d_in, p.arch.d_model, p.arch.n_blocks, p.arch.mlp_hidden, p.arch.n_classes})
    detail::write_u64(out, static_cast<std::uint64_t>(v));

  auto wm = [&](const Eigen::MatrixXd& m) { detail::write_matrix(out, m); };
  detail::write_matrix(out, p.base.stem.w);
  detail::write_vector(out, p.base.stem.b);
  for (const auto& blk : p.base.blocks) detail::visit_block_write(blk, wm);
  detail::write_matrix(out, p.base.head.w);
  detail::write_vector(out, p.base.head.b);
  for (const auto& blk : p.delta.blocks) detail::visit_block_write(blk, wm);
  detail::write_matrix(out, p.delta.head.w);
  detail::write_vector(out, p.delta.head.b);
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::uint32_t ver = 0;
  if (!in.read(reinterpret_cast<char*>(&ver), sizeof(ver)))
    throw IoError("checkpoint: truncated header");
  if (ver != detail::kCkptVersion)
    throw IoError("checkpoint: unsupported format version " + std::to_string(ver));

  ModelParams p;
  p.arch.d_in = static_cast<int>(detail::read_u64(in));
  p.arch.d_model = static_cast<int>(detail::read_u64(in));
  p.arch.n_blocks = static_cast<int>(detail::read_u64(in));
  p.arch.mlp_hidden = static_cast<int>(detail::read_u64(in));
  p.arch.n_classes = static_cast<int>(detail::read_u64(in));
  p.arch.validate();

  auto read_block = [&]() {
    BlockParams b;
    b.ln1_gain = detail::read_vector(in);
    b.ln1_bias = detail::read_vector(in);
    b.mix_w = detail::read_matrix(in);
    b.mix_b = detail::read_vector(in);
    b.ln2_gain = detail::read_vector(in);
    b.ln2_bias = detail::read_vector(in);
    b.mlp_w1 = detail::read_matrix(in);
    b.mlp_b1 = detail::read_vector(in);
    b.mlp_w2 = detail::read_matrix(in);
    b.mlp_b2 = detail::read_vector(in);
    return b;
  };

  p.base.stem.w = detail::read_matrix(in);
  p.base.stem.b = detail::read_vector(in);
  for (int b = 0; b < p.arch.n_blocks; ++b) p.base.blocks.push_back(read_block());
  p.base.head.w = detail::read_matrix(in);
  p.base.head.b = detail::read_vector(in);
  for (int b = 0; b < p.arch.n_blocks; ++b) p.delta.blocks.push_back(read_block());
  p.delta.head.w = detail::read_matrix(in);
  p.delta.head.b = detail::read_vector(in);

  char extra = 0;
  if (in.read(&extra, 1)) throw IoError("checkpoint: trailing bytes in " + path);
  return p;
}

}  // namespace fairmask
