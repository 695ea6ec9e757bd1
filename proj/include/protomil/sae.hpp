#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "protomil/binio.hpp"
#include "protomil/error.hpp"
#include "protomil/numerics.hpp"

namespace protomil::sae {

inline constexpr std::uint32_t kModelFormatVersion = 1;

// Overcomplete ReLU autoencoder without decoder bias. Row i of `decoder` is
// the concept direction f_i.
struct SaeParams {
  Matrix encoder;  // d_hid x d_in
  Vector bias;     // d_hid
  Matrix decoder;  // d_hid x d_in

  std::size_t d_in() const { return encoder.cols(); }
  std::size_t d_hid() const { return encoder.rows(); }

  void validate() const {
    if (encoder.rows() != bias.size() || decoder.rows() != encoder.rows() ||
        decoder.cols() != encoder.cols()) {
      throw Error("SAE parameter shapes are inconsistent");
    }
    if (d_hid() <= d_in()) {
      throw Error("SAE must be overcomplete: d_hid (" + std::to_string(d_hid()) +
                  ") must exceed d_in (" + std::to_string(d_in()) + ")");
    }
    if (!all_finite(encoder.data()) || !all_finite(bias) || !all_finite(decoder.data())) {
      throw Error("SAE parameters contain non-finite values");
    }
  }

  bool operator==(const SaeParams&) const = default;
};

inline SaeParams init_params(std::size_t d_in, std::size_t d_hid, Rng& rng) {
  SaeParams p;
  p.encoder = glorot_uniform(d_hid, d_in, d_in, d_hid, rng);
  p.bias = Vector(d_hid, 0.0);
  p.decoder = glorot_uniform(d_hid, d_in, d_hid, d_in, rng);
  p.validate();
  return p;
}

inline void check_input(std::span<const double> x, const SaeParams& p) {
  if (x.size() != p.d_in()) {
    throw Error("SAE input dimension mismatch: expected " + std::to_string(p.d_in()) + ", got " +
                std::to_string(x.size()));
  }
}

// h = ReLU(W_enc x + b)
inline Vector encode(std::span<const double> x, const SaeParams& p) {
  check_input(x, p);
  Vector h(p.d_hid());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double pre = dot(p.encoder.row(i), x) + p.bias[i];
    h[i] = pre > 0.0 ? pre : 0.0;
  }
  return h;
}

inline Matrix encode_rows(const Matrix& xs, const SaeParams& p) {
  Matrix out(xs.rows(), p.d_hid());
  for (std::size_t r = 0; r < xs.rows(); ++r) {
    const auto h = encode(xs.row(r), p);
    std::copy(h.begin(), h.end(), out.row(r).begin());
  }
  return out;
}

// x_hat = sum_i h_i f_i
inline Vector decode(std::span<const double> h, const SaeParams& p) {
  if (h.size() != p.d_hid()) {
    throw Error("concept vector length mismatch: expected " + std::to_string(p.d_hid()) +
                ", got " + std::to_string(h.size()));
  }
  Vector x(p.d_in(), 0.0);
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i] != 0.0) axpy(h[i], p.decoder.row(i), x);
  }
  return x;
}

struct LossTerms {
  double total = 0.0;
  double recon = 0.0;     // ||x_hat - x||^2
  double sparsity = 0.0;  // ||h||_1
};

inline LossTerms loss(std::span<const double> x, const SaeParams& p, double lambda) {
  const auto h = encode(x, p);
  const auto xh = decode(h, p);
  LossTerms t;
  for (std::size_t j = 0; j < x.size(); ++j) t.recon += (xh[j] - x[j]) * (xh[j] - x[j]);
  for (double v : h) t.sparsity += v;
  t.total = t.recon + lambda * t.sparsity;
  return t;
}

// Batch loss: each term is the mean over rows.
inline LossTerms loss(const Matrix& batch, const SaeParams& p, double lambda) {
  if (batch.rows() == 0) throw Error("SAE loss: empty batch");
  LossTerms sum;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const auto t = loss(batch.row(r), p, lambda);
    sum.recon += t.recon;
    sum.sparsity += t.sparsity;
  }
  const double n = static_cast<double>(batch.rows());
  sum.recon /= n;
  sum.sparsity /= n;
  sum.total = sum.recon + lambda * sum.sparsity;
  return sum;
}

struct SaeGrads {
  Matrix encoder;
  Vector bias;
  Matrix decoder;
  LossTerms loss;  // batch-mean loss at the evaluated point
};

// Gradients of the batch-mean loss for the rows selected by `rows` (all rows
// when empty). Subgradients of ReLU and |.| at zero are taken as zero.
// Matrix-vector products run as sums of contiguous axpys over transposed
// copies, which vectorize without reassociating floating-point sums.
inline SaeGrads backward(const Matrix& batch, std::span<const std::size_t> rows,
                         const SaeParams& p, double lambda) {
  const std::size_t d_in = p.d_in();
  const std::size_t d_hid = p.d_hid();
  if (batch.cols() != d_in) throw Error("SAE backward: batch dimension mismatch");
  const std::size_t count = rows.empty() ? batch.rows() : rows.size();
  if (count == 0) throw Error("SAE backward: empty batch");
  SaeGrads g{Matrix(d_hid, d_in), Vector(d_hid, 0.0), Matrix(d_hid, d_in), {}};
  const double inv_n = 1.0 / static_cast<double>(count);
  const Matrix enc_t = transpose(p.encoder);  // d_in x d_hid
  const Matrix dec_t = transpose(p.decoder);  // d_in x d_hid

  Vector pre(d_hid), back(d_hid), xh(d_in), resid(d_in);
  std::vector<std::size_t> active;
  active.reserve(d_hid);
  for (std::size_t k = 0; k < count; ++k) {
    const auto x = batch.row(rows.empty() ? k : rows[k]);
    std::copy(p.bias.begin(), p.bias.end(), pre.begin());
    for (std::size_t j = 0; j < d_in; ++j) axpy(x[j], enc_t.row(j), pre);
    active.clear();
    std::fill(xh.begin(), xh.end(), 0.0);
    double l1 = 0.0;
    for (std::size_t i = 0; i < d_hid; ++i) {
      if (pre[i] > 0.0) {
        active.push_back(i);
        axpy(pre[i], p.decoder.row(i), xh);
        l1 += pre[i];
      }
    }
    double recon = 0.0;
    for (std::size_t j = 0; j < d_in; ++j) {
      const double r = xh[j] - x[j];
      recon += r * r;
      resid[j] = 2.0 * r * inv_n;
    }
    g.loss.recon += recon * inv_n;
    g.loss.sparsity += l1 * inv_n;

    std::fill(back.begin(), back.end(), 0.0);
    for (std::size_t j = 0; j < d_in; ++j) axpy(resid[j], dec_t.row(j), back);
    for (auto i : active) {
      axpy(pre[i], resid, g.decoder.row(i));
      const double dpre = back[i] + lambda * inv_n;
      axpy(dpre, x, g.encoder.row(i));
      g.bias[i] += dpre;
    }
  }
  g.loss.total = g.loss.recon + lambda * g.loss.sparsity;
  return g;
}

inline SaeGrads backward(const Matrix& batch, const SaeParams& p, double lambda) {
  return backward(batch, std::span<const std::size_t>{}, p, lambda);
}

struct SaeTrainConfig {
  double lambda = 3e-4;
  double lr = 1e-4;
  std::size_t epochs = 60;
  std::size_t batch_size = 256;
  std::size_t d_hid = 2048;
  bool renormalize_decoder = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda >= 0.0)) throw Error("SAE config: lambda must be >= 0");
    if (!(lr > 0.0)) throw Error("SAE config: learning rate must be > 0");
    if (epochs < 1) throw Error("SAE config: epochs must be >= 1");
    if (batch_size < 1) throw Error("SAE config: batch size must be >= 1");
  }
};

struct TrainResult {
  SaeParams params;
  std::vector<double> history;  // mean total loss per epoch
};

inline void renormalize_decoder_rows(SaeParams& p) {
  for (std::size_t i = 0; i < p.d_hid(); ++i) {
    auto row = p.decoder.row(i);
    const double norm = std::sqrt(dot(row, row));
    if (norm > 0.0)
      for (double& v : row) v /= norm;
  }
}

// Mini-batch Adam over the pooled instance embeddings (one row per instance).
inline TrainResult train(const Matrix& instances, const SaeTrainConfig& cfg) {
  cfg.validate();
  if (instances.rows() == 0) throw Error("empty instance pool");
  Rng init_rng(cfg.seed);
  Rng order_rng(cfg.seed ^ 0x5ae5ae5ae5ae5ae5ULL);
  TrainResult out;
  auto& p = out.params;
  p = init_params(instances.cols(), cfg.d_hid, init_rng);
  if (cfg.renormalize_decoder) renormalize_decoder_rows(p);

  AdamConfig adam{cfg.lr};
  AdamState s_enc(p.encoder.size()), s_bias(p.bias.size()), s_dec(p.decoder.size());

  std::vector<std::size_t> order(instances.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const auto g = backward(instances, rows, p, cfg.lambda);
      epoch_loss += g.loss.total * static_cast<double>(rows.size());
      adam_step(p.encoder.data(), g.encoder.data(), s_enc, adam);
      adam_step(p.bias, g.bias, s_bias, adam);
      adam_step(p.decoder.data(), g.decoder.data(), s_dec, adam);
      if (cfg.renormalize_decoder) renormalize_decoder_rows(p);
    }
    out.history.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return out;
}

struct SparsityStats {
  double mean_l0 = 0.0;
  std::size_t activated = 0;
};

inline SparsityStats sparsity_stats(const Matrix& instances, const SaeParams& p) {
  if (instances.rows() == 0) throw Error("sparsity_stats: no instances");
  std::vector<bool> seen(p.d_hid(), false);
  std::size_t nonzero = 0;
  for (std::size_t r = 0; r < instances.rows(); ++r) {
    const auto h = encode(instances.row(r), p);
    for (std::size_t i = 0; i < h.size(); ++i) {
      if (h[i] > 0.0) {
        ++nonzero;
        seen[i] = true;
      }
    }
  }
  SparsityStats s;
  s.mean_l0 = static_cast<double>(nonzero) / static_cast<double>(instances.rows());
  s.activated = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
  return s;
}

// ---------------------------------------------------------------------------
// PMS1 model file

inline std::vector<char> encode_params(const SaeParams& p) {
  binio::Writer w;
  w.magic("PMS1");
  w.u32(kModelFormatVersion);
  w.u32(static_cast<std::uint32_t>(p.d_in()));
  w.u32(static_cast<std::uint32_t>(p.d_hid()));
  w.f64s(p.encoder.data());
  w.f64s(p.bias);
  w.f64s(p.decoder.data());
  return w.bytes();
}

inline void save(const std::filesystem::path& path, const SaeParams& p) {
  binio::write_file(path, encode_params(p));
}

inline SaeParams load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing SAE model file " + path.string());
  auto r = binio::Reader::open(path);
  if (!r.expect_magic("PMS1")) throw Error(path.string() + ": not a PMS1 file");
  const auto version = r.u32();
  if (version != kModelFormatVersion) {
    throw Error(path.string() + ": unsupported PMS1 version " + std::to_string(version));
  }
  const std::size_t d_in = r.u32();
  const std::size_t d_hid = r.u32();
  SaeParams p{Matrix(d_hid, d_in), Vector(d_hid), Matrix(d_hid, d_in)};
  r.f64s(p.encoder.data());
  r.f64s(p.bias);
  r.f64s(p.decoder.data());
  r.expect_end();
  p.validate();
  return p;
}

}  // namespace protomil::sae
