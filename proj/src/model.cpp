#include "watk/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>

#include "kernel_rows.hpp"
#include "watk/kernels.hpp"

namespace watk {

namespace {

constexpr double kNormEps = 1e-5;

constexpr std::array<std::string_view, 7> kLayerNames = {
    "self_attn.q", "self_attn.k", "self_attn.v", "self_attn.o", "mlp.gate", "mlp.up", "mlp.down"};

// Y (T x dout) = X (T x din) W^T
Matrix linear(const Matrix& x, const Matrix& w) {
  Matrix y(x.rows(), w.rows());
  kernels::gemm_nt(x.data(), w.data(), y.data(), x.rows(), w.rows(), x.cols());
  return y;
}

// dX += dY W ; dW += dY^T X
void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix* dx, Matrix& dw) {
  kernels::gemm_tn(dy.data(), x.data(), dw.data(), w.rows(), w.cols(), x.rows());
  if (dx) kernels::gemm_nn(dy.data(), w.data(), dx->data(), dy.rows(), w.cols(), w.rows());
}

// y_t = g * x_t / rms(x_t); inv[t] = 1 / rms(x_t)
Matrix rms_norm(const Matrix& x, const Vector& g, Vector& inv) {
  const std::size_t d = x.cols();
  Matrix y(x.rows(), d);
  inv.assign(x.rows(), 0.0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xr = x.row(t);
    const double ms = kernels::detail::dot(xr.data(), xr.data(), d) / static_cast<double>(d);
    const double r = 1.0 / std::sqrt(ms + kNormEps);
    inv[t] = r;
    auto yr = y.row(t);
    for (std::size_t k = 0; k < d; ++k) yr[k] = g[k] * xr[k] * r;
  }
  return y;
}

// Accumulates into dx and dg.
void rms_norm_backward(const Matrix& x, const Vector& g, const Vector& inv, const Matrix& dy,
                       Matrix& dx, Vector& dg) {
  const std::size_t d = x.cols();
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xr = x.row(t);
    const auto dyr = dy.row(t);
    auto dxr = dx.row(t);
    const double r = inv[t];
    double proj = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      dg[k] += dyr[k] * xr[k] * r;
      proj += g[k] * dyr[k] * xr[k];
    }
    const double coef = proj * r * r * r / static_cast<double>(d);
    for (std::size_t k = 0; k < d; ++k) dxr[k] += g[k] * dyr[k] * r - xr[k] * coef;
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct BlockCache {
  Matrix h_in, a, q, k, v, c, h_mid, b, g, u, m;
  Vector inv1, inv2;
  std::vector<Matrix> probs;  // per head, T x T (lower triangle used)
};

struct ForwardState {
  std::vector<BlockCache> blocks;
  Matrix h_out, f;
  Vector inv_f;
  Matrix logits;
};

void check_tokens(const ModelCheckpoint& model, std::span<const Token> tokens) {
  if (tokens.empty()) throw ValidationError("forward: empty token sequence");
  if (tokens.size() > model.config.max_seq)
    throw ValidationError("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq " + std::to_string(model.config.max_seq));
  for (Token t : tokens)
    if (t >= model.config.vocab_size)
      throw ValidationError("forward: token id " + std::to_string(t) + " out of vocabulary");
}

const Matrix& layer_input(const BlockCache& c, LayerName n) {
  switch (n) {
    case LayerName::kQ:
    case LayerName::kK:
    case LayerName::kV:
      return c.a;
    case LayerName::kO:
      return c.c;
    case LayerName::kGate:
    case LayerName::kUp:
      return c.b;
    case LayerName::kDown:
      return c.m;
  }
  throw InternalError("unreachable layer name");
}

void attention_forward(const ModelConfig& cfg, BlockCache& c) {
  const std::size_t T = c.q.rows();
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.c = Matrix(T, cfg.d_model);
  c.probs.assign(cfg.n_heads, Matrix(T, T));
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    Matrix& p = c.probs[h];
    for (std::size_t t = 0; t < T; ++t) {
      const double* qt = c.q.data() + t * cfg.d_model + off;
      double mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        const double v = kernels::detail::dot(qt, c.k.data() + s * cfg.d_model + off, dh) * scale;
        p(t, s) = v;
        mx = std::max(mx, v);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        p(t, s) = std::exp(p(t, s) - mx);
        z += p(t, s);
      }
      double* ct = c.c.data() + t * cfg.d_model + off;
      for (std::size_t s = 0; s <= t; ++s) {
        p(t, s) /= z;
        kernels::detail::axpy(p(t, s), c.v.data() + s * cfg.d_model + off, ct, dh);
      }
    }
  }
}

void attention_backward(const ModelConfig& cfg, const BlockCache& c, const Matrix& dctx, Matrix& dq,
                        Matrix& dk, Matrix& dv) {
  const std::size_t T = c.q.rows();
  const std::size_t dh = cfg.head_dim();
  const std::size_t dm = cfg.d_model;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Vector dp(T);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    const Matrix& p = c.probs[h];
    for (std::size_t t = 0; t < T; ++t) {
      const double* dct = dctx.data() + t * dm + off;
      double sum = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        dp[s] = kernels::detail::dot(dct, c.v.data() + s * dm + off, dh);
        sum += dp[s] * p(t, s);
        kernels::detail::axpy(p(t, s), dct, dv.data() + s * dm + off, dh);
      }
      const double* qt = c.q.data() + t * dm + off;
      double* dqt = dq.data() + t * dm + off;
      for (std::size_t s = 0; s <= t; ++s) {
        const double ds = p(t, s) * (dp[s] - sum) * scale;
        if (ds == 0.0) continue;
        kernels::detail::axpy(ds, c.k.data() + s * dm + off, dqt, dh);
        kernels::detail::axpy(ds, qt, dk.data() + s * dm + off, dh);
      }
    }
  }
}

// Runs the forward pass, optionally keeping caches for backward, and records
// captures. Returns the number of blocks evaluated.
ForwardState run_forward(const ModelCheckpoint& model, std::span<const Token> tokens,
                         const CaptureSpec* capture, std::map<LayerAddress, Matrix>* captured) {
  const ModelConfig& cfg = model.config;
  check_tokens(model, tokens);
  std::size_t last_block = cfg.n_blocks;  // exclusive
  bool stop_early = false;
  if (capture) {
    for (const auto& a : capture->addresses)
      if (a.block >= cfg.n_blocks)
        throw ValidationError("forward: unknown capture address " + a.str());
    if (capture->stop_after_last_capture && !capture->addresses.empty()) {
      last_block = capture->addresses.rbegin()->block + 1;
      stop_early = true;
    }
  }

  const std::size_t T = tokens.size();
  ForwardState st;
  Matrix h(T, cfg.d_model);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = model.embed.row(tokens[t]);
    const auto p = model.pos_embed.row(t);
    auto hr = h.row(t);
    for (std::size_t k = 0; k < cfg.d_model; ++k) hr[k] = e[k] + p[k];
  }

  st.blocks.resize(last_block);
  for (std::size_t bi = 0; bi < last_block; ++bi) {
    const BlockWeights& w = model.blocks[bi];
    BlockCache& c = st.blocks[bi];
    c.h_in = h;
    c.a = rms_norm(h, w.norm1, c.inv1);
    c.q = linear(c.a, w.attn_q);
    c.k = linear(c.a, w.attn_k);
    c.v = linear(c.a, w.attn_v);
    attention_forward(cfg, c);
    h += linear(c.c, w.attn_o);
    c.h_mid = h;
    c.b = rms_norm(h, w.norm2, c.inv2);
    c.g = linear(c.b, w.mlp_gate);
    c.u = linear(c.b, w.mlp_up);
    c.m = Matrix(T, cfg.d_ff);
    for (std::size_t i = 0; i < c.m.size(); ++i) {
      const double gv = c.g.data()[i];
      c.m.data()[i] = gv * sigmoid(gv) * c.u.data()[i];
    }
    h += linear(c.m, w.mlp_down);

    if (capture && captured) {
      const std::size_t lo = std::min(capture->pos_begin, T);
      const std::size_t hi = std::min(capture->pos_end, T);
      for (LayerName n : kAllLayers) {
        const LayerAddress addr{bi, n};
        if (!capture->addresses.count(addr)) continue;
        const Matrix& in = layer_input(c, n);
        Matrix x(in.cols(), hi > lo ? hi - lo : 0);
        for (std::size_t t = lo; t < hi; ++t)
          for (std::size_t r = 0; r < in.cols(); ++r) x(r, t - lo) = in(t, r);
        (*captured)[addr] = std::move(x);
      }
    }
  }
  if (stop_early) return st;
  st.h_out = std::move(h);
  st.f = rms_norm(st.h_out, model.final_norm, st.inv_f);
  st.logits = linear(st.f, model.unembed);
  return st;
}

void check_scored(const ModelCheckpoint& model, const ScoredSequence& seq) {
  if (seq.response_begin == 0)
    throw ValidationError("loss: response cannot start at position 0 (no context)");
  if (seq.response_begin >= seq.tokens.size()) throw ValidationError("loss: empty response span");
  check_tokens(model, seq.tokens);
}

double log_softmax_at(std::span<const double> row, std::size_t target, Vector* probs) {
  double mx = -INFINITY;
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double lz = std::log(z) + mx;
  if (probs) {
    probs->resize(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) (*probs)[i] = std::exp(row[i] - lz);
  }
  return row[target] - lz;
}

}  // namespace

// --------------------------------------------------------------------------
// names and addresses

std::string_view to_string(LayerName name) { return kLayerNames[static_cast<std::size_t>(name)]; }

std::optional<LayerName> parse_layer_name(std::string_view s) {
  for (std::size_t i = 0; i < kLayerNames.size(); ++i)
    if (kLayerNames[i] == s) return static_cast<LayerName>(i);
  return std::nullopt;
}

std::string LayerAddress::str() const { return std::to_string(block) + "." + std::string(to_string(layer)); }

LayerAddress LayerAddress::parse(std::string_view s) {
  const auto dot = s.find('.');
  if (dot == std::string_view::npos) throw ValidationError("bad layer address '" + std::string(s) + "'");
  std::size_t block = 0;
  const auto head = s.substr(0, dot);
  auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), block);
  if (ec != std::errc() || ptr != head.data() + head.size())
    throw ValidationError("bad block index in layer address '" + std::string(s) + "'");
  auto name = parse_layer_name(s.substr(dot + 1));
  if (!name) throw ValidationError("unknown layer name in address '" + std::string(s) + "'");
  return {block, *name};
}

void ModelConfig::validate() const {
  if (vocab_size == 0 || n_blocks == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq == 0)
    throw ModelError("model config: all dimensions must be positive");
  if (d_model % n_heads != 0)
    throw ModelError("model config: d_model " + std::to_string(d_model) +
                     " not divisible by n_heads " + std::to_string(n_heads));
}

Matrix& BlockWeights::layer(LayerName name) {
  switch (name) {
    case LayerName::kQ: return attn_q;
    case LayerName::kK: return attn_k;
    case LayerName::kV: return attn_v;
    case LayerName::kO: return attn_o;
    case LayerName::kGate: return mlp_gate;
    case LayerName::kUp: return mlp_up;
    case LayerName::kDown: return mlp_down;
  }
  throw InternalError("unreachable layer name");
}

const Matrix& BlockWeights::layer(LayerName name) const {
  return const_cast<BlockWeights*>(this)->layer(name);
}

// --------------------------------------------------------------------------
// checkpoint construction and validation

ModelCheckpoint ModelCheckpoint::zeros(const ModelConfig& cfg) {
  cfg.validate();
  ModelCheckpoint m;
  m.config = cfg;
  m.embed = Matrix(cfg.vocab_size, cfg.d_model);
  m.pos_embed = Matrix(cfg.max_seq, cfg.d_model);
  m.final_norm.assign(cfg.d_model, 0.0);
  m.unembed = Matrix(cfg.vocab_size, cfg.d_model);
  m.blocks.resize(cfg.n_blocks);
  for (auto& b : m.blocks) {
    b.attn_q = b.attn_k = b.attn_v = b.attn_o = Matrix(cfg.d_model, cfg.d_model);
    b.mlp_gate = b.mlp_up = Matrix(cfg.d_ff, cfg.d_model);
    b.mlp_down = Matrix(cfg.d_model, cfg.d_ff);
    b.norm1.assign(cfg.d_model, 0.0);
    b.norm2.assign(cfg.d_model, 0.0);
  }
  return m;
}

ModelCheckpoint ModelCheckpoint::random(const ModelConfig& cfg, std::uint64_t seed) {
  ModelCheckpoint m = zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_blocks));
  m.for_each_buffer([&](const std::string& name, std::span<double> buf) {
    const bool is_norm = name.find("norm") != std::string::npos;
    const bool is_out = name.ends_with("self_attn.o") || name.ends_with("mlp.down");
    for (double& v : buf) {
      if (is_norm) {
        v = 1.0;
      } else {
        v = normal(rng) * (is_out ? out_scale : 1.0);
      }
    }
  });
  m.round_to_storage();
  return m;
}

Matrix& ModelCheckpoint::weight(const LayerAddress& a) {
  if (a.block >= blocks.size())
    throw ValidationError("layer address " + a.str() + " out of range (n_blocks=" +
                          std::to_string(blocks.size()) + ")");
  return blocks[a.block].layer(a.layer);
}

const Matrix& ModelCheckpoint::weight(const LayerAddress& a) const {
  return const_cast<ModelCheckpoint*>(this)->weight(a);
}

void ModelCheckpoint::validate() const {
  config.validate();
  auto expect = [](const Matrix& m, std::size_t r, std::size_t c, const std::string& name) {
    if (m.rows() != r || m.cols() != c)
      throw ModelError("dimension mismatch for tensor " + name + ": got " + m.shape_string() +
                       ", expected " + std::to_string(r) + "x" + std::to_string(c));
  };
  auto expect_vec = [](const Vector& v, std::size_t n, const std::string& name) {
    if (v.size() != n)
      throw ModelError("dimension mismatch for tensor " + name + ": got " + std::to_string(v.size()) +
                       ", expected " + std::to_string(n));
  };
  const auto& c = config;
  if (blocks.size() != c.n_blocks)
    throw ModelError("checkpoint has " + std::to_string(blocks.size()) + " blocks, metadata says " +
                     std::to_string(c.n_blocks));
  expect(embed, c.vocab_size, c.d_model, "embed");
  expect(pos_embed, c.max_seq, c.d_model, "pos_embed");
  expect(unembed, c.vocab_size, c.d_model, "unembed");
  expect_vec(final_norm, c.d_model, "final_norm");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto p = std::to_string(b) + ".";
    const auto& bw = blocks[b];
    for (LayerName n : {LayerName::kQ, LayerName::kK, LayerName::kV, LayerName::kO})
      expect(bw.layer(n), c.d_model, c.d_model, p + std::string(to_string(n)));
    expect(bw.mlp_gate, c.d_ff, c.d_model, p + "mlp.gate");
    expect(bw.mlp_up, c.d_ff, c.d_model, p + "mlp.up");
    expect(bw.mlp_down, c.d_model, c.d_ff, p + "mlp.down");
    expect_vec(bw.norm1, c.d_model, p + "norm1");
    expect_vec(bw.norm2, c.d_model, p + "norm2");
  }
  for_each_buffer([](const std::string& name, std::span<const double> buf) {
    for (double v : buf)
      if (!std::isfinite(v)) throw ModelError("non-finite entry in tensor " + name);
  });
}

std::vector<LayerAddress> ModelCheckpoint::linear_addresses() const {
  std::vector<LayerAddress> out;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (LayerName n : kAllLayers) out.push_back({b, n});
  return out;
}

std::size_t ModelCheckpoint::linear_parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : linear_addresses()) n += weight(a).size();
  return n;
}

void ModelCheckpoint::round_to_storage() {
  for_each_buffer([](const std::string&, std::span<double> buf) {
    for (double& v : buf) v = static_cast<double>(static_cast<float>(v));
  });
}

// --------------------------------------------------------------------------
// forward / loss / backward

ForwardResult forward(const ModelCheckpoint& model, std::span<const Token> tokens,
                      const CaptureSpec* capture) {
  ForwardResult out;
  ForwardState st = run_forward(model, tokens, capture, &out.captures);
  out.logits = std::move(st.logits);
  return out;
}

double sequence_loss(const ModelCheckpoint& model, const ScoredSequence& seq) {
  check_scored(model, seq);
  const Matrix logits = forward(model, seq.tokens).logits;
  double nll = 0.0;
  for (std::size_t s = seq.response_begin; s < seq.tokens.size(); ++s)
    nll -= log_softmax_at(logits.row(s - 1), seq.tokens[s], nullptr);
  return nll / static_cast<double>(seq.tokens.size() - seq.response_begin);
}

LossAndGrad sequence_loss_and_grad(const ModelCheckpoint& model, const ScoredSequence& seq,
                                   std::size_t min_block) {
  check_scored(model, seq);
  const ModelConfig& cfg = model.config;
  ForwardState st = run_forward(model, seq.tokens, nullptr, nullptr);
  const std::size_t T = seq.tokens.size();
  const double inv_count = 1.0 / static_cast<double>(T - seq.response_begin);

  LossAndGrad out;
  out.grad = ModelCheckpoint::zeros(cfg);
  ModelCheckpoint& g = out.grad;

  Matrix dlogits(T, cfg.vocab_size);
  Vector probs;
  for (std::size_t s = seq.response_begin; s < T; ++s) {
    out.loss -= log_softmax_at(st.logits.row(s - 1), seq.tokens[s], &probs) * inv_count;
    auto dr = dlogits.row(s - 1);
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) dr[v] = probs[v] * inv_count;
    dr[seq.tokens[s]] -= inv_count;
  }

  Matrix df(T, cfg.d_model);
  linear_backward(st.f, model.unembed, dlogits, &df, g.unembed);
  Matrix dh(T, cfg.d_model);
  rms_norm_backward(st.h_out, model.final_norm, st.inv_f, df, dh, g.final_norm);

  for (std::size_t bi = cfg.n_blocks; bi-- > min_block;) {
    const BlockWeights& w = model.blocks[bi];
    BlockWeights& gw = g.blocks[bi];
    const BlockCache& c = st.blocks[bi];

    // MLP
    Matrix dm(T, cfg.d_ff);
    linear_backward(c.m, w.mlp_down, dh, &dm, gw.mlp_down);
    Matrix dg(T, cfg.d_ff), du(T, cfg.d_ff);
    for (std::size_t i = 0; i < dm.size(); ++i) {
      const double gv = c.g.data()[i];
      const double sg = sigmoid(gv);
      const double silu = gv * sg;
      du.data()[i] = dm.data()[i] * silu;
      dg.data()[i] = dm.data()[i] * c.u.data()[i] * sg * (1.0 + gv * (1.0 - sg));
    }
    Matrix db(T, cfg.d_model);
    linear_backward(c.b, w.mlp_gate, dg, &db, gw.mlp_gate);
    linear_backward(c.b, w.mlp_up, du, &db, gw.mlp_up);
    rms_norm_backward(c.h_mid, w.norm2, c.inv2, db, dh, gw.norm2);

    // attention
    Matrix dctx(T, cfg.d_model);
    linear_backward(c.c, w.attn_o, dh, &dctx, gw.attn_o);
    Matrix dq(T, cfg.d_model), dk(T, cfg.d_model), dv(T, cfg.d_model);
    attention_backward(cfg, c, dctx, dq, dk, dv);
    Matrix da(T, cfg.d_model);
    linear_backward(c.a, w.attn_q, dq, &da, gw.attn_q);
    linear_backward(c.a, w.attn_k, dk, &da, gw.attn_k);
    linear_backward(c.a, w.attn_v, dv, &da, gw.attn_v);
    rms_norm_backward(c.h_in, w.norm1, c.inv1, da, dh, gw.norm1);
  }

  if (min_block == 0) {
    for (std::size_t t = 0; t < T; ++t) {
      const auto dr = dh.row(t);
      auto ge = g.embed.row(seq.tokens[t]);
      auto gp = g.pos_embed.row(t);
      for (std::size_t k = 0; k < cfg.d_model; ++k) {
        ge[k] += dr[k];
        gp[k] += dr[k];
      }
    }
  }
  return out;
}

GradientSet linear_gradients(const ModelCheckpoint& grad) {
  GradientSet out;
  for (const auto& a : grad.linear_addresses()) out.emplace(a, grad.weight(a));
  return out;
}

ModelCheckpoint apply_mask(const ModelCheckpoint& model, const LayerAddress& address,
                           std::span<const std::pair<std::uint32_t, std::uint32_t>> coords,
                           MaskMode mode) {
  ModelCheckpoint out = model;
  Matrix& w = out.weight(address);
  for (const auto& [r, c] : coords)
    if (r >= w.rows() || c >= w.cols())
      throw ValidationError("mask coordinate (" + std::to_string(r) + "," + std::to_string(c) +
                            ") out of range for " + address.str() + " " + w.shape_string());
  if (mode == MaskMode::kZeroSelected) {
    for (const auto& [r, c] : coords) w(r, c) = 0.0;
  } else {
    Matrix kept(w.rows(), w.cols());
    for (const auto& [r, c] : coords) kept(r, c) = w(r, c);
    w = std::move(kept);
  }
  return out;
}

ModelCheckpoint subtract_delta(const ModelCheckpoint& model, const LayerAddress& address,
                               const Matrix& delta) {
  ModelCheckpoint out = model;
  Matrix& w = out.weight(address);
  if (!w.same_shape(delta))
    throw ValidationError("delta shape " + delta.shape_string() + " does not match " +
                          address.str() + " " + w.shape_string());
  w -= delta;
  return out;
}

// --------------------------------------------------------------------------
// incremental decoding

IncrementalDecoder::IncrementalDecoder(const ModelCheckpoint& model)
    : model_(&model), keys_(model.config.n_blocks), values_(model.config.n_blocks) {}

Vector IncrementalDecoder::step(Token token) {
  const ModelCheckpoint& m = *model_;
  const ModelConfig& cfg = m.config;
  if (pos_ >= cfg.max_seq) throw ValidationError("decoder: max_seq exceeded");
  if (token >= cfg.vocab_size) throw ValidationError("decoder: token out of vocabulary");
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto norm = [&](const Vector& x, const Vector& g) {
    const double ms = kernels::detail::dot(x.data(), x.data(), x.size()) / static_cast<double>(x.size());
    const double r = 1.0 / std::sqrt(ms + kNormEps);
    Vector y(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) y[k] = g[k] * x[k] * r;
    return y;
  };
  auto matvec = [](const Matrix& w, const Vector& x) {
    Vector y(w.rows(), 0.0);
    kernels::gemm_nt(x.data(), w.data(), y.data(), 1, w.rows(), w.cols());
    return y;
  };

  Vector h(d);
  for (std::size_t k = 0; k < d; ++k) h[k] = m.embed(token, k) + m.pos_embed(pos_, k);
  for (std::size_t bi = 0; bi < cfg.n_blocks; ++bi) {
    const BlockWeights& w = m.blocks[bi];
    const Vector a = norm(h, w.norm1);
    const Vector q = matvec(w.attn_q, a);
    const Vector kv = matvec(w.attn_k, a);
    const Vector vv = matvec(w.attn_v, a);
    auto& K = keys_[bi];
    auto& V = values_[bi];
    K.insert(K.end(), kv.begin(), kv.end());
    V.insert(V.end(), vv.begin(), vv.end());
    const std::size_t n = pos_ + 1;
    Vector ctx(d, 0.0), p(n);
    for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
      const std::size_t off = hh * dh;
      double mx = -INFINITY;
      for (std::size_t s = 0; s < n; ++s) {
        p[s] = kernels::detail::dot(q.data() + off, K.data() + s * d + off, dh) * scale;
        mx = std::max(mx, p[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        p[s] = std::exp(p[s] - mx);
        z += p[s];
      }
      for (std::size_t s = 0; s < n; ++s)
        kernels::detail::axpy(p[s] / z, V.data() + s * d + off, ctx.data() + off, dh);
    }
    const Vector o = matvec(w.attn_o, ctx);
    for (std::size_t k = 0; k < d; ++k) h[k] += o[k];
    const Vector b = norm(h, w.norm2);
    const Vector gg = matvec(w.mlp_gate, b);
    const Vector uu = matvec(w.mlp_up, b);
    Vector mm(cfg.d_ff);
    for (std::size_t i = 0; i < cfg.d_ff; ++i) mm[i] = gg[i] * sigmoid(gg[i]) * uu[i];
    const Vector dd = matvec(w.mlp_down, mm);
    for (std::size_t k = 0; k < d; ++k) h[k] += dd[k];
  }
  ++pos_;
  return matvec(m.unembed, norm(h, m.final_norm));
}

}  // namespace watk
