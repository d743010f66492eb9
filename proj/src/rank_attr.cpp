#include "watk/rank_attr.hpp"

#include <algorithm>
#include <cmath>

#include "watk/linalg.hpp"

namespace watk {

namespace {

constexpr double kRankTol = 1e-10;
// Absolute slack, relative to ||W||_2, for the numerical rank of a delta.
constexpr double kDeltaTol = 1e-9;

std::set<LayerAddress> block_addresses(std::size_t block) {
  std::set<LayerAddress> out;
  for (LayerName n : kAllLayers) out.insert({block, n});
  return out;
}

void check_activation(const Matrix& w, const ActivationMatrix& x, const char* op) {
  if (x.data.rows() != w.cols())
    throw ValidationError(std::string(op) + ": activation d_in " + std::to_string(x.data.rows()) +
                          " does not match weight " + w.shape_string());
  if (x.n() == 0) throw ValidationError(std::string(op) + ": no activation columns");
}

ProjectionBasis top_left_basis(const Matrix& a, std::size_t r, const LayerAddress& address,
                               Role role, const char* op) {
  if (r == 0) throw ValidationError(std::string(op) + ": rank must be at least 1");
  const SvdResult svd = thin_svd(a, false);
  const std::size_t rank = numerical_rank(svd.sigma, kRankTol);
  if (r > rank)
    throw ValidationError(std::string(op) + ": requested rank " + std::to_string(r) +
                          " exceeds numerical rank " + std::to_string(rank) + " of " + address.str());
  ProjectionBasis b;
  b.address = address;
  b.role = role;
  b.u = leading_columns(svd.u, r);
  b.spectrum.assign(svd.sigma.begin(), svd.sigma.begin() + static_cast<std::ptrdiff_t>(r));
  return b;
}

std::size_t delta_rank(const Matrix& delta, double w_norm) {
  if (w_norm == 0.0) return 0;
  const SvdResult s = thin_svd(delta, false);
  return static_cast<std::size_t>(std::count_if(
      s.sigma.begin(), s.sigma.end(), [&](double v) { return v > kDeltaTol * w_norm; }));
}

double spectral_norm(const Matrix& w) {
  const SvdResult s = thin_svd(w, false);
  return s.sigma.empty() ? 0.0 : s.sigma[0];
}

}  // namespace

ProjectionBasis empty_basis(const LayerAddress& address, std::size_t d_out, Role role) {
  ProjectionBasis b;
  b.address = address;
  b.role = role;
  b.u = Matrix(d_out, 0);
  return b;
}

ProjectionBasis actsvd_basis(const Matrix& w, const ActivationMatrix& x, std::size_t r, Role role) {
  check_activation(w, x, "actsvd_basis");
  return top_left_basis(matmul(w, x.data), r, x.address, role, "actsvd_basis");
}

std::size_t activation_rank(const Matrix& w, const ActivationMatrix& x) {
  check_activation(w, x, "activation_rank");
  return numerical_rank(thin_svd(matmul(w, x.data), false).sigma, kRankTol);
}

Matrix project_keep(const Matrix& w, const ProjectionBasis& basis) {
  if (basis.d_out() != w.rows())
    throw ValidationError("project_keep: basis d_out " + std::to_string(basis.d_out()) +
                          " does not match weight " + w.shape_string());
  if (basis.rank() == 0) return Matrix(w.rows(), w.cols());
  return matmul(basis.u, matmul_tn(basis.u, w));
}

RankRemoval remove_least_ranks(const Matrix& w, const ActivationMatrix& x, std::size_t keep_r, Role role) {
  if (keep_r == 0) throw ValidationError("remove_least_ranks: keep_r must be at least 1");
  RankRemoval out;
  out.basis = actsvd_basis(w, x, keep_r, role);
  out.w_hat = project_keep(w, out.basis);
  return out;
}

std::size_t weight_rank(const Matrix& w) { return numerical_rank(thin_svd(w, false).sigma, kRankTol); }

std::size_t rank_bound(std::size_t big_r, std::size_t r_u, std::size_t r_s) {
  return std::min(r_u, big_r > r_s ? big_r - r_s : 0);
}

RankDelta isolate_delta(const Matrix& w, const ProjectionBasis& utility, const ProjectionBasis& safety) {
  if (utility.d_out() != w.rows() || safety.d_out() != w.rows())
    throw ValidationError("isolate_delta: basis d_out does not match weight " + w.shape_string());
  const std::size_t big_r = weight_rank(w);
  const std::size_t keep_u = std::min(utility.rank(), big_r);
  const std::size_t keep_s = std::min(safety.rank(), big_r);
  RankDelta d;
  d.address = safety.address;
  d.declared_rank_bound = rank_bound(big_r, big_r - keep_u, big_r - keep_s);
  // Pi^s W, then subtract its Pi^u component.
  Matrix kept = project_keep(w, safety);
  d.delta = kept - project_keep(kept, utility);
  const std::size_t got = delta_rank(d.delta, spectral_norm(w));
  if (got > d.declared_rank_bound)
    throw InternalError("isolate_delta: rank " + std::to_string(got) + " exceeds bound " +
                        std::to_string(d.declared_rank_bound) + " for " + d.address.str());
  return d;
}

RankDelta lora_factorize(RankDelta delta) {
  const Matrix& m = delta.delta;
  if (!m.all_finite()) throw ValidationError("lora_factorize: non-finite delta");
  Matrix a(m.rows(), 0), b(0, m.cols());
  if (!m.empty() && m.frobenius_norm() > 0.0) {
    const SvdResult s = thin_svd(m, true);
    const std::size_t k = numerical_rank(s.sigma, kRankTol);
    a = leading_columns(s.u, k);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t r = 0; r < a.rows(); ++r) a(r, c) *= s.sigma[c];
    b = leading_columns(s.v, k).transposed();
  }
  delta.factors = std::make_pair(std::move(a), std::move(b));
  return delta;
}

AsvdMode parse_asvd_mode(std::string_view s) {
  if (s == "mean") return AsvdMode::kMean;
  if (s == "max") return AsvdMode::kMax;
  throw ValidationError("unknown ASVD mode '" + std::string(s) + "' (expected mean or max)");
}

ProjectionBasis asvd_basis(const Matrix& w, const ActivationMatrix& x, std::size_t r, double alpha,
                           AsvdMode mode, Role role) {
  check_activation(w, x, "asvd_basis");
  if (!(alpha >= 0.0)) throw ValidationError("asvd_basis: alpha must be non-negative");
  Matrix ws = w;
  for (std::size_t i = 0; i < x.data.rows(); ++i) {
    const auto row = x.data.row(i);
    double stat = 0.0;
    for (double v : row) stat = mode == AsvdMode::kMean ? stat + std::fabs(v) : std::max(stat, std::fabs(v));
    if (mode == AsvdMode::kMean) stat /= static_cast<double>(row.size());
    const double s = std::pow(stat, alpha);
    if (s == 0.0)
      throw ValidationError("asvd_basis: input feature " + std::to_string(i) + " of " +
                            x.address.str() + " is dead (zero scale)");
    for (std::size_t o = 0; o < ws.rows(); ++o) ws(o, i) *= s;
  }
  return top_left_basis(ws, r, x.address, role, "asvd_basis");
}

std::map<LayerAddress, FisherDiagonal> fisher_diagonal(const ModelCheckpoint& model,
                                                       std::span<const CalibExample> examples,
                                                       const std::set<LayerAddress>& addresses) {
  if (examples.empty()) throw ValidationError("fisher_diagonal: empty dataset");
  if (addresses.empty()) return {};
  std::map<LayerAddress, Matrix> sq;
  for (const auto& a : addresses) sq.emplace(a, Matrix(model.weight(a).rows(), model.weight(a).cols()));
  const std::size_t min_block = addresses.begin()->block;
  for (const auto& ex : examples) {
    const LossAndGrad lg = sequence_loss_and_grad(model, ex.scored(), min_block);
    for (const auto& a : addresses) {
      const Matrix& g = lg.grad.weight(a);
      double* dst = sq.at(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g.data()[i] * g.data()[i];
    }
  }
  std::map<LayerAddress, FisherDiagonal> out;
  const double inv = 1.0 / static_cast<double>(examples.size());
  for (const auto& [a, m] : sq) {
    FisherDiagonal f;
    f.address = a;
    f.values.resize(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double s = 0.0;
      for (double v : m.row(i)) s += v * inv;
      f.values[i] = std::sqrt(s);
    }
    out.emplace(a, std::move(f));
  }
  return out;
}

ProjectionBasis fwsvd_basis(const Matrix& w, const FisherDiagonal& fisher, std::size_t r, Role role) {
  if (fisher.values.size() != w.rows())
    throw ValidationError("fwsvd_basis: fisher length " + std::to_string(fisher.values.size()) +
                          " does not match weight " + w.shape_string());
  const double top = *std::max_element(fisher.values.begin(), fisher.values.end());
  if (!(top > 0.0)) throw ValidationError("fwsvd_basis: fisher diagonal of " + fisher.address.str() + " is zero");
  Vector f(fisher.values);
  for (double& v : f) v = std::max(v, 1e-12 * top);
  Matrix fw = w;
  for (std::size_t i = 0; i < fw.rows(); ++i)
    for (double& v : fw.row(i)) v *= f[i];
  ProjectionBasis weighted = top_left_basis(fw, r, fisher.address, role, "fwsvd_basis");
  Matrix back = weighted.u;
  for (std::size_t i = 0; i < back.rows(); ++i)
    for (double& v : back.row(i)) v /= f[i];
  ProjectionBasis out = weighted;
  out.u = orthonormalize_columns(back);
  if (out.u.cols() != r)
    throw ValidationError("fwsvd_basis: unweighted basis lost rank for " + fisher.address.str());
  return out;
}

std::size_t RankIsolateResult::max_bound() const {
  std::size_t b = 0;
  for (const auto& l : layers) b = std::max(b, l.bound);
  return b;
}

RankIsolateResult blockwise_rank_isolate(const ModelCheckpoint& model,
                                         std::span<const CalibExample> utility,
                                         std::span<const CalibExample> safety,
                                         const RankIsolateParams& params) {
  if (utility.empty() || safety.empty()) throw ValidationError("rank isolation needs utility and safety data");
  RankIsolateResult res;
  res.model = model;
  for (std::size_t b = 0; b < model.config.n_blocks; ++b) {
    const auto addrs = block_addresses(b);
    const auto xu = capture_examples(res.model, utility, addrs);
    const auto xs = capture_examples(res.model, safety, addrs);
    std::vector<RankDelta> block_deltas;
    for (const auto& a : addrs) {
      const Matrix& w = res.model.weight(a);
      RankLayerRecord rec;
      rec.address = a;
      rec.big_r = weight_rank(w);
      const std::size_t want_u = rec.big_r > params.r_u ? rec.big_r - params.r_u : 0;
      const std::size_t want_s = rec.big_r > params.r_s ? rec.big_r - params.r_s : 0;
      rec.keep_u = std::min(want_u, activation_rank(w, xu.at(a)));
      rec.keep_s = std::min(want_s, activation_rank(w, xs.at(a)));
      const auto ub = rec.keep_u ? actsvd_basis(w, xu.at(a), rec.keep_u, Role::kUtility)
                                 : empty_basis(a, w.rows(), Role::kUtility);
      const auto sb = rec.keep_s ? actsvd_basis(w, xs.at(a), rec.keep_s, Role::kSafety)
                                 : empty_basis(a, w.rows(), Role::kSafety);
      RankDelta d = isolate_delta(w, ub, sb);
      rec.bound = d.declared_rank_bound;
      rec.delta_rank = delta_rank(d.delta, spectral_norm(w));
      res.layers.push_back(rec);
      block_deltas.push_back(std::move(d));
    }
    for (auto& d : block_deltas) {
      res.model = subtract_delta(res.model, d.address, d.delta);
      res.deltas.push_back(std::move(d));
    }
  }
  return res;
}

RankRemoveResult blockwise_rank_remove(const ModelCheckpoint& model,
                                       std::span<const CalibExample> examples, std::size_t removed,
                                       Role role) {
  if (examples.empty()) throw ValidationError("rank removal needs calibration data");
  RankRemoveResult res;
  res.model = model;
  for (std::size_t b = 0; b < model.config.n_blocks; ++b) {
    const auto addrs = block_addresses(b);
    const auto x = capture_examples(res.model, examples, addrs);
    std::vector<std::pair<LayerAddress, Matrix>> updates;
    for (const auto& a : addrs) {
      const Matrix& w = res.model.weight(a);
      const std::size_t big_r = weight_rank(w);
      if (removed >= big_r)
        throw ValidationError("rank removal: removing " + std::to_string(removed) + " ranks leaves none in " +
                              a.str() + " (rank " + std::to_string(big_r) + ")");
      const std::size_t keep = std::min(big_r - removed, activation_rank(w, x.at(a)));
      RankRemoval rr = remove_least_ranks(w, x.at(a), keep, role);
      updates.emplace_back(a, std::move(rr.w_hat));
      res.bases.push_back(std::move(rr.basis));
    }
    for (auto& [a, w] : updates) res.model.weight(a) = std::move(w);
  }
  return res;
}

std::vector<NamedTensor> basis_tensors(const ProjectionBasis& basis) {
  const std::string stem = basis.address.str() + ".U." + std::string(to_string(basis.role));
  return {NamedTensor::from_matrix(stem, basis.u), NamedTensor::from_vector(stem + ".sigma", basis.spectrum)};
}

std::vector<NamedTensor> delta_tensors(const RankDelta& delta) {
  std::vector<NamedTensor> out{NamedTensor::from_matrix(delta.address.str() + ".delta", delta.delta)};
  if (delta.factors) {
    out.push_back(NamedTensor::from_matrix(delta.address.str() + ".delta.A", delta.factors->first));
    out.push_back(NamedTensor::from_matrix(delta.address.str() + ".delta.B", delta.factors->second));
  }
  return out;
}

ProjectionBasis basis_from_tensors(const TensorFile& file, const LayerAddress& address, Role role) {
  const std::string stem = address.str() + ".U." + std::string(to_string(role));
  const NamedTensor* u = file.find(stem);
  if (!u) throw ValidationError("basis file has no tensor " + stem);
  ProjectionBasis b;
  b.address = address;
  b.role = role;
  b.u = u->to_matrix();
  if (const NamedTensor* s = file.find(stem + ".sigma")) b.spectrum = s->to_vector();
  return b;
}

}  // namespace watk
