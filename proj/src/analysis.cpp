#include "watk/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "watk/calib.hpp"

namespace watk {

namespace {

constexpr int kProbeSteps = 200;
constexpr double kProbeStep = 0.1;

}  // namespace

double jaccard(const NeuronSet& a, const NeuronSet& b) {
  const NeuronSet inter = set_intersection(a, b);
  const std::size_t uni = a.size() + b.size() - inter.size();
  return uni == 0 ? 0.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
}

double subspace_similarity(const Matrix& ua, const Matrix& ub) {
  if (ua.rows() != ub.rows())
    throw ValidationError("subspace_similarity: bases have different d_out (" +
                          std::to_string(ua.rows()) + " vs " + std::to_string(ub.rows()) + ")");
  const std::size_t k = std::min(ua.cols(), ub.cols());
  if (k == 0) throw ValidationError("subspace_similarity: zero-rank basis");
  const double f = matmul_tn(ua, ub).frobenius_norm();
  return f * f / static_cast<double>(k);
}

double subspace_similarity(const ProjectionBasis& a, const ProjectionBasis& b) {
  return subspace_similarity(a.u, b.u);
}

ProbeSplit stratified_split(const std::vector<int>& labels, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) throw ValidationError("probe: need examples of two classes");
  std::mt19937_64 rng(seed);
  ProbeSplit split;
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 7)
      throw ValidationError("probe: class " + std::to_string(label) + " has " +
                            std::to_string(idx.size()) + " examples; a 5:2 split needs at least 7");
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng() % (i + 1)]);
    const auto n_val = static_cast<std::size_t>(std::floor(2.0 * static_cast<double>(idx.size()) / 7.0 + 0.5));
    split.validation.insert(split.validation.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train.insert(split.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

double probe_accuracy(const Matrix& features, const std::vector<int>& labels, const ProbeSplit& split) {
  if (features.rows() != labels.size()) throw ValidationError("probe: feature rows do not match labels");
  if (split.train.empty() || split.validation.empty()) throw ValidationError("probe: empty split");
  const std::size_t d = features.cols();
  Vector mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i : split.train)
    for (std::size_t k = 0; k < d; ++k) mean[k] += features(i, k);
  const double nt = static_cast<double>(split.train.size());
  for (double& m : mean) m /= nt;
  for (std::size_t i : split.train)
    for (std::size_t k = 0; k < d; ++k) sd[k] += (features(i, k) - mean[k]) * (features(i, k) - mean[k]);
  for (double& s : sd) s = std::sqrt(s / nt);
  auto standardized = [&](std::size_t i, std::size_t k) {
    return sd[k] > 0.0 ? (features(i, k) - mean[k]) / sd[k] : 0.0;
  };

  Vector w(d, 0.0);
  double bias = 0.0;
  Vector gw(d);
  for (int step = 0; step < kProbeSteps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i : split.train) {
      double z = bias;
      for (std::size_t k = 0; k < d; ++k) z += w[k] * standardized(i, k);
      const double err = 1.0 / (1.0 + std::exp(-z)) - (labels[i] == 1 ? 1.0 : 0.0);
      for (std::size_t k = 0; k < d; ++k) gw[k] += err * standardized(i, k);
      gb += err;
    }
    for (std::size_t k = 0; k < d; ++k) w[k] -= kProbeStep * gw[k] / nt;
    bias -= kProbeStep * gb / nt;
  }

  std::size_t correct = 0;
  for (std::size_t i : split.validation) {
    double z = bias;
    for (std::size_t k = 0; k < d; ++k) z += w[k] * standardized(i, k);
    if ((z >= 0.0 ? 1 : 0) == (labels[i] == 1 ? 1 : 0)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.validation.size());
}

std::vector<Matrix> head_features(const ModelCheckpoint& model, const std::vector<std::string>& prompts) {
  const auto& cfg = model.config;
  const std::size_t dh = cfg.head_dim();
  std::vector<Matrix> out(cfg.n_blocks * cfg.n_heads, Matrix(prompts.size(), dh));
  CaptureSpec spec;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) spec.addresses.insert({b, LayerName::kO});
  spec.stop_after_last_capture = true;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    TokenSeq tokens{kBosToken};
    const TokenSeq p = byte_tokenize(prompts[i]);
    tokens.insert(tokens.end(), p.begin(), p.end());
    CaptureSpec s = spec;
    s.pos_begin = tokens.size() - 1;
    s.pos_end = tokens.size();
    const ForwardResult fr = forward(model, tokens, &s);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      const Matrix& x = fr.captures.at({b, LayerName::kO});  // d_model x 1
      for (std::size_t h = 0; h < cfg.n_heads; ++h)
        for (std::size_t k = 0; k < dh; ++k) out[b * cfg.n_heads + h](i, k) = x(h * dh + k, 0);
    }
  }
  return out;
}

ProbeResult probe_heads(const ModelCheckpoint& model, const std::vector<std::string>& harmful,
                        const std::vector<std::string>& harmless, std::uint64_t seed) {
  if (harmful.empty() || harmless.empty()) throw ValidationError("probe: both prompt lists must be nonempty");
  std::vector<std::string> prompts(harmful);
  prompts.insert(prompts.end(), harmless.begin(), harmless.end());
  std::vector<int> labels(harmful.size(), 1);
  labels.resize(prompts.size(), 0);
  const ProbeSplit split = stratified_split(labels, seed);
  const auto feats = head_features(model, prompts);
  ProbeResult res;
  res.n_train = split.train.size();
  res.n_validation = split.validation.size();
  const auto& cfg = model.config;
  res.heads.resize(feats.size());
  const auto n = static_cast<std::ptrdiff_t>(feats.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    res.heads[u] = {u / cfg.n_heads, u % cfg.n_heads, probe_accuracy(feats[u], labels, split)};
  }
  return res;
}

ModelCheckpoint prune_heads(const ModelCheckpoint& model,
                            const std::vector<std::pair<std::size_t, std::size_t>>& heads) {
  const auto& cfg = model.config;
  for (const auto& [b, h] : heads)
    if (b >= cfg.n_blocks || h >= cfg.n_heads)
      throw ValidationError("prune_heads: head (" + std::to_string(b) + "," + std::to_string(h) +
                            ") out of range");
  ModelCheckpoint out = model;
  const std::size_t dh = cfg.head_dim();
  for (const auto& [b, h] : heads) {
    Matrix& o = out.blocks[b].attn_o;
    for (std::size_t r = 0; r < o.rows(); ++r)
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) o(r, c) = 0.0;
  }
  return out;
}

}  // namespace watk
