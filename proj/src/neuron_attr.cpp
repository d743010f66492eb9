#include "watk/neuron_attr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "watk/kernels.hpp"

namespace watk {

namespace {

// Examples are summed in fixed chunks so the result does not depend on the
// thread count.
constexpr std::size_t kChunk = 8;

std::set<LayerAddress> block_addresses(std::size_t block) {
  std::set<LayerAddress> out;
  for (LayerName n : kAllLayers) out.insert({block, n});
  return out;
}

template <typename Less>
NeuronSet select_per_row(const ScoreMatrix& s, double p, Less less) {
  NeuronSet out;
  out.address = s.address;
  out.rows = s.scores.rows();
  out.cols = s.scores.cols();
  (s.role == Role::kUtility ? out.p : out.q) = p;
  const std::size_t k = per_row_count(p, out.cols);
  std::vector<std::uint32_t> idx(out.cols);
  for (std::size_t i = 0; i < out.rows; ++i) {
    const auto row = s.scores.row(i);
    std::iota(idx.begin(), idx.end(), 0u);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                        if (row[a] != row[b]) return less(row[a], row[b]);
                        return a < b;
                      });
    std::vector<std::uint32_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
    for (std::uint32_t c : chosen) out.coords.emplace_back(static_cast<std::uint32_t>(i), c);
  }
  return out;
}

void check_same_layer(const NeuronSet& a, const NeuronSet& b, const char* op) {
  if (a.address != b.address || a.rows != b.rows || a.cols != b.cols)
    throw ValidationError(std::string(op) + ": address mismatch " + a.address.str() + " vs " +
                          b.address.str());
}

NeuronSet combine(const NeuronSet& a, const NeuronSet& b) {
  NeuronSet out;
  out.address = a.address;
  out.rows = a.rows;
  out.cols = a.cols;
  out.p = b.p ? b.p : a.p;
  out.q = a.q ? a.q : b.q;
  return out;
}

}  // namespace

std::string_view to_string(ScoreMethod m) { return m == ScoreMethod::kWanda ? "wanda" : "snip"; }

ScoreMethod parse_score_method(std::string_view s) {
  if (s == "wanda") return ScoreMethod::kWanda;
  if (s == "snip") return ScoreMethod::kSnip;
  throw ValidationError("unknown score method '" + std::string(s) + "' (expected wanda or snip)");
}

ScoreMatrix wanda_score(const Matrix& w, const ActivationMatrix& x) {
  if (x.data.rows() != w.cols())
    throw ValidationError("wanda_score: activation d_in " + std::to_string(x.data.rows()) +
                          " does not match weight " + w.shape_string());
  if (x.n() == 0) throw ValidationError("wanda_score: no activation columns");
  Vector norms(w.cols());
  kernels::row_norms(x.data.data(), norms.data(), x.data.rows(), x.data.cols());
  ScoreMatrix s;
  s.address = x.address;
  s.method = ScoreMethod::kWanda;
  s.scores = Matrix(w.rows(), w.cols());
  kernels::wanda(w.data(), norms.data(), s.scores.data(), w.rows(), w.cols());
  return s;
}

std::map<LayerAddress, ScoreMatrix> wanda_scores(const ModelCheckpoint& model,
                                                 std::span<const CalibExample> examples,
                                                 const std::set<LayerAddress>& addresses, Role role) {
  const auto caps = capture_examples(model, examples, addresses);
  std::map<LayerAddress, ScoreMatrix> out;
  for (const auto& [addr, x] : caps) {
    auto s = wanda_score(model.weight(addr), x);
    s.role = role;
    out.emplace(addr, std::move(s));
  }
  return out;
}

std::map<LayerAddress, ScoreMatrix> snip_score(const ModelCheckpoint& model,
                                               std::span<const CalibExample> examples,
                                               const std::set<LayerAddress>& addresses, Role role) {
  if (examples.empty()) throw ValidationError("snip_score: empty dataset");
  if (addresses.empty()) return {};
  for (const auto& a : addresses) (void)model.weight(a);
  const std::size_t min_block = addresses.begin()->block;
  const std::size_t n_chunks = (examples.size() + kChunk - 1) / kChunk;

  std::vector<std::map<LayerAddress, Matrix>> partial(n_chunks);
  const auto nc = static_cast<std::ptrdiff_t>(n_chunks);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ci = 0; ci < nc; ++ci) {
    auto& acc = partial[static_cast<std::size_t>(ci)];
    for (const auto& a : addresses) acc.emplace(a, Matrix(model.weight(a).rows(), model.weight(a).cols()));
    const std::size_t lo = static_cast<std::size_t>(ci) * kChunk;
    const std::size_t hi = std::min(lo + kChunk, examples.size());
    for (std::size_t e = lo; e < hi; ++e) {
      const LossAndGrad lg = sequence_loss_and_grad(model, examples[e].scored(), min_block);
      for (const auto& a : addresses) {
        const Matrix& w = model.weight(a);
        const Matrix& g = lg.grad.weight(a);
        double* dst = acc.at(a).data();
        for (std::size_t i = 0; i < w.size(); ++i) dst[i] += std::fabs(w.data()[i] * g.data()[i]);
      }
    }
  }

  std::map<LayerAddress, ScoreMatrix> out;
  const double inv = 1.0 / static_cast<double>(examples.size());
  for (const auto& a : addresses) {
    ScoreMatrix s;
    s.address = a;
    s.method = ScoreMethod::kSnip;
    s.role = role;
    s.scores = std::move(partial[0].at(a));
    for (std::size_t c = 1; c < n_chunks; ++c) s.scores += partial[c].at(a);
    s.scores *= inv;
    out.emplace(a, std::move(s));
  }
  return out;
}

bool NeuronSet::contains(Coord c) const { return std::binary_search(coords.begin(), coords.end(), c); }

void NeuronSet::normalize() {
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  for (const auto& [r, c] : coords)
    if (r >= rows || c >= cols)
      throw ValidationError("coordinate (" + std::to_string(r) + "," + std::to_string(c) +
                            ") out of range for " + address.str());
}

std::size_t per_row_count(double p, std::size_t d_in) {
  if (!(p >= 0.0 && p <= 100.0)) throw ValidationError("fraction must be within [0, 100], got " + std::to_string(p));
  const double k = std::floor(p * static_cast<double>(d_in) / 100.0 + 0.5);
  return std::min(d_in, static_cast<std::size_t>(k));
}

NeuronSet top_fraction_per_row(const ScoreMatrix& scores, double p) {
  return select_per_row(scores, p, [](double a, double b) { return a > b; });
}

NeuronSet bottom_fraction_per_row(const ScoreMatrix& scores, double p) {
  return select_per_row(scores, p, [](double a, double b) { return a < b; });
}

NeuronSet set_difference(const NeuronSet& safety, const NeuronSet& utility) {
  check_same_layer(safety, utility, "set_difference");
  NeuronSet out = combine(safety, utility);
  std::set_difference(safety.coords.begin(), safety.coords.end(), utility.coords.begin(),
                      utility.coords.end(), std::back_inserter(out.coords));
  return out;
}

NeuronSet set_intersection(const NeuronSet& a, const NeuronSet& b) {
  check_same_layer(a, b, "set_intersection");
  NeuronSet out = combine(a, b);
  std::set_intersection(a.coords.begin(), a.coords.end(), b.coords.begin(), b.coords.end(),
                        std::back_inserter(out.coords));
  return out;
}

NeuronSet set_union(const NeuronSet& a, const NeuronSet& b) {
  check_same_layer(a, b, "set_union");
  NeuronSet out = combine(a, b);
  std::set_union(a.coords.begin(), a.coords.end(), b.coords.begin(), b.coords.end(),
                 std::back_inserter(out.coords));
  return out;
}

ModelCheckpoint apply_neuron_mask(const ModelCheckpoint& model, const NeuronSet& set, MaskMode mode) {
  const Matrix& w = model.weight(set.address);
  if (w.rows() != set.rows || w.cols() != set.cols)
    throw ValidationError("neuron set shape does not match " + set.address.str() + " " + w.shape_string());
  return apply_mask(model, set.address, set.coords, mode);
}

std::string format_neuron_sets(const std::vector<NeuronSet>& sets) {
  std::ostringstream os;
  for (const auto& s : sets) {
    os << s.address.str() << ":";
    for (const auto& [r, c] : s.coords) os << " (" << r << "," << c << ")";
    os << "\n";
  }
  return os.str();
}

std::vector<NeuronSet> parse_neuron_sets(const std::string& text, const ModelCheckpoint& shape) {
  std::vector<NeuronSet> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos)
      throw ValidationError("neuron set line " + std::to_string(lineno) + ": missing ':'");
    NeuronSet s;
    s.address = LayerAddress::parse(line.substr(0, colon));
    const Matrix& w = shape.weight(s.address);
    s.rows = w.rows();
    s.cols = w.cols();
    std::istringstream cs(line.substr(colon + 1));
    std::string tok;
    while (cs >> tok) {
      unsigned r = 0, c = 0;
      char tail = 0;
      if (std::sscanf(tok.c_str(), "(%u,%u%c", &r, &c, &tail) != 3 || tail != ')')
        throw ValidationError("neuron set line " + std::to_string(lineno) + ": bad coordinate '" + tok + "'");
      s.coords.emplace_back(r, c);
    }
    s.normalize();
    out.push_back(std::move(s));
  }
  return out;
}

std::string_view to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::kWandaTop: return "wanda-top";
    case PruneMethod::kSnipTop: return "snip-top";
    case PruneMethod::kWandaSetDiff: return "wanda-setdiff";
    case PruneMethod::kSnipSetDiff: return "snip-setdiff";
    case PruneMethod::kWandaBottom: return "wanda-bottom";
    case PruneMethod::kSnipBottom: return "snip-bottom";
  }
  throw InternalError("unreachable prune method");
}

PruneMethod parse_prune_method(std::string_view s) {
  for (PruneMethod m : {PruneMethod::kWandaTop, PruneMethod::kSnipTop, PruneMethod::kWandaSetDiff,
                        PruneMethod::kSnipSetDiff, PruneMethod::kWandaBottom, PruneMethod::kSnipBottom})
    if (to_string(m) == s) return m;
  throw ValidationError("unknown prune method '" + std::string(s) +
                        "' (expected wanda-top, snip-top, wanda-setdiff, snip-setdiff, wanda-bottom, snip-bottom)");
}

bool needs_utility(PruneMethod m) {
  return m == PruneMethod::kWandaSetDiff || m == PruneMethod::kSnipSetDiff;
}

ScoreMethod score_method(PruneMethod m) {
  switch (m) {
    case PruneMethod::kWandaTop:
    case PruneMethod::kWandaSetDiff:
    case PruneMethod::kWandaBottom:
      return ScoreMethod::kWanda;
    default:
      return ScoreMethod::kSnip;
  }
}

PruneResult blockwise_prune(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                            std::span<const CalibExample> utility, PruneMethod method,
                            const PruneParams& params) {
  if (safety.empty()) throw ValidationError("blockwise_prune: empty safety data");
  if (needs_utility(method) && utility.empty())
    throw ValidationError("blockwise_prune: method " + std::string(to_string(method)) + " needs utility data");
  (void)per_row_count(params.p, 1);
  (void)per_row_count(params.q, 1);

  auto score = [&](const ModelCheckpoint& m, std::span<const CalibExample> ex,
                   const std::set<LayerAddress>& addrs, Role role) {
    return score_method(method) == ScoreMethod::kWanda ? wanda_scores(m, ex, addrs, role)
                                                       : snip_score(m, ex, addrs, role);
  };

  PruneResult res;
  res.model = model;
  res.total = model.linear_parameter_count();
  for (std::size_t b = 0; b < model.config.n_blocks; ++b) {
    const auto addrs = block_addresses(b);
    // Nothing to select: skip the scoring work.
    const bool empty = needs_utility(method) ? params.q == 0.0 : params.p == 0.0;
    std::map<LayerAddress, ScoreMatrix> s_scores, u_scores;
    if (!empty) {
      s_scores = score(res.model, safety, addrs, Role::kSafety);
      if (needs_utility(method)) u_scores = score(res.model, utility, addrs, Role::kUtility);
    }
    for (const auto& a : addrs) {
      NeuronSet set;
      if (empty) {
        const Matrix& w = res.model.weight(a);
        set.address = a;
        set.rows = w.rows();
        set.cols = w.cols();
      } else if (needs_utility(method)) {
        set = set_difference(top_fraction_per_row(s_scores.at(a), params.q),
                             top_fraction_per_row(u_scores.at(a), params.p));
      } else if (method == PruneMethod::kWandaBottom || method == PruneMethod::kSnipBottom) {
        set = bottom_fraction_per_row(s_scores.at(a), params.p);
      } else {
        set = top_fraction_per_row(s_scores.at(a), params.p);
      }
      res.model = apply_neuron_mask(res.model, set, MaskMode::kZeroSelected);
      res.zeroed += set.size();
      res.sets.push_back(std::move(set));
    }
  }
  return res;
}

}  // namespace watk
