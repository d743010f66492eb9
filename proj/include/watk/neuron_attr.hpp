#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "watk/calib.hpp"
#include "watk/model.hpp"

namespace watk {

enum class ScoreMethod { kWanda, kSnip };
std::string_view to_string(ScoreMethod m);
ScoreMethod parse_score_method(std::string_view s);

/// Per-entry importance I(W) for one layer; non-negative, same shape as W.
struct ScoreMatrix {
  LayerAddress address;
  Matrix scores;
  ScoreMethod method = ScoreMethod::kWanda;
  Role role = Role::kSafety;
};

/// S_ij = |W_ij| * ||X_j||_2, the norm taken over all captured columns.
ScoreMatrix wanda_score(const Matrix& w, const ActivationMatrix& x);

/// I(W) = mean over examples of |W (.) grad_W L(x)| for each requested layer.
std::map<LayerAddress, ScoreMatrix> snip_score(const ModelCheckpoint& model,
                                               std::span<const CalibExample> examples,
                                               const std::set<LayerAddress>& addresses, Role role);

/// Wanda scores for every requested layer from one capture pass.
std::map<LayerAddress, ScoreMatrix> wanda_scores(const ModelCheckpoint& model,
                                                 std::span<const CalibExample> examples,
                                                 const std::set<LayerAddress>& addresses, Role role);

using Coord = std::pair<std::uint32_t, std::uint32_t>;

/// Sorted, duplicate-free weight coordinates of one layer plus the selection
/// parameters that produced them.
struct NeuronSet {
  LayerAddress address;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Coord> coords;
  std::optional<double> p;  // utility fraction (percent)
  std::optional<double> q;  // safety fraction (percent)

  std::size_t size() const { return coords.size(); }
  bool contains(Coord c) const;
  /// Sorts and removes duplicates; throws on out-of-range coordinates.
  void normalize();
};

/// Entries per row selected for fraction p (percent) of d_in, rounded half up.
std::size_t per_row_count(double p, std::size_t d_in);

/// Per row, the k = per_row_count(p, cols) highest scores (ties: lower column
/// first). The result records the fraction in `p` for utility scores and in
/// `q` for safety scores.
NeuronSet top_fraction_per_row(const ScoreMatrix& scores, double p);
/// Per row, the k lowest scores (ties: lower column first).
NeuronSet bottom_fraction_per_row(const ScoreMatrix& scores, double p);

/// S(p,q) = S^s(q) - S^u(p).
NeuronSet set_difference(const NeuronSet& safety, const NeuronSet& utility);
NeuronSet set_intersection(const NeuronSet& a, const NeuronSet& b);
NeuronSet set_union(const NeuronSet& a, const NeuronSet& b);

ModelCheckpoint apply_neuron_mask(const ModelCheckpoint& model, const NeuronSet& set, MaskMode mode);

/// Text form, one layer per line: "block.layer: (r,c) (r,c) ...".
std::string format_neuron_sets(const std::vector<NeuronSet>& sets);
std::vector<NeuronSet> parse_neuron_sets(const std::string& text, const ModelCheckpoint& shape);

enum class PruneMethod { kWandaTop, kSnipTop, kWandaSetDiff, kSnipSetDiff, kWandaBottom, kSnipBottom };
std::string_view to_string(PruneMethod m);
PruneMethod parse_prune_method(std::string_view s);
bool needs_utility(PruneMethod m);
ScoreMethod score_method(PruneMethod m);

struct PruneParams {
  double p = 0.0;  // utility fraction for set difference; the fraction for top/bottom methods
  double q = 0.0;  // safety fraction for set difference
};

struct PruneResult {
  ModelCheckpoint model;
  std::vector<NeuronSet> sets;  // one per attributed layer, block-major
  std::size_t zeroed = 0;
  std::size_t total = 0;
  double actual_sparsity() const {
    return total ? static_cast<double>(zeroed) / static_cast<double>(total) : 0.0;
  }
};

/// Block-by-block pruning. Each block's seven layers are scored on the
/// current, partially pruned model, masked, and only then is the next block
/// scored. Top and bottom methods score the safety examples; set-difference
/// methods score both sets.
PruneResult blockwise_prune(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                            std::span<const CalibExample> utility, PruneMethod method,
                            const PruneParams& params);

}  // namespace watk
