#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "watk/calib.hpp"
#include "watk/eval.hpp"
#include "watk/neuron_attr.hpp"
#include "watk/rank_attr.hpp"

namespace watk {

struct SweepRow {
  double p = 0.0;  // neuron grids
  double q = 0.0;
  std::size_t r_u = 0;  // rank grids
  std::size_t r_s = 0;
  double actual_sparsity = 0.0;
  /// min(r_u, R - r_s), maximized over layers.
  std::size_t rank_bound = 0;
  /// Largest numerical rank of an applied delta.
  std::size_t delta_rank = 0;
  EvalReport metrics;
  bool pareto = false;
};

/// Default percent grid {0, 1, 2, 3, 5, 8, 13, 21, 34, 55, 90}.
std::vector<double> default_fraction_grid();
/// Eight evenly spaced absolute ranks over [0, big_r].
std::vector<std::size_t> default_rank_grid(std::size_t big_r);

/// Flags rows not dominated in (asr_vanilla, utility_accuracy), both maximized.
void mark_pareto(std::vector<SweepRow>& rows);

struct SweepOptions {
  bool with_adv = true;
  int jobs = 1;
};

std::vector<SweepRow> sweep_neurons(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                                    std::span<const CalibExample> utility, const EvalSuite& suite,
                                    PruneMethod method, const std::vector<double>& p_grid,
                                    const std::vector<double>& q_grid, const SweepOptions& opts = {});

std::vector<SweepRow> sweep_ranks(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                                  std::span<const CalibExample> utility, const EvalSuite& suite,
                                  const std::vector<std::size_t>& ru_grid,
                                  const std::vector<std::size_t>& rs_grid, const SweepOptions& opts = {});

struct FinetuneOptions {
  std::size_t steps = 100;
  std::size_t batch = 4;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

/// SGD on the conditional loss over `data`, updating only the attributed
/// linear layers. Gradients at frozen coordinates are zeroed before every
/// update, so those weights keep their exact bits.
ModelCheckpoint finetune_frozen(const ModelCheckpoint& model, std::span<const CalibExample> data,
                                const std::vector<NeuronSet>& frozen, const FinetuneOptions& opts);

/// Fraction of attributed linear weights covered by `frozen`.
double frozen_fraction(const ModelCheckpoint& model, const std::vector<NeuronSet>& frozen);

struct FreezeRow {
  double q = 0.0;
  double frozen_fraction = 0.0;
  std::vector<double> asr;  // one per n in the report's n_grid
};

struct FreezeReport {
  std::vector<std::size_t> n_grid;
  double base_asr = 0.0;
  std::vector<FreezeRow> rows;
};

/// For every q: freeze the top-q% safety neurons (per row, SNIP on `safety`),
/// fine-tune on the first n examples of `finetune_data` for each n, and
/// measure ASR_vanilla.
FreezeReport freeze_experiment(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                               std::span<const CalibExample> finetune_data, const EvalSuite& suite,
                               const std::vector<double>& q_grid, const std::vector<std::size_t>& n_grid,
                               const FinetuneOptions& opts);

}  // namespace watk
