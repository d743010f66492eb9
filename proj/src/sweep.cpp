#include "watk/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace watk {

namespace {

std::set<LayerAddress> all_addresses(const ModelCheckpoint& m) {
  const auto v = m.linear_addresses();
  return {v.begin(), v.end()};
}

}  // namespace

std::vector<double> default_fraction_grid() { return {0, 1, 2, 3, 5, 8, 13, 21, 34, 55, 90}; }

std::vector<std::size_t> default_rank_grid(std::size_t big_r) {
  std::vector<std::size_t> g;
  for (std::size_t i = 0; i < 8; ++i)
    g.push_back(static_cast<std::size_t>(std::llround(static_cast<double>(i * big_r) / 7.0)));
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

void mark_pareto(std::vector<SweepRow>& rows) {
  for (auto& r : rows) {
    r.pareto = std::none_of(rows.begin(), rows.end(), [&](const SweepRow& o) {
      const double a0 = r.metrics.asr_vanilla, u0 = r.metrics.utility_accuracy;
      const double a1 = o.metrics.asr_vanilla, u1 = o.metrics.utility_accuracy;
      return a1 >= a0 && u1 >= u0 && (a1 > a0 || u1 > u0);
    });
  }
}

std::vector<SweepRow> sweep_neurons(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                                    std::span<const CalibExample> utility, const EvalSuite& suite,
                                    PruneMethod method, const std::vector<double>& p_grid,
                                    const std::vector<double>& q_grid, const SweepOptions& opts) {
  if (p_grid.empty() || q_grid.empty()) throw ValidationError("sweep_neurons: empty grid");
  std::vector<SweepRow> rows;
  for (double q : q_grid)
    for (double p : p_grid) {
      SweepRow r;
      r.p = p;
      r.q = q;
      rows.push_back(r);
    }
  const auto n = static_cast<std::ptrdiff_t>(rows.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, opts.jobs))
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    SweepRow& r = rows[static_cast<std::size_t>(i)];
    const PruneResult pr = blockwise_prune(model, safety, utility, method, {r.p, r.q});
    r.actual_sparsity = pr.actual_sparsity();
    r.metrics = evaluate(pr.model, suite, opts.with_adv);
  }
  mark_pareto(rows);
  return rows;
}

std::vector<SweepRow> sweep_ranks(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                                  std::span<const CalibExample> utility, const EvalSuite& suite,
                                  const std::vector<std::size_t>& ru_grid,
                                  const std::vector<std::size_t>& rs_grid, const SweepOptions& opts) {
  if (ru_grid.empty() || rs_grid.empty()) throw ValidationError("sweep_ranks: empty grid");
  std::size_t max_r = 0;
  std::vector<std::size_t> ranks;
  for (const auto& a : model.linear_addresses()) {
    ranks.push_back(weight_rank(model.weight(a)));
    max_r = std::max(max_r, ranks.back());
  }
  for (std::size_t v : ru_grid)
    if (v > max_r) throw ValidationError("sweep_ranks: r_u " + std::to_string(v) + " exceeds layer rank " + std::to_string(max_r));
  for (std::size_t v : rs_grid)
    if (v > max_r) throw ValidationError("sweep_ranks: r_s " + std::to_string(v) + " exceeds layer rank " + std::to_string(max_r));

  std::vector<SweepRow> rows;
  for (std::size_t rs : rs_grid)
    for (std::size_t ru : ru_grid) {
      SweepRow r;
      r.r_u = ru;
      r.r_s = rs;
      for (std::size_t big_r : ranks) r.rank_bound = std::max(r.rank_bound, rank_bound(big_r, ru, rs));
      rows.push_back(r);
    }
  const auto n = static_cast<std::ptrdiff_t>(rows.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, opts.jobs))
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    SweepRow& r = rows[static_cast<std::size_t>(i)];
    const RankIsolateResult res = blockwise_rank_isolate(model, utility, safety, {r.r_u, r.r_s});
    for (const auto& l : res.layers) r.delta_rank = std::max(r.delta_rank, l.delta_rank);
    r.metrics = evaluate(res.model, suite, opts.with_adv);
  }
  mark_pareto(rows);
  return rows;
}

double frozen_fraction(const ModelCheckpoint& model, const std::vector<NeuronSet>& frozen) {
  std::size_t n = 0;
  for (const auto& s : frozen) n += s.size();
  return static_cast<double>(n) / static_cast<double>(model.linear_parameter_count());
}

ModelCheckpoint finetune_frozen(const ModelCheckpoint& model, std::span<const CalibExample> data,
                                const std::vector<NeuronSet>& frozen, const FinetuneOptions& opts) {
  if (data.empty()) throw ValidationError("finetune_frozen: empty data");
  if (opts.batch == 0) throw ValidationError("finetune_frozen: batch must be positive");
  std::map<LayerAddress, Matrix> keep;  // 1 = trainable
  for (const auto& a : model.linear_addresses())
    keep.emplace(a, Matrix(model.weight(a).rows(), model.weight(a).cols(), 1.0));
  for (const auto& s : frozen) {
    Matrix& k = keep.at(s.address);
    if (k.rows() != s.rows || k.cols() != s.cols)
      throw ValidationError("finetune_frozen: frozen set shape does not match " + s.address.str());
    for (const auto& [r, c] : s.coords) {
      if (r >= k.rows() || c >= k.cols())
        throw ValidationError("finetune_frozen: frozen coordinate out of range in " + s.address.str());
      k(r, c) = 0.0;
    }
  }

  ModelCheckpoint out = model;
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const double inv = 1.0 / static_cast<double>(opts.batch);
  for (std::size_t step = 0; step < opts.steps; ++step) {
    std::map<LayerAddress, Matrix> grad;
    double loss = 0.0;
    for (std::size_t b = 0; b < opts.batch; ++b) {
      const LossAndGrad lg = sequence_loss_and_grad(out, data[pick(rng)].scored());
      loss += lg.loss * inv;
      for (const auto& a : out.linear_addresses()) {
        auto [it, fresh] = grad.try_emplace(a, lg.grad.weight(a));
        if (!fresh) it->second += lg.grad.weight(a);
      }
    }
    if (!std::isfinite(loss))
      throw ValidationError("finetune_frozen: loss diverged at step " + std::to_string(step));
    for (auto& [a, g] : grad) {
      const Matrix& k = keep.at(a);
      Matrix& w = out.weight(a);
      for (std::size_t i = 0; i < w.size(); ++i)
        if (k.data()[i] != 0.0) w.data()[i] -= opts.lr * g.data()[i] * inv;
    }
  }
  return out;
}

FreezeReport freeze_experiment(const ModelCheckpoint& model, std::span<const CalibExample> safety,
                               std::span<const CalibExample> finetune_data, const EvalSuite& suite,
                               const std::vector<double>& q_grid, const std::vector<std::size_t>& n_grid,
                               const FinetuneOptions& opts) {
  if (q_grid.empty() || n_grid.empty()) throw ValidationError("freeze_experiment: empty grid");
  for (std::size_t n : n_grid)
    if (n == 0 || n > finetune_data.size())
      throw ValidationError("freeze_experiment: n=" + std::to_string(n) + " outside [1, " +
                            std::to_string(finetune_data.size()) + "]");
  const RefusalPatternList patterns(suite.patterns);
  FreezeReport rep;
  rep.n_grid = n_grid;
  rep.base_asr = asr_vanilla(model, suite.harmful_prompts, patterns, suite.preamble, suite.max_new);
  const auto scores = snip_score(model, safety, all_addresses(model), Role::kSafety);
  for (double q : q_grid) {
    std::vector<NeuronSet> frozen;
    for (const auto& [a, s] : scores) frozen.push_back(top_fraction_per_row(s, q));
    FreezeRow row;
    row.q = q;
    row.frozen_fraction = frozen_fraction(model, frozen);
    for (std::size_t n : n_grid) {
      const ModelCheckpoint tuned = finetune_frozen(model, finetune_data.first(n), frozen, opts);
      row.asr.push_back(asr_vanilla(tuned, suite.harmful_prompts, patterns, suite.preamble, suite.max_new));
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace watk
