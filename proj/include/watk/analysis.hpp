#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "watk/model.hpp"
#include "watk/neuron_attr.hpp"
#include "watk/rank_attr.hpp"

namespace watk {

/// |A n B| / |A u B|; 0 when both sets are empty.
double jaccard(const NeuronSet& a, const NeuronSet& b);

/// ||U_a^T U_b||_F^2 / min(rank_a, rank_b).
double subspace_similarity(const ProjectionBasis& a, const ProjectionBasis& b);
double subspace_similarity(const Matrix& ua, const Matrix& ub);

struct OverlapRecord {
  LayerAddress address;
  double value = 0.0;
};

struct ProbeSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Seeded split stratified by label: each class contributes round(2 n_c / 7)
/// examples to validation and the rest to training. Fewer than 7 examples in
/// a class is an error.
ProbeSplit stratified_split(const std::vector<int>& labels, std::uint64_t seed);

/// Logistic regression on standardized features (train-split statistics),
/// 200 full-batch gradient steps of size 0.1 from zero weights. Returns the
/// validation accuracy. `features` has one row per example.
double probe_accuracy(const Matrix& features, const std::vector<int>& labels, const ProbeSplit& split);

struct HeadProbe {
  std::size_t block = 0;
  std::size_t head = 0;
  double accuracy = 0.0;
};

struct ProbeResult {
  std::vector<HeadProbe> heads;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
};

/// Per-head features: the head's slice of the attention output (the input of
/// self_attn.o) at the last prompt position, prompt preceded by BOS.
std::vector<Matrix> head_features(const ModelCheckpoint& model, const std::vector<std::string>& prompts);

/// Label 1 = harmful, 0 = harmless.
ProbeResult probe_heads(const ModelCheckpoint& model, const std::vector<std::string>& harmful,
                        const std::vector<std::string>& harmless, std::uint64_t seed);

/// Zeroes the self_attn.o columns that read each listed (block, head).
ModelCheckpoint prune_heads(const ModelCheckpoint& model,
                            const std::vector<std::pair<std::size_t, std::size_t>>& heads);

}  // namespace watk
