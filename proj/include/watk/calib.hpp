#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "watk/model.hpp"

namespace watk {

/// Byte-level tokenizer: one token per byte, vocabulary 256. Token 0 (NUL)
/// doubles as the beginning-of-sequence marker placed before every prompt.
inline constexpr Token kBosToken = 0;

TokenSeq byte_tokenize(std::string_view text);
std::string detokenize(std::span<const Token> tokens);

/// One (prompt, response) pair.
struct CalibExample {
  std::string prompt;
  std::string response;
  TokenSeq prompt_tokens;
  TokenSeq response_tokens;
  bool oversized = false;

  /// Model input: BOS, prompt, response. Response targets start after the prompt.
  ScoredSequence scored() const;
  /// Position of the first response token in the model input.
  std::size_t response_begin() const { return 1 + prompt_tokens.size(); }
};

/// Fills the token fields. Empty responses are rejected (ValidationError);
/// sequences longer than max_seq (BOS included) are flagged `oversized`.
CalibExample tokenize(CalibExample example, std::size_t max_seq);

/// Mean NLL of the response given the prompt.
double conditional_loss(const ModelCheckpoint& model, const CalibExample& example);
/// Gradient of conditional_loss for every linear layer.
GradientSet grad_loss(const ModelCheckpoint& model, const CalibExample& example);

enum class Role { kSafety, kUtility };
std::string_view to_string(Role role);
Role parse_role(std::string_view s);

struct CalibDataset {
  std::string name;
  Role role = Role::kSafety;
  std::vector<CalibExample> examples;
  std::size_t sample_cap = 128;
};

struct LoadReport {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<std::string> messages;  // one per rejected line
};

/// Reads JSONL records with string fields "prompt" and "response". Invalid
/// lines are skipped and counted; zero valid records is an error. A record
/// holding only "run_config" is ignored.
CalibDataset load_dataset(const std::filesystem::path& path, Role role, std::size_t max_seq,
                          LoadReport* report = nullptr);

/// Writes examples as JSONL (prompt/response only). A non-empty run config
/// (JSON text) goes first as a {"run_config": ...} record, which the loader skips.
void write_dataset(const std::filesystem::path& path, const std::vector<CalibExample>& examples,
                   const std::string& run_config = {});

/// Indices of the examples used for calibration: a seeded shuffle truncated to
/// sample_cap, returned in ascending order.
std::vector<std::size_t> sample_indices(const CalibDataset& dataset, std::uint64_t seed);

/// Captured response-position inputs for one linear layer.
struct ActivationMatrix {
  LayerAddress address;
  Matrix data;  // d_in x n
  std::size_t n() const { return data.cols(); }
};

/// Runs the sampled examples through the model and concatenates, per address,
/// the layer inputs at response-token positions, ordered by (example, position).
std::map<LayerAddress, ActivationMatrix> capture_activations(const ModelCheckpoint& model,
                                                             const CalibDataset& dataset,
                                                             const std::set<LayerAddress>& addresses,
                                                             std::uint64_t seed);

/// Same as above on an explicit list of examples (all used, in order).
std::map<LayerAddress, ActivationMatrix> capture_examples(const ModelCheckpoint& model,
                                                          std::span<const CalibExample> examples,
                                                          const std::set<LayerAddress>& addresses);

/// The examples selected by sample_indices, in order.
std::vector<CalibExample> sampled_examples(const CalibDataset& dataset, std::uint64_t seed);

}  // namespace watk
