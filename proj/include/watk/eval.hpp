#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "watk/model.hpp"

namespace watk {

/// Literal substrings whose presence marks a response as a refusal. Matching
/// is case-sensitive.
class RefusalPatternList {
 public:
  explicit RefusalPatternList(std::vector<std::string> patterns);
  static RefusalPatternList standard();

  bool matches(std::string_view text) const;
  const std::vector<std::string>& patterns() const { return patterns_; }

 private:
  std::vector<std::string> patterns_;
};

struct DecodeOptions {
  std::size_t max_new = 24;
  Token eos = '\n';
  /// Stop as soon as the generated text contains one of these patterns.
  const RefusalPatternList* stop_on = nullptr;
};

/// Greedy continuation of BOS + prompt. The EOS byte, if produced, is kept.
std::string generate_greedy(const ModelCheckpoint& model, std::string_view prompt,
                            const DecodeOptions& opts);

/// Temperature sampling; draws come from `rng`.
std::string generate_sampled(const ModelCheckpoint& model, std::string_view prompt,
                             double temperature, std::mt19937_64& rng, const DecodeOptions& opts);

/// Fraction of prompts whose greedy response (with `preamble` prepended)
/// contains no refusal pattern.
double asr_vanilla(const ModelCheckpoint& model, const std::vector<std::string>& prompts,
                   const RefusalPatternList& patterns, std::string_view preamble,
                   std::size_t max_new);

struct AdvDecodingOptions {
  std::size_t samples = 5;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_new = 24;
};

/// Fraction of prompts for which at least one sampled response (no preamble)
/// contains no refusal pattern. Prompt i draws from a generator seeded by
/// (seed, i), so the result does not depend on evaluation order.
double asr_adv_decoding(const ModelCheckpoint& model, const std::vector<std::string>& prompts,
                        const RefusalPatternList& patterns, const AdvDecodingOptions& opts);

struct UtilityItem {
  std::string prompt;
  std::string answer;  // without the trailing EOS
};

struct UtilityScore {
  double accuracy = 0.0;
  double mean_nll = 0.0;
};

/// Exact-match accuracy of greedy answers (terminated by EOS) and the mean
/// conditional NLL of answer + EOS.
UtilityScore utility_eval(const ModelCheckpoint& model, const std::vector<UtilityItem>& items,
                          std::string_view preamble, std::size_t max_new);

/// Everything needed to score a checkpoint on both behaviors.
struct EvalSuite {
  std::string preamble;
  std::vector<std::string> harmful_prompts;
  std::vector<UtilityItem> utility_items;
  std::vector<std::string> patterns;
  std::size_t max_new = 24;
  std::size_t adv_samples = 5;
  double adv_temperature = 1.0;
  std::uint64_t adv_seed = 0;
};

struct EvalReport {
  double asr_vanilla = 0.0;
  std::optional<double> asr_adv_decoding;
  /// Adversarial-suffix ASR is not implemented; the slot stays empty.
  std::optional<double> asr_adv_suffix;
  double utility_accuracy = 0.0;
  double utility_nll = 0.0;
};

EvalReport evaluate(const ModelCheckpoint& model, const EvalSuite& suite, bool with_adv = true);

}  // namespace watk
