#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "watk/errors.hpp"
#include "watk/tensor.hpp"

namespace watk {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

/// The seven attributable linear layers of a block.
enum class LayerName : std::uint8_t { kQ, kK, kV, kO, kGate, kUp, kDown };

inline constexpr std::array<LayerName, 7> kAllLayers = {
    LayerName::kQ,    LayerName::kK,  LayerName::kV,   LayerName::kO,
    LayerName::kGate, LayerName::kUp, LayerName::kDown};

std::string_view to_string(LayerName name);
std::optional<LayerName> parse_layer_name(std::string_view s);

struct LayerAddress {
  std::size_t block = 0;
  LayerName layer = LayerName::kQ;

  auto operator<=>(const LayerAddress&) const = default;
  /// "<block>.<layer>", e.g. "2.mlp.down".
  std::string str() const;
  static LayerAddress parse(std::string_view s);
};

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t n_blocks = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 172;
  std::size_t max_seq = 256;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct BlockWeights {
  Matrix attn_q, attn_k, attn_v, attn_o;  // d_model x d_model
  Matrix mlp_gate, mlp_up;                // d_ff x d_model
  Matrix mlp_down;                        // d_model x d_ff
  Vector norm1, norm2;                    // d_model

  Matrix& layer(LayerName name);
  const Matrix& layer(LayerName name) const;

  bool operator==(const BlockWeights&) const = default;
};

/// Weights of the pre-norm decoder: learned token and absolute position
/// embeddings, per block RMS-normed attention and gated MLP, final RMS norm,
/// untied unembedding. No biases.
struct ModelCheckpoint {
  ModelConfig config;
  Matrix embed;      // vocab x d_model
  Matrix pos_embed;  // max_seq x d_model
  std::vector<BlockWeights> blocks;
  Vector final_norm;  // d_model
  Matrix unembed;     // vocab x d_model
  /// Configuration of the run that produced this checkpoint (JSON), if any.
  std::string run_config;

  static ModelCheckpoint zeros(const ModelConfig& config);
  /// Gaussian init (std 0.02, output projections scaled by 1/sqrt(2 n_blocks)),
  /// unit norm gains.
  static ModelCheckpoint random(const ModelConfig& config, std::uint64_t seed);

  Matrix& weight(const LayerAddress& a);
  const Matrix& weight(const LayerAddress& a) const;

  /// Throws ModelError on shape inconsistency or non-finite entries.
  void validate() const;

  /// Every linear-layer address, block-major then in kAllLayers order.
  std::vector<LayerAddress> linear_addresses() const;
  /// Number of entries over all attributable linear layers.
  std::size_t linear_parameter_count() const;

  /// Visit every parameter buffer (including embeddings and norms) in a
  /// fixed order.
  template <typename Fn>
  void for_each_buffer(Fn&& fn);
  template <typename Fn>
  void for_each_buffer(Fn&& fn) const;

  /// Round all parameters to float32, the storage precision.
  void round_to_storage();

  bool operator==(const ModelCheckpoint&) const = default;
};

using GradientSet = std::map<LayerAddress, Matrix>;

/// Which linear-layer inputs to record during a forward pass, and over which
/// token positions [pos_begin, pos_end).
struct CaptureSpec {
  std::set<LayerAddress> addresses;
  std::size_t pos_begin = 0;
  std::size_t pos_end = static_cast<std::size_t>(-1);
  /// Skip blocks after the last captured one and the unembedding.
  bool stop_after_last_capture = false;
};

struct ForwardResult {
  Matrix logits;  // seq_len x vocab; empty when the pass stopped early
  /// address -> layer input, d_in x n (one column per captured position)
  std::map<LayerAddress, Matrix> captures;
};

ForwardResult forward(const ModelCheckpoint& model, std::span<const Token> tokens,
                      const CaptureSpec* capture = nullptr);

/// A tokenized sequence scored on its response span: positions
/// [response_begin, tokens.size()) are the targets.
struct ScoredSequence {
  TokenSeq tokens;
  std::size_t response_begin = 0;
};

/// Mean negative log-likelihood of the response tokens given everything before.
double sequence_loss(const ModelCheckpoint& model, const ScoredSequence& seq);

/// Loss and full parameter gradient (same layout as the model). Gradients for
/// blocks below `min_block` are left at zero and their backward work skipped.
struct LossAndGrad {
  double loss = 0.0;
  ModelCheckpoint grad;
};
LossAndGrad sequence_loss_and_grad(const ModelCheckpoint& model, const ScoredSequence& seq,
                                   std::size_t min_block = 0);

/// Extract the linear-layer gradients as an attribution GradientSet.
GradientSet linear_gradients(const ModelCheckpoint& grad);

enum class MaskMode { kZeroSelected, kKeepSelected };

/// Returns a copy with the selected coordinates of one layer zeroed
/// (kZeroSelected) or with everything except them zeroed (kKeepSelected).
ModelCheckpoint apply_mask(const ModelCheckpoint& model, const LayerAddress& address,
                           std::span<const std::pair<std::uint32_t, std::uint32_t>> coords,
                           MaskMode mode);

/// Returns a copy with W := W - delta for the addressed layer.
ModelCheckpoint subtract_delta(const ModelCheckpoint& model, const LayerAddress& address,
                               const Matrix& delta);

/// Single-token stepping decoder with a key/value cache. Produces the same
/// logits as `forward` on the full prefix.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ModelCheckpoint& model);

  /// Feed one token; returns the logits predicting the next one.
  Vector step(Token token);
  std::size_t position() const { return pos_; }

 private:
  const ModelCheckpoint* model_;
  std::size_t pos_ = 0;
  std::vector<std::vector<double>> keys_;    // per block, pos x d_model
  std::vector<std::vector<double>> values_;  // per block, pos x d_model
};

// ---------------------------------------------------------------------------

template <typename Fn>
void ModelCheckpoint::for_each_buffer(Fn&& fn) {
  fn(std::string("embed"), std::span<double>(embed.storage()));
  fn(std::string("pos_embed"), std::span<double>(pos_embed.storage()));
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& bw = blocks[b];
    const std::string p = std::to_string(b) + ".";
    for (LayerName n : kAllLayers)
      fn(p + std::string(to_string(n)), std::span<double>(bw.layer(n).storage()));
    fn(p + "norm1", std::span<double>(bw.norm1));
    fn(p + "norm2", std::span<double>(bw.norm2));
  }
  fn(std::string("final_norm"), std::span<double>(final_norm));
  fn(std::string("unembed"), std::span<double>(unembed.storage()));
}

template <typename Fn>
void ModelCheckpoint::for_each_buffer(Fn&& fn) const {
  const_cast<ModelCheckpoint*>(this)->for_each_buffer(
      [&](const std::string& name, std::span<double> buf) {
        fn(name, std::span<const double>(buf.data(), buf.size()));
      });
}

}  // namespace watk
