#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "watk/calib.hpp"
#include "watk/model.hpp"
#include "watk/tensor_file.hpp"

namespace watk {

/// Orthonormal basis U (d_out x r) of a left singular subspace, with the
/// singular values it was cut from. Pi = U U^T.
struct ProjectionBasis {
  LayerAddress address;
  Matrix u;
  Vector spectrum;  // the top-r singular values
  Role role = Role::kSafety;

  std::size_t rank() const { return u.cols(); }
  std::size_t d_out() const { return u.rows(); }
};

/// Zero-rank basis (Pi = 0) for a layer with `d_out` outputs.
ProjectionBasis empty_basis(const LayerAddress& address, std::size_t d_out, Role role);

/// Top-r left singular vectors of W X_in.
ProjectionBasis actsvd_basis(const Matrix& w, const ActivationMatrix& x, std::size_t r,
                             Role role = Role::kSafety);

/// Numerical rank of W X_in.
std::size_t activation_rank(const Matrix& w, const ActivationMatrix& x);

/// U U^T W.
Matrix project_keep(const Matrix& w, const ProjectionBasis& basis);

struct RankRemoval {
  Matrix w_hat;
  ProjectionBasis basis;
};

/// Keeps the top keep_r ActSVD ranks: W_hat = U U^T W.
RankRemoval remove_least_ranks(const Matrix& w, const ActivationMatrix& x, std::size_t keep_r,
                               Role role = Role::kSafety);

/// A weight update of bounded rank, optionally in LoRA form A B.
struct RankDelta {
  LayerAddress address;
  Matrix delta;
  std::size_t declared_rank_bound = 0;
  std::optional<std::pair<Matrix, Matrix>> factors;  // A: d_out x k, B: k x d_in
};

/// Rank of W used by the bound (singular values above 1e-10 sigma_1).
std::size_t weight_rank(const Matrix& w);

/// min(r_u, R - r_s) with r_u = R - rank(U^u) and r_s = R - rank(U^s).
std::size_t rank_bound(std::size_t big_r, std::size_t r_u, std::size_t r_s);

/// Delta W = (I - Pi^u) Pi^s W. The utility basis keeps R - r_u ranks and the
/// safety basis keeps R - r_s ranks, so rank(Delta W) <= min(r_u, R - r_s);
/// the bound is checked numerically and a violation is an InternalError.
RankDelta isolate_delta(const Matrix& w, const ProjectionBasis& utility,
                        const ProjectionBasis& safety);

/// Factors the delta through its numerical rank (singular values above
/// 1e-10 sigma_1): A = U_k diag(sigma_k), B = V_k^T.
RankDelta lora_factorize(RankDelta delta);

enum class AsvdMode { kMean, kMax };
AsvdMode parse_asvd_mode(std::string_view s);

/// ASVD: top-r left singular vectors of W S with S_ii = (mean_j |X_ij|)^alpha
/// or (max_j |X_ij|)^alpha.
ProjectionBasis asvd_basis(const Matrix& w, const ActivationMatrix& x, std::size_t r, double alpha,
                           AsvdMode mode, Role role = Role::kSafety);

/// Row weights sqrt(sum_j mean_x g_ij^2) for FWSVD.
struct FisherDiagonal {
  LayerAddress address;
  Vector values;  // d_out
};

std::map<LayerAddress, FisherDiagonal> fisher_diagonal(const ModelCheckpoint& model,
                                                       std::span<const CalibExample> examples,
                                                       const std::set<LayerAddress>& addresses);

/// FWSVD: top-r left singular vectors of diag(f) W, mapped back through
/// diag(f)^-1 and re-orthonormalized. f is floored at 1e-12 max(f).
ProjectionBasis fwsvd_basis(const Matrix& w, const FisherDiagonal& fisher, std::size_t r,
                            Role role = Role::kSafety);

/// Grid point for the block-wise rank drivers. Counts are absolute ranks.
struct RankIsolateParams {
  std::size_t r_u = 0;  // utility ranks discarded
  std::size_t r_s = 0;  // safety ranks discarded
};

struct RankLayerRecord {
  LayerAddress address;
  std::size_t big_r = 0;       // rank of W
  std::size_t keep_u = 0;      // rank of U^u actually used
  std::size_t keep_s = 0;      // rank of U^s actually used
  std::size_t bound = 0;       // declared bound
  std::size_t delta_rank = 0;  // numerical rank of the applied delta
};

struct RankIsolateResult {
  ModelCheckpoint model;
  std::vector<RankDelta> deltas;
  std::vector<RankLayerRecord> layers;
  /// Largest min(r_u, R - r_s) over layers, clamped at 0.
  std::size_t max_bound() const;
};

/// Block-wise orthogonal-projection isolation: each block's bases come from
/// captures on the model with earlier blocks already modified. A requested
/// keep count above the numerical rank of W X is reduced to that rank.
RankIsolateResult blockwise_rank_isolate(const ModelCheckpoint& model,
                                         std::span<const CalibExample> utility,
                                         std::span<const CalibExample> safety,
                                         const RankIsolateParams& params);

struct RankRemoveResult {
  ModelCheckpoint model;
  std::vector<ProjectionBasis> bases;
};

/// Block-wise least-rank removal: every layer keeps its top (R - removed)
/// ActSVD ranks on `examples`.
RankRemoveResult blockwise_rank_remove(const ModelCheckpoint& model,
                                       std::span<const CalibExample> examples, std::size_t removed,
                                       Role role = Role::kSafety);

/// Tensor-container names: "<b>.<layer>.U.<role>", "<b>.<layer>.sigma.<role>",
/// "<b>.<layer>.delta".
std::vector<NamedTensor> basis_tensors(const ProjectionBasis& basis);
std::vector<NamedTensor> delta_tensors(const RankDelta& delta);
ProjectionBasis basis_from_tensors(const TensorFile& file, const LayerAddress& address, Role role);

}  // namespace watk
