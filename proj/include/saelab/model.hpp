#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "saelab/linalg.hpp"
#include "saelab/rng.hpp"

namespace saelab {

enum class Architecture : std::uint32_t { Dense = 0, Switch = 1, Scale = 2 };

/// How the low-frequency baseline of an expert encoder is defined.
enum class ScalingMode : std::uint32_t {
  Off = 0,
  MeanBased = 1,      // baseline = mean encoder row
  IdentityBased = 2,  // baseline = I (square encoders only)
  Learned = 3,        // baseline = trainable matrix
};

std::string to_string(Architecture a);
std::string to_string(ScalingMode m);
Architecture parse_architecture(const std::string& s);
ScalingMode parse_scaling_mode(const std::string& s);

/// One active latent. `feature` is local to `expert` (expert is 0 for dense models).
struct CodeEntry {
  std::uint32_t expert = 0;
  std::uint32_t feature = 0;
  double value = 0.0;

  friend bool operator==(const CodeEntry&, const CodeEntry&) = default;
};

/// Active latents of a single token, ordered by value descending.
using SparseCode = std::vector<CodeEntry>;

struct DenseTopKSae {
  Matrix w_enc;  // n_features x d_model
  Matrix w_dec;  // d_model x n_features
  Vector b_pre;  // d_model
  std::size_t k = 0;

  std::size_t d_model() const { return b_pre.size(); }
  std::size_t n_features() const { return w_enc.rows(); }
  void validate() const;
};

struct ScaleSae {
  std::size_t n_experts = 0;
  std::size_t expert_width = 0;
  std::size_t e_active = 0;
  std::size_t k = 0;
  std::size_t d_model = 0;
  Matrix w_router;            // n_experts x d_model
  Vector b_router;            // d_model
  std::vector<Matrix> w_enc;  // per expert, expert_width x d_model
  std::vector<Matrix> w_dec;  // per expert, d_model x expert_width
  Vector b_pre;               // d_model
  double omega = 0.0;
  ScalingMode scaling_mode = ScalingMode::Off;
  std::vector<Matrix> a_lp;   // per expert, present iff scaling_mode == Learned
  /// Re-add b_pre after the weighted expert sum.
  bool output_b_pre = true;

  /// Switch when a single expert is active and scaling is off.
  Architecture architecture() const;
  std::size_t n_features() const { return n_experts * expert_width; }
  void validate() const;
};

using SaeModel = std::variant<DenseTopKSae, ScaleSae>;

Architecture architecture_of(const SaeModel& m);
std::size_t d_model_of(const SaeModel& m);
std::size_t k_of(const SaeModel& m);

struct ScaleShape {
  std::size_t d_model = 0;
  std::size_t n_experts = 1;
  std::size_t expert_width = 0;
  std::size_t e_active = 1;
  std::size_t k = 1;
  ScalingMode scaling_mode = ScalingMode::Off;
  bool output_b_pre = true;
};

/// Encoder rows ~ N(0, 1/d_model); decoder = encoder^T with unit columns.
DenseTopKSae init_dense(std::size_t d_model, std::size_t n_features, std::size_t k, Rng& rng);
/// Experts initialized as for the dense model, router ~ N(0, 1/d_model),
/// omega = 0, learned baselines start at the mean encoder row.
ScaleSae init_scale(const ScaleShape& shape, Rng& rng);

struct ParamView {
  std::string name;
  std::span<double> values;
};
struct ConstParamView {
  std::string name;
  std::span<const double> values;
};

/// Trainable tensors in checkpoint declaration order.
std::vector<ParamView> parameter_views(SaeModel& m);
std::vector<ConstParamView> parameter_views(const SaeModel& m);

/// Same shapes as `m`, every trainable entry zero.
SaeModel zeros_like(const SaeModel& m);

/// Effective encoder: baseline + (1 + omega) * (w - baseline).
/// Off returns `w` unchanged; IdentityBased requires a square matrix;
/// Learned requires `a_lp` of the same shape.
Matrix scaled_encoder(const Matrix& w, double omega, ScalingMode mode, const Matrix* a_lp = nullptr);

/// Effective encoders of every expert of `model`.
std::vector<Matrix> effective_encoders(const ScaleSae& model);

struct RouteResult {
  std::vector<std::size_t> selected;  // ascending expert id, size e_active
  Vector probs;                       // softmax over all experts
  Vector logits;
};

RouteResult route(const ScaleSae& model, std::span<const double> x);

/// Keeps the k largest strictly positive pre-activations across the experts in
/// `selected`. Ties go to the lower (expert, feature) pair.
SparseCode encode_global_topk(const ScaleSae& model, std::span<const Matrix> encoders,
                              std::span<const double> x, std::span<const std::size_t> selected);
SparseCode encode_global_topk(const ScaleSae& model, std::span<const double> x,
                              std::span<const std::size_t> selected);

struct ForwardTrace {
  std::vector<std::size_t> selected_experts;
  Vector router_probs;
  SparseCode code;
  Vector reconstruction;
};

/// x_hat = sum_{i in T} p_i(x) W_dec_i z_i (+ b_pre).
ForwardTrace reconstruct(const ScaleSae& model, std::span<const Matrix> encoders,
                         std::span<const double> x);
ForwardTrace reconstruct(const ScaleSae& model, std::span<const double> x);

/// Single-expert forward; throws Capability if e_active != 1.
ForwardTrace forward_switch(const ScaleSae& model, std::span<const double> x);

struct DenseOutput {
  SparseCode code;
  Vector reconstruction;
};

DenseOutput forward_dense(const DenseTopKSae& model, std::span<const double> x);

/// Decoder columns as unit-norm rows, global feature order (expert-major).
Matrix decoder_features(const SaeModel& m);

/// Encodes every row of `batch`; returns one code per token.
std::vector<SparseCode> encode_batch(const SaeModel& m, const Matrix& batch);
/// Reconstructions of every row of `batch`.
Matrix reconstruct_batch(const SaeModel& m, const Matrix& batch);

/// Rescale each decoder column to unit Euclidean norm (zero columns untouched).
void normalize_decoder_columns(SaeModel& m);

}  // namespace saelab
