#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "saelab/activations.hpp"
#include "saelab/model.hpp"

namespace saelab {

enum class ValueDistribution : std::uint32_t { UniformUnit = 0, Exponential = 1 };

std::string to_string(ValueDistribution d);
ValueDistribution parse_value_distribution(const std::string& s);

/// Superposition dataset: more true features than dimensions, each token a
/// sparse nonnegative combination of unit dictionary rows plus Gaussian noise.
struct SyntheticSpec {
  std::size_t d_model = 32;
  std::size_t n_true_features = 128;
  double feature_sparsity = 4.0;  // expected active features per token
  ValueDistribution value_distribution = ValueDistribution::UniformUnit;
  double noise_std = 0.01;
  std::size_t n_tokens = 50000;
  std::uint64_t seed = 0;
  /// When > 0, tokens are labelled "g<i>" by the concept group (contiguous
  /// block of true features) owning their largest coefficient, or "none".
  std::size_t n_groups = 0;

  void validate() const;
};

struct GroundTruth {
  Matrix dictionary;               // n_true_features x d_model, unit rows
  std::vector<SparseCode> codes;   // per token; CodeEntry::feature is the true feature id
};

std::pair<ActivationBatch, GroundTruth> gen_synthetic(const SyntheticSpec& spec);

/// x = sum_j c_j * dictionary[j] + N(0, noise_std^2) per dimension.
Vector synthesize_token(const Matrix& dictionary, const SparseCode& code, double noise_std, Rng& rng);

/// "SAEG" layout: magic | version u32 | n_true u32 | d_model u32 | n_tokens u64
///   | dictionary f64 row-major | per token: u32 count, count x (u32 id, f64 value)
std::string serialize_ground_truth(const GroundTruth& truth);
GroundTruth parse_ground_truth(std::string_view bytes);
void write_ground_truth(const GroundTruth& truth, const std::string& path);
GroundTruth read_ground_truth(const std::string& path);

}  // namespace saelab
