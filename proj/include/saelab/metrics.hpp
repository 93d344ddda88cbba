#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saelab/activations.hpp"
#include "saelab/datagen.hpp"
#include "saelab/model.hpp"

namespace saelab {

/// (l_zero - l_recon) / (l_zero - l_orig); throws "degenerate baseline" if l_zero == l_orig.
double loss_recovered(double l_zero, double l_recon, double l_orig);

struct RedundancyResult {
  double fraction = 0.0;     // over the rows that were analyzed
  std::size_t excluded = 0;  // zero-norm rows skipped
};

/// Fraction of rows whose maximum cosine similarity to any other row exceeds `threshold`.
RedundancyResult redundancy_fraction(const Matrix& features, double threshold = 0.9);

struct ExpertSimilarity {
  double intra = 0.0;
  double inter = 0.0;
};

/// Mean pairwise cosine similarity among the given rows of `features`.
double mean_pairwise_similarity(const Matrix& features, std::span<const std::size_t> rows);

/// Random feature sets of size `width` drawn without replacement from all
/// n_experts * width features; one set per resample.
std::vector<std::vector<std::size_t>> sample_cross_expert_sets(std::size_t n_experts, std::size_t width,
                                                               std::size_t sample_size, Rng& rng);

/// intra: mean over experts of the mean pairwise similarity of the expert's
/// decoder features. inter: mean over `sample_size` random cross-expert sets.
ExpertSimilarity intra_inter_similarity(const ScaleSae& model, std::size_t sample_size, Rng& rng);
ExpertSimilarity intra_inter_similarity(const Matrix& features, std::size_t n_experts, std::size_t width,
                                        std::size_t sample_size, Rng& rng);

struct ExpertActivationCdf {
  std::vector<std::size_t> expert;  // expert ids by descending activation count
  std::vector<std::uint64_t> count;
  Vector cumulative;                // nondecreasing, ends at 1
};

ExpertActivationCdf expert_activation_cdf(const ScaleSae& model, const Matrix& batch);
ExpertActivationCdf expert_activation_cdf(std::span<const std::uint64_t> counts);

/// Mean over ordered token pairs of |S_i & S_j| / k_total.
double activation_similarity(std::span<const SparseCode> codes, std::size_t k_total);

struct OverlapHistogram {
  std::vector<std::uint64_t> counts;  // counts[k] = unordered pairs sharing k latents
  std::uint64_t total() const;
};

OverlapHistogram overlap_histogram(std::span<const SparseCode> codes, std::size_t k_total);

/// Mean over truth rows of the best cosine similarity to any learned row.
double dictionary_recovery(const Matrix& learned, const Matrix& truth);

double measured_l0(std::span<const SparseCode> codes);

struct MetricsReport {
  double mse = 0.0;
  double measured_l0 = 0.0;
  std::optional<double> loss_recovered;
  double redundancy_fraction = 0.0;
  std::optional<double> intra_expert_sim;
  std::optional<double> inter_expert_sim;
  double activation_similarity = 0.0;
  std::optional<double> dictionary_recovery;
};

struct LossTriple {
  double l_zero = 0.0;
  double l_recon = 0.0;
  double l_orig = 0.0;
};

/// Parses a loss-triple record: three reals "l_zero l_recon l_orig", or the
/// same values as key=value pairs in any order.
LossTriple parse_loss_triple(std::string_view text);

struct EvalOptions {
  const GroundTruth* truth = nullptr;
  std::optional<LossTriple> losses;
  std::size_t inter_samples = 32;
  std::uint64_t seed = 0;
  /// Token cap for the O(N^2) activation-similarity computation.
  std::size_t max_pair_tokens = 1000;
  double redundancy_threshold = 0.9;
};

MetricsReport evaluate(const SaeModel& model, const ActivationBatch& data, const EvalOptions& opts = {});

}  // namespace saelab
