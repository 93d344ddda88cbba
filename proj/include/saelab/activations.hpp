#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "saelab/linalg.hpp"

namespace saelab {

/// Batch of activation vectors, one row per token, with optional labels.
struct ActivationBatch {
  Matrix values;                    // n_tokens x d_model
  std::vector<std::string> labels;  // empty, or one per token

  std::size_t n_tokens() const { return values.rows(); }
  std::size_t d_model() const { return values.cols(); }
  bool has_labels() const { return !labels.empty(); }
};

/// "SAEA" on-disk layout (all little-endian):
///   magic "SAEA" | version u32 | n_tokens u64 | d_model u32 | flags u32
///   | n_tokens*d_model float32 row-major
///   | if flags bit 0: n_tokens x (u32 byte length, UTF-8 bytes)
inline constexpr std::uint32_t kActivationFormatVersion = 1;
inline constexpr std::uint32_t kActivationFlagLabels = 1u << 0;

std::string serialize_activations(const ActivationBatch& batch);
/// Throws ParseError naming the byte offset on bad magic, version, flags or truncation.
ActivationBatch parse_activations(std::string_view bytes);

void write_activations(const ActivationBatch& batch, const std::string& path);
ActivationBatch read_activations(const std::string& path);

/// Rows whose label satisfies `keep`, order preserved. Throws if the batch has no labels.
ActivationBatch token_subset(const ActivationBatch& batch,
                             const std::function<bool(const std::string&)>& keep);

/// Rows [begin, end) as a new batch.
ActivationBatch slice(const ActivationBatch& batch, std::size_t begin, std::size_t end);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace saelab
