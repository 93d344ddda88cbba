#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "saelab/model.hpp"

namespace saelab {

/// "SAEC" layout (little-endian), documented in docs/FORMATS.md:
///   magic "SAEC" | version u32 | architecture u32 | d_model u32 | n_experts u32
///   | expert_width u32 | e_active u32 | k u32 | scaling_mode u32 | flags u32
///   | parameter tensors as f64, in parameter_views() order.
/// Dense models store n_experts = e_active = 1, expert_width = n_features.
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFlagOutputBPre = 1u << 0;

std::string serialize_checkpoint(const SaeModel& model);
SaeModel parse_checkpoint(std::string_view bytes);

void write_checkpoint(const SaeModel& model, const std::string& path);
SaeModel read_checkpoint(const std::string& path);

}  // namespace saelab
