#include "saelab/checkpoint.hpp"

#include <cmath>

#include "binary_io.hpp"
#include "saelab/error.hpp"

namespace saelab {

std::string serialize_checkpoint(const SaeModel& model) {
  detail::ByteWriter w;
  w.raw("SAEC");
  w.u32(kCheckpointFormatVersion);
  w.u32(static_cast<std::uint32_t>(architecture_of(model)));
  if (const auto* d = std::get_if<DenseTopKSae>(&model)) {
    w.u32(static_cast<std::uint32_t>(d->d_model()));
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(d->n_features()));
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(d->k));
    w.u32(static_cast<std::uint32_t>(ScalingMode::Off));
    w.u32(kCheckpointFlagOutputBPre);
  } else {
    const auto& s = std::get<ScaleSae>(model);
    w.u32(static_cast<std::uint32_t>(s.d_model));
    w.u32(static_cast<std::uint32_t>(s.n_experts));
    w.u32(static_cast<std::uint32_t>(s.expert_width));
    w.u32(static_cast<std::uint32_t>(s.e_active));
    w.u32(static_cast<std::uint32_t>(s.k));
    w.u32(static_cast<std::uint32_t>(s.scaling_mode));
    w.u32(s.output_b_pre ? kCheckpointFlagOutputBPre : 0u);
  }
  for (const auto& p : parameter_views(model)) w.f64s(p.values);
  return w.take();
}

SaeModel parse_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("SAEC");
  const auto version_at = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointFormatVersion) {
    throw ParseError(version_at, "unsupported checkpoint version " + std::to_string(v));
  }
  const auto arch_at = r.offset();
  const auto arch = r.u32("architecture");
  if (arch > static_cast<std::uint32_t>(Architecture::Scale)) {
    throw ParseError(arch_at, "unknown architecture tag " + std::to_string(arch));
  }
  const std::size_t d_model = r.u32("d_model");
  const std::size_t n_experts = r.u32("n_experts");
  const std::size_t width = r.u32("expert_width");
  const std::size_t e_active = r.u32("e_active");
  const std::size_t k = r.u32("k");
  const auto mode_at = r.offset();
  const auto mode = r.u32("scaling_mode");
  if (mode > static_cast<std::uint32_t>(ScalingMode::Learned)) {
    throw ParseError(mode_at, "unknown scaling mode " + std::to_string(mode));
  }
  const auto flags_at = r.offset();
  const auto flags = r.u32("flags");
  if ((flags & ~kCheckpointFlagOutputBPre) != 0) throw ParseError(flags_at, "unknown flag bits");

  // Size check before allocating anything proportional to the header fields.
  const std::uint64_t expert_params = static_cast<std::uint64_t>(n_experts) * width * d_model;
  const std::uint64_t max_doubles = (bytes.size() - r.offset()) / 8;
  if (expert_params > max_doubles) {
    throw ParseError(r.offset(), "truncated file: header dimensions exceed payload");
  }

  SaeModel model;
  if (static_cast<Architecture>(arch) == Architecture::Dense) {
    DenseTopKSae d;
    d.w_enc = Matrix(width, d_model);
    d.w_dec = Matrix(d_model, width);
    d.b_pre.assign(d_model, 0.0);
    d.k = k;
    model = std::move(d);
  } else {
    ScaleSae s;
    s.d_model = d_model;
    s.n_experts = n_experts;
    s.expert_width = width;
    s.e_active = e_active;
    s.k = k;
    s.scaling_mode = static_cast<ScalingMode>(mode);
    s.output_b_pre = (flags & kCheckpointFlagOutputBPre) != 0;
    s.w_router = Matrix(n_experts, d_model);
    s.b_router.assign(d_model, 0.0);
    s.w_enc.assign(n_experts, Matrix(width, d_model));
    s.w_dec.assign(n_experts, Matrix(d_model, width));
    s.b_pre.assign(d_model, 0.0);
    if (s.scaling_mode == ScalingMode::Learned) s.a_lp.assign(n_experts, Matrix(width, d_model));
    if (s.architecture() != static_cast<Architecture>(arch)) {
      throw ParseError(arch_at, "architecture tag inconsistent with e_active/scaling_mode");
    }
    model = std::move(s);
  }
  for (auto& p : parameter_views(model)) {
    for (double& v : p.values) {
      const auto at = r.offset();
      v = r.f64(p.name.c_str());
      if (!std::isfinite(v)) throw ParseError(at, "non-finite value in " + p.name);
    }
  }
  if (!r.at_end()) throw ParseError(r.offset(), "trailing bytes after checkpoint payload");
  std::visit([](const auto& m) { m.validate(); }, model);
  return model;
}

void write_checkpoint(const SaeModel& model, const std::string& path) {
  detail::write_file(path, serialize_checkpoint(model));
}

SaeModel read_checkpoint(const std::string& path) { return parse_checkpoint(detail::read_file(path)); }

}  // namespace saelab
