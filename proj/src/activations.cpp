#include "saelab/activations.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "binary_io.hpp"
#include "saelab/error.hpp"

namespace saelab {

std::string serialize_activations(const ActivationBatch& batch) {
  if (batch.has_labels() && batch.labels.size() != batch.n_tokens()) {
    throw Error(ErrorKind::Shape, "label count " + std::to_string(batch.labels.size()) +
                                      " does not match n_tokens " + std::to_string(batch.n_tokens()));
  }
  detail::ByteWriter w;
  w.raw("SAEA");
  w.u32(kActivationFormatVersion);
  w.u64(batch.n_tokens());
  w.u32(static_cast<std::uint32_t>(batch.d_model()));
  w.u32(batch.has_labels() ? kActivationFlagLabels : 0u);
  for (double v : batch.values.data()) w.f32(static_cast<float>(v));
  for (const auto& label : batch.labels) {
    w.u32(static_cast<std::uint32_t>(label.size()));
    w.raw(label);
  }
  return w.take();
}

ActivationBatch parse_activations(std::string_view bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("SAEA");
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kActivationFormatVersion) {
    throw ParseError(version_at, "unsupported activation format version " + std::to_string(version));
  }
  const auto n_tokens = r.u64("n_tokens");
  const auto d_model = r.u32("d_model");
  const auto flags_at = r.offset();
  const auto flags = r.u32("flags");
  if ((flags & ~kActivationFlagLabels) != 0) {
    throw ParseError(flags_at, "unknown flag bits " + std::to_string(flags & ~kActivationFlagLabels));
  }
  // Reject impossible headers before allocating.
  const std::uint64_t remaining = bytes.size() - r.offset();
  if (d_model != 0 && n_tokens > remaining / 4 / d_model) {
    const std::uint64_t complete = remaining / 4;
    throw ParseError(r.offset() + complete * 4, "truncated file: missing activation value");
  }
  ActivationBatch batch;
  batch.values = Matrix(n_tokens, d_model);
  for (double& v : batch.values.data()) {
    const auto at = r.offset();
    const float f = r.f32("activation value");
    if (!std::isfinite(f)) throw ParseError(at, "non-finite activation value");
    v = static_cast<double>(f);
  }
  if (flags & kActivationFlagLabels) {
    batch.labels.reserve(n_tokens);
    for (std::uint64_t t = 0; t < n_tokens; ++t) {
      const auto len = r.u32("label length");
      batch.labels.emplace_back(r.raw(len, "label bytes"));
    }
  }
  if (!r.at_end()) throw ParseError(r.offset(), "trailing bytes after activation payload");
  return batch;
}

void write_activations(const ActivationBatch& batch, const std::string& path) {
  detail::write_file(path, serialize_activations(batch));
}

ActivationBatch read_activations(const std::string& path) {
  return parse_activations(detail::read_file(path));
}

ActivationBatch token_subset(const ActivationBatch& batch,
                             const std::function<bool(const std::string&)>& keep) {
  if (!batch.has_labels()) throw Error(ErrorKind::Capability, "batch has no token labels");
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < batch.n_tokens(); ++t)
    if (keep(batch.labels[t])) rows.push_back(t);
  ActivationBatch out;
  out.values = Matrix(rows.size(), batch.d_model());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = batch.values.row(rows[i]);
    std::copy(src.begin(), src.end(), out.values.row(i).begin());
    out.labels.push_back(batch.labels[rows[i]]);
  }
  return out;
}

ActivationBatch slice(const ActivationBatch& batch, std::size_t begin, std::size_t end) {
  end = std::min(end, batch.n_tokens());
  begin = std::min(begin, end);
  ActivationBatch out;
  out.values = Matrix(end - begin, batch.d_model());
  for (std::size_t t = begin; t < end; ++t) {
    auto src = batch.values.row(t);
    std::copy(src.begin(), src.end(), out.values.row(t - begin).begin());
    if (batch.has_labels()) out.labels.push_back(batch.labels[t]);
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace saelab
