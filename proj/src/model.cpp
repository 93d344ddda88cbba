#include "saelab/model.hpp"

#include <algorithm>
#include <cmath>

#include "saelab/error.hpp"

namespace saelab {

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorKind::Usage, what); }

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorKind::Shape, name + " has shape " + m.shape_str() + ", expected (" +
                                      std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
}

void require_len(const Vector& v, std::size_t n, const std::string& name) {
  if (v.size() != n) {
    throw Error(ErrorKind::Shape, name + " has length " + std::to_string(v.size()) +
                                      ", expected " + std::to_string(n));
  }
}

void require_input(std::span<const double> x, std::size_t d_model) {
  if (x.size() != d_model) {
    throw Error(ErrorKind::Shape, "input has length " + std::to_string(x.size()) +
                                      ", model expects d_model = " + std::to_string(d_model));
  }
}

Vector centered(std::span<const double> x, const Vector& bias) {
  Vector u(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) u[j] = x[j] - bias[j];
  return u;
}

Matrix gaussian(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * scale;
  return m;
}

void normalize_columns(Matrix& m) {
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double sq = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) sq += m(r, c) * m(r, c);
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) *= inv;
  }
}

Matrix tied_decoder(const Matrix& w_enc) {
  Matrix dec = transpose(w_enc);
  normalize_columns(dec);
  return dec;
}

// Candidates must be supplied in ascending (expert, feature) order so that
// topk_select's lowest-index tie-break means lowest id.
SparseCode keep_top_positive(const std::vector<CodeEntry>& candidates, std::size_t k) {
  Vector values(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) values[i] = candidates[i].value;
  SparseCode code;
  for (std::size_t idx : topk_select(values, k)) code.push_back(candidates[idx]);
  return code;
}

void append_positive(const Matrix& encoder, std::span<const double> u, std::uint32_t expert,
                     std::vector<CodeEntry>& out) {
  for (std::size_t j = 0; j < encoder.rows(); ++j) {
    const double f = dot(encoder.row(j), u);
    if (f > 0.0) out.push_back({expert, static_cast<std::uint32_t>(j), f});
  }
}

// out += scale * (w_dec z), restricted to code entries owned by `expert`.
void decode_accumulate(const Matrix& w_dec, const SparseCode& code, std::uint32_t expert,
                       double scale, Vector& out) {
  for (std::size_t r = 0; r < w_dec.rows(); ++r) {
    double e = 0.0;
    for (const auto& c : code) {
      if (c.expert == expert) e += w_dec(r, c.feature) * c.value;
    }
    out[r] += scale * e;
  }
}

}  // namespace

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::Dense: return "dense";
    case Architecture::Switch: return "switch";
    case Architecture::Scale: return "scale";
  }
  return "unknown";
}

std::string to_string(ScalingMode m) {
  switch (m) {
    case ScalingMode::Off: return "off";
    case ScalingMode::MeanBased: return "mean";
    case ScalingMode::IdentityBased: return "identity";
    case ScalingMode::Learned: return "learned";
  }
  return "unknown";
}

Architecture parse_architecture(const std::string& s) {
  if (s == "dense") return Architecture::Dense;
  if (s == "switch") return Architecture::Switch;
  if (s == "scale") return Architecture::Scale;
  invalid("unknown architecture '" + s + "' (expected dense, switch or scale)");
}

ScalingMode parse_scaling_mode(const std::string& s) {
  if (s == "off") return ScalingMode::Off;
  if (s == "mean") return ScalingMode::MeanBased;
  if (s == "identity") return ScalingMode::IdentityBased;
  if (s == "learned") return ScalingMode::Learned;
  invalid("unknown scaling mode '" + s + "' (expected off, mean, identity or learned)");
}

void DenseTopKSae::validate() const {
  const std::size_t d = b_pre.size();
  const std::size_t n = w_enc.rows();
  if (d == 0 || n == 0) invalid("dense SAE needs d_model >= 1 and n_features >= 1");
  require_shape(w_enc, n, d, "w_enc");
  require_shape(w_dec, d, n, "w_dec");
  if (k == 0 || k > n) invalid("k must be in [1, n_features]");
}

Architecture ScaleSae::architecture() const {
  return e_active == 1 && scaling_mode == ScalingMode::Off ? Architecture::Switch
                                                           : Architecture::Scale;
}

void ScaleSae::validate() const {
  if (d_model == 0 || n_experts == 0 || expert_width == 0) {
    invalid("d_model, n_experts and expert_width must be >= 1");
  }
  if (e_active < 1 || e_active > n_experts) invalid("e_active must be in [1, n_experts]");
  if (k < 1 || k > e_active * expert_width) invalid("k must be in [1, e_active * expert_width]");
  if (scaling_mode == ScalingMode::IdentityBased && expert_width != d_model) {
    invalid("identity decomposition requires expert_width = d_model");
  }
  require_shape(w_router, n_experts, d_model, "w_router");
  require_len(b_router, d_model, "b_router");
  require_len(b_pre, d_model, "b_pre");
  if (w_enc.size() != n_experts || w_dec.size() != n_experts) {
    throw Error(ErrorKind::Shape, "expert tensor count does not match n_experts");
  }
  for (std::size_t i = 0; i < n_experts; ++i) {
    require_shape(w_enc[i], expert_width, d_model, "w_enc[" + std::to_string(i) + "]");
    require_shape(w_dec[i], d_model, expert_width, "w_dec[" + std::to_string(i) + "]");
  }
  if ((scaling_mode == ScalingMode::Learned) != (a_lp.size() == n_experts && n_experts > 0)) {
    invalid("a_lp must be present exactly when scaling_mode = learned");
  }
  for (std::size_t i = 0; i < a_lp.size(); ++i) {
    require_shape(a_lp[i], expert_width, d_model, "a_lp[" + std::to_string(i) + "]");
  }
}

Architecture architecture_of(const SaeModel& m) {
  if (const auto* s = std::get_if<ScaleSae>(&m)) return s->architecture();
  return Architecture::Dense;
}

std::size_t d_model_of(const SaeModel& m) {
  return std::visit([](const auto& x) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(x)>, DenseTopKSae>) return x.d_model();
    else return x.d_model;
  }, m);
}

std::size_t k_of(const SaeModel& m) {
  return std::visit([](const auto& x) { return x.k; }, m);
}

DenseTopKSae init_dense(std::size_t d_model, std::size_t n_features, std::size_t k, Rng& rng) {
  DenseTopKSae m;
  m.w_enc = gaussian(n_features, d_model, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
  m.w_dec = tied_decoder(m.w_enc);
  m.b_pre.assign(d_model, 0.0);
  m.k = k;
  m.validate();
  return m;
}

ScaleSae init_scale(const ScaleShape& shape, Rng& rng) {
  ScaleSae m;
  m.n_experts = shape.n_experts;
  m.expert_width = shape.expert_width;
  m.e_active = shape.e_active;
  m.k = shape.k;
  m.d_model = shape.d_model;
  m.scaling_mode = shape.scaling_mode;
  m.output_b_pre = shape.output_b_pre;
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.d_model));
  m.w_router = gaussian(shape.n_experts, shape.d_model, scale, rng);
  m.b_router.assign(shape.d_model, 0.0);
  for (std::size_t i = 0; i < shape.n_experts; ++i) {
    m.w_enc.push_back(gaussian(shape.expert_width, shape.d_model, scale, rng));
    m.w_dec.push_back(tied_decoder(m.w_enc.back()));
  }
  m.b_pre.assign(shape.d_model, 0.0);
  if (shape.scaling_mode == ScalingMode::Learned) {
    for (const auto& enc : m.w_enc) {
      const Vector mean = row_mean(enc);
      Matrix base(enc.rows(), enc.cols());
      for (std::size_t r = 0; r < base.rows(); ++r) std::copy(mean.begin(), mean.end(), base.row(r).begin());
      m.a_lp.push_back(std::move(base));
    }
  }
  m.validate();
  return m;
}

std::vector<ParamView> parameter_views(SaeModel& m) {
  std::vector<ParamView> out;
  auto add = [&out](std::string name, std::span<double> v) { out.push_back({std::move(name), v}); };
  if (auto* d = std::get_if<DenseTopKSae>(&m)) {
    add("w_enc", d->w_enc.data());
    add("w_dec", d->w_dec.data());
    add("b_pre", d->b_pre);
    return out;
  }
  auto& s = std::get<ScaleSae>(m);
  add("w_router", s.w_router.data());
  add("b_router", s.b_router);
  for (std::size_t i = 0; i < s.w_enc.size(); ++i) add("w_enc[" + std::to_string(i) + "]", s.w_enc[i].data());
  for (std::size_t i = 0; i < s.w_dec.size(); ++i) add("w_dec[" + std::to_string(i) + "]", s.w_dec[i].data());
  add("b_pre", s.b_pre);
  add("omega", std::span<double>(&s.omega, 1));
  for (std::size_t i = 0; i < s.a_lp.size(); ++i) add("a_lp[" + std::to_string(i) + "]", s.a_lp[i].data());
  return out;
}

std::vector<ConstParamView> parameter_views(const SaeModel& m) {
  auto views = parameter_views(const_cast<SaeModel&>(m));
  std::vector<ConstParamView> out;
  out.reserve(views.size());
  for (auto& v : views) out.push_back({std::move(v.name), v.values});
  return out;
}

SaeModel zeros_like(const SaeModel& m) {
  SaeModel out = m;
  for (auto& v : parameter_views(out)) std::fill(v.values.begin(), v.values.end(), 0.0);
  return out;
}

Matrix scaled_encoder(const Matrix& w, double omega, ScalingMode mode, const Matrix* a_lp) {
  const double gain = 1.0 + omega;
  Matrix out = w;
  switch (mode) {
    case ScalingMode::Off:
      return out;
    case ScalingMode::MeanBased: {
      const Vector mean = row_mean(w);
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) out(r, c) = mean[c] + gain * (w(r, c) - mean[c]);
      return out;
    }
    case ScalingMode::IdentityBased: {
      if (w.rows() != w.cols()) {
        throw Error(ErrorKind::Shape, "identity decomposition requires expert_width = d_model");
      }
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) {
          const double base = r == c ? 1.0 : 0.0;
          out(r, c) = base + gain * (w(r, c) - base);
        }
      return out;
    }
    case ScalingMode::Learned: {
      if (a_lp == nullptr || a_lp->rows() != w.rows() || a_lp->cols() != w.cols()) {
        throw Error(ErrorKind::Shape, "learned decomposition requires a baseline of shape " + w.shape_str());
      }
      const Matrix& base = *a_lp;
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) out(r, c) = base(r, c) + gain * (w(r, c) - base(r, c));
      return out;
    }
  }
  return out;
}

std::vector<Matrix> effective_encoders(const ScaleSae& model) {
  std::vector<Matrix> out;
  out.reserve(model.n_experts);
  for (std::size_t i = 0; i < model.n_experts; ++i) {
    const Matrix* base = model.scaling_mode == ScalingMode::Learned ? &model.a_lp[i] : nullptr;
    out.push_back(scaled_encoder(model.w_enc[i], model.omega, model.scaling_mode, base));
  }
  return out;
}

RouteResult route(const ScaleSae& model, std::span<const double> x) {
  require_input(x, model.d_model);
  RouteResult r;
  r.logits = matvec(model.w_router, centered(x, model.b_router));
  r.probs = softmax(r.logits);
  r.selected = topk_select(r.logits, model.e_active);
  std::sort(r.selected.begin(), r.selected.end());
  return r;
}

SparseCode encode_global_topk(const ScaleSae& model, std::span<const Matrix> encoders,
                              std::span<const double> x, std::span<const std::size_t> selected) {
  require_input(x, model.d_model);
  std::vector<std::size_t> order(selected.begin(), selected.end());
  std::sort(order.begin(), order.end());
  const Vector u = centered(x, model.b_pre);
  std::vector<CodeEntry> candidates;
  for (std::size_t expert : order) {
    append_positive(encoders[expert], u, static_cast<std::uint32_t>(expert), candidates);
  }
  return keep_top_positive(candidates, model.k);
}

SparseCode encode_global_topk(const ScaleSae& model, std::span<const double> x,
                              std::span<const std::size_t> selected) {
  const auto enc = effective_encoders(model);
  return encode_global_topk(model, enc, x, selected);
}

ForwardTrace reconstruct(const ScaleSae& model, std::span<const Matrix> encoders,
                         std::span<const double> x) {
  RouteResult r = route(model, x);
  ForwardTrace t;
  t.code = encode_global_topk(model, encoders, x, r.selected);
  t.reconstruction.assign(model.d_model, 0.0);
  for (std::size_t expert : r.selected) {
    decode_accumulate(model.w_dec[expert], t.code, static_cast<std::uint32_t>(expert),
                      r.probs[expert], t.reconstruction);
  }
  if (model.output_b_pre) {
    for (std::size_t j = 0; j < model.d_model; ++j) t.reconstruction[j] += model.b_pre[j];
  }
  t.selected_experts = std::move(r.selected);
  t.router_probs = std::move(r.probs);
  return t;
}

ForwardTrace reconstruct(const ScaleSae& model, std::span<const double> x) {
  const auto enc = effective_encoders(model);
  return reconstruct(model, enc, x);
}

ForwardTrace forward_switch(const ScaleSae& model, std::span<const double> x) {
  if (model.e_active != 1) {
    throw Error(ErrorKind::Capability, "switch forward requires e_active = 1, got " +
                                           std::to_string(model.e_active));
  }
  return reconstruct(model, x);
}

DenseOutput forward_dense(const DenseTopKSae& model, std::span<const double> x) {
  require_input(x, model.d_model());
  const Vector u = centered(x, model.b_pre);
  std::vector<CodeEntry> candidates;
  append_positive(model.w_enc, u, 0, candidates);
  DenseOutput out;
  out.code = keep_top_positive(candidates, model.k);
  out.reconstruction.assign(model.d_model(), 0.0);
  decode_accumulate(model.w_dec, out.code, 0, 1.0, out.reconstruction);
  for (std::size_t j = 0; j < model.d_model(); ++j) out.reconstruction[j] += model.b_pre[j];
  return out;
}

Matrix decoder_features(const SaeModel& m) {
  std::vector<const Matrix*> decoders;
  if (const auto* d = std::get_if<DenseTopKSae>(&m)) {
    decoders.push_back(&d->w_dec);
  } else {
    for (const auto& w : std::get<ScaleSae>(m).w_dec) decoders.push_back(&w);
  }
  std::size_t total = 0;
  for (const auto* w : decoders) total += w->cols();
  const std::size_t d = d_model_of(m);
  Matrix out(total, d);
  std::size_t row = 0;
  for (const auto* w : decoders) {
    for (std::size_t c = 0; c < w->cols(); ++c, ++row) {
      for (std::size_t r = 0; r < d; ++r) out(row, r) = (*w)(r, c);
      const double n = norm(out.row(row));
      if (n > 0.0)
        for (double& v : out.row(row)) v /= n;
    }
  }
  return out;
}

std::vector<SparseCode> encode_batch(const SaeModel& m, const Matrix& batch) {
  std::vector<SparseCode> codes;
  codes.reserve(batch.rows());
  if (const auto* d = std::get_if<DenseTopKSae>(&m)) {
    for (std::size_t t = 0; t < batch.rows(); ++t) codes.push_back(forward_dense(*d, batch.row(t)).code);
    return codes;
  }
  const auto& s = std::get<ScaleSae>(m);
  const auto enc = effective_encoders(s);
  for (std::size_t t = 0; t < batch.rows(); ++t) {
    const auto r = route(s, batch.row(t));
    codes.push_back(encode_global_topk(s, enc, batch.row(t), r.selected));
  }
  return codes;
}

Matrix reconstruct_batch(const SaeModel& m, const Matrix& batch) {
  Matrix out(batch.rows(), d_model_of(m));
  if (const auto* d = std::get_if<DenseTopKSae>(&m)) {
    for (std::size_t t = 0; t < batch.rows(); ++t) {
      const auto y = forward_dense(*d, batch.row(t)).reconstruction;
      std::copy(y.begin(), y.end(), out.row(t).begin());
    }
    return out;
  }
  const auto& s = std::get<ScaleSae>(m);
  const auto enc = effective_encoders(s);
  for (std::size_t t = 0; t < batch.rows(); ++t) {
    const auto y = reconstruct(s, enc, batch.row(t)).reconstruction;
    std::copy(y.begin(), y.end(), out.row(t).begin());
  }
  return out;
}

void normalize_decoder_columns(SaeModel& m) {
  if (auto* d = std::get_if<DenseTopKSae>(&m)) {
    normalize_columns(d->w_dec);
    return;
  }
  for (auto& w : std::get<ScaleSae>(m).w_dec) normalize_columns(w);
}

}  // namespace saelab
