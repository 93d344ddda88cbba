#include "saelab/training.hpp"

#include <algorithm>
#include <cmath>

#include "saelab/error.hpp"

namespace saelab {

namespace {

void check_batch(const SaeModel& model, const Matrix& batch) {
  if (batch.rows() == 0) throw Error(ErrorKind::Domain, "empty batch");
  if (batch.cols() != d_model_of(model)) {
    throw Error(ErrorKind::Shape, "batch has d_model " + std::to_string(batch.cols()) +
                                      ", model expects " + std::to_string(d_model_of(model)));
  }
}

double sum(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

// Gradient of the loss w.r.t. an effective encoder, chained back to the raw
// encoder, omega and (for Learned) the baseline.
void chain_scaled_encoder(const Matrix& g_eff, const Matrix& w, const ScaleSae& model, std::size_t expert,
                          Matrix& g_w, double& g_omega, Matrix* g_base) {
  const double gain = 1.0 + model.omega;
  switch (model.scaling_mode) {
    case ScalingMode::Off:
      for (std::size_t i = 0; i < g_w.size(); ++i) g_w.data()[i] += g_eff.data()[i];
      return;
    case ScalingMode::MeanBased: {
      // W_hat = (1 + omega) W - omega * 1 mean(W)^T
      const Vector g_col_sum = row_mean(g_eff);  // (1/n) sum_r G_r
      const Vector mean = row_mean(w);
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) {
          g_w(r, c) += gain * g_eff(r, c) - model.omega * g_col_sum[c];
          g_omega += g_eff(r, c) * (w(r, c) - mean[c]);
        }
      return;
    }
    case ScalingMode::IdentityBased:
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) {
          g_w(r, c) += gain * g_eff(r, c);
          g_omega += g_eff(r, c) * (w(r, c) - (r == c ? 1.0 : 0.0));
        }
      return;
    case ScalingMode::Learned: {
      const Matrix& base = model.a_lp[expert];
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) {
          g_w(r, c) += gain * g_eff(r, c);
          (*g_base)(r, c) -= model.omega * g_eff(r, c);
          g_omega += g_eff(r, c) * (w(r, c) - base(r, c));
        }
      return;
    }
  }
}

// Accumulates the gradient contributions of one expert's active latents for
// one token. Returns dL/dp_expert from the reconstruction term.
double backprop_expert(const Matrix& w_dec, const Matrix& w_eff, const SparseCode& code,
                       std::uint32_t expert, double p, std::span<const double> g,
                       std::span<const double> u, Matrix& g_dec, Matrix& g_eff, Vector& du) {
  double dp = 0.0;
  const std::size_t d = g.size();
  for (const auto& c : code) {
    if (c.expert != expert) continue;
    double col_dot_g = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      col_dot_g += w_dec(r, c.feature) * g[r];
      g_dec(r, c.feature) += p * g[r] * c.value;
    }
    dp += c.value * col_dot_g;
    const double delta = p * col_dot_g;
    auto g_row = g_eff.row(c.feature);
    auto w_row = w_eff.row(c.feature);
    for (std::size_t j = 0; j < d; ++j) {
      g_row[j] += delta * u[j];
      du[j] += delta * w_row[j];
    }
  }
  return dp;
}

}  // namespace

Vector RoutingStats::load_fraction() const {
  const double total = sum(load);
  Vector f(load.size(), 0.0);
  if (total > 0.0)
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = load[i] / total;
  return f;
}

double recon_loss(const Matrix& x, const Matrix& x_hat) {
  if (x.rows() == 0) throw Error(ErrorKind::Domain, "empty batch");
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) {
    throw Error(ErrorKind::Shape, "recon_loss: shape mismatch " + x.shape_str() + " vs " + x_hat.shape_str());
  }
  double total = 0.0;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double se = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double diff = x(t, j) - x_hat(t, j);
      se += diff * diff;
    }
    total += se / static_cast<double>(x.cols());
  }
  return total / static_cast<double>(x.rows());
}

double aux_loss(std::span<const double> f, std::span<const double> p, std::size_t n_experts) {
  if (f.size() != n_experts || p.size() != n_experts) {
    throw Error(ErrorKind::Shape, "aux_loss: f has length " + std::to_string(f.size()) + ", P has length " +
                                      std::to_string(p.size()) + ", expected " + std::to_string(n_experts));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n_experts; ++i) s += f[i] * p[i];
  return static_cast<double>(n_experts) * s;
}

ForwardPass forward_pass(const SaeModel& model, const Matrix& batch, double alpha) {
  check_batch(model, batch);
  const std::size_t b = batch.rows();
  ForwardPass pass;
  pass.traces.reserve(b);
  Matrix recon(b, batch.cols());
  double l0 = 0.0;

  if (const auto* dense = std::get_if<DenseTopKSae>(&model)) {
    for (std::size_t t = 0; t < b; ++t) {
      auto out = forward_dense(*dense, batch.row(t));
      std::copy(out.reconstruction.begin(), out.reconstruction.end(), recon.row(t).begin());
      l0 += static_cast<double>(out.code.size());
      pass.traces.push_back({{0}, {1.0}, std::move(out.code), std::move(out.reconstruction)});
    }
    pass.loss.recon = recon_loss(batch, recon);
    pass.loss.total = pass.loss.recon;
    pass.loss.mean_l0 = l0 / static_cast<double>(b);
    return pass;
  }

  const auto& s = std::get<ScaleSae>(model);
  pass.encoders = effective_encoders(s);
  RoutingStats stats;
  stats.load.assign(s.n_experts, 0.0);
  stats.mean_probs.assign(s.n_experts, 0.0);
  for (std::size_t t = 0; t < b; ++t) {
    auto trace = reconstruct(s, pass.encoders, batch.row(t));
    std::copy(trace.reconstruction.begin(), trace.reconstruction.end(), recon.row(t).begin());
    for (std::size_t i : trace.selected_experts) stats.load[i] += 1.0;
    for (std::size_t i = 0; i < s.n_experts; ++i) stats.mean_probs[i] += trace.router_probs[i];
    l0 += static_cast<double>(trace.code.size());
    pass.traces.push_back(std::move(trace));
  }
  for (double& v : stats.load) v /= static_cast<double>(b);
  for (double& v : stats.mean_probs) v /= static_cast<double>(b);
  pass.loss.recon = recon_loss(batch, recon);
  pass.loss.aux = aux_loss(stats.load_fraction(), stats.mean_probs, s.n_experts);
  pass.loss.total = pass.loss.recon + alpha * pass.loss.aux;
  pass.loss.mean_l0 = l0 / static_cast<double>(b);
  pass.loss.routing = std::move(stats);
  return pass;
}

LossBreakdown evaluate_loss(const SaeModel& model, const Matrix& batch, double alpha) {
  return forward_pass(model, batch, alpha).loss;
}

GradientSet backward(const SaeModel& model, const Matrix& batch, const ForwardPass& pass, double alpha,
                     bool project_decoder) {
  check_batch(model, batch);
  if (pass.traces.size() != batch.rows()) {
    throw Error(ErrorKind::Shape, "trace/batch mismatch: " + std::to_string(pass.traces.size()) +
                                      " traces for " + std::to_string(batch.rows()) + " tokens");
  }
  const std::size_t b = batch.rows();
  const std::size_t d = batch.cols();
  const double coef = 2.0 / (static_cast<double>(b) * static_cast<double>(d));
  GradientSet out{zeros_like(model)};
  Vector g(d), u(d), du(d);

  if (const auto* dense = std::get_if<DenseTopKSae>(&model)) {
    auto& gd = std::get<DenseTopKSae>(out.grads);
    for (std::size_t t = 0; t < b; ++t) {
      const auto& tr = pass.traces[t];
      auto x = batch.row(t);
      for (std::size_t j = 0; j < d; ++j) {
        g[j] = coef * (tr.reconstruction[j] - x[j]);
        u[j] = x[j] - dense->b_pre[j];
        du[j] = 0.0;
        gd.b_pre[j] += g[j];
      }
      backprop_expert(dense->w_dec, dense->w_enc, tr.code, 0, 1.0, g, u, gd.w_dec, gd.w_enc, du);
      for (std::size_t j = 0; j < d; ++j) gd.b_pre[j] -= du[j];
    }
    if (project_decoder) project_decoder_gradients(model, out);
    return out;
  }

  const auto& s = std::get<ScaleSae>(model);
  auto& gs = std::get<ScaleSae>(out.grads);
  if (pass.encoders.size() != s.n_experts) throw Error(ErrorKind::Shape, "forward pass lacks effective encoders");
  const std::size_t n = s.n_experts;
  std::vector<Matrix> g_eff(n, Matrix(s.expert_width, d));
  const Vector f = pass.loss.routing.load_fraction();
  const double aux_coef = alpha * static_cast<double>(n) / static_cast<double>(b);
  Vector dp(n), dlogit(n), ur(d);

  for (std::size_t t = 0; t < b; ++t) {
    const auto& tr = pass.traces[t];
    auto x = batch.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      g[j] = coef * (tr.reconstruction[j] - x[j]);
      u[j] = x[j] - s.b_pre[j];
      ur[j] = x[j] - s.b_router[j];
      du[j] = 0.0;
      if (s.output_b_pre) gs.b_pre[j] += g[j];
    }
    for (std::size_t i = 0; i < n; ++i) dp[i] = aux_coef * f[i];
    for (std::size_t i : tr.selected_experts) {
      dp[i] += backprop_expert(s.w_dec[i], pass.encoders[i], tr.code, static_cast<std::uint32_t>(i),
                               tr.router_probs[i], g, u, gs.w_dec[i], g_eff[i], du);
    }
    for (std::size_t j = 0; j < d; ++j) gs.b_pre[j] -= du[j];

    const auto& p = tr.router_probs;
    double weighted = 0.0;
    for (std::size_t i = 0; i < n; ++i) weighted += p[i] * dp[i];
    for (std::size_t i = 0; i < n; ++i) dlogit[i] = p[i] * (dp[i] - weighted);
    for (std::size_t i = 0; i < n; ++i) {
      if (dlogit[i] == 0.0) continue;
      auto g_row = gs.w_router.row(i);
      auto w_row = s.w_router.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        g_row[j] += dlogit[i] * ur[j];
        gs.b_router[j] -= dlogit[i] * w_row[j];
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    Matrix* g_base = s.scaling_mode == ScalingMode::Learned ? &gs.a_lp[i] : nullptr;
    chain_scaled_encoder(g_eff[i], s.w_enc[i], s, i, gs.w_enc[i], gs.omega, g_base);
  }
  if (project_decoder) project_decoder_gradients(model, out);
  return out;
}

void project_decoder_gradients(const SaeModel& model, GradientSet& grads) {
  auto project = [](const Matrix& w, Matrix& g) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      double along = 0.0;
      for (std::size_t r = 0; r < w.rows(); ++r) along += g(r, c) * w(r, c);
      for (std::size_t r = 0; r < w.rows(); ++r) g(r, c) -= along * w(r, c);
    }
  };
  if (const auto* d = std::get_if<DenseTopKSae>(&model)) {
    project(d->w_dec, std::get<DenseTopKSae>(grads.grads).w_dec);
    return;
  }
  const auto& s = std::get<ScaleSae>(model);
  auto& gs = std::get<ScaleSae>(grads.grads);
  for (std::size_t i = 0; i < s.n_experts; ++i) project(s.w_dec[i], gs.w_dec[i]);
}

void adam_update(std::span<double> params, std::span<const double> grads, Vector& m, Vector& v,
                 std::size_t t, const AdamSettings& s) {
  if (m.size() != params.size()) m.assign(params.size(), 0.0);
  if (v.size() != params.size()) v.assign(params.size(), 0.0);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grads[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    params[i] -= s.learn_rate * m_hat / (std::sqrt(v_hat) + s.epsilon);
  }
}

void adam_step(SaeModel& model, const GradientSet& grads, const AdamSettings& settings, AdamState& state,
               bool decoder_renorm, std::size_t step_index) {
  auto params = parameter_views(model);
  const auto gviews = parameter_views(grads.grads);
  if (params.size() != gviews.size()) throw Error(ErrorKind::Shape, "gradient set does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].values.size() != gviews[i].values.size()) {
      throw Error(ErrorKind::Shape, "gradient for " + params[i].name + " has wrong size");
    }
    if (!all_finite(gviews[i].values)) {
      throw Error(ErrorKind::Divergence, "diverged at step " + std::to_string(step_index) +
                                             " (non-finite gradient in " + params[i].name + ")");
    }
  }
  state.m.resize(params.size());
  state.v.resize(params.size());
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update(params[i].values, gviews[i].values, state.m[i], state.v[i], state.t, settings);
  }
  if (decoder_renorm) normalize_decoder_columns(model);
  for (const auto& p : parameter_views(std::as_const(model))) {
    if (!all_finite(p.values)) {
      throw Error(ErrorKind::Divergence, "diverged at step " + std::to_string(step_index) +
                                             " (non-finite " + p.name + ")");
    }
  }
}

SaeModel init_model(const TrainConfig& cfg, const ActivationBatch& data) {
  cfg.validate();
  if (data.d_model() != cfg.d_model) {
    throw Error(ErrorKind::Shape, "data has d_model " + std::to_string(data.d_model()) + ", config expects " +
                                      std::to_string(cfg.d_model));
  }
  Rng rng = Rng(cfg.seed).fork(1);
  const Vector mean = data.n_tokens() > 0 ? row_mean(data.values) : Vector(cfg.d_model, 0.0);
  if (cfg.architecture == Architecture::Dense) {
    DenseTopKSae m = init_dense(cfg.d_model, cfg.expert_width, cfg.k, rng);
    m.b_pre = mean;
    return m;
  }
  ScaleShape shape;
  shape.d_model = cfg.d_model;
  shape.n_experts = cfg.n_experts;
  shape.expert_width = cfg.expert_width;
  shape.e_active = cfg.e_active;
  shape.k = cfg.k;
  shape.scaling_mode = cfg.scaling_mode;
  shape.output_b_pre = cfg.output_b_pre;
  ScaleSae m = init_scale(shape, rng);
  m.b_pre = mean;
  m.b_router = mean;
  return m;
}

TrainResult train(const TrainConfig& cfg, const ActivationBatch& data, const ReportSink& sink) {
  return train_from(init_model(cfg, data), cfg, data, sink);
}

TrainResult train_from(SaeModel model, const TrainConfig& cfg, const ActivationBatch& data,
                       const ReportSink& sink) {
  cfg.validate();
  if (data.n_tokens() < cfg.batch_size) {
    throw Error(ErrorKind::Usage, "dataset has " + std::to_string(data.n_tokens()) +
                                      " tokens, fewer than batch_size " + std::to_string(cfg.batch_size));
  }
  if (data.d_model() != d_model_of(model)) {
    throw Error(ErrorKind::Shape, "data has d_model " + std::to_string(data.d_model()) + ", model expects " +
                                      std::to_string(d_model_of(model)));
  }
  const double alpha = *cfg.alpha;
  const AdamSettings adam{cfg.learn_rate, cfg.beta1, cfg.beta2, cfg.epsilon};
  AdamState state;
  Rng shuffle_rng = Rng(cfg.seed).fork(2);
  std::vector<std::size_t> order;
  std::size_t cursor = data.n_tokens();
  Matrix batch(cfg.batch_size, data.d_model());
  TrainResult result;

  for (std::size_t step = 0; step < cfg.n_steps; ++step) {
    for (std::size_t r = 0; r < cfg.batch_size; ++r) {
      if (cursor == data.n_tokens()) {
        order = shuffle_rng.permutation(data.n_tokens());
        cursor = 0;
      }
      auto src = data.values.row(order[cursor++]);
      std::copy(src.begin(), src.end(), batch.row(r).begin());
    }
    const ForwardPass pass = forward_pass(model, batch, alpha);
    if (!std::isfinite(pass.loss.total)) {
      throw Error(ErrorKind::Divergence, "diverged at step " + std::to_string(step) + " (non-finite loss)");
    }
    const bool log = step == 0 || (step + 1) % cfg.log_interval == 0 || step + 1 == cfg.n_steps;
    if (log) {
      StepReport rep;
      rep.step = step;
      rep.recon_loss = pass.loss.recon;
      rep.aux_loss = pass.loss.aux;
      rep.total_loss = pass.loss.total;
      rep.mean_l0 = pass.loss.mean_l0;
      rep.load = pass.loss.routing.load;
      rep.mean_probs = pass.loss.routing.mean_probs;
      if (const auto* s = std::get_if<ScaleSae>(&model)) rep.omega = s->omega;
      if (sink) sink(rep);
      result.reports.push_back(std::move(rep));
    }
    const GradientSet grads = backward(model, batch, pass, alpha, cfg.decoder_renorm);
    adam_step(model, grads, adam, state, cfg.decoder_renorm, step);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace saelab
