#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "saelab/activations.hpp"
#include "saelab/model.hpp"

namespace saelab {

/// Hyperparameters of one training run. For dense models `expert_width` is
/// the dictionary width and n_experts / e_active are forced to 1.
struct TrainConfig {
  Architecture architecture = Architecture::Scale;
  std::size_t d_model = 32;
  std::size_t n_experts = 24;
  std::size_t expert_width = 32;
  std::size_t e_active = 2;
  std::size_t k = 8;
  std::optional<double> alpha;  // required; there is no default
  ScalingMode scaling_mode = ScalingMode::MeanBased;
  double learn_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 64;
  std::size_t n_steps = 2000;
  std::size_t log_interval = 100;
  std::uint64_t seed = 0;
  bool decoder_renorm = true;
  bool output_b_pre = true;

  void validate() const;
  /// Flat "key = value" text, parseable by parse_config.
  std::string to_text() const;
};

/// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors.
/// Keys present in `text` override those in `base`.
TrainConfig parse_config(std::string_view text, TrainConfig base = {});
TrainConfig load_config(const std::string& path);
/// Applies a single "key=value" override.
void apply_config_override(TrainConfig& cfg, std::string_view assignment);

std::vector<std::string> preset_names();
/// Built-in preset text (same content as presets/<name>.cfg); nullopt if unknown.
std::optional<std::string> preset_text(const std::string& name);
TrainConfig preset_config(const std::string& name);

/// Per-token mean of (1/D) sum (x - x_hat)^2.
double recon_loss(const Matrix& x, const Matrix& x_hat);
/// N * sum_i f_i P_i with f normalized to sum 1.
double aux_loss(std::span<const double> f, std::span<const double> p, std::size_t n_experts);

struct RoutingStats {
  Vector load;        // selections_i / batch_size; sums to e_active
  Vector mean_probs;  // batch mean of p(x); sums to 1
  /// load / e_active, the f that enters the auxiliary loss.
  Vector load_fraction() const;
};

struct LossBreakdown {
  double recon = 0.0;
  double aux = 0.0;
  double total = 0.0;
  double mean_l0 = 0.0;
  RoutingStats routing;  // empty for dense models
};

/// Forward results for one batch, needed by backward().
struct ForwardPass {
  std::vector<ForwardTrace> traces;
  std::vector<Matrix> encoders;  // effective encoders (scale/switch only)
  LossBreakdown loss;
};

ForwardPass forward_pass(const SaeModel& model, const Matrix& batch, double alpha);
LossBreakdown evaluate_loss(const SaeModel& model, const Matrix& batch, double alpha);

/// One tensor per trainable parameter, shaped like the model it came from.
struct GradientSet {
  SaeModel grads;
};

/// Exact gradient of recon + alpha * aux. Top-K masks, expert selection and
/// load counts are held constant. With project_decoder, each decoder-column
/// gradient has its component along the (unit) column removed.
GradientSet backward(const SaeModel& model, const Matrix& batch, const ForwardPass& pass,
                     double alpha, bool project_decoder = false);

/// g <- g - (g . w) w for each decoder column w.
void project_decoder_gradients(const SaeModel& model, GradientSet& grads);

struct AdamSettings {
  double learn_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::size_t t = 0;
  std::vector<Vector> m;
  std::vector<Vector> v;
};

/// Bias-corrected Adam on a single tensor. `t` is the 1-based step count.
void adam_update(std::span<double> params, std::span<const double> grads, Vector& m, Vector& v,
                 std::size_t t, const AdamSettings& s);

/// One Adam step over every parameter, then optional decoder renormalization.
/// Throws Divergence ("diverged at step s") on a non-finite gradient or result.
void adam_step(SaeModel& model, const GradientSet& grads, const AdamSettings& settings,
               AdamState& state, bool decoder_renorm, std::size_t step_index);

struct StepReport {
  std::size_t step = 0;
  double recon_loss = 0.0;
  double aux_loss = 0.0;
  double total_loss = 0.0;
  double mean_l0 = 0.0;
  Vector load;        // expert load fractions, sum = e_active
  Vector mean_probs;  // P_i, sum = 1
  double omega = 0.0;
};

struct TrainResult {
  SaeModel model;
  std::vector<StepReport> reports;
};

/// Initialized, untrained model: b_pre (and b_router) set to the data mean.
SaeModel init_model(const TrainConfig& cfg, const ActivationBatch& data);

using ReportSink = std::function<void(const StepReport&)>;

/// Deterministic given cfg.seed. Reports are produced at step 0, every
/// log_interval steps and at the final step.
TrainResult train(const TrainConfig& cfg, const ActivationBatch& data, const ReportSink& sink = {});
/// Continue training an existing model (used by train(); exposed for tests).
TrainResult train_from(SaeModel model, const TrainConfig& cfg, const ActivationBatch& data,
                       const ReportSink& sink = {});

}  // namespace saelab
