#include <doctest.h>

#include <cmath>
#include <limits>

#include "saelab/datagen.hpp"
#include "saelab/error.hpp"
#include "saelab/training.hpp"

using namespace saelab;

namespace {

ActivationBatch small_data(std::size_t tokens = 512, std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.d_model = 8;
  s.n_true_features = 24;
  s.feature_sparsity = 3;
  s.n_tokens = tokens;
  s.seed = seed;
  return gen_synthetic(s).first;
}

TrainConfig small_config(Architecture arch = Architecture::Scale) {
  TrainConfig c;
  c.architecture = arch;
  c.d_model = 8;
  c.n_experts = arch == Architecture::Dense ? 1 : 4;
  c.expert_width = arch == Architecture::Dense ? 32 : 8;
  c.e_active = arch == Architecture::Scale ? 2 : 1;
  c.k = 4;
  c.scaling_mode = arch == Architecture::Scale ? ScalingMode::MeanBased : ScalingMode::Off;
  c.alpha = arch == Architecture::Dense ? 0.0 : 0.01;
  c.batch_size = 32;
  c.n_steps = 40;
  c.log_interval = 10;
  return c;
}

}  // namespace

TEST_CASE("recon_loss examples") {
  CHECK(recon_loss(Matrix{{1, 2}, {3, 4}}, Matrix{{1, 2}, {3, 4}}) == 0.0);
  CHECK(recon_loss(Matrix{{1, 0}}, Matrix{{0, 0}}) == 0.5);
  CHECK(recon_loss(Matrix{{0, 0}, {2, 0}}, Matrix{{0, 0}, {0, 0}}) == 1.0);
  CHECK_THROWS_AS(recon_loss(Matrix{{1, 2}}, Matrix{{1, 2, 3}}), Error);
  CHECK_THROWS_AS(recon_loss(Matrix(0, 2), Matrix(0, 2)), Error);
}

TEST_CASE("aux_loss examples") {
  CHECK(aux_loss(Vector{0.5, 0.5}, Vector{0.5, 0.5}, 2) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(aux_loss(Vector{1, 0}, Vector{1, 0}, 2) == 2.0);
  CHECK(aux_loss(Vector{0.25, 0.25, 0.25, 0.25}, Vector{0.25, 0.25, 0.25, 0.25}, 4) == 1.0);
  try {
    aux_loss(Vector{0.5, 0.5}, Vector{1.0 / 3, 1.0 / 3, 1.0 / 3}, 3);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Shape);
  }
}

TEST_CASE("aux loss is minimized by a uniform router") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(8);
    Vector f(n), p(n);
    double sf = 0, sp = 0;
    for (std::size_t i = 0; i < n; ++i) {
      f[i] = rng.uniform();
      sf += f[i];
    }
    for (double& v : f) v /= sf;
    // P equal to f is the worst-aligned case for a fixed f; uniform P gives exactly 1.
    Vector uniform(n, 1.0 / static_cast<double>(n));
    CHECK(aux_loss(f, uniform, n) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < n; ++i) p[i] = f[i];
    CHECK(aux_loss(f, p, n) >= 1.0 - 1e-12);
    (void)sp;
  }
}

TEST_CASE("forward_pass loss identities") {
  const auto data = small_data(64);
  for (auto arch : {Architecture::Dense, Architecture::Switch, Architecture::Scale}) {
    auto cfg = small_config(arch);
    const auto model = init_model(cfg, data);
    const auto pass = forward_pass(model, data.values, *cfg.alpha);
    CHECK(pass.loss.recon == recon_loss(data.values, reconstruct_batch(model, data.values)));
    CHECK(pass.loss.total == doctest::Approx(pass.loss.recon + *cfg.alpha * pass.loss.aux).epsilon(1e-15));
    if (arch == Architecture::Dense) {
      CHECK(pass.loss.aux == 0.0);
      CHECK(pass.loss.routing.load.empty());
      continue;
    }
    double load = 0, probs = 0;
    for (double v : pass.loss.routing.load) load += v;
    for (double v : pass.loss.routing.mean_probs) probs += v;
    CHECK(load == doctest::Approx(static_cast<double>(cfg.e_active)).epsilon(1e-12));
    CHECK(probs == doctest::Approx(1.0).epsilon(1e-12));
    const auto f = pass.loss.routing.load_fraction();
    CHECK(pass.loss.aux == doctest::Approx(aux_loss(f, pass.loss.routing.mean_probs, cfg.n_experts)).epsilon(1e-15));
  }
}

TEST_CASE("alpha = 0 makes the total equal the reconstruction loss") {
  const auto data = small_data(64);
  auto cfg = small_config();
  cfg.alpha = 0.0;
  const auto loss = evaluate_loss(init_model(cfg, data), data.values, 0.0);
  CHECK(loss.total == loss.recon);
  CHECK(loss.aux > 0.0);
}

TEST_CASE("adam first step moves each parameter by lr against the gradient sign") {
  Vector p{1.0, -2.0, 0.5, 3.0};
  const Vector g{0.3, -7.0, 1e-3, 0.0};
  Vector m, v;
  AdamSettings s;
  s.learn_rate = 0.01;
  adam_update(p, g, m, v, 1, s);
  CHECK(p[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-9));
  CHECK(p[2] == doctest::Approx(0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-12));
  CHECK(p[3] == 3.0);
}

TEST_CASE("adam second step matches a hand computation") {
  Vector p{0.0};
  Vector m, v;
  AdamSettings s;
  s.learn_rate = 0.1;
  adam_update(p, Vector{1.0}, m, v, 1, s);
  adam_update(p, Vector{-1.0}, m, v, 2, s);
  const double m2 = 0.9 * 0.1 - 0.1;                      // -0.01
  const double v2 = 0.999 * 0.001 + 0.001;                // 0.001999
  const double step2 = 0.1 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.998001)) + 1e-8);
  const double step1 = 0.1 * 1.0 / (1.0 + 1e-8);
  CHECK(p[0] == doctest::Approx(-step1 - step2).epsilon(1e-12));
}

TEST_CASE("adam_step with a zero gradient leaves the model unchanged") {
  const auto data = small_data(64);
  for (auto arch : {Architecture::Dense, Architecture::Scale}) {
    auto cfg = small_config(arch);
    SaeModel model = init_model(cfg, data);
    const SaeModel before = model;
    AdamState state;
    adam_step(model, GradientSet{zeros_like(model)}, AdamSettings{}, state, false, 0);
    const auto a = parameter_views(before);
    const auto b = parameter_views(std::as_const(model));
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::equal(a[i].values.begin(), a[i].values.end(), b[i].values.begin()));
    }
  }
}

TEST_CASE("decoder columns stay unit norm during training") {
  const auto data = small_data();
  auto cfg = small_config();
  const auto result = train(cfg, data);
  const auto& s = std::get<ScaleSae>(result.model);
  for (const auto& w : s.w_dec)
    for (std::size_t c = 0; c < w.cols(); ++c) CHECK(std::fabs(norm(w.col(c)) - 1.0) < 1e-12);
}

TEST_CASE("training is deterministic in the seed") {
  const auto data = small_data();
  auto cfg = small_config();
  const auto a = train(cfg, data);
  const auto b = train(cfg, data);
  const auto va = parameter_views(a.model);
  const auto vb = parameter_views(b.model);
  for (std::size_t i = 0; i < va.size(); ++i) {
    CHECK(std::equal(va[i].values.begin(), va[i].values.end(), vb[i].values.begin()));
  }
  REQUIRE(a.reports.size() == b.reports.size());
  for (std::size_t i = 0; i < a.reports.size(); ++i) CHECK(a.reports[i].total_loss == b.reports[i].total_loss);
  cfg.seed = 1;
  const auto c = train(cfg, data);
  CHECK(c.reports.back().total_loss != a.reports.back().total_loss);
}

TEST_CASE("reports are produced at step 0, every interval and the last step") {
  const auto data = small_data();
  auto cfg = small_config();
  cfg.n_steps = 25;
  std::vector<std::size_t> streamed;
  const auto r = train(cfg, data, [&](const StepReport& rep) { streamed.push_back(rep.step); });
  std::vector<std::size_t> steps;
  for (const auto& rep : r.reports) steps.push_back(rep.step);
  CHECK(steps == std::vector<std::size_t>{0, 9, 19, 24});
  CHECK(streamed == steps);
  for (const auto& rep : r.reports) {
    double load = 0;
    for (double v : rep.load) load += v;
    CHECK(load == doctest::Approx(2.0));
  }
}

TEST_CASE("training reduces the reconstruction loss") {
  const auto data = small_data(2048);
  for (auto arch : {Architecture::Dense, Architecture::Switch, Architecture::Scale}) {
    auto cfg = small_config(arch);
    cfg.n_steps = 300;
    cfg.learn_rate = 3e-3;
    const auto r = train(cfg, data);
    CHECK(r.reports.back().recon_loss < 0.7 * r.reports.front().recon_loss);
  }
}

TEST_CASE("b_pre receives no gradient when it cancels") {
  // With output_b_pre and a single identity-like model whose code is empty,
  // x_hat = b_pre, so dL/db_pre = 2 (b_pre - x) / (B D) summed over tokens;
  // at b_pre = data mean that sum is zero.
  Matrix batch{{1, 2}, {3, -2}, {-1, 0}, {1, 0}};
  DenseTopKSae m{Matrix(2, 2), Matrix::identity(2), row_mean(batch), 1};
  SaeModel model = m;
  const auto pass = forward_pass(model, batch, 0.0);
  const auto g = backward(model, batch, pass, 0.0);
  for (double v : std::get<DenseTopKSae>(g.grads).b_pre) CHECK(std::fabs(v) < 1e-15);
}

TEST_CASE("omega receives no gradient when scaling is off") {
  const auto data = small_data(64);
  auto cfg = small_config(Architecture::Switch);
  const auto model = init_model(cfg, data);
  const auto pass = forward_pass(model, data.values, 0.01);
  const auto g = backward(model, data.values, pass, 0.01);
  CHECK(std::get<ScaleSae>(g.grads).omega == 0.0);
}

TEST_CASE("backward rejects a mismatched forward pass") {
  const auto data = small_data(64);
  auto cfg = small_config();
  const auto model = init_model(cfg, data);
  const auto pass = forward_pass(model, slice(data, 0, 10).values, 0.01);
  CHECK_THROWS_AS(backward(model, data.values, pass, 0.01), Error);
  CHECK_THROWS_AS(forward_pass(model, Matrix(3, 5), 0.01), Error);
}

TEST_CASE("non-finite gradients raise divergence with the step index") {
  const auto data = small_data(64);
  auto cfg = small_config();
  SaeModel model = init_model(cfg, data);
  GradientSet g{zeros_like(model)};
  std::get<ScaleSae>(g.grads).omega = std::numeric_limits<double>::quiet_NaN();
  AdamState state;
  try {
    adam_step(model, g, AdamSettings{}, state, true, 17);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Divergence);
    CHECK(std::string(e.what()).rfind("diverged at step 17", 0) == 0);
  }
}

TEST_CASE("a huge learning rate diverges instead of producing garbage") {
  auto data = small_data(256);
  for (double& v : data.values.data()) v *= 1e150;
  auto cfg = small_config();
  cfg.learn_rate = 1e200;
  try {
    train(cfg, data);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Divergence);
  }
}

TEST_CASE("config validation") {
  auto cfg = small_config();
  cfg.alpha.reset();
  CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("alpha"));
  cfg = small_config();
  cfg.k = 100;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_config();
  cfg.scaling_mode = ScalingMode::IdentityBased;
  cfg.expert_width = 7;
  CHECK_THROWS_AS(cfg.validate(), Error);
  const auto data = small_data(16);
  CHECK_THROWS_AS(train(small_config(), data), Error);  // fewer tokens than batch_size
}
