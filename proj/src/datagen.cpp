#include "saelab/datagen.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "saelab/error.hpp"

namespace saelab {

std::string to_string(ValueDistribution d) {
  return d == ValueDistribution::UniformUnit ? "uniform" : "exponential";
}

ValueDistribution parse_value_distribution(const std::string& s) {
  if (s == "uniform") return ValueDistribution::UniformUnit;
  if (s == "exponential") return ValueDistribution::Exponential;
  throw Error(ErrorKind::Usage, "unknown value distribution '" + s + "' (expected uniform or exponential)");
}

void SyntheticSpec::validate() const {
  if (d_model == 0) throw Error(ErrorKind::Usage, "d_model must be >= 1");
  if (n_true_features == 0) throw Error(ErrorKind::Usage, "n_true_features must be >= 1");
  if (!(noise_std >= 0.0)) throw Error(ErrorKind::Usage, "noise_std must be >= 0");
  if (!(feature_sparsity >= 0.0) || feature_sparsity > static_cast<double>(n_true_features)) {
    throw Error(ErrorKind::Usage, "feature_sparsity must be in [0, n_true_features]");
  }
  if (n_groups > n_true_features) throw Error(ErrorKind::Usage, "n_groups must be <= n_true_features");
}

Vector synthesize_token(const Matrix& dictionary, const SparseCode& code, double noise_std, Rng& rng) {
  Vector x(dictionary.cols(), 0.0);
  for (const auto& c : code) {
    auto row = dictionary.row(c.feature);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += c.value * row[j];
  }
  if (noise_std > 0.0)
    for (double& v : x) v += noise_std * rng.normal();
  return x;
}

std::pair<ActivationBatch, GroundTruth> gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng dict_rng = root.fork(1);
  Rng code_rng = root.fork(2);
  Rng noise_rng = root.fork(3);

  GroundTruth truth;
  truth.dictionary = Matrix(spec.n_true_features, spec.d_model);
  for (std::size_t f = 0; f < spec.n_true_features; ++f) {
    auto row = truth.dictionary.row(f);
    double n = 0.0;
    while (n == 0.0) {
      for (double& v : row) v = dict_rng.normal();
      n = norm(row);
    }
    for (double& v : row) v /= n;
  }

  const double p = spec.feature_sparsity / static_cast<double>(spec.n_true_features);
  ActivationBatch batch;
  batch.values = Matrix(spec.n_tokens, spec.d_model);
  truth.codes.reserve(spec.n_tokens);
  for (std::size_t t = 0; t < spec.n_tokens; ++t) {
    SparseCode code;
    for (std::size_t f = 0; f < spec.n_true_features; ++f) {
      if (!code_rng.bernoulli(p)) continue;
      const double c = spec.value_distribution == ValueDistribution::UniformUnit
                           ? code_rng.uniform_open_low()
                           : code_rng.exponential();
      code.push_back({0, static_cast<std::uint32_t>(f), c});
    }
    const Vector x = synthesize_token(truth.dictionary, code, spec.noise_std, noise_rng);
    std::copy(x.begin(), x.end(), batch.values.row(t).begin());
    if (spec.n_groups > 0) {
      if (code.empty()) {
        batch.labels.emplace_back("none");
      } else {
        const auto top = std::max_element(code.begin(), code.end(), [](const auto& a, const auto& b) {
          return a.value < b.value;
        });
        const std::size_t group = top->feature * spec.n_groups / spec.n_true_features;
        batch.labels.push_back("g" + std::to_string(group));
      }
    }
    truth.codes.push_back(std::move(code));
  }
  return {std::move(batch), std::move(truth)};
}

std::string serialize_ground_truth(const GroundTruth& truth) {
  detail::ByteWriter w;
  w.raw("SAEG");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(truth.dictionary.rows()));
  w.u32(static_cast<std::uint32_t>(truth.dictionary.cols()));
  w.u64(truth.codes.size());
  w.f64s(truth.dictionary.data());
  for (const auto& code : truth.codes) {
    w.u32(static_cast<std::uint32_t>(code.size()));
    for (const auto& c : code) {
      w.u32(c.feature);
      w.f64(c.value);
    }
  }
  return w.take();
}

GroundTruth parse_ground_truth(std::string_view bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("SAEG");
  const auto version_at = r.offset();
  if (const auto v = r.u32("version"); v != 1) {
    throw ParseError(version_at, "unsupported ground-truth format version " + std::to_string(v));
  }
  const auto n_true = r.u32("n_true");
  const auto d_model = r.u32("d_model");
  const auto n_tokens = r.u64("n_tokens");
  if (static_cast<std::uint64_t>(n_true) * d_model * 8 > bytes.size()) {
    throw ParseError(r.offset(), "truncated file: missing dictionary");
  }
  GroundTruth truth;
  truth.dictionary = Matrix(n_true, d_model);
  r.f64s(truth.dictionary.data(), "dictionary value");
  if (n_tokens > bytes.size()) throw ParseError(r.offset(), "truncated file: missing token codes");
  truth.codes.resize(n_tokens);
  for (auto& code : truth.codes) {
    const auto count = r.u32("code length");
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto at = r.offset();
      const auto f = r.u32("feature id");
      if (f >= n_true) throw ParseError(at, "feature id out of range");
      code.push_back({0, f, r.f64("code value")});
    }
  }
  if (!r.at_end()) throw ParseError(r.offset(), "trailing bytes after ground truth");
  return truth;
}

void write_ground_truth(const GroundTruth& truth, const std::string& path) {
  detail::write_file(path, serialize_ground_truth(truth));
}

GroundTruth read_ground_truth(const std::string& path) {
  return parse_ground_truth(detail::read_file(path));
}

}  // namespace saelab
