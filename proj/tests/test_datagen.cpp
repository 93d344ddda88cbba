#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "saelab/activations.hpp"
#include "saelab/datagen.hpp"
#include "saelab/error.hpp"

using namespace saelab;

namespace {

SyntheticSpec small_spec(std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.d_model = 16;
  s.n_true_features = 64;
  s.n_tokens = 500;
  s.seed = seed;
  return s;
}

std::uint64_t parse_offset(const std::string& bytes) {
  try {
    parse_activations(bytes);
  } catch (const ParseError& e) {
    return e.offset();
  }
  FAIL("expected a parse error");
  return 0;
}

}  // namespace

TEST_CASE("dictionary rows are unit norm") {
  const auto [batch, truth] = gen_synthetic(small_spec());
  CHECK(truth.dictionary.rows() == 64);
  CHECK(truth.dictionary.cols() == 16);
  for (std::size_t r = 0; r < truth.dictionary.rows(); ++r) {
    CHECK(std::fabs(norm(truth.dictionary.row(r)) - 1.0) < 1e-12);
  }
  CHECK(batch.n_tokens() == 500);
  CHECK(truth.codes.size() == 500);
}

TEST_CASE("generation is deterministic in the seed") {
  const auto a = gen_synthetic(small_spec(5));
  const auto b = gen_synthetic(small_spec(5));
  const auto c = gen_synthetic(small_spec(6));
  CHECK(serialize_activations(a.first) == serialize_activations(b.first));
  CHECK(serialize_ground_truth(a.second) == serialize_ground_truth(b.second));
  CHECK(serialize_activations(a.first) != serialize_activations(c.first));
}

TEST_CASE("active-feature count has the requested mean") {
  SyntheticSpec s;
  s.d_model = 8;
  s.n_true_features = 64;
  s.feature_sparsity = 4.0;
  s.n_tokens = 10000;
  s.seed = 11;
  const auto truth = gen_synthetic(s).second;
  double total = 0;
  for (const auto& c : truth.codes) total += static_cast<double>(c.size());
  const double mean = total / 10000.0;
  // Binomial(64, 1/16): sd of the mean = sqrt(64 * p * (1-p) / 10000) ~ 0.0194.
  CHECK(std::fabs(mean - 4.0) < 5 * 0.0194);
}

TEST_CASE("coefficients are positive and follow the value distribution") {
  SyntheticSpec s = small_spec(3);
  s.n_tokens = 4000;
  for (auto dist : {ValueDistribution::UniformUnit, ValueDistribution::Exponential}) {
    s.value_distribution = dist;
    const auto truth = gen_synthetic(s).second;
    double sum = 0;
    std::size_t n = 0;
    for (const auto& code : truth.codes)
      for (const auto& c : code) {
        CHECK(c.value > 0.0);
        if (dist == ValueDistribution::UniformUnit) CHECK(c.value <= 1.0);
        sum += c.value;
        ++n;
      }
    const double expected = dist == ValueDistribution::UniformUnit ? 0.5 : 1.0;
    CHECK(std::fabs(sum / static_cast<double>(n) - expected) < 0.05);
  }
}

TEST_CASE("a single-feature noiseless token equals its coefficient times the dictionary row") {
  SyntheticSpec s = small_spec(1);
  const auto truth = gen_synthetic(s).second;
  Rng rng(0);
  const SparseCode code{{0, 7, 0.8}};
  const Vector x = synthesize_token(truth.dictionary, code, 0.0, rng);
  for (std::size_t j = 0; j < x.size(); ++j) CHECK(x[j] == 0.8 * truth.dictionary(7, j));
}

TEST_CASE("noiseless tokens are reproduced by the ground truth") {
  SyntheticSpec s = small_spec(2);
  s.noise_std = 0.0;
  const auto [batch, truth] = gen_synthetic(s);
  Rng rng(0);
  for (std::size_t t = 0; t < 50; ++t) {
    const Vector x = synthesize_token(truth.dictionary, truth.codes[t], 0.0, rng);
    for (std::size_t j = 0; j < x.size(); ++j) CHECK(std::fabs(batch.values(t, j) - x[j]) < 1e-6);
  }
}

TEST_CASE("group labels follow the largest coefficient") {
  SyntheticSpec s = small_spec(4);
  s.n_groups = 4;
  const auto [batch, truth] = gen_synthetic(s);
  REQUIRE(batch.labels.size() == batch.n_tokens());
  for (std::size_t t = 0; t < batch.n_tokens(); ++t) {
    const auto& code = truth.codes[t];
    if (code.empty()) {
      CHECK(batch.labels[t] == "none");
      continue;
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < code.size(); ++i)
      if (code[i].value > code[best].value) best = i;
    CHECK(batch.labels[t] == "g" + std::to_string(code[best].feature / 16));
  }
}

TEST_CASE("spec validation") {
  SyntheticSpec s = small_spec();
  s.d_model = 0;
  CHECK_THROWS_AS(gen_synthetic(s), Error);
  s = small_spec();
  s.feature_sparsity = 100;
  CHECK_THROWS_AS(gen_synthetic(s), Error);
  CHECK_THROWS_AS(parse_value_distribution("gamma"), Error);
}

TEST_CASE("activation file round trip") {
  ActivationBatch b;
  b.values = Matrix{{1.5, -2.0, 0.25}, {0.0, 3.0, -0.125}};
  const auto bytes = serialize_activations(b);
  CHECK(bytes.size() == 24 + 6 * 4);
  const auto back = parse_activations(bytes);
  CHECK(back.values == b.values);
  CHECK(!back.has_labels());

  b.labels = {"alpha", ""};
  const auto labelled = parse_activations(serialize_activations(b));
  CHECK(labelled.labels == b.labels);
  CHECK(labelled.values == b.values);

  const auto [gen, truth] = gen_synthetic(small_spec(9));
  const auto path = std::string("test_datagen_roundtrip.saea");
  write_activations(gen, path);
  CHECK(serialize_activations(read_activations(path)) == serialize_activations(gen));
  std::remove(path.c_str());

  const auto t2 = parse_ground_truth(serialize_ground_truth(truth));
  CHECK(t2.dictionary == truth.dictionary);
  REQUIRE(t2.codes.size() == truth.codes.size());
  for (std::size_t i = 0; i < truth.codes.size(); ++i) CHECK(t2.codes[i] == truth.codes[i]);
}

TEST_CASE("header layout is fixed") {
  ActivationBatch b;
  b.values = Matrix{{1.0}};
  const auto bytes = serialize_activations(b);
  const std::string expected_header("SAEA\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00", 24);
  CHECK(bytes.substr(0, 24) == expected_header);
  // 1.0f little-endian
  CHECK(bytes.substr(24) == std::string("\x00\x00\x80\x3f", 4));
}

TEST_CASE("truncation reports the offset of the missing value") {
  ActivationBatch b;
  b.values = Matrix(4, 3);
  const auto bytes = serialize_activations(b);
  // Cut the payload in the middle of the 6th float (starts at 24 + 5 * 4 = 44).
  CHECK(parse_offset(bytes.substr(0, 46)) == 44);
  CHECK(parse_offset(bytes.substr(0, 44)) == 44);
  // Header truncation: d_model field starts at 16.
  CHECK(parse_offset(bytes.substr(0, 18)) == 16);
  try {
    parse_activations(bytes.substr(0, 46));
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()) == "truncated file: missing activation value at offset 44");
  }
}

TEST_CASE("malformed headers are rejected") {
  ActivationBatch b;
  b.values = Matrix(2, 2);
  const auto good = serialize_activations(b);

  auto bad = good;
  bad[0] = 'X';
  CHECK(parse_offset(bad) == 0);

  bad = good;
  bad[4] = 2;  // version
  CHECK(parse_offset(bad) == 4);

  bad = good;
  bad[20] = 6;  // unknown flag bit
  CHECK(parse_offset(bad) == 20);

  CHECK(parse_offset(good + "x") == good.size());

  // Labels flag set but no label records.
  bad = good;
  bad[20] = 1;
  CHECK(parse_offset(bad) == good.size());

  CHECK_THROWS_AS(read_activations("/nonexistent/path.saea"), Error);
  try {
    read_activations("/nonexistent/path.saea");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
}

TEST_CASE("token_subset examples") {
  ActivationBatch b;
  b.values = Matrix{{1}, {2}, {3}, {4}};
  b.labels = {"the", " cat", "the", "dog"};
  const auto the = token_subset(b, [](const std::string& l) { return l == "the"; });
  CHECK(the.values == Matrix{{1}, {3}});
  CHECK(the.labels == std::vector<std::string>{"the", "the"});
  const auto none = token_subset(b, [](const std::string&) { return false; });
  CHECK(none.n_tokens() == 0);
  const auto all = token_subset(b, [](const std::string&) { return true; });
  CHECK(all.values == b.values);

  ActivationBatch unlabeled;
  unlabeled.values = Matrix{{1}};
  try {
    token_subset(unlabeled, [](const std::string&) { return true; });
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Capability);
  }
}

TEST_CASE("slice") {
  ActivationBatch b;
  b.values = Matrix{{1}, {2}, {3}};
  b.labels = {"a", "b", "c"};
  const auto s = slice(b, 1, 10);
  CHECK(s.values == Matrix{{2}, {3}});
  CHECK(s.labels == std::vector<std::string>{"b", "c"});
}

TEST_CASE("fnv1a64 known values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("checked-in fixture decodes to the expected tokens") {
  const std::string path = std::string(SAELAB_SOURCE_DIR) + "/tests/data/tiny.saea";
  const auto b = read_activations(path);
  CHECK(b.n_tokens() == 3);
  CHECK(b.d_model() == 2);
  CHECK(b.values == Matrix{{1.0, -0.5}, {0.25, 2.0}, {0.0, -3.0}});
  CHECK(b.labels == std::vector<std::string>{"a", "bb", ""});
}
