#include "saelab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "saelab/error.hpp"
#include "saelab/training.hpp"

namespace saelab {

namespace {

constexpr std::size_t kBlock = 64;

// Unit-normalized copy of the nonzero rows; `kept` maps back to source rows.
Matrix unit_rows(const Matrix& m, std::vector<std::size_t>& kept) {
  kept.clear();
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (norm(m.row(r)) > 0.0) kept.push_back(r);
  Matrix out(kept.size(), m.cols());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    auto src = m.row(kept[i]);
    const double n = norm(src);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / n;
  }
  return out;
}

std::vector<std::uint64_t> latent_keys(const SparseCode& code) {
  std::vector<std::uint64_t> keys;
  keys.reserve(code.size());
  for (const auto& c : code) keys.push_back((static_cast<std::uint64_t>(c.expert) << 32) | c.feature);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

std::size_t intersection_size(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  std::size_t i = 0, j = 0, n = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) ++i;
    else if (b[j] < a[i]) ++j;
    else { ++n; ++i; ++j; }
  }
  return n;
}

std::vector<std::vector<std::uint64_t>> all_keys(std::span<const SparseCode> codes) {
  std::vector<std::vector<std::uint64_t>> keys;
  keys.reserve(codes.size());
  for (const auto& c : codes) keys.push_back(latent_keys(c));
  return keys;
}

}  // namespace

double loss_recovered(double l_zero, double l_recon, double l_orig) {
  if (l_zero == l_orig) throw Error(ErrorKind::Domain, "degenerate baseline");
  return (l_zero - l_recon) / (l_zero - l_orig);
}

RedundancyResult redundancy_fraction(const Matrix& features, double threshold) {
  std::vector<std::size_t> kept;
  const Matrix unit = unit_rows(features, kept);
  RedundancyResult res;
  res.excluded = features.rows() - kept.size();
  const std::size_t n = unit.rows();
  if (n < 2) throw Error(ErrorKind::Domain, "redundancy needs at least 2 nonzero features");
  Vector best(n, -std::numeric_limits<double>::infinity());
  // Blocked upper-triangular sweep over the Gram matrix.
  for (std::size_t bi = 0; bi < n; bi += kBlock) {
    const std::size_t ei = std::min(bi + kBlock, n);
    for (std::size_t bj = bi; bj < n; bj += kBlock) {
      const std::size_t ej = std::min(bj + kBlock, n);
      for (std::size_t i = bi; i < ei; ++i) {
        for (std::size_t j = std::max(bj, i + 1); j < ej; ++j) {
          const double s = dot(unit.row(i), unit.row(j));
          best[i] = std::max(best[i], s);
          best[j] = std::max(best[j], s);
        }
      }
    }
  }
  const auto redundant = std::count_if(best.begin(), best.end(), [&](double s) { return s > threshold; });
  res.fraction = static_cast<double>(redundant) / static_cast<double>(n);
  return res;
}

double mean_pairwise_similarity(const Matrix& features, std::span<const std::size_t> rows) {
  if (rows.size() < 2) throw Error(ErrorKind::Domain, "pairwise similarity needs at least 2 features");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b, ++pairs)
      total += cosine_similarity(features.row(rows[a]), features.row(rows[b]));
  return total / static_cast<double>(pairs);
}

std::vector<std::vector<std::size_t>> sample_cross_expert_sets(std::size_t n_experts, std::size_t width,
                                                               std::size_t sample_size, Rng& rng) {
  std::vector<std::vector<std::size_t>> sets;
  const std::size_t total = n_experts * width;
  for (std::size_t s = 0; s < sample_size; ++s) {
    auto perm = rng.permutation(total);
    perm.resize(width);
    std::sort(perm.begin(), perm.end());
    sets.push_back(std::move(perm));
  }
  return sets;
}

ExpertSimilarity intra_inter_similarity(const Matrix& features, std::size_t n_experts, std::size_t width,
                                        std::size_t sample_size, Rng& rng) {
  if (n_experts < 2) throw Error(ErrorKind::Capability, "intra/inter similarity needs at least 2 experts");
  if (width < 2) throw Error(ErrorKind::Domain, "intra-expert similarity needs expert_width >= 2");
  if (features.rows() != n_experts * width) {
    throw Error(ErrorKind::Shape, "feature matrix has " + std::to_string(features.rows()) + " rows, expected " +
                                      std::to_string(n_experts * width));
  }
  if (sample_size < 1) throw Error(ErrorKind::Usage, "inter-expert sample size must be >= 1");
  ExpertSimilarity out;
  std::vector<std::size_t> rows(width);
  for (std::size_t e = 0; e < n_experts; ++e) {
    for (std::size_t j = 0; j < width; ++j) rows[j] = e * width + j;
    out.intra += mean_pairwise_similarity(features, rows);
  }
  out.intra /= static_cast<double>(n_experts);
  for (const auto& set : sample_cross_expert_sets(n_experts, width, sample_size, rng)) {
    out.inter += mean_pairwise_similarity(features, set);
  }
  out.inter /= static_cast<double>(sample_size);
  return out;
}

ExpertSimilarity intra_inter_similarity(const ScaleSae& model, std::size_t sample_size, Rng& rng) {
  return intra_inter_similarity(decoder_features(model), model.n_experts, model.expert_width, sample_size, rng);
}

ExpertActivationCdf expert_activation_cdf(std::span<const std::uint64_t> counts) {
  ExpertActivationCdf cdf;
  cdf.expert.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) cdf.expert[i] = i;
  std::stable_sort(cdf.expert.begin(), cdf.expert.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  std::uint64_t running = 0;
  for (std::size_t i : cdf.expert) {
    running += counts[i];
    cdf.count.push_back(counts[i]);
    cdf.cumulative.push_back(total == 0 ? 0.0 : static_cast<double>(running) / static_cast<double>(total));
  }
  if (total > 0 && !cdf.cumulative.empty()) cdf.cumulative.back() = 1.0;
  return cdf;
}

ExpertActivationCdf expert_activation_cdf(const ScaleSae& model, const Matrix& batch) {
  std::vector<std::uint64_t> counts(model.n_experts, 0);
  for (std::size_t t = 0; t < batch.rows(); ++t)
    for (std::size_t i : route(model, batch.row(t)).selected) ++counts[i];
  return expert_activation_cdf(counts);
}

double activation_similarity(std::span<const SparseCode> codes, std::size_t k_total) {
  const std::size_t n = codes.size();
  if (n < 2) throw Error(ErrorKind::Domain, "activation similarity needs at least 2 tokens");
  if (k_total == 0) throw Error(ErrorKind::Domain, "k_total must be >= 1");
  const auto keys = all_keys(codes);
  std::uint64_t shared = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) shared += intersection_size(keys[i], keys[j]);
  // Ordered pairs: each unordered pair counted twice.
  return 2.0 * static_cast<double>(shared) /
         (static_cast<double>(n) * static_cast<double>(n - 1) * static_cast<double>(k_total));
}

std::uint64_t OverlapHistogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

OverlapHistogram overlap_histogram(std::span<const SparseCode> codes, std::size_t k_total) {
  if (codes.size() < 2) throw Error(ErrorKind::Domain, "overlap histogram needs at least 2 tokens");
  const auto keys = all_keys(codes);
  std::size_t largest = k_total;
  for (const auto& k : keys) largest = std::max(largest, k.size());
  OverlapHistogram h;
  h.counts.assign(largest + 1, 0);
  for (std::size_t i = 0; i < keys.size(); ++i)
    for (std::size_t j = i + 1; j < keys.size(); ++j) ++h.counts[intersection_size(keys[i], keys[j])];
  return h;
}

double dictionary_recovery(const Matrix& learned, const Matrix& truth) {
  if (learned.rows() == 0 || truth.rows() == 0) throw Error(ErrorKind::Domain, "dictionary recovery needs nonempty inputs");
  if (learned.cols() != truth.cols()) {
    throw Error(ErrorKind::Shape, "dictionary_recovery: shape mismatch " + learned.shape_str() + " vs " + truth.shape_str());
  }
  std::vector<std::size_t> kept;
  const Matrix l = unit_rows(learned, kept);
  const Matrix t = unit_rows(truth, kept);
  if (l.rows() == 0 || t.rows() == 0) throw Error(ErrorKind::Domain, "degenerate feature vector");
  double total = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double best = -1.0;
    for (std::size_t j = 0; j < l.rows(); ++j) best = std::max(best, dot(t.row(i), l.row(j)));
    total += std::clamp(best, -1.0, 1.0);
  }
  return total / static_cast<double>(t.rows());
}

double measured_l0(std::span<const SparseCode> codes) {
  if (codes.empty()) return 0.0;
  std::size_t total = 0;
  for (const auto& c : codes) total += c.size();
  return static_cast<double>(total) / static_cast<double>(codes.size());
}

LossTriple parse_loss_triple(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> tokens;
  for (std::string tok; in >> tok;) tokens.push_back(tok);
  auto real = [](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw Error(ErrorKind::Parse, "loss triple: bad number '" + s + "'");
    return v;
  };
  if (tokens.size() != 3) throw Error(ErrorKind::Parse, "loss triple: expected 3 values, got " + std::to_string(tokens.size()));
  LossTriple t;
  if (tokens[0].find('=') == std::string::npos) {
    t.l_zero = real(tokens[0]);
    t.l_recon = real(tokens[1]);
    t.l_orig = real(tokens[2]);
    return t;
  }
  int seen = 0;
  for (const auto& tok : tokens) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Parse, "loss triple: mixed keyed and positional values");
    const auto key = tok.substr(0, eq);
    const double v = real(tok.substr(eq + 1));
    if (key == "l_zero") { t.l_zero = v; seen |= 1; }
    else if (key == "l_recon") { t.l_recon = v; seen |= 2; }
    else if (key == "l_orig") { t.l_orig = v; seen |= 4; }
    else throw Error(ErrorKind::Parse, "loss triple: unknown key '" + key + "'");
  }
  if (seen != 7) throw Error(ErrorKind::Parse, "loss triple: need l_zero, l_recon and l_orig");
  return t;
}

MetricsReport evaluate(const SaeModel& model, const ActivationBatch& data, const EvalOptions& opts) {
  if (data.d_model() != d_model_of(model)) {
    throw Error(ErrorKind::Shape, "data has d_model " + std::to_string(data.d_model()) + ", checkpoint has d_model " +
                                      std::to_string(d_model_of(model)));
  }
  if (data.n_tokens() == 0) throw Error(ErrorKind::Domain, "empty batch");
  MetricsReport rep;
  const auto codes = encode_batch(model, data.values);
  rep.mse = recon_loss(data.values, reconstruct_batch(model, data.values));
  rep.measured_l0 = measured_l0(codes);
  if (opts.losses) rep.loss_recovered = loss_recovered(opts.losses->l_zero, opts.losses->l_recon, opts.losses->l_orig);
  const Matrix features = decoder_features(model);
  rep.redundancy_fraction = redundancy_fraction(features, opts.redundancy_threshold).fraction;
  if (const auto* s = std::get_if<ScaleSae>(&model); s && s->n_experts >= 2 && s->expert_width >= 2) {
    Rng rng(opts.seed);
    const auto sim = intra_inter_similarity(features, s->n_experts, s->expert_width, opts.inter_samples, rng);
    rep.intra_expert_sim = sim.intra;
    rep.inter_expert_sim = sim.inter;
  }
  const std::size_t n_pair = std::min(codes.size(), opts.max_pair_tokens);
  if (n_pair >= 2) {
    rep.activation_similarity = activation_similarity(std::span(codes).first(n_pair), k_of(model));
  }
  if (opts.truth) rep.dictionary_recovery = dictionary_recovery(features, opts.truth->dictionary);
  return rep;
}

}  // namespace saelab
