#include "saelab/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "binary_io.hpp"
#include "saelab/checkpoint.hpp"
#include "saelab/datagen.hpp"
#include "saelab/metrics.hpp"
#include "saelab/report_io.hpp"
#include "saelab/training.hpp"

namespace saelab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kOutputDirEnv = "SAELAB_OUTPUT_DIR";

std::string default_output_dir() {
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return ".";
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create directory '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw Error(ErrorKind::Io, std::string(what) + " '" + path + "' not found");
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(10);
  o << v;
  return o.str();
}

std::string summarize(const StepReport& r) {
  return "step=" + std::to_string(r.step) + " recon_loss=" + fmt(r.recon_loss) + " aux_loss=" + fmt(r.aux_loss) +
         " total_loss=" + fmt(r.total_loss) + " l0=" + fmt(r.mean_l0) + " omega=" + fmt(r.omega);
}

struct GenDataArgs {
  std::size_t d_model = 0;
  std::size_t true_features = 0;
  std::size_t tokens = 0;
  std::size_t holdout = 0;
  std::uint64_t seed = 0;
  double sparsity = 4.0;
  double noise = 0.01;
  std::string dist = "uniform";
  std::size_t groups = 0;
  std::string out_dir;
  std::string name = "activations";
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  SyntheticSpec spec;
  spec.d_model = a.d_model;
  spec.n_true_features = a.true_features;
  spec.n_tokens = a.tokens + a.holdout;
  spec.seed = a.seed;
  spec.feature_sparsity = a.sparsity;
  spec.noise_std = a.noise;
  spec.value_distribution = parse_value_distribution(a.dist);
  spec.n_groups = a.groups;
  auto [batch, truth] = gen_synthetic(spec);

  ensure_dir(a.out_dir);
  const auto train_part = slice(batch, 0, a.tokens);
  const std::string bytes = serialize_activations(train_part);
  const std::string data_path = join(a.out_dir, a.name + ".saea");
  detail::write_file(data_path, bytes);
  write_ground_truth(truth, join(a.out_dir, a.name + ".truth.saeg"));
  out << "wrote " << data_path << "\n";
  out << "tokens=" << train_part.n_tokens() << " d_model=" << train_part.d_model()
      << " checksum=" << hex64(fnv1a64(bytes)) << "\n";
  if (a.holdout > 0) {
    const auto held = slice(batch, a.tokens, batch.n_tokens());
    const std::string held_bytes = serialize_activations(held);
    const std::string held_path = join(a.out_dir, a.name + ".holdout.saea");
    detail::write_file(held_path, held_bytes);
    out << "holdout_tokens=" << held.n_tokens() << " checksum=" << hex64(fnv1a64(held_bytes)) << "\n";
  }
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string preset;
  std::string data;
  std::vector<std::string> overrides;
  std::string out_dir;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    require_file(a.config, "config");
    cfg = load_config(a.config);
  } else {
    cfg = preset_config(a.preset);
  }
  for (const auto& o : a.overrides) apply_config_override(cfg, o);
  cfg.validate();
  require_file(a.data, "dataset");
  const ActivationBatch data = read_activations(a.data);

  ensure_dir(a.out_dir);
  const std::string steps_path = join(a.out_dir, "steps.jsonl");
  const std::string ckpt_path = join(a.out_dir, "model.saec");
  const std::string init_path = join(a.out_dir, "init.saec");
  detail::write_file(join(a.out_dir, "config.cfg"), cfg.to_text());
  std::ofstream steps(steps_path, std::ios::trunc);
  if (!steps) throw Error(ErrorKind::Io, "cannot open '" + steps_path + "' for writing");

  const SaeModel initial = init_model(cfg, data);
  write_checkpoint(initial, init_path);
  StepReport last;
  bool any = false;
  auto sink = [&](const StepReport& r) {
    steps << to_json_line(r) << "\n";
    steps.flush();
    last = r;
    any = true;
  };
  TrainResult result;
  try {
    result = train_from(initial, cfg, data, sink);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Divergence && any) err << "last finite report: " << summarize(last) << "\n";
    throw;
  }
  const std::string ckpt = serialize_checkpoint(result.model);
  detail::write_file(ckpt_path, ckpt);

  nlohmann::json manifest;
  manifest["config"] = a.config.empty() ? "preset:" + a.preset : a.config;
  manifest["dataset"] = a.data;
  manifest["output_dir"] = a.out_dir;
  manifest["seed"] = cfg.seed;
  manifest["checkpoints"] = {init_path, ckpt_path};
  manifest["checkpoint_fnv1a64"] = hex64(fnv1a64(ckpt));
  manifest["created_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
  detail::write_file(join(a.out_dir, "manifest.json"), manifest.dump(2) + "\n");

  if (!result.reports.empty()) out << "final " << summarize(result.reports.back()) << "\n";
  out << "checkpoint " << ckpt_path << " fnv1a64=" << hex64(fnv1a64(ckpt)) << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string loss_triples;
  std::string truth;
  std::string out;
  std::string table;
  std::uint64_t seed = 0;
  std::size_t samples = 32;
  std::size_t max_pair_tokens = 1000;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.data, "dataset");
  const SaeModel model = read_checkpoint(a.checkpoint);
  const ActivationBatch data = read_activations(a.data);
  EvalOptions opts;
  opts.seed = a.seed;
  opts.inter_samples = a.samples;
  opts.max_pair_tokens = a.max_pair_tokens;
  GroundTruth truth;
  if (!a.truth.empty()) {
    require_file(a.truth, "ground truth");
    truth = read_ground_truth(a.truth);
    opts.truth = &truth;
  }
  if (!a.loss_triples.empty()) {
    require_file(a.loss_triples, "loss-triple file");
    opts.losses = parse_loss_triple(detail::read_file(a.loss_triples));
  }
  const MetricsReport rep = evaluate(model, data, opts);
  out << to_table(rep);
  if (!a.out.empty()) detail::write_file(a.out, to_json_line(rep) + "\n");
  if (!a.table.empty()) detail::write_file(a.table, to_table(rep));
  return kExitOk;
}

struct AnalyzeArgs {
  std::string checkpoint;
  std::string data;
  bool redundancy = false;
  bool intra_inter = false;
  bool cdf = false;
  bool overlap = false;
  bool similarity = false;
  std::vector<std::string> compare;
  std::string label;
  std::string label_prefix;
  std::string label_suffix;
  std::string out_dir;
  std::size_t max_tokens = 1000;
  std::size_t samples = 32;
  std::uint64_t seed = 0;
  double threshold = 0.9;
};

void emit(std::ostream& out, const std::string& dir, const std::string& name, const std::string& table) {
  out << "# " << name << "\n" << table;
  detail::write_file(join(dir, name), table);
}

MetricsReport read_report(const std::string& path) {
  require_file(path, "report");
  std::string text = detail::read_file(path);
  if (const auto nl = text.find('\n'); nl != std::string::npos) text.resize(nl);
  return metrics_from_json(text);
}

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  ensure_dir(a.out_dir);
  if (!a.compare.empty()) {
    const auto diffs = compare_reports(read_report(a.compare[0]), read_report(a.compare[1]));
    emit(out, a.out_dir, "compare.tsv", to_table(diffs));
  }
  const bool wants_model = a.redundancy || a.intra_inter || a.cdf || a.overlap || a.similarity;
  if (!wants_model) {
    if (a.compare.empty()) throw Error(ErrorKind::Usage, "no analysis selected");
    return kExitOk;
  }
  if (a.checkpoint.empty() || a.data.empty()) throw Error(ErrorKind::Usage, "--checkpoint and --data are required");
  require_file(a.checkpoint, "checkpoint");
  require_file(a.data, "dataset");
  const SaeModel model = read_checkpoint(a.checkpoint);
  const auto* scale = std::get_if<ScaleSae>(&model);
  if ((a.intra_inter || a.cdf) && scale == nullptr) {
    throw Error(ErrorKind::Capability, "architecture lacks experts");
  }
  ActivationBatch data = read_activations(a.data);
  if (data.d_model() != d_model_of(model)) {
    throw Error(ErrorKind::Shape, "data has d_model " + std::to_string(data.d_model()) + ", checkpoint has d_model " +
                                      std::to_string(d_model_of(model)));
  }
  if (!a.label.empty() || !a.label_prefix.empty() || !a.label_suffix.empty()) {
    data = token_subset(data, [&](const std::string& l) {
      if (!a.label.empty() && l != a.label) return false;
      if (!a.label_prefix.empty() && !l.starts_with(a.label_prefix)) return false;
      if (!a.label_suffix.empty() && !l.ends_with(a.label_suffix)) return false;
      return true;
    });
  }
  data = slice(data, 0, a.max_tokens);

  if (a.redundancy) {
    const auto r = redundancy_fraction(decoder_features(model), a.threshold);
    emit(out, a.out_dir, "redundancy.tsv",
         "metric\tvalue\nredundancy_fraction\t" + fmt(r.fraction) + "\nexcluded_zero_norm\t" +
             std::to_string(r.excluded) + "\n");
  }
  if (a.intra_inter) {
    Rng rng(a.seed);
    const auto s = intra_inter_similarity(*scale, a.samples, rng);
    emit(out, a.out_dir, "intra_inter.tsv",
         "metric\tvalue\nintra_expert_sim\t" + fmt(s.intra) + "\ninter_expert_sim\t" + fmt(s.inter) + "\n");
  }
  if (a.cdf) emit(out, a.out_dir, "cdf.tsv", cdf_table(expert_activation_cdf(*scale, data.values)));
  if (a.overlap || a.similarity) {
    const auto codes = encode_batch(model, data.values);
    if (a.overlap) emit(out, a.out_dir, "overlap.tsv", histogram_table(overlap_histogram(codes, k_of(model))));
    if (a.similarity) {
      emit(out, a.out_dir, "similarity.tsv",
           "metric\tvalue\nactivation_similarity\t" + fmt(activation_similarity(codes, k_of(model))) +
               "\ntokens\t" + std::to_string(codes.size()) + "\n");
    }
  }
  return kExitOk;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return kExitUsage;
    case ErrorKind::Io:
    case ErrorKind::Parse: return kExitIo;
    case ErrorKind::Divergence: return kExitDivergence;
    case ErrorKind::Shape: return kExitShape;
    case ErrorKind::Capability: return kExitCapability;
    case ErrorKind::Domain: return kExitFailure;
  }
  return kExitFailure;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"saelab: sparse autoencoder dictionary-learning lab", "saelab"};
  app.require_subcommand(1);

  GenDataArgs gen;
  gen.out_dir = default_output_dir();
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic superposition dataset");
  gen_cmd->add_option("--d-model", gen.d_model, "Activation dimension")->required();
  gen_cmd->add_option("--true-features", gen.true_features, "Ground-truth dictionary size")->required();
  gen_cmd->add_option("--tokens", gen.tokens, "Training tokens")->required();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->required();
  gen_cmd->add_option("--holdout", gen.holdout, "Extra held-out tokens (same dictionary)");
  gen_cmd->add_option("--sparsity", gen.sparsity, "Expected active true features per token");
  gen_cmd->add_option("--noise", gen.noise, "Gaussian noise std");
  gen_cmd->add_option("--dist", gen.dist, "Coefficient distribution: uniform | exponential");
  gen_cmd->add_option("--groups", gen.groups, "Number of labelled concept groups (0 = no labels)");
  gen_cmd->add_option("--out-dir", gen.out_dir, std::string("Output directory (default $") + kOutputDirEnv + " or .)");
  gen_cmd->add_option("--name", gen.name, "Output file stem");

  TrainArgs tr;
  tr.out_dir = default_output_dir();
  auto* train_cmd = app.add_subcommand("train", "Train an SAE from a config file or preset");
  auto* cfg_opt = train_cmd->add_option("--config", tr.config, "Flat key = value config file");
  auto* preset_opt = train_cmd->add_option("--preset", tr.preset, "Built-in preset name");
  cfg_opt->excludes(preset_opt);
  train_cmd->add_option("--data", tr.data, "SAEA activation file")->required();
  train_cmd->add_option("--set", tr.overrides, "Override a config key (key=value), repeatable");
  train_cmd->add_option("--out-dir", tr.out_dir, "Output directory");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Compute the metric suite for a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "SAEC checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "SAEA activation file")->required();
  eval_cmd->add_option("--loss-triples", ev.loss_triples, "File with 'l_zero l_recon l_orig'");
  eval_cmd->add_option("--truth", ev.truth, "SAEG ground-truth file (enables dictionary_recovery)");
  eval_cmd->add_option("--out", ev.out, "Write the report as a JSON line");
  eval_cmd->add_option("--table", ev.table, "Write the report as a TSV table");
  eval_cmd->add_option("--seed", ev.seed, "Seed for inter-expert sampling");
  eval_cmd->add_option("--samples", ev.samples, "Inter-expert resamples");
  eval_cmd->add_option("--max-pair-tokens", ev.max_pair_tokens, "Token cap for activation similarity");

  AnalyzeArgs an;
  an.out_dir = default_output_dir();
  auto* an_cmd = app.add_subcommand("analyze", "Redundancy / specialization analyses");
  an_cmd->add_option("--checkpoint", an.checkpoint, "SAEC checkpoint");
  an_cmd->add_option("--data", an.data, "SAEA activation file");
  an_cmd->add_flag("--redundancy", an.redundancy, "Fraction of features with max cosine > threshold");
  an_cmd->add_flag("--intra-inter", an.intra_inter, "Intra- vs inter-expert feature similarity");
  an_cmd->add_flag("--cdf", an.cdf, "Expert activation CDF");
  an_cmd->add_flag("--overlap", an.overlap, "Histogram of pairwise active-latent overlap");
  an_cmd->add_flag("--similarity", an.similarity, "Average activation similarity");
  an_cmd->add_option("--compare", an.compare, "Diff two eval reports (JSON lines)")->expected(2);
  an_cmd->add_option("--label", an.label, "Restrict to tokens with this exact label");
  an_cmd->add_option("--label-prefix", an.label_prefix, "Restrict to tokens whose label has this prefix");
  an_cmd->add_option("--label-suffix", an.label_suffix, "Restrict to tokens whose label has this suffix");
  an_cmd->add_option("--out-dir", an.out_dir, "Output directory");
  an_cmd->add_option("--max-tokens", an.max_tokens, "Token cap for per-token analyses");
  an_cmd->add_option("--samples", an.samples, "Inter-expert resamples");
  an_cmd->add_option("--seed", an.seed, "Seed for inter-expert sampling");
  an_cmd->add_option("--threshold", an.threshold, "Redundancy cosine threshold");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*train_cmd) {
      if (tr.config.empty() && tr.preset.empty()) throw Error(ErrorKind::Usage, "one of --config or --preset is required");
      return cmd_train(tr, out, err);
    }
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*an_cmd) return cmd_analyze(an, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace saelab
