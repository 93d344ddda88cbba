#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "saelab/activations.hpp"
#include "saelab/checkpoint.hpp"
#include "saelab/cli.hpp"

using namespace saelab;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("saelab_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

void make_data(const TempDir& dir, const std::string& extra_groups = "0") {
  const auto r = cli({"gen-data", "--d-model", "8", "--true-features", "16", "--tokens", "400", "--holdout", "100",
                      "--seed", "3", "--groups", extra_groups, "--out-dir", dir.path.string(), "--name", "d"});
  REQUIRE(r.code == 0);
}

}  // namespace

TEST_CASE("gen-data writes files and prints a checksum") {
  TempDir dir("gen");
  const auto r = cli({"gen-data", "--d-model", "8", "--true-features", "16", "--tokens", "400", "--holdout", "100",
                      "--seed", "3", "--out-dir", dir.path.string(), "--name", "d"});
  REQUIRE(r.code == 0);
  const auto bytes = slurp(dir / "d.saea");
  CHECK(r.out.find("tokens=400 d_model=8 checksum=" + hex64(fnv1a64(bytes))) != std::string::npos);
  CHECK(fs::exists(dir / "d.truth.saeg"));
  CHECK(read_activations(dir / "d.holdout.saea").n_tokens() == 100);

  // Same seed, same bytes.
  TempDir again("gen2");
  cli({"gen-data", "--d-model", "8", "--true-features", "16", "--tokens", "400", "--holdout", "100", "--seed", "3",
       "--out-dir", again.path.string(), "--name", "d"});
  CHECK(slurp(again / "d.saea") == bytes);
}

TEST_CASE("usage errors exit 2") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"gen-data", "--d-model", "8"}).code == kExitUsage);
  CHECK(cli({"train", "--data", "x.saea"}).code == kExitUsage);
  CHECK(cli({"train", "--preset", "a", "--config", "b", "--data", "x"}).code == kExitUsage);
  CHECK(cli({"gen-data", "--d-model", "8", "--true-features", "16", "--tokens", "10", "--seed", "0", "--dist",
             "gamma", "--out-dir", fs::temp_directory_path().string()})
            .code == kExitUsage);
  const auto help = cli({"train", "--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("--preset") != std::string::npos);
}

TEST_CASE("missing files exit 3") {
  const auto r = cli({"eval", "--checkpoint", "/nonexistent.saec", "--data", "/nonexistent.saea"});
  CHECK(r.code == kExitIo);
  CHECK(r.err.find("not found") != std::string::npos);
  CHECK(cli({"train", "--preset", "switch", "--data", "/nonexistent.saea"}).code == kExitIo);
}

TEST_CASE("train, eval and analyze end to end") {
  TempDir dir("e2e");
  make_data(dir, "4");
  const std::string run = dir / "run";
  auto r = cli({"train", "--preset", "scale_e2", "--data", dir / "d.saea", "--set", "d_model=8", "--set",
                "n_experts=4", "--set", "expert_width=8", "--set", "k=4", "--set", "n_steps=30", "--set",
                "log_interval=10", "--set", "batch_size=32", "--out-dir", run});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("final step=29") != std::string::npos);
  for (auto f : {"config.cfg", "init.saec", "model.saec", "steps.jsonl", "manifest.json"}) CHECK(fs::exists(dir.path / "run" / f));
  const auto steps = slurp(dir.path / "run" / "steps.jsonl");
  CHECK(std::count(steps.begin(), steps.end(), '\n') == 4);

  {
    std::ofstream(dir / "losses.txt") << "10 4 2\n";
  }
  r = cli({"eval", "--checkpoint", run + "/model.saec", "--data", dir / "d.holdout.saea", "--truth",
           dir / "d.truth.saeg", "--loss-triples", dir / "losses.txt", "--out", dir / "report.json"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("loss_recovered\t0.75") != std::string::npos);
  CHECK(r.out.find("dictionary_recovery") != std::string::npos);
  CHECK(r.out.find("intra_expert_sim") != std::string::npos);

  r = cli({"analyze", "--checkpoint", run + "/model.saec", "--data", dir / "d.saea", "--redundancy", "--intra-inter",
           "--cdf", "--overlap", "--similarity", "--label-prefix", "g", "--out-dir", dir / "an"});
  REQUIRE(r.code == 0);
  for (auto f : {"redundancy.tsv", "intra_inter.tsv", "cdf.tsv", "overlap.tsv", "similarity.tsv"}) CHECK(fs::exists(dir.path / "an" / f));

  r = cli({"analyze", "--compare", dir / "report.json", dir / "report.json", "--out-dir", dir / "an"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("mse") != std::string::npos);

  // Label filters need labels.
  TempDir plain("plain");
  make_data(plain);
  r = cli({"analyze", "--checkpoint", run + "/model.saec", "--data", plain / "d.saea", "--similarity", "--label", "g0",
           "--out-dir", plain / "an"});
  CHECK(r.code == kExitCapability);
}

TEST_CASE("expert analyses on a dense checkpoint exit 6") {
  TempDir dir("dense");
  make_data(dir);
  auto r = cli({"train", "--preset", "dense_k4", "--data", dir / "d.saea", "--set", "d_model=8", "--set",
                "expert_width=16", "--set", "n_steps=5", "--out-dir", dir / "run"});
  REQUIRE(r.code == 0);
  r = cli({"analyze", "--checkpoint", dir / "run/model.saec", "--data", dir / "d.saea", "--cdf", "--out-dir", dir / "an"});
  CHECK(r.code == kExitCapability);
  CHECK(r.err.find("architecture lacks experts") != std::string::npos);
  r = cli({"analyze", "--checkpoint", dir / "run/model.saec", "--data", dir / "d.saea", "--redundancy", "--out-dir", dir / "an"});
  CHECK(r.code == 0);
}

TEST_CASE("dimension mismatch exits 5") {
  TempDir dir("shape");
  make_data(dir);
  const auto r = cli({"train", "--preset", "scale_e2", "--data", dir / "d.saea", "--out-dir", dir / "run"});
  CHECK(r.code == kExitShape);
}

TEST_CASE("divergence exits 4") {
  TempDir dir("diverge");
  ActivationBatch b;
  b.values = Matrix(128, 8);
  Rng rng(0);
  for (double& v : b.values.data()) v = 1e30 * rng.normal();
  write_activations(b, dir / "big.saea");
  const auto r = cli({"train", "--preset", "scale_e2", "--data", dir / "big.saea", "--set", "d_model=8", "--set",
                      "n_experts=4", "--set", "expert_width=8", "--set", "k=4", "--set", "learn_rate=1e300",
                      "--set", "n_steps=50", "--out-dir", dir / "run"});
  CHECK(r.code == kExitDivergence);
  CHECK(r.err.find("diverged at step") != std::string::npos);
}

TEST_CASE("training runs are reproducible byte for byte") {
  TempDir dir("determinism");
  make_data(dir);
  std::vector<std::string> args{"train", "--preset", "scale_e2", "--data", dir / "d.saea", "--set", "d_model=8",
                                "--set", "n_experts=4", "--set", "expert_width=8", "--set", "k=4", "--set",
                                "n_steps=20", "--set", "batch_size=16"};
  auto a = args, b = args;
  a.insert(a.end(), {"--out-dir", dir / "a"});
  b.insert(b.end(), {"--out-dir", dir / "b"});
  REQUIRE(cli(a).code == 0);
  REQUIRE(cli(b).code == 0);
  CHECK(slurp(dir.path / "a" / "model.saec") == slurp(dir.path / "b" / "model.saec"));
  CHECK(slurp(dir.path / "a" / "steps.jsonl") == slurp(dir.path / "b" / "steps.jsonl"));
}

TEST_CASE("the installed binary reports the same exit codes") {
  const std::string bin = SAELAB_CLI_PATH;
  CHECK(std::system((bin + " > /dev/null 2>&1").c_str()) != 0);
  const int status = std::system((bin + " eval --checkpoint /nonexistent --data /nonexistent > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(status) == kExitIo);
  CHECK(WEXITSTATUS(std::system((bin + " --help > /dev/null").c_str())) == 0);
}

namespace {

std::vector<std::vector<std::string>> tsv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream l(line);
    std::string cell;
    while (std::getline(l, cell, '\t')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

double metric(const std::string& table, const std::string& name) {
  for (const auto& row : tsv_rows(table))
    if (row.size() == 2 && row[0] == name) return std::stod(row[1]);
  FAIL("metric " << name << " missing");
  return 0;
}

}  // namespace

TEST_CASE("a config without alpha exits 2") {
  TempDir dir("noalpha");
  make_data(dir);
  std::ofstream(dir / "c.cfg") << "architecture = scale\nd_model = 8\nn_experts = 4\nexpert_width = 8\nk = 4\n";
  const auto r = cli({"train", "--config", dir / "c.cfg", "--data", dir / "d.saea", "--out-dir", dir / "run"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("alpha required") != std::string::npos);
}

TEST_CASE("trained checkpoints beat their initialization on held-out data; eval names mismatched dims") {
  TempDir dir("heldout");
  make_data(dir);
  auto r = cli({"train", "--preset", "scale_e2", "--data", dir / "d.saea", "--set", "d_model=8", "--set",
                "n_experts=4", "--set", "expert_width=8", "--set", "k=4", "--set", "n_steps=200", "--set",
                "batch_size=32", "--out-dir", dir / "run"});
  REQUIRE(r.code == 0);
  const auto init = cli({"eval", "--checkpoint", dir / "run/init.saec", "--data", dir / "d.holdout.saea"});
  const auto trained = cli({"eval", "--checkpoint", dir / "run/model.saec", "--data", dir / "d.holdout.saea"});
  REQUIRE(init.code == 0);
  REQUIRE(trained.code == 0);
  CHECK(metric(trained.out, "mse") < metric(init.out, "mse"));

  TempDir other("heldout_other");
  cli({"gen-data", "--d-model", "6", "--true-features", "12", "--tokens", "50", "--seed", "1", "--out-dir",
       other.path.string(), "--name", "d"});
  r = cli({"eval", "--checkpoint", dir / "run/model.saec", "--data", other / "d.saea"});
  CHECK(r.code == kExitShape);
  CHECK(r.err.find("d_model 6") != std::string::npos);
  CHECK(r.err.find("d_model 8") != std::string::npos);

  // Analysis tables satisfy their invariants.
  r = cli({"analyze", "--checkpoint", dir / "run/model.saec", "--data", dir / "d.saea", "--cdf", "--overlap",
           "--max-tokens", "120", "--out-dir", dir / "an"});
  REQUIRE(r.code == 0);
  const auto cdf = tsv_rows(slurp(dir.path / "an" / "cdf.tsv"));
  REQUIRE(!cdf.empty());
  double prev = 0;
  for (const auto& row : cdf) {
    const double v = std::stod(row.back());
    CHECK(v >= prev);
    prev = v;
  }
  CHECK(prev == 1.0);
  std::uint64_t pairs = 0;
  for (const auto& row : tsv_rows(slurp(dir.path / "an" / "overlap.tsv"))) pairs += std::stoull(row[1]);
  CHECK(pairs == 120 * 119 / 2);
}

TEST_CASE("compare prints absolute and relative deltas") {
  TempDir dir("compare");
  std::ofstream(dir / "a.json") << R"({"mse":0.5,"measured_l0":8,"redundancy_fraction":0.25,"activation_similarity":0.1})" << "\n";
  std::ofstream(dir / "b.json") << R"({"mse":0.25,"measured_l0":8,"redundancy_fraction":0.5,"activation_similarity":0.1})" << "\n";
  const auto r = cli({"analyze", "--compare", dir / "a.json", dir / "b.json", "--out-dir", dir.path.string()});
  REQUIRE(r.code == 0);
  const auto rows = tsv_rows(slurp(dir.path / "compare.tsv"));
  bool seen = false;
  for (const auto& row : rows) {
    if (row[0] != "mse") continue;
    seen = true;
    REQUIRE(row.size() == 5);
    CHECK(std::stod(row[3]) == -0.25);
    CHECK(std::stod(row[4]) == -0.5);
  }
  CHECK(seen);
}
