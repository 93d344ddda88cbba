#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <sstream>
#include <utility>

#include "binary_io.hpp"
#include "saelab/error.hpp"
#include "saelab/training.hpp"

namespace saelab {

namespace {

[[noreturn]] void usage(const std::string& what) { throw Error(ErrorKind::Usage, what); }

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::size_t to_count(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    usage("config key '" + std::string(key) + "': expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double to_real(std::string_view key, std::string_view v) {
  const std::string s(v);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) usage("config key '" + std::string(key) + "': expected a real, got '" + s + "'");
  return out;
}

bool to_flag(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  usage("config key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

void set_key(TrainConfig& c, std::string_view key, std::string_view v) {
  if (key == "architecture") c.architecture = parse_architecture(std::string(v));
  else if (key == "d_model") c.d_model = to_count(key, v);
  else if (key == "n_experts") c.n_experts = to_count(key, v);
  else if (key == "expert_width") c.expert_width = to_count(key, v);
  else if (key == "e_active") c.e_active = to_count(key, v);
  else if (key == "k") c.k = to_count(key, v);
  else if (key == "alpha") c.alpha = to_real(key, v);
  else if (key == "scaling_mode") c.scaling_mode = parse_scaling_mode(std::string(v));
  else if (key == "learn_rate") c.learn_rate = to_real(key, v);
  else if (key == "beta1") c.beta1 = to_real(key, v);
  else if (key == "beta2") c.beta2 = to_real(key, v);
  else if (key == "epsilon") c.epsilon = to_real(key, v);
  else if (key == "batch_size") c.batch_size = to_count(key, v);
  else if (key == "n_steps") c.n_steps = to_count(key, v);
  else if (key == "log_interval") c.log_interval = to_count(key, v);
  else if (key == "seed") c.seed = to_count(key, v);
  else if (key == "decoder_renorm") c.decoder_renorm = to_flag(key, v);
  else if (key == "output_b_pre") c.output_b_pre = to_flag(key, v);
  else usage("unknown config key '" + std::string(key) + "'");
}

// Shared shape of the expert presets: 768 latents as 24 experts x 32.
constexpr std::string_view kExpertBase =
    "d_model = 32\n"
    "n_experts = 24\n"
    "expert_width = 32\n"
    "k = 8\n"
    "alpha = 0.01\n"
    "learn_rate = 0.001\n"
    "batch_size = 64\n"
    "n_steps = 3000\n"
    "log_interval = 100\n";

std::string expert_preset(const std::string& header, std::size_t e, const std::string& mode) {
  return header + "architecture = " + (e == 1 && mode == "off" ? "switch" : "scale") +
         "\ne_active = " + std::to_string(e) + "\nscaling_mode = " + mode + "\n" + std::string(kExpertBase);
}

const std::vector<std::pair<std::string, std::string>>& presets() {
  static const std::vector<std::pair<std::string, std::string>> table = [] {
    std::vector<std::pair<std::string, std::string>> t;
    t.emplace_back("dense_k4",
                   "# Dense TopK SAE used for dictionary recovery on the default synthetic data.\n"
                   "architecture = dense\n"
                   "d_model = 32\n"
                   "expert_width = 128\n"
                   "k = 4\n"
                   "alpha = 0\n"
                   "learn_rate = 0.001\n"
                   "batch_size = 64\n"
                   "n_steps = 10000\n"
                   "log_interval = 500\n");
    t.emplace_back("switch", expert_preset("# Single-expert routing, no feature scaling.\n", 1, "off"));
    for (std::size_t e : {1, 2, 4, 8, 16}) {
      t.emplace_back("scale_e" + std::to_string(e),
                     expert_preset("# " + std::to_string(e) + " active experts, mean-based feature scaling.\n", e,
                                   "mean"));
    }
    t.emplace_back("scale_e2_noscale", expert_preset("# 2 active experts, feature scaling off.\n", 2, "off"));
    return t;
  }();
  return table;
}

}  // namespace

void TrainConfig::validate() const {
  if (!alpha) usage("alpha required");
  if (!(*alpha >= 0.0)) usage("alpha must be >= 0");
  if (!(learn_rate > 0.0)) usage("learn_rate must be > 0");
  if (batch_size < 1) usage("batch_size must be >= 1");
  if (log_interval < 1) usage("log_interval must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) usage("adam betas must be in [0, 1)");
  if (!(epsilon > 0.0)) usage("epsilon must be > 0");
  if (d_model < 1 || expert_width < 1) usage("d_model and expert_width must be >= 1");
  if (architecture == Architecture::Dense) {
    if (k < 1 || k > expert_width) usage("k must be in [1, expert_width]");
    return;
  }
  if (n_experts < 1) usage("n_experts must be >= 1");
  if (e_active < 1 || e_active > n_experts) usage("e_active must be in [1, n_experts]");
  if (k < 1 || k > e_active * expert_width) usage("k must be in [1, e_active * expert_width]");
  if (architecture == Architecture::Switch && (e_active != 1 || scaling_mode != ScalingMode::Off)) {
    usage("switch architecture requires e_active = 1 and scaling_mode = off");
  }
  if (architecture == Architecture::Scale && e_active == 1 && scaling_mode == ScalingMode::Off) {
    usage("scale with e_active = 1 and scaling off is the switch architecture");
  }
  if (scaling_mode == ScalingMode::IdentityBased && expert_width != d_model) {
    usage("identity decomposition requires expert_width = d_model");
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  o.precision(17);
  o << "architecture = " << to_string(architecture) << "\n"
    << "d_model = " << d_model << "\n"
    << "n_experts = " << n_experts << "\n"
    << "expert_width = " << expert_width << "\n"
    << "e_active = " << e_active << "\n"
    << "k = " << k << "\n";
  if (alpha) o << "alpha = " << *alpha << "\n";
  o << "scaling_mode = " << to_string(scaling_mode) << "\n"
    << "learn_rate = " << learn_rate << "\n"
    << "beta1 = " << beta1 << "\n"
    << "beta2 = " << beta2 << "\n"
    << "epsilon = " << epsilon << "\n"
    << "batch_size = " << batch_size << "\n"
    << "n_steps = " << n_steps << "\n"
    << "log_interval = " << log_interval << "\n"
    << "seed = " << seed << "\n"
    << "decoder_renorm = " << (decoder_renorm ? "true" : "false") << "\n"
    << "output_b_pre = " << (output_b_pre ? "true" : "false") << "\n";
  return o.str();
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) usage("config line " + std::to_string(line_no) + ": expected key = value");
    set_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  if (base.architecture == Architecture::Dense) {
    base.n_experts = 1;
    base.e_active = 1;
    base.scaling_mode = ScalingMode::Off;
  }
  return base;
}

TrainConfig load_config(const std::string& path) {
  return parse_config(detail::read_file(path));
}

void apply_config_override(TrainConfig& cfg, std::string_view assignment) {
  cfg = parse_config(assignment, cfg);
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [name, text] : presets()) names.push_back(name);
  return names;
}

std::optional<std::string> preset_text(const std::string& name) {
  for (const auto& [n, text] : presets())
    if (n == name) return text;
  return std::nullopt;
}

TrainConfig preset_config(const std::string& name) {
  const auto text = preset_text(name);
  if (!text) usage("unknown preset '" + name + "'");
  return parse_config(*text);
}

}  // namespace saelab
