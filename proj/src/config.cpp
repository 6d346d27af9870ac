#include "genie/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "genie/tensor.hpp"

namespace genie {

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::kConfig, what); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) config_error("config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    config_error("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  config_error("config key '" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace

bool is_known_task(const std::string& task) {
  return task == "copy-patch" || task == "recolor" || task == "translate";
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "latent_channels") latent_channels = parse_size(key, value);
  else if (key == "base_width") base_width = parse_size(key, value);
  else if (key == "level_count") level_count = parse_size(key, value);
  else if (key == "head_count") head_count = parse_size(key, value);
  else if (key == "adapter_tokens") adapter_tokens = parse_size(key, value);
  else if (key == "alpha_per_channel") alpha_per_channel = parse_bool(key, value);
  else if (key == "timesteps") timesteps = parse_size(key, value);
  else if (key == "beta_start") beta_start = parse_double(key, value);
  else if (key == "beta_end") beta_end = parse_double(key, value);
  else if (key == "enable_sam") enable_sam = parse_bool(key, value);
  else if (key == "enable_paf") enable_paf = parse_bool(key, value);
  else if (key == "enable_arsm") enable_arsm = parse_bool(key, value);
  else if (key == "freeze_ref") freeze_ref = parse_bool(key, value);
  else if (key == "freeze_tar") freeze_tar = parse_bool(key, value);
  else if (key == "freeze_adapter") freeze_adapter = parse_bool(key, value);
  else if (key == "learning_rate") learning_rate = parse_double(key, value);
  else if (key == "recon_weight") recon_weight = parse_double(key, value);
  else if (key == "fusion_lr_scale") fusion_lr_scale = parse_double(key, value);
  else if (key == "batch_size") batch_size = parse_size(key, value);
  else if (key == "steps") steps = parse_size(key, value);
  else if (key == "seed") seed = parse_size(key, value);
  else if (key == "task") task = value;
  else if (key == "image_size") image_size = parse_size(key, value);
  else if (key == "train_samples") train_samples = parse_size(key, value);
  else if (key == "eval_samples") eval_samples = parse_size(key, value);
  else if (key == "eval_every") eval_every = parse_size(key, value);
  else config_error("unknown config key '" + key + "'");
}

void ModelConfig::validate() const {
  if (latent_channels == 0) config_error("latent_channels must be positive");
  if (level_count == 0) config_error("level_count must be positive");
  if (head_count == 0 || base_width == 0 || base_width % head_count != 0) {
    config_error("base_width must be a positive multiple of head_count");
  }
  if (adapter_tokens == 0) config_error("adapter_tokens must be positive");
  if (timesteps == 0) config_error("timesteps must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    config_error("need 0 < beta_start <= beta_end < 1");
  }
  if (!(learning_rate > 0.0)) config_error("learning_rate must be positive");
  if (!(recon_weight >= 0.0)) config_error("recon_weight must be non-negative");
  if (!(fusion_lr_scale > 0.0)) config_error("fusion_lr_scale must be positive");
  if (batch_size == 0) config_error("batch_size must be positive");
  if (!is_known_task(task)) config_error("unknown task '" + task + "' (copy-patch, recolor, translate)");
  const std::size_t granule = kLatentFactor << level_count;
  if (image_size == 0 || image_size % granule != 0) {
    config_error("image_size must be a positive multiple of " + std::to_string(granule));
  }
  if (image_size / kLatentFactor < 4) config_error("image_size too small: latent must be at least 4x4");
  if (train_samples == 0) config_error("train_samples must be positive");
  if (eval_samples == 0) config_error("eval_samples must be positive");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  const auto b = [](bool v) { return v ? "true" : "false"; };
  os << "latent_channels = " << latent_channels << '\n'
     << "base_width = " << base_width << '\n'
     << "level_count = " << level_count << '\n'
     << "head_count = " << head_count << '\n'
     << "adapter_tokens = " << adapter_tokens << '\n'
     << "alpha_per_channel = " << b(alpha_per_channel) << '\n'
     << "timesteps = " << timesteps << '\n'
     << "beta_start = " << fmt_double(beta_start) << '\n'
     << "beta_end = " << fmt_double(beta_end) << '\n'
     << "enable_sam = " << b(enable_sam) << '\n'
     << "enable_paf = " << b(enable_paf) << '\n'
     << "enable_arsm = " << b(enable_arsm) << '\n'
     << "freeze_ref = " << b(freeze_ref) << '\n'
     << "freeze_tar = " << b(freeze_tar) << '\n'
     << "freeze_adapter = " << b(freeze_adapter) << '\n'
     << "learning_rate = " << fmt_double(learning_rate) << '\n'
     << "recon_weight = " << fmt_double(recon_weight) << '\n'
     << "fusion_lr_scale = " << fmt_double(fusion_lr_scale) << '\n'
     << "batch_size = " << batch_size << '\n'
     << "steps = " << steps << '\n'
     << "seed = " << seed << '\n'
     << "task = " << task << '\n'
     << "image_size = " << image_size << '\n'
     << "train_samples = " << train_samples << '\n'
     << "eval_samples = " << eval_samples << '\n'
     << "eval_every = " << eval_every << '\n';
  return os.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) config_error("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      cfg.set(key, value);
    } catch (const Error& e) {
      config_error("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace genie
