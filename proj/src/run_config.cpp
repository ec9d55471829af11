#include "refix/run_config.hpp"

#include <fstream>
#include <sstream>

#include "refix/analysis.hpp"
#include "refix/checkpoint.hpp"
#include "refix/errors.hpp"

namespace refix {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    T v;
    if constexpr (std::is_same_v<T, int>) v = std::stoi(value, &used);
    else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
      v = std::stoull(value, &used);
    } else v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw InvalidInput("config: '" + key + "' expects a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw InvalidInput("config: '" + key + "' expects true or false, got '" + value + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "model.scales") model.scales = parse_number<int>(key, value);
  else if (key == "model.channels") model.channels = parse_channels(value);
  else if (key == "model.latent_channels") model.latent_channels = parse_number<int>(key, value);
  else if (key == "model.max_offset") model.max_offset = parse_number<double>(key, value);
  else if (key == "model.attn_blocks") model.attn_blocks = parse_number<int>(key, value);
  else if (key == "model.attn_heads") model.attn_heads = parse_number<int>(key, value);
  else if (key == "model.predictor_hidden") model.predictor_hidden = parse_number<int>(key, value);
  else if (key == "model.local_detail_injection") model.local_detail_injection = parse_bool(key, value);
  else if (key == "train.lr") optim.learning_rate = parse_number<double>(key, value);
  else if (key == "train.batch") optim.batch_size = parse_number<int>(key, value);
  else if (key == "train.steps") optim.max_steps = parse_number<int>(key, value);
  else if (key == "train.freeze_encoder") optim.freeze_encoder = parse_bool(key, value);
  else if (key == "train.patch_h") loss.patch_h = parse_number<int>(key, value);
  else if (key == "train.patch_w") loss.patch_w = parse_number<int>(key, value);
  else if (key == "train.lambda_lpips") loss.lambda_lpips = parse_number<double>(key, value);
  else if (key == "train.mask_invalid") loss.mask_invalid = parse_bool(key, value);
  else if (key == "train.seed") {
    optim.seed = parse_number<std::uint64_t>(key, value);
    model.seed = optim.seed;
  } else if (key == "warp.mode") warp_mode = parse_warp_mode(value);
  else if (key == "warp.temperature") warp_temperature = parse_number<double>(key, value);
  else if (key == "analyze.method") {
    parse_projection_method(value);
    analyze_method = value;
  } else if (key == "analyze.perplexity") analyze_perplexity = parse_number<double>(key, value);
  else if (key == "analyze.seed") analyze_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "analyze.samples") analyze_samples = parse_number<int>(key, value);
  else throw InvalidInput("config: unknown key '" + key + "'");
}

void RunConfig::set_seed(std::uint64_t seed) {
  optim.seed = seed;
  model.seed = seed;
  analyze_seed = seed;
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  optim.validate();
  if (!(warp_temperature > 0)) throw InvalidInput("config: warp.temperature must be > 0");
  if (!(analyze_perplexity > 0)) throw InvalidInput("config: analyze.perplexity must be > 0");
  if (analyze_samples < 0) throw InvalidInput("config: analyze.samples must be >= 0");
  const int s = model.stride();
  if (loss.patch_h % s != 0 || loss.patch_w % s != 0)
    throw InvalidInput("config: patch size must be divisible by 2^scales = " + std::to_string(s));
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  int line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("config line " + std::to_string(line_no) + ": expected 'section.key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      cfg.set(key, value);
    } catch (const InvalidInput& e) {
      throw InvalidInput("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace refix
