#include "config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "npp/errors.hpp"
#include "npp/hash.hpp"

namespace npp::cli {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::parse_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open config: " + path.string());
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Config c;
  c.source_ = path;
  c.content_hash_ = fnv1a64(raw.data(), raw.size());

  std::istringstream in(raw);
  std::string line, section;
  int ln = 0;
  auto fail_line = [&](const std::string& why) {
    throw config_error(path.string() + ":" + std::to_string(ln) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++ln;
    const size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail_line("unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) fail_line("empty section name");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) fail_line("expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) fail_line("empty key");
    if (section.empty()) fail_line("key '" + key + "' appears before any [section]");
    const std::string full = section + "." + key;
    if (c.values_.count(full)) fail_line("duplicate key '" + full + "'");
    c.values_[full] = Value{val, ln, false};
  }
  return c;
}

void Config::fail(const std::string& key, const std::string& why) const {
  const auto it = values_.find(key);
  const std::string where =
      it == values_.end() ? source_.string()
                          : source_.string() + ":" + std::to_string(it->second.line);
  throw config_error(where + ": " + why);
}

const Config::Value* Config::find(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  it->second.consumed = true;
  return &it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) {
  const Value* v = find(key);
  return v ? v->text : fallback;
}

std::string Config::get_string_required(const std::string& key) {
  const Value* v = find(key);
  if (!v) fail(key, "missing required key '" + key + "'");
  return v->text;
}

double Config::get_double(const std::string& key, double fallback) {
  const Value* v = find(key);
  if (!v) return fallback;
  char* end = nullptr;
  const double x = std::strtod(v->text.c_str(), &end);
  if (end == v->text.c_str() || *end != '\0')
    fail(key, "'" + v->text + "' is not a number for key '" + key + "'");
  return x;
}

int64_t Config::get_int(const std::string& key, int64_t fallback) {
  const Value* v = find(key);
  if (!v) return fallback;
  char* end = nullptr;
  const long long x = std::strtoll(v->text.c_str(), &end, 10);
  if (end == v->text.c_str() || *end != '\0')
    fail(key, "'" + v->text + "' is not an integer for key '" + key + "'");
  return static_cast<int64_t>(x);
}

uint64_t Config::get_u64(const std::string& key, uint64_t fallback) {
  const Value* v = find(key);
  if (!v) return fallback;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v->text.c_str(), &end, 10);
  if (end == v->text.c_str() || *end != '\0')
    fail(key, "'" + v->text + "' is not an unsigned integer for key '" + key + "'");
  return static_cast<uint64_t>(x);
}

std::array<int64_t, 3> Config::get_dims(const std::string& key, std::array<int64_t, 3> fallback) {
  const Value* v = find(key);
  if (!v) return fallback;
  std::istringstream is(v->text);
  std::array<int64_t, 3> out{};
  if (!(is >> out[0] >> out[1] >> out[2]))
    fail(key, "'" + v->text + "' must be three integers for key '" + key + "'");
  std::string rest;
  if (is >> rest) fail(key, "trailing text after three integers for key '" + key + "'");
  return out;
}

std::vector<int> Config::get_int_list(const std::string& key, std::vector<int> fallback) {
  const Value* v = find(key);
  if (!v) return fallback;
  std::istringstream is(v->text);
  std::vector<int> out;
  int x;
  while (is >> x) out.push_back(x);
  if (!is.eof()) fail(key, "'" + v->text + "' must be a space-separated integer list");
  return out;
}

void Config::require_consumed() const {
  for (const auto& [key, v] : values_)
    if (!v.consumed)
      throw config_error(source_.string() + ":" + std::to_string(v.line) + ": unknown key '" +
                         key + "'");
}

std::filesystem::path Config::resolve(const std::string& p) const {
  const std::filesystem::path fp(p);
  if (fp.is_absolute()) return fp;
  return source_.parent_path() / fp;
}

model::ModelConfig model_config_from(Config& c) {
  model::ModelConfig m;
  m.levels = static_cast<int>(c.get_int("model.levels", m.levels));
  m.base_channels = static_cast<int>(c.get_int("model.base_channels", m.base_channels));
  m.max_channels = static_cast<int>(c.get_int("model.max_channels", m.max_channels));
  m.convs_per_level = static_cast<int>(c.get_int("model.convs_per_level", m.convs_per_level));
  m.bottleneck_blocks =
      static_cast<int>(c.get_int("model.bottleneck_blocks", m.bottleneck_blocks));
  m.heads = static_cast<int>(c.get_int("model.heads", m.heads));
  m.mlp_ratio = c.get_double("model.mlp_ratio", m.mlp_ratio);
  m.leaky_slope = c.get_double("model.leaky_slope", m.leaky_slope);
  m.multiplier_downsample =
      static_cast<int>(c.get_int("model.multiplier_downsample", m.multiplier_downsample));
  m.mode = model::mode_from_string(c.get_string("model.mode", to_string(m.mode)));
  m.hyper_hidden = c.get_int_list("model.hyper_hidden", m.hyper_hidden);
  m.validate();
  return m;
}

training::TrainConfig train_config_from(Config& c) {
  training::TrainConfig t;
  t.lr0 = c.get_double("train.lr0", t.lr0);
  t.max_epochs = static_cast<int>(c.get_int("train.max_epochs", t.max_epochs));
  // The schedule keeps its shape under rescaled budgets: halve at midpoint
  // unless pinned explicitly.
  t.halve_epoch = static_cast<int>(c.get_int("train.halve_epoch", t.max_epochs / 2));
  t.batch_size = static_cast<int>(c.get_int("train.batch_size", t.batch_size));
  t.adam_beta1 = c.get_double("train.adam_beta1", t.adam_beta1);
  t.adam_beta2 = c.get_double("train.adam_beta2", t.adam_beta2);
  t.adam_eps = c.get_double("train.adam_eps", t.adam_eps);
  t.lambda_log10_lo = c.get_double("train.lambda_log10_lo", t.lambda_log10_lo);
  t.lambda_log10_hi = c.get_double("train.lambda_log10_hi", t.lambda_log10_hi);
  t.seed = c.get_u64("train.seed", t.seed);
  t.checkpoint_every = static_cast<int>(c.get_int("train.checkpoint_every", t.checkpoint_every));
  t.fixed_lambda = c.get_double("train.fixed_lambda", t.fixed_lambda);
  t.validate();
  return t;
}

phantom::PhantomSpec phantom_spec_from(Config& c) {
  phantom::PhantomSpec s;
  s.dims = c.get_dims("phantom.dims", s.dims);
  s.brain_axis_lo = c.get_double("phantom.brain_axis_lo", s.brain_axis_lo);
  s.brain_axis_hi = c.get_double("phantom.brain_axis_hi", s.brain_axis_hi);
  s.texture_sigma = c.get_double("phantom.texture_sigma", s.texture_sigma);
  s.skull_thickness_lo = c.get_double("phantom.skull_thickness_lo", s.skull_thickness_lo);
  s.skull_thickness_hi = c.get_double("phantom.skull_thickness_hi", s.skull_thickness_hi);
  s.skull_intensity_lo = c.get_double("phantom.skull_intensity_lo", s.skull_intensity_lo);
  s.skull_intensity_hi = c.get_double("phantom.skull_intensity_hi", s.skull_intensity_hi);
  s.bias_sigma = c.get_double("phantom.bias_sigma", s.bias_sigma);
  s.bias_amplitude = c.get_double("phantom.bias_amplitude", s.bias_amplitude);
  s.rot_deg = c.get_double("phantom.rot_deg", s.rot_deg);
  s.scale_lo = c.get_double("phantom.scale_lo", s.scale_lo);
  s.scale_hi = c.get_double("phantom.scale_hi", s.scale_hi);
  s.translate = c.get_double("phantom.translate", s.translate);
  s.noise_sigma = c.get_double("phantom.noise_sigma", s.noise_sigma);
  s.validate();
  return s;
}

}  // namespace npp::cli
