#include "lift/config.hpp"

#include <charconv>
#include <iomanip>
#include <type_traits>
#include <fstream>
#include <functional>
#include <sstream>

namespace lift {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename M>
Field int_field(std::string key, M RunConfig::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            c.*member = parse_int<std::remove_reference_t<decltype(c.*member)>>(key, v);
          },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

template <typename Sub, typename M>
Field nested_int(std::string key, Sub RunConfig::*sub, M Sub::*member) {
  return {key,
          [key, sub, member](RunConfig& c, const std::string& v) {
            (c.*sub).*member = parse_int<M>(key, v);
          },
          [sub, member](const RunConfig& c) { return std::to_string((c.*sub).*member); }};
}

template <typename Sub>
Field nested_double(std::string key, Sub RunConfig::*sub, double Sub::*member) {
  return {key,
          [key, sub, member](RunConfig& c, const std::string& v) {
            (c.*sub).*member = parse_double(key, v);
          },
          [sub, member](const RunConfig& c) { return fmt_double((c.*sub).*member); }};
}

template <typename Sub>
Field nested_bool(std::string key, Sub RunConfig::*sub, bool Sub::*member) {
  return {key,
          [key, sub, member](RunConfig& c, const std::string& v) {
            (c.*sub).*member = parse_bool(key, v);
          },
          [sub, member](const RunConfig& c) { return std::string((c.*sub).*member ? "true" : "false"); }};
}

Field weight_field(std::string key, double LossWeights::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) { c.train.weights.*member = parse_double(key, v); },
          [member](const RunConfig& c) { return fmt_double(c.train.weights.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      nested_int("head.blocks", &RunConfig::head, &HeadConfig::blocks),
      nested_int("head.heads", &RunConfig::head, &HeadConfig::heads),
      nested_int("head.width", &RunConfig::head, &HeadConfig::width),
      nested_int("head.n_patches", &RunConfig::head, &HeadConfig::n_patches),
      nested_int("head.c_in", &RunConfig::head, &HeadConfig::c_in),
      nested_double("head.dropout", &RunConfig::head, &HeadConfig::dropout),
      nested_int("head.n_joints", &RunConfig::head, &HeadConfig::n_joints),
      nested_int("head.n_twists", &RunConfig::head, &HeadConfig::n_twists),
      nested_int("head.beta_dim", &RunConfig::head, &HeadConfig::beta_dim),
      nested_int("head.attn_scale_dim", &RunConfig::head, &HeadConfig::attn_scale_dim),
      nested_int("head.shape_template_joint", &RunConfig::head, &HeadConfig::shape_template_joint),
      nested_int("head.twist_template_offset", &RunConfig::head, &HeadConfig::twist_template_offset),
      nested_double("train.max_lr", &RunConfig::train, &TrainConfig::max_lr),
      nested_int("train.warmup_steps", &RunConfig::train, &TrainConfig::warmup_steps),
      nested_int("train.epochs", &RunConfig::train, &TrainConfig::epochs),
      nested_int("train.batch_size", &RunConfig::train, &TrainConfig::batch_size),
      nested_int("train.avg_last_epochs", &RunConfig::train, &TrainConfig::avg_last_epochs),
      nested_int("train.seed", &RunConfig::train, &TrainConfig::seed),
      nested_int("train.min_keep_patches", &RunConfig::train, &TrainConfig::min_keep_patches),
      nested_bool("train.augment", &RunConfig::train, &TrainConfig::augment),
      nested_int("train.max_steps", &RunConfig::train, &TrainConfig::max_steps),
      weight_field("train.w_kpt", &LossWeights::keypoints),
      weight_field("train.w_twist", &LossWeights::twists),
      weight_field("train.w_beta", &LossWeights::beta),
      nested_bool("train.keep_all_checkpoints", &RunConfig::train, &TrainConfig::keep_all_checkpoints),
      nested_bool("train.log_wall_time", &RunConfig::train, &TrainConfig::log_wall_time),
      nested_int("data.seed", &RunConfig::data, &SyntheticConfig::seed),
      nested_double("data.noise_sigma", &RunConfig::data, &SyntheticConfig::noise_sigma),
      nested_double("data.keypoint_std", &RunConfig::data, &SyntheticConfig::keypoint_std),
      int_field("data.n_train", &RunConfig::n_train),
      int_field("data.n_eval", &RunConfig::n_eval),
      {"paths.out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
       [](const RunConfig& c) { return c.out_dir; }},
      {"paths.metrics_file", [](RunConfig& c, const std::string& v) { c.metrics_file = v; },
       [](const RunConfig& c) { return c.metrics_file; }},
  };
  return table;
}

}  // namespace

std::filesystem::path RunConfig::metrics_path() const {
  return metrics_file.empty() ? std::filesystem::path(out_dir) / "metrics.tsv"
                              : std::filesystem::path(metrics_file);
}

void RunConfig::validate() const {
  head.validate();
  train.validate(head.n_patches);
  if (n_train < 1) throw ConfigError("data.n_train", "must be >= 1");
  if (n_eval < 1) throw ConfigError("data.n_eval", "must be >= 1");
  if (!(data.noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma", "must be >= 0");
  if (out_dir.empty()) throw ConfigError("paths.out_dir", "must not be empty");
}

void apply_profile(RunConfig& cfg, const std::string& profile) {
  RunConfig fresh;
  if (profile == "paper") {
    fresh.head = HeadConfig::paper();
  } else if (profile == "tiny") {
    fresh.head = HeadConfig::tiny();
    fresh.head.dropout = 0.0;
    fresh.train.max_lr = 5e-3;
    fresh.train.warmup_steps = 400;
    fresh.train.weights.keypoints = 10.0;
    fresh.train.epochs = 500;
    fresh.train.batch_size = 16;
    fresh.train.max_steps = 2000;
    fresh.train.augment = false;
    fresh.data.noise_sigma = 0.0;
    fresh.n_train = 64;
    fresh.n_eval = 64;
  } else {
    throw ConfigError("profile", "unknown profile '" + profile + "' (expected tiny or paper)");
  }
  fresh.profile = profile;
  cfg = fresh;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, trim(value));
      return;
    }
  }
  throw ConfigError(key, "unknown setting");
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno), "unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
    out.emplace_back(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  for (const auto& [k, v] : parse_config_text(ss.str())) apply_setting(cfg, k, v);
}

std::vector<std::pair<std::string, std::string>> resolved_settings(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out{{"profile", cfg.profile}};
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

}  // namespace lift
