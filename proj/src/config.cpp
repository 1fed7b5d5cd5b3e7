#include "sdssl/config.hpp"

#include "sdssl/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <type_traits>

namespace sdssl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    return s.substr(1, s.size() - 2);
  return s;
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
}

Real parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const Real x = std::stod(v, &used);
    if (used == v.size() && std::isfinite(x)) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "': expected a finite number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  std::string s = v;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

// Shortest text that parses back to the same double.
std::string fmt_real(Real v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Accessor>
Field real_field(std::string key, Accessor acc) {
  return {key, [acc](const ExperimentConfig& c) { return fmt_real(acc(const_cast<ExperimentConfig&>(c))); },
          [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = parse_real(key, v); }};
}

template <typename Accessor>
Field int_field(std::string key, Accessor acc) {
  return {key, [acc](const ExperimentConfig& c) { return std::to_string(acc(const_cast<ExperimentConfig&>(c))); },
          [acc, key](ExperimentConfig& c, const std::string& v) {
            using T = std::remove_reference_t<decltype(acc(c))>;
            const long long x = parse_int(key, v);
            bool in_range = true;
            if constexpr (std::is_unsigned_v<T>) {
              in_range = x >= 0;
            } else {
              in_range = x >= static_cast<long long>(std::numeric_limits<T>::min()) &&
                         x <= static_cast<long long>(std::numeric_limits<T>::max());
            }
            if (!in_range) throw ConfigError("key '" + key + "': value out of range");
            acc(c) = static_cast<T>(x);
          }};
}

template <typename Accessor>
Field bool_field(std::string key, Accessor acc) {
  return {key, [acc](const ExperimentConfig& c) { return std::string(acc(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); },
          [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = parse_bool(key, v); }};
}

template <typename Accessor>
Field string_field(std::string key, Accessor acc) {
  return {key, [acc](const ExperimentConfig& c) { return acc(const_cast<ExperimentConfig&>(c)); },
          [acc](ExperimentConfig& c, const std::string& v) { acc(c) = v; }};
}

#define SDSSL_ACC(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"framework", [](const ExperimentConfig& c) { return std::string(to_string(c.trainer.framework)); },
                 [](ExperimentConfig& c, const std::string& v) { c.trainer.framework = parse_framework(v); }});
    f.push_back(bool_field("sdssl_enabled", SDSSL_ACC(trainer.sdssl_enabled)));
    f.push_back(int_field("seed", SDSSL_ACC(trainer.seed)));

    f.push_back(int_field("encoder.num_layers", SDSSL_ACC(trainer.encoder.num_layers)));
    f.push_back(int_field("encoder.embed_dim", SDSSL_ACC(trainer.encoder.embed_dim)));
    f.push_back(int_field("encoder.num_heads", SDSSL_ACC(trainer.encoder.num_heads)));
    f.push_back(int_field("encoder.patch_size", SDSSL_ACC(trainer.encoder.patch_size)));
    f.push_back(int_field("encoder.image_size", SDSSL_ACC(trainer.encoder.image_size)));
    f.push_back(int_field("encoder.channels", SDSSL_ACC(trainer.encoder.channels)));
    f.push_back(real_field("encoder.mlp_ratio", SDSSL_ACC(trainer.encoder.mlp_ratio)));

    f.push_back(int_field("heads.out_dim", SDSSL_ACC(trainer.heads.out_dim)));
    f.push_back(int_field("heads.hidden_last_projector", SDSSL_ACC(trainer.heads.hidden_last_projector)));
    f.push_back(int_field("heads.hidden_intermediate_projector",
                          SDSSL_ACC(trainer.heads.hidden_intermediate_projector)));
    f.push_back(int_field("heads.hidden_predictor", SDSSL_ACC(trainer.heads.hidden_predictor)));
    f.push_back(bool_field("heads.shared_predictor", SDSSL_ACC(trainer.heads.shared_predictor)));

    f.push_back(real_field("loss.temperature", SDSSL_ACC(trainer.loss.temperature)));
    f.push_back(real_field("loss.beta", SDSSL_ACC(trainer.loss.beta)));
    f.push_back(real_field("loss.alpha_max", SDSSL_ACC(trainer.schedule.alpha_max)));
    f.push_back(bool_field("loss.alpha_anneal", SDSSL_ACC(trainer.alpha_anneal)));
    f.push_back({"loss.distill_view",
                 [](const ExperimentConfig& c) { return std::string(to_string(c.trainer.loss.distill_view)); },
                 [](ExperimentConfig& c, const std::string& v) { c.trainer.loss.distill_view = parse_distill_view(v); }});

    f.push_back(real_field("schedule.base_lr", SDSSL_ACC(trainer.schedule.base_lr)));
    f.push_back(int_field("schedule.total_steps", SDSSL_ACC(trainer.schedule.total_steps)));
    f.push_back(int_field("schedule.warmup_steps", SDSSL_ACC(trainer.schedule.warmup_steps)));
    f.push_back(real_field("schedule.warmup_fraction", SDSSL_ACC(warmup_fraction)));
    f.push_back(real_field("schedule.ema_base", SDSSL_ACC(trainer.schedule.ema_base)));
    f.push_back(real_field("schedule.ema_final", SDSSL_ACC(trainer.schedule.ema_final)));

    f.push_back(real_field("optimizer.beta1", SDSSL_ACC(trainer.optimizer.beta1)));
    f.push_back(real_field("optimizer.beta2", SDSSL_ACC(trainer.optimizer.beta2)));
    f.push_back(real_field("optimizer.eps", SDSSL_ACC(trainer.optimizer.eps)));
    f.push_back(real_field("optimizer.weight_decay", SDSSL_ACC(trainer.optimizer.weight_decay)));

    f.push_back(string_field("data.dataset", SDSSL_ACC(data.dataset)));
    f.push_back(int_field("data.train_subset", SDSSL_ACC(data.train_subset)));
    f.push_back(int_field("data.batch_size", SDSSL_ACC(data.batch_size)));
    f.push_back(int_field("data.epochs", SDSSL_ACC(data.epochs)));
    f.push_back(int_field("data.workers", SDSSL_ACC(data.workers)));
    f.push_back(bool_field("data.normalize", SDSSL_ACC(data.normalize)));

    f.push_back(real_field("augment.crop_scale_min", SDSSL_ACC(data.recipe.crop_scale_min)));
    f.push_back(real_field("augment.crop_scale_max", SDSSL_ACC(data.recipe.crop_scale_max)));
    f.push_back(real_field("augment.crop_ratio_min", SDSSL_ACC(data.recipe.crop_ratio_min)));
    f.push_back(real_field("augment.crop_ratio_max", SDSSL_ACC(data.recipe.crop_ratio_max)));
    f.push_back(real_field("augment.flip_p", SDSSL_ACC(data.recipe.flip_p)));
    f.push_back(real_field("augment.jitter_brightness", SDSSL_ACC(data.recipe.jitter.brightness)));
    f.push_back(real_field("augment.jitter_contrast", SDSSL_ACC(data.recipe.jitter.contrast)));
    f.push_back(real_field("augment.jitter_saturation", SDSSL_ACC(data.recipe.jitter.saturation)));
    f.push_back(real_field("augment.jitter_hue", SDSSL_ACC(data.recipe.jitter.hue)));
    f.push_back(real_field("augment.jitter_p", SDSSL_ACC(data.recipe.jitter.p)));
    f.push_back(real_field("augment.grayscale_p", SDSSL_ACC(data.recipe.grayscale_p)));
    f.push_back(real_field("augment.blur_p_view1", SDSSL_ACC(data.recipe.blur_p[0])));
    f.push_back(real_field("augment.blur_p_view2", SDSSL_ACC(data.recipe.blur_p[1])));
    f.push_back(real_field("augment.blur_sigma_min", SDSSL_ACC(data.recipe.blur_sigma_min)));
    f.push_back(real_field("augment.blur_sigma_max", SDSSL_ACC(data.recipe.blur_sigma_max)));
    f.push_back(real_field("augment.solarize_p_view1", SDSSL_ACC(data.recipe.solarize_p[0])));
    f.push_back(real_field("augment.solarize_p_view2", SDSSL_ACC(data.recipe.solarize_p[1])));

    f.push_back(int_field("eval.knn_k", SDSSL_ACC(eval.knn.k)));
    f.push_back(real_field("eval.knn_temperature", SDSSL_ACC(eval.knn.temperature)));
    f.push_back(int_field("eval.probe_epochs", SDSSL_ACC(eval.probe.epochs)));
    f.push_back(real_field("eval.probe_lr", SDSSL_ACC(eval.probe.lr)));
    f.push_back(int_field("eval.probe_batch_size", SDSSL_ACC(eval.probe.batch_size)));
    f.push_back(real_field("eval.probe_momentum", SDSSL_ACC(eval.probe.momentum)));
    f.push_back(real_field("eval.probe_weight_decay", SDSSL_ACC(eval.probe.weight_decay)));
    f.push_back(real_field("eval.gamma", SDSSL_ACC(eval.metrics.gamma)));
    f.push_back(real_field("eval.t", SDSSL_ACC(eval.metrics.t)));
    f.push_back({"eval.pair_sampling", [](const ExperimentConfig& c) { return c.eval.metrics.pair_sampling.to_string(); },
                 [](ExperimentConfig& c, const std::string& v) { c.eval.metrics.pair_sampling = PairSampling::parse(v); }});
    f.push_back(int_field("eval.bank_subset", SDSSL_ACC(eval.bank_subset)));
    f.push_back(int_field("eval.test_subset", SDSSL_ACC(eval.test_subset)));

    f.push_back(string_field("run.name", SDSSL_ACC(run.name)));
    f.push_back(string_field("run.output_dir", SDSSL_ACC(run.output_dir)));
    f.push_back(int_field("run.checkpoint_every", SDSSL_ACC(run.checkpoint_every)));
    f.push_back(int_field("run.log_every", SDSSL_ACC(run.log_every)));
    return f;
  }();
  return table;
}

#undef SDSSL_ACC

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
  return out;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  // desk-scale tiny ViT and heads
  trainer.encoder.num_layers = 6;
  trainer.encoder.embed_dim = 96;
  trainer.encoder.num_heads = 3;
  trainer.encoder.patch_size = 4;
  trainer.encoder.image_size = 32;
  trainer.heads.out_dim = 64;
  trainer.heads.hidden_last_projector = 1024;
  trainer.heads.hidden_intermediate_projector = 512;
  trainer.heads.hidden_predictor = 1024;
  trainer.schedule.total_steps = 0;
  trainer.schedule.warmup_steps = -1;
  trainer.schedule.alpha_max = 0.6;
  trainer.schedule.base_lr = 5e-4;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  f->set(*this, value);
}

std::string ExperimentConfig::get(const std::string& key) const {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  return f->get(*this);
}

void ExperimentConfig::validate() const {
  std::vector<std::string> bad;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) bad.push_back(msg);
  };
  need(trainer.encoder.num_layers >= 2, "encoder.num_layers must be >= 2");
  need(trainer.loss.temperature > 0.0, "loss.temperature must be > 0");
  need(trainer.loss.beta >= 0.0, "loss.beta must be >= 0");
  need(trainer.schedule.alpha_max >= 0.0, "loss.alpha_max must be >= 0");
  need(trainer.schedule.total_steps >= 0, "schedule.total_steps must be >= 0 (0 derives it from epochs)");
  need(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "schedule.warmup_fraction must be in [0, 1)");
  need(trainer.optimizer.weight_decay >= 0.0, "optimizer.weight_decay must be >= 0");
  need(trainer.optimizer.beta1 >= 0.0 && trainer.optimizer.beta1 < 1.0, "optimizer.beta1 must be in [0, 1)");
  need(trainer.optimizer.beta2 >= 0.0 && trainer.optimizer.beta2 < 1.0, "optimizer.beta2 must be in [0, 1)");
  need(trainer.optimizer.eps > 0.0, "optimizer.eps must be > 0");
  need(std::find(known_datasets().begin(), known_datasets().end(), data.dataset) != known_datasets().end(),
       "data.dataset must be one of cifar10, cifar100, synthetic");
  need(data.train_subset >= 0, "data.train_subset must be >= 0");
  need(data.batch_size >= 2, "data.batch_size must be >= 2");
  need(data.epochs >= 1, "data.epochs must be >= 1");
  need(data.workers >= 1, "data.workers must be >= 1");
  need(eval.knn.k >= 1, "eval.knn_k must be >= 1");
  need(eval.knn.temperature > 0.0, "eval.knn_temperature must be > 0");
  need(eval.probe.epochs >= 1, "eval.probe_epochs must be >= 1");
  need(eval.probe.lr > 0.0, "eval.probe_lr must be > 0");
  need(eval.probe.batch_size >= 1, "eval.probe_batch_size must be >= 1");
  need(eval.metrics.gamma > 0.0, "eval.gamma must be > 0");
  need(eval.metrics.t > 0.0, "eval.t must be > 0");
  need(eval.bank_subset >= 0 && eval.test_subset >= 0, "eval subsets must be >= 0");
  need(!run.name.empty(), "run.name must not be empty");
  need(run.checkpoint_every >= 0, "run.checkpoint_every must be >= 0");
  need(run.log_every >= 0, "run.log_every must be >= 0");
  if (!bad.empty()) throw ConfigError("invalid configuration: " + join(bad));

  // delegate structural checks to the component validators
  TrainerConfig probe = trainer;
  if (probe.schedule.total_steps == 0) probe.schedule.total_steps = 1000;
  if (probe.schedule.warmup_steps < 0)
    probe.schedule.warmup_steps = static_cast<std::int64_t>(warmup_fraction * static_cast<Real>(probe.schedule.total_steps));
  (void)probe.resolved();
  data.recipe.validate();
  eval.metrics.validate();
}

Index ExperimentConfig::steps_per_epoch(Index num_train_samples) const {
  return num_train_samples / data.batch_size;
}

void ExperimentConfig::resolve_schedule(Index num_train_samples) {
  const Index per_epoch = steps_per_epoch(num_train_samples);
  if (per_epoch < 1)
    throw ConfigError("data.batch_size (" + std::to_string(data.batch_size) + ") exceeds the " +
                      std::to_string(num_train_samples) + " training samples");
  auto& s = trainer.schedule;
  if (s.total_steps == 0) s.total_steps = per_epoch * data.epochs;
  if (s.warmup_steps < 0)
    s.warmup_steps = static_cast<std::int64_t>(std::floor(warmup_fraction * static_cast<Real>(s.total_steps)));
}

std::filesystem::path ExperimentConfig::run_dir() const {
  if (!run.output_dir.empty()) return run.output_dir;
  return output_root() / run.name;
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    std::string value = f.get(*this);
    if (value.empty() || value.find_first_of(" #\t") != std::string::npos) value = "\"" + value + "\"";
    os << name << " = " << value << "\n";
  }
  return os.str();
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  std::vector<std::string> unknown, malformed;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    // strip comments outside quotes
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (!quoted && (line[i] == '#' || line[i] == ';')) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        malformed.push_back("line " + std::to_string(lineno) + ": unterminated section header");
        continue;
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      malformed.push_back("line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    const std::string name = trim(line.substr(0, eq));
    const std::string value = unquote(trim(line.substr(eq + 1)));
    const std::string key = section.empty() ? name : section + "." + name;
    if (!find_field(key)) {
      unknown.push_back(key);
      continue;
    }
    if (!seen.insert(key).second) {
      malformed.push_back("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      continue;
    }
    try {
      base.set(key, value);
    } catch (const ConfigError& e) {
      malformed.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!unknown.empty() || !malformed.empty()) {
    std::string msg = "config rejected";
    if (!unknown.empty()) msg += "; unknown keys: " + join(unknown);
    if (!malformed.empty()) msg += "; " + join(malformed);
    throw ConfigError(msg);
  }
  return base;
}

void apply_overrides(ExperimentConfig& config, const std::vector<std::string>& overrides) {
  std::vector<std::string> unknown, malformed;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) {
      malformed.push_back("override '" + o + "' is not key=value");
      continue;
    }
    const std::string key = trim(o.substr(0, eq));
    if (!find_field(key)) {
      unknown.push_back(key);
      continue;
    }
    try {
      config.set(key, unquote(trim(o.substr(eq + 1))));
    } catch (const ConfigError& e) {
      malformed.push_back(e.what());
    }
  }
  if (!unknown.empty() || !malformed.empty()) {
    std::string msg = "overrides rejected";
    if (!unknown.empty()) msg += "; unknown keys: " + join(unknown);
    if (!malformed.empty()) msg += "; " + join(malformed);
    throw ConfigError(msg);
  }
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c = parse_config(ss.str());
  apply_overrides(c, overrides);
  return c;
}

}  // namespace sdssl
