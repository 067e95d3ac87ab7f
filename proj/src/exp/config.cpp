#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "nrf/archive.hpp"
#include "nrf/checkpoint.hpp"
#include "nrf/experiment.hpp"

namespace nrf {

using nlohmann::json;

namespace {

// Strict view over one JSON object: typed reads plus an unknown-key check.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, int& out) {
    if (const json* v = find(key)) out = static_cast<int>(integer(key, *v));
  }
  void get(const char* key, std::int64_t& out) {
    if (const json* v = find(key)) out = integer(key, *v);
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, float& out) {
    if (const json* v = find(key)) out = static_cast<float>(number(key, *v));
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) out = number(key, *v);
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  template <class T>
  void get(const char* key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        json wrap = {{"v", (*v)[i]}};
        Fields f(wrap, path_ + key + "[" + std::to_string(i) + "]");
        T item{};
        f.get("v", item);
        out.push_back(item);
      }
    }
  }
  void get(const char* key, std::vector<bool>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_boolean()) fail(key, "an array of booleans");
        out.push_back(e.get<bool>());
      }
    }
  }
  template <class E, class Parse>
  void get_enum(const char* key, E& out, Parse parse) {
    std::string s;
    get(key, s);
    if (!find(key)) return;
    try {
      out = parse(s);
    } catch (const std::exception& e) {
      throw ConfigError(where() + key + ": " + e.what());
    }
  }
  Fields sub(const char* key) {
    const json* v = find(key);
    static const json empty = json::object();
    return Fields(v ? *v : empty, path_ + key + ".");
  }

  void done() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) {
        std::string known;
        for (const auto& s : seen_) known += (known.empty() ? "" : ", ") + s;
        throw ConfigError("unknown config key '" + path_ + k + "' (known here: " + known + ")");
      }
    }
  }

  std::string where() const { return path_.empty() ? "config: " : "config '" + path_.substr(0, path_.size() - 1) + "': "; }

 private:
  [[noreturn]] void fail(const char* key, const char* want) const {
    throw ConfigError("config key '" + path_ + key + "' must be " + want);
  }
  std::int64_t integer(const char* key, const json& v) const {
    if (!v.is_number_integer()) fail(key, "an integer");
    return v.get<std::int64_t>();
  }
  double number(const char* key, const json& v) const {
    if (!v.is_number()) fail(key, "a number");
    return v.get<double>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json int_vec(const std::vector<int>& v) { return json(v); }

}  // namespace

std::string run_kind_name(RunKind k) {
  switch (k) {
    case RunKind::standard: return "standard";
    case RunKind::nonrobust: return "nonrobust";
    case RunKind::robust: return "robust";
  }
  return "?";
}

RunKind parse_run_kind(const std::string& s) {
  if (s == "standard") return RunKind::standard;
  if (s == "nonrobust") return RunKind::nonrobust;
  if (s == "robust") return RunKind::robust;
  throw ConfigError("unknown run kind '" + s + "' (expected standard, nonrobust or robust)");
}

std::string size_class_name(SizeClass s) { return s == SizeClass::large ? "large" : "small"; }

SizeClass parse_size_class(const std::string& s) {
  if (s == "large") return SizeClass::large;
  if (s == "small") return SizeClass::small;
  throw ConfigError("unknown dataset size class '" + s + "' (expected large or small)");
}

float parse_epsilon(const json& v) {
  if (v.is_number()) return v.get<float>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    const auto slash = s.find('/');
    try {
      std::size_t used = 0;
      if (slash == std::string::npos) {
        const float x = std::stof(s, &used);
        if (used == s.size()) return x;
      } else {
        const float a = std::stof(s.substr(0, slash), &used);
        if (used == slash) {
          const auto rest = s.substr(slash + 1);
          const float b = std::stof(rest, &used);
          if (used == rest.size() && b != 0.0f) return a / b;
        }
      }
    } catch (const std::exception&) {
    }
    throw ConfigError("cannot parse epsilon '" + s + "' (expected a number or a fraction like 4/255)");
  }
  throw ConfigError("epsilon must be a number or a fraction string");
}

std::string epsilon_tag(float eps) {
  const double k = static_cast<double>(eps) * 255.0;
  const double r = std::round(k);
  std::ostringstream os;
  os << "eps";
  if (std::fabs(k - r) < 1e-3) os << static_cast<long long>(r);
  else os << std::fixed << std::setprecision(3) << k;
  return os.str();
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty path component");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "': '" + key + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

nlohmann::json train_config_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"label_smoothing", t.label_smoothing},
          {"augmentation", t.augmentation},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"ema_decay", t.ema_decay},
          {"patience", t.patience},
          {"min_delta", t.min_delta},
          {"val_epsilon", t.val_epsilon},
          {"val_attack_steps", t.val_attack_steps},
          {"val_max_samples", t.val_max_samples},
          {"adv_val_for_standard", t.adv_val_for_standard},
          {"select_last", t.select_last}};
}

nlohmann::json trades_config_json(const TradesConfig& t) {
  return {{"beta", t.beta},
          {"inner_steps", t.inner_steps},
          {"inner_step_size", t.inner_step_size},
          {"inner_loss", inner_loss_name(t.inner_loss)},
          {"init_noise", t.init_noise}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  Fields root(j, "");
  int version = 0;
  if (!root.find("schema_version")) throw ConfigError("config: missing schema_version (expected " + std::to_string(kSchemaVersion) + ")");
  root.get("schema_version", version);
  if (version != kSchemaVersion) {
    throw ConfigError("config: schema_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  ExperimentConfig c;
  root.get("name", c.name);
  root.get("seed", c.seed);

  {
    Fields d = root.sub("data");
    d.get("source", c.data.source);
    d.get("num_classes", c.data.num_classes);
    d.get("max_train", c.data.max_train);
    d.get("max_val", c.data.max_val);
    d.get("max_test", c.data.max_test);
    d.get("resize", c.data.resize);
    d.get_enum("resize_filter", c.data.resize_filter, parse_resize_filter);
    Fields s = d.sub("synthetic");
    auto& y = c.data.synthetic;
    s.get("classes", y.classes);
    s.get("size", y.size);
    s.get("channels", y.channels);
    s.get("train_per_class", y.train_per_class);
    s.get("val_per_class", y.val_per_class);
    s.get("test_per_class", y.test_per_class);
    s.get("base", y.base);
    s.get("a_r", y.a_r);
    s.get("p_r", y.p_r);
    s.get("a_mid", y.a_mid);
    s.get("p_mid", y.p_mid);
    if (const json* v = s.find("a_nr")) y.a_nr = parse_epsilon(*v);
    s.get("noise", y.noise);
    s.get("base_jitter", y.base_jitter);
    s.done();
    d.done();
  }
  if (const json* m = root.find("model")) {
    try {
      c.model = model_spec_from_json(*m);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config 'model': ") + e.what());
    }
  }
  {
    Fields t = root.sub("train");
    auto& x = c.train;
    t.get("lr", x.lr);
    t.get("batch_size", x.batch_size);
    t.get("max_epochs", x.max_epochs);
    t.get("label_smoothing", x.label_smoothing);
    t.get("augmentation", x.augmentation);
    t.get("momentum", x.momentum);
    t.get("weight_decay", x.weight_decay);
    t.get("ema_decay", x.ema_decay);
    t.get("patience", x.patience);
    t.get("min_delta", x.min_delta);
    if (const json* v = t.find("val_epsilon")) x.val_epsilon = parse_epsilon(*v);
    t.get("val_attack_steps", x.val_attack_steps);
    t.get("val_max_samples", x.val_max_samples);
    t.get("adv_val_for_standard", x.adv_val_for_standard);
    t.get("select_last", x.select_last);
    t.done();
  }
  {
    Fields t = root.sub("trades");
    t.get("beta", c.trades.beta);
    t.get("inner_steps", c.trades.inner_steps);
    t.get("inner_step_size", c.trades.inner_step_size);
    t.get_enum("inner_loss", c.trades.inner_loss, parse_inner_loss);
    t.get("init_noise", c.trades.init_noise);
    t.done();
  }
  {
    Fields t = root.sub("distill");
    t.get("steps", c.distill.steps);
    t.get("step_size", c.distill.step_size);
    t.get("restarts", c.distill.restarts);
    t.get("batch_size", c.distill.batch_size);
    t.get("validation", c.nonrobust_validation);
    t.done();
  }
  {
    Fields t = root.sub("attack");
    t.get("pgd_steps", c.attack.pgd_steps);
    t.get("restarts", c.attack.restarts);
    t.get("max_targets", c.attack.max_targets);
    t.get("square_queries", c.attack.square_queries);
    t.get("batch_size", c.attack.batch_size);
    t.get("standalone", c.attack.standalone);
    t.done();
  }
  if (const json* e = root.find("epsilons")) {
    if (!e->is_array() || e->empty()) throw ConfigError("config key 'epsilons' must be a non-empty array");
    c.epsilons.clear();
    for (const auto& v : *e) c.epsilons.push_back(parse_epsilon(v));
  }
  {
    Fields g = root.sub("grid");
    g.get("enabled", c.grid.enabled);
    g.get_enum("size_class", c.grid.size_class, parse_size_class);
    g.get("lrs", c.grid.lrs);
    g.get("batch_sizes", c.grid.batch_sizes);
    g.get("augmentation", c.grid.augmentation);
    g.get("max_epochs", c.grid.max_epochs);
    g.get("robust_allowlist", c.grid.robust_allowlist);
    g.get("workers", c.grid.workers);
    g.done();
  }
  {
    Fields v = root.sub("eval");
    v.get("corruption_seed", c.eval.corruption_seed);
    v.get("max_samples", c.eval.max_samples);
    v.get("adversarial_max_samples", c.eval.adversarial_max_samples);
    v.get("workers", c.eval.workers);
    v.done();
  }
  root.done();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j = json::parse(in, nullptr, false, true);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  const auto& y = data.synthetic;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["name"] = name;
  j["seed"] = seed;
  j["data"] = {{"source", data.source},
               {"num_classes", data.num_classes},
               {"max_train", data.max_train},
               {"max_val", data.max_val},
               {"max_test", data.max_test},
               {"resize", data.resize},
               {"resize_filter", resize_filter_name(data.resize_filter)},
               {"synthetic",
                {{"classes", y.classes},
                 {"size", y.size},
                 {"channels", y.channels},
                 {"train_per_class", y.train_per_class},
                 {"val_per_class", y.val_per_class},
                 {"test_per_class", y.test_per_class},
                 {"base", y.base},
                 {"a_r", y.a_r},
                 {"p_r", y.p_r},
                 {"a_mid", y.a_mid},
                 {"p_mid", y.p_mid},
                 {"a_nr", y.a_nr},
                 {"noise", y.noise},
                 {"base_jitter", y.base_jitter}}}};
  j["model"] = model_spec_to_json(model);
  j["train"] = train_config_json(train);
  j["trades"] = trades_config_json(trades);
  j["distill"] = {{"steps", distill.steps},
                  {"step_size", distill.step_size},
                  {"restarts", distill.restarts},
                  {"batch_size", distill.batch_size},
                  {"validation", nonrobust_validation}};
  j["attack"] = {{"pgd_steps", attack.pgd_steps},
                 {"restarts", attack.restarts},
                 {"max_targets", attack.max_targets},
                 {"square_queries", attack.square_queries},
                 {"batch_size", attack.batch_size},
                 {"standalone", attack.standalone}};
  j["epsilons"] = epsilons;
  j["grid"] = {{"enabled", grid.enabled},
               {"size_class", size_class_name(grid.size_class)},
               {"lrs", grid.lrs},
               {"batch_sizes", int_vec(grid.batch_sizes)},
               {"augmentation", grid.augmentation},
               {"max_epochs", int_vec(grid.max_epochs)},
               {"robust_allowlist", grid.robust_allowlist},
               {"workers", grid.workers}};
  j["eval"] = {{"corruption_seed", eval.corruption_seed},
               {"max_samples", eval.max_samples},
               {"adversarial_max_samples", eval.adversarial_max_samples},
               {"workers", eval.workers}};
  return j;
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()); }

void ExperimentConfig::validate() const {
  const auto wrap = [](const char* what, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config '") + what + "': " + e.what());
    }
  };
  wrap("train", [&] { train.validate(); });
  wrap("trades", [&] {
    TradesConfig t = trades;
    for (float e : epsilons) {
      t.epsilon = e;
      t.validate();
    }
  });
  wrap("distill", [&] {
    DistillConfig d = distill;
    for (float e : epsilons) {
      d.epsilon = e;
      d.validate();
    }
  });
  if (nonrobust_validation != "original" && nonrobust_validation != "distilled") {
    throw ConfigError("config 'distill.validation': must be 'original' or 'distilled'");
  }
  if (data.source == "synthetic") wrap("data.synthetic", [&] { data.synthetic.validate(); });
  for (float e : epsilons) {
    if (!(e > 0.0f && e < 1.0f)) throw ConfigError("config 'epsilons': each epsilon must be in (0,1)");
  }
  if (data.max_train < 0 || data.max_val < 0 || data.max_test < 0 || data.resize < 0) {
    throw ConfigError("config 'data': sizes must be non-negative");
  }
  if (attack.pgd_steps < 0 || attack.restarts < 1 || attack.max_targets < 0 || attack.square_queries < 0 ||
      attack.batch_size < 1) {
    throw ConfigError("config 'attack': counts must be non-negative, restarts and batch_size at least 1");
  }
  if (grid.workers < 1 || eval.workers < 1) throw ConfigError("config: workers must be at least 1");
  for (float lr : grid.lrs)
    if (!(lr > 0.0f)) throw ConfigError("config 'grid.lrs': learning rates must be positive");
  for (int b : grid.batch_sizes)
    if (b < 1) throw ConfigError("config 'grid.batch_sizes': batch sizes must be positive");
  for (int e : grid.max_epochs)
    if (e < 1) throw ConfigError("config 'grid.max_epochs': epoch counts must be positive");
}

}  // namespace nrf
