#pragma once

// Project configuration: a strict, typed view over a JSON document.
//
// Rules: `schema_version` is required (and must match kConfigSchemaVersion);
// unknown keys anywhere in the tree are hard errors (they are almost always
// typos, and silently ignoring them would run a different experiment than
// the one the user wrote down); missing keys take the documented defaults.
// Canonical serialization sorts keys and round-trips binary-exact doubles,
// so equal configs produce byte-identical blobs for hashing/embedding.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spc/common.hpp"
#include "spc/encoder.hpp"
#include "spc/models.hpp"

namespace spc {

inline constexpr int kConfigSchemaVersion = 1;

using Json = nlohmann::json;

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "cifar"
  std::string path = "data";
  int train_images = 5000;
  int eval_images = 1000;
  int image_side = 32;
};

struct DictLearnSection {
  int L = 96;
  double lambda = 1.0;
  int iters = 50;
  int patches = 5000;   // training patches sampled for learning
  int batch = 0;        // patches re-coded per alternation; 0 = all
  double lasso_tol = 1e-6;
  int lasso_max_iter = 1000;
};

struct TrainingSection {
  std::string mode = "supervised-joint";
  // "natural" | "supervised-joint" | "unsupervised-decoder" |
  // "classifier-only" | "pgd-adversarial"
  int epochs = 30;
  int batch = 32;
  double eta_min = 0.0;
  double eta_max = 0.05;
  double momentum = 0.9;
  int subset = 0;  // train on the first N images only; 0 = all
  int at_steps = 5;            // pgd-adversarial inner steps
  double at_delta = 2.0 / 255.0;
  double at_eps = 8.0 / 255.0;
};

struct AttackSection {
  std::string mode = "pgd";  // "pgd" | "pgd-eot" | "wnfga" | "waiga" | "pwt" | "bt"
  int steps = 20;
  double delta = 1.0 / 255.0;
  double eps = 8.0 / 255.0;
  int restarts = 1;
  int eot = 1;  // gradient draws per step for dropout averaging
  std::string surrogate = "smooth";  // "identity" | "smooth" (quantizer backward)
  double sigma = 0.25;               // smooth surrogate width scale
  bool random_start = false;
  std::string loss = "cross-entropy";  // "cross-entropy" | "cw-margin"
  std::string eot_aggregation = "mean-grad";  // | "mean-normalized-grad"
  std::string source_attack = "waiga";  // pwt: attack run on the sibling model
  int images = 1000;
};

struct EvalSection {
  int ensemble = 10;
  int images = 1000;
  int correlation_images = 32;  // eval images mined for correlation patches
};

// One crafted attack in the experiment pipeline: `target` names the model the
// perturbations are evaluated against; transfer modes (pwt, bt) craft on the
// sibling / adversarially trained model respectively.
struct AttackEntry {
  std::string name;
  std::string target = "defense";  // natural | defense | sibling | adversarial
  AttackSection section;
};

// Orchestration plan.  `stages` lists which pipeline stages run, in pipeline
// order; `trainings` holds the resolved hyperparameters of each train stage
// (the stage dictates the training mode); `attacks` is the crafted suite.
struct ExperimentSection {
  std::vector<std::string> stages;
  std::map<std::string, TrainingSection> trainings;
  std::vector<AttackEntry> attacks;
};

inline const std::vector<std::string>& experiment_stage_names() {
  static const std::vector<std::string> k = {
      "learn-dictionary",  "train-natural", "train-defense", "train-sibling",
      "train-adversarial", "attacks",       "evaluate",      "report"};
  return k;
}

inline const std::map<std::string, std::string>& train_stage_modes() {
  static const std::map<std::string, std::string> k = {
      {"train-natural", "natural"},
      {"train-defense", "supervised-joint"},
      {"train-sibling", "unsupervised-decoder"},  // then classifier-only
      {"train-adversarial", "pgd-adversarial"}};
  return k;
}

inline std::vector<AttackEntry> default_attack_entries(
    const AttackSection& base) {
  auto entry = [&base](const char* name, const char* target,
                       const char* mode) {
    AttackEntry e;
    e.name = name;
    e.target = target;
    e.section = base;
    e.section.mode = mode;
    return e;
  };
  return {entry("nt-pgd", "natural", "pgd"), entry("wnfga", "defense", "wnfga"),
          entry("waiga", "defense", "waiga"), entry("pwt", "defense", "pwt"),
          entry("bt", "defense", "bt")};
}

struct ProjectConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 1;
  int threads = 1;
  std::string precision = "fp32";  // "fp32" | "fp64"
  DataConfig data;
  DictLearnSection dictionary;
  EncoderConfig encoder;
  std::vector<DecoderGeometry::Layer> decoder_layers = {
      {48, 2, 2, 0}, {16, 3, 1, 0}, {3, 3, 1, 1}};
  ClassifierGeometry classifier;
  TrainingSection training;
  AttackSection attack;
  EvalSection eval;
  ExperimentSection experiment;  // resolved in parse_config
};

// Fills the orchestration plan from the base sections: all stages, the four
// train-stage sections with their stage-implied modes, the default attack
// suite.
inline void resolve_experiment_defaults(ProjectConfig& c) {
  c.experiment.stages = experiment_stage_names();
  c.experiment.trainings.clear();
  for (const auto& [stage, mode] : train_stage_modes()) {
    TrainingSection t = c.training;
    t.mode = mode;
    c.experiment.trainings[stage] = t;
  }
  c.experiment.attacks = default_attack_entries(c.attack);
}

namespace detail {

inline void require_keys_known(const Json& obj, const char* path,
                               std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    throw ConfigError(std::string("config node '") + path + "' must be an object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(std::string("unknown config key '") + path + "." +
                        item.key() + "'");
  }
}

template <class T>
void get_to(const Json& obj, const char* key, T& out) {
  if (obj.contains(key)) obj.at(key).get_to(out);
}

// Applies training keys from `t` onto `out`.  The mode key is only legal at
// the top-level training section; per-stage sections inherit their mode from
// the stage itself.
inline void apply_training_fields(const Json& t, const char* path,
                                  TrainingSection& out, bool allow_mode) {
  if (allow_mode) {
    require_keys_known(t, path,
                       {"mode", "epochs", "batch", "eta_min", "eta_max",
                        "momentum", "subset", "at_steps", "at_delta", "at_eps"});
    get_to(t, "mode", out.mode);
  } else {
    require_keys_known(t, path,
                       {"epochs", "batch", "eta_min", "eta_max", "momentum",
                        "subset", "at_steps", "at_delta", "at_eps"});
  }
  get_to(t, "epochs", out.epochs);
  get_to(t, "batch", out.batch);
  get_to(t, "eta_min", out.eta_min);
  get_to(t, "eta_max", out.eta_max);
  get_to(t, "momentum", out.momentum);
  get_to(t, "subset", out.subset);
  get_to(t, "at_steps", out.at_steps);
  get_to(t, "at_delta", out.at_delta);
  get_to(t, "at_eps", out.at_eps);
}

inline void apply_attack_fields(const Json& a, const char* path,
                                AttackSection& out,
                                std::initializer_list<const char*> extra = {}) {
  std::vector<const char*> allowed = {
      "mode",       "steps",           "delta",         "eps",
      "restarts",   "eot",             "surrogate",     "sigma",
      "random_start", "loss",          "eot_aggregation", "source_attack",
      "images"};
  for (const char* k : extra) allowed.push_back(k);
  if (!a.is_object())
    throw ConfigError(std::string("config node '") + path + "' must be an object");
  for (const auto& item : a.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) known = true;
    if (!known)
      throw ConfigError(std::string("unknown config key '") + path + "." +
                        item.key() + "'");
  }
  get_to(a, "mode", out.mode);
  get_to(a, "steps", out.steps);
  get_to(a, "delta", out.delta);
  get_to(a, "eps", out.eps);
  get_to(a, "restarts", out.restarts);
  get_to(a, "eot", out.eot);
  get_to(a, "surrogate", out.surrogate);
  get_to(a, "sigma", out.sigma);
  get_to(a, "random_start", out.random_start);
  get_to(a, "loss", out.loss);
  get_to(a, "eot_aggregation", out.eot_aggregation);
  get_to(a, "source_attack", out.source_attack);
  get_to(a, "images", out.images);
}

inline void validate_attack_section(const AttackSection& a, const char* path) {
  static const char* kModes[] = {"pgd", "pgd-eot", "wnfga",
                                 "waiga", "pwt",  "bt"};
  bool ok = false;
  for (const char* m : kModes) ok |= a.mode == m;
  if (!ok)
    throw ConfigError(std::string("unknown ") + path + ".mode '" + a.mode + "'");
  if (a.surrogate != "identity" && a.surrogate != "smooth")
    throw ConfigError(std::string(path) + ".surrogate must be identity or smooth");
  if (a.loss != "cross-entropy" && a.loss != "cw-margin")
    throw ConfigError(std::string(path) + ".loss must be cross-entropy or cw-margin");
  if (a.eot_aggregation != "mean-grad" &&
      a.eot_aggregation != "mean-normalized-grad")
    throw ConfigError(std::string(path) +
                      ".eot_aggregation must be mean-grad or mean-normalized-grad");
  if (a.mode == "pwt" && a.source_attack != "wnfga" &&
      a.source_attack != "waiga" && a.source_attack != "pgd-eot")
    throw ConfigError(std::string(path) +
                      ".source_attack must be wnfga, waiga, or pgd-eot");
}

}  // namespace detail

inline ProjectConfig parse_config(const Json& j) {
  detail::require_keys_known(
      j, "$",
      {"schema_version", "seed", "threads", "precision", "data", "dictionary",
       "encoder", "decoder", "classifier", "training", "attack", "eval",
       "experiment"});
  if (!j.contains("schema_version"))
    throw ConfigError("config is missing required key 'schema_version'");
  ProjectConfig c;
  j.at("schema_version").get_to(c.schema_version);
  if (c.schema_version != kConfigSchemaVersion)
    throw ConfigError("unsupported schema_version " +
                      std::to_string(c.schema_version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  detail::get_to(j, "seed", c.seed);
  detail::get_to(j, "threads", c.threads);
  detail::get_to(j, "precision", c.precision);
  if (c.precision != "fp32" && c.precision != "fp64")
    throw ConfigError("precision must be fp32 or fp64");
  if (c.threads < 1) throw ConfigError("threads must be >= 1");

  if (j.contains("data")) {
    const Json& d = j.at("data");
    detail::require_keys_known(
        d, "data", {"source", "path", "train_images", "eval_images", "image_side"});
    detail::get_to(d, "source", c.data.source);
    detail::get_to(d, "path", c.data.path);
    detail::get_to(d, "train_images", c.data.train_images);
    detail::get_to(d, "eval_images", c.data.eval_images);
    detail::get_to(d, "image_side", c.data.image_side);
    if (c.data.source != "synthetic" && c.data.source != "cifar")
      throw ConfigError("data.source must be synthetic or cifar");
  }
  if (j.contains("dictionary")) {
    const Json& d = j.at("dictionary");
    detail::require_keys_known(
        d, "dictionary",
        {"L", "lambda", "iters", "patches", "batch", "lasso_tol", "lasso_max_iter"});
    detail::get_to(d, "L", c.dictionary.L);
    detail::get_to(d, "lambda", c.dictionary.lambda);
    detail::get_to(d, "iters", c.dictionary.iters);
    detail::get_to(d, "patches", c.dictionary.patches);
    detail::get_to(d, "batch", c.dictionary.batch);
    detail::get_to(d, "lasso_tol", c.dictionary.lasso_tol);
    detail::get_to(d, "lasso_max_iter", c.dictionary.lasso_max_iter);
  }
  if (j.contains("encoder")) {
    const Json& e = j.at("encoder");
    detail::require_keys_known(e, "encoder",
                               {"n", "S", "T", "p", "beta", "eps", "enable_topT",
                                "enable_dropout", "enable_quant", "scale_by_l1"});
    detail::get_to(e, "n", c.encoder.n);
    detail::get_to(e, "S", c.encoder.S);
    detail::get_to(e, "T", c.encoder.T);
    detail::get_to(e, "p", c.encoder.p);
    detail::get_to(e, "beta", c.encoder.beta);
    detail::get_to(e, "eps", c.encoder.eps);
    detail::get_to(e, "enable_topT", c.encoder.enable_topT);
    detail::get_to(e, "enable_dropout", c.encoder.enable_dropout);
    detail::get_to(e, "enable_quant", c.encoder.enable_quant);
    detail::get_to(e, "scale_by_l1", c.encoder.scale_by_l1);
    c.encoder.validate();
  }
  if (j.contains("decoder")) {
    const Json& d = j.at("decoder");
    detail::require_keys_known(d, "decoder", {"layers"});
    if (d.contains("layers")) {
      c.decoder_layers.clear();
      for (const Json& row : d.at("layers")) {
        if (!row.is_array() || row.size() != 4)
          throw ConfigError("decoder.layers rows must be [out_ch, k, stride, pad]");
        c.decoder_layers.push_back({row[0].get<int>(), row[1].get<int>(),
                                    row[2].get<int>(), row[3].get<int>()});
      }
      if (c.decoder_layers.empty() || c.decoder_layers.back().out_ch != 3)
        throw ConfigError("decoder.layers must end in a 3-channel layer");
    }
  }
  if (j.contains("classifier")) {
    const Json& d = j.at("classifier");
    detail::require_keys_known(d, "classifier", {"w0", "w1", "w2", "classes"});
    detail::get_to(d, "w0", c.classifier.w0);
    detail::get_to(d, "w1", c.classifier.w1);
    detail::get_to(d, "w2", c.classifier.w2);
    detail::get_to(d, "classes", c.classifier.classes);
  }
  if (j.contains("training")) {
    detail::apply_training_fields(j.at("training"), "training", c.training,
                                  /*allow_mode=*/true);
    static const char* kModes[] = {"natural", "supervised-joint",
                                   "unsupervised-decoder", "classifier-only",
                                   "pgd-adversarial"};
    bool ok = false;
    for (const char* m : kModes) ok |= c.training.mode == m;
    if (!ok) throw ConfigError("unknown training.mode '" + c.training.mode + "'");
  }
  if (j.contains("attack")) {
    detail::apply_attack_fields(j.at("attack"), "attack", c.attack);
    detail::validate_attack_section(c.attack, "attack");
  }
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    detail::require_keys_known(e, "eval",
                               {"ensemble", "images", "correlation_images"});
    detail::get_to(e, "ensemble", c.eval.ensemble);
    detail::get_to(e, "images", c.eval.images);
    detail::get_to(e, "correlation_images", c.eval.correlation_images);
    if (c.eval.ensemble < 1 || c.eval.images < 1 || c.eval.correlation_images < 0)
      throw ConfigError("eval sizes out of range");
  }

  // Resolve the orchestration plan.  Per-stage training sections start from
  // the base training hyperparameters; attack entries start from the base
  // attack section.
  resolve_experiment_defaults(c);
  if (j.contains("experiment")) {
    const Json& x = j.at("experiment");
    detail::require_keys_known(x, "experiment",
                               {"stages", "trainings", "attacks"});
    if (x.contains("stages")) {
      c.experiment.stages.clear();
      for (const Json& s : x.at("stages"))
        c.experiment.stages.push_back(s.get<std::string>());
      std::vector<std::string> seen;
      for (const std::string& s : c.experiment.stages) {
        bool known = false;
        for (const std::string& k : experiment_stage_names()) known |= s == k;
        if (!known) throw ConfigError("unknown experiment stage '" + s + "'");
        for (const std::string& t : seen)
          if (t == s) throw ConfigError("duplicate experiment stage '" + s + "'");
        seen.push_back(s);
      }
    }
    if (x.contains("trainings")) {
      const Json& ts = x.at("trainings");
      if (!ts.is_object())
        throw ConfigError("experiment.trainings must be an object");
      for (const auto& item : ts.items()) {
        auto it = c.experiment.trainings.find(item.key());
        if (it == c.experiment.trainings.end())
          throw ConfigError("experiment.trainings key '" + item.key() +
                            "' is not a train stage");
        detail::apply_training_fields(
            item.value(), ("experiment.trainings." + item.key()).c_str(),
            it->second, /*allow_mode=*/false);
      }
    }
    if (x.contains("attacks")) {
      c.experiment.attacks.clear();
      for (const Json& row : x.at("attacks")) {
        AttackEntry e;
        e.section = c.attack;
        detail::apply_attack_fields(row, "experiment.attacks[]", e.section,
                                    {"name", "target"});
        detail::get_to(row, "name", e.name);
        detail::get_to(row, "target", e.target);
        // pgd-eot means straight-through gradients unless the entry says
        // otherwise, regardless of the base section's surrogate.
        if (e.section.mode == "pgd-eot" && !row.contains("surrogate"))
          e.section.surrogate = "identity";
        c.experiment.attacks.push_back(std::move(e));
      }
    }
  }
  for (const AttackEntry& e : c.experiment.attacks) {
    if (e.name.empty())
      throw ConfigError("experiment attack entries need a non-empty name");
    for (char ch : e.name)
      if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' ||
            ch == '_'))
        throw ConfigError("attack name '" + e.name +
                          "' may only use letters, digits, '-', '_'");
    int dup = 0;
    for (const AttackEntry& o : c.experiment.attacks) dup += o.name == e.name;
    if (dup != 1) throw ConfigError("duplicate attack name '" + e.name + "'");
    detail::validate_attack_section(e.section,
                                    ("attack '" + e.name + "'").c_str());
    static const char* kTargets[] = {"natural", "defense", "sibling",
                                     "adversarial"};
    bool ok = false;
    for (const char* t : kTargets) ok |= e.target == t;
    if (!ok)
      throw ConfigError("attack '" + e.name + "' has unknown target '" +
                        e.target + "'");
    const std::string& m = e.section.mode;
    const bool identity_target = e.target == "natural" || e.target == "adversarial";
    if (m == "pgd" && !identity_target)
      throw ConfigError("attack '" + e.name +
                        "': pgd needs an identity-front target");
    if ((m == "pgd-eot" || m == "wnfga" || m == "waiga") && identity_target)
      throw ConfigError("attack '" + e.name + "': " + m +
                        " needs a sparse-front target");
    if ((m == "pwt" || m == "bt") && e.target != "defense")
      throw ConfigError("attack '" + e.name + "': " + m +
                        " transfers onto the defense target");
  }
  return c;
}

inline Json to_json(const ProjectConfig& cfg) {
  // Serialization always emits a resolved orchestration plan, making the
  // canonical form a fixed point of parse(serialize(.)).  A hand-built
  // config that never went through parse_config resolves here.
  ProjectConfig resolved;
  const ExperimentSection& e = cfg.experiment;
  const bool unresolved =
      e.stages.empty() && e.trainings.empty() && e.attacks.empty();
  if (unresolved) {
    resolved = cfg;
    resolve_experiment_defaults(resolved);
  }
  const ProjectConfig& c = unresolved ? resolved : cfg;
  Json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["precision"] = c.precision;
  j["data"] = {{"source", c.data.source},
               {"path", c.data.path},
               {"train_images", c.data.train_images},
               {"eval_images", c.data.eval_images},
               {"image_side", c.data.image_side}};
  j["dictionary"] = {{"L", c.dictionary.L},
                     {"lambda", c.dictionary.lambda},
                     {"iters", c.dictionary.iters},
                     {"patches", c.dictionary.patches},
                     {"batch", c.dictionary.batch},
                     {"lasso_tol", c.dictionary.lasso_tol},
                     {"lasso_max_iter", c.dictionary.lasso_max_iter}};
  j["encoder"] = {{"n", c.encoder.n},
                  {"S", c.encoder.S},
                  {"T", c.encoder.T},
                  {"p", c.encoder.p},
                  {"beta", c.encoder.beta},
                  {"eps", c.encoder.eps},
                  {"enable_topT", c.encoder.enable_topT},
                  {"enable_dropout", c.encoder.enable_dropout},
                  {"enable_quant", c.encoder.enable_quant},
                  {"scale_by_l1", c.encoder.scale_by_l1}};
  Json layers = Json::array();
  for (const auto& l : c.decoder_layers)
    layers.push_back({l.out_ch, l.k, l.stride, l.pad});
  j["decoder"] = {{"layers", layers}};
  j["classifier"] = {{"w0", c.classifier.w0},
                     {"w1", c.classifier.w1},
                     {"w2", c.classifier.w2},
                     {"classes", c.classifier.classes}};
  j["training"] = {{"mode", c.training.mode},
                   {"epochs", c.training.epochs},
                   {"batch", c.training.batch},
                   {"eta_min", c.training.eta_min},
                   {"eta_max", c.training.eta_max},
                   {"momentum", c.training.momentum},
                   {"subset", c.training.subset},
                   {"at_steps", c.training.at_steps},
                   {"at_delta", c.training.at_delta},
                   {"at_eps", c.training.at_eps}};
  auto attack_json = [](const AttackSection& a) {
    return Json{{"mode", a.mode},
                {"steps", a.steps},
                {"delta", a.delta},
                {"eps", a.eps},
                {"restarts", a.restarts},
                {"eot", a.eot},
                {"surrogate", a.surrogate},
                {"sigma", a.sigma},
                {"random_start", a.random_start},
                {"loss", a.loss},
                {"eot_aggregation", a.eot_aggregation},
                {"source_attack", a.source_attack},
                {"images", a.images}};
  };
  j["attack"] = attack_json(c.attack);
  j["eval"] = {{"ensemble", c.eval.ensemble},
               {"images", c.eval.images},
               {"correlation_images", c.eval.correlation_images}};
  Json trainings = Json::object();
  for (const auto& [stage, t] : c.experiment.trainings)
    trainings[stage] = {{"epochs", t.epochs},       {"batch", t.batch},
                        {"eta_min", t.eta_min},     {"eta_max", t.eta_max},
                        {"momentum", t.momentum},   {"subset", t.subset},
                        {"at_steps", t.at_steps},   {"at_delta", t.at_delta},
                        {"at_eps", t.at_eps}};
  Json attacks = Json::array();
  for (const AttackEntry& e : c.experiment.attacks) {
    Json row = attack_json(e.section);
    row["name"] = e.name;
    row["target"] = e.target;
    attacks.push_back(std::move(row));
  }
  j["experiment"] = {{"stages", c.experiment.stages},
                     {"trainings", trainings},
                     {"attacks", attacks}};
  return j;
}

// Byte-stable blob: nlohmann objects iterate in sorted key order and dump
// doubles with shortest-round-trip formatting, so equal configs serialize
// identically.
inline std::string canonical_config(const ProjectConfig& c) {
  return to_json(c).dump();
}

inline ProjectConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

// "a.b.c=value" override onto a raw JSON tree.  The value is parsed as JSON
// when possible, else taken as a string.
inline void apply_override(Json& j, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value: " + spec);
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;
  }
  Json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("bad override path: " + spec);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace spc
