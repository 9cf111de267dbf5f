#pragma once
// Experiment orchestration: runs the configured pipeline stages in order and
// persists every artifact under one output directory.
//
// Stages and their artifacts (paths relative to the output directory):
//   learn-dictionary    dictionary.ssd1, dictionary_trace.csv
//   train-natural       natural.ssck, natural_train.csv
//   train-defense       defense.ssck, defense_train.csv
//   train-sibling       sibling.ssck, sibling_decoder_train.csv,
//                       sibling_classifier_train.csv
//   train-adversarial   adversarial.ssck, adversarial_train.csv
//   attacks             attack_<name>.sspb, attack_<name>_manifest.csv,
//                       attack_summary.csv
//   evaluate            accuracy.csv, ensemble.csv, corruption_<name>.csv,
//                       corruption_summary.csv, correlation_rho.csv,
//                       correlation_gamma.csv
//   report              report.txt
//
// manifest.json is rewritten after every completed stage: config (embedded
// and hashed), seed, precision, completed stages, and the SHA-256 of each
// artifact at the moment it was written.  Later stages re-hash the artifacts
// they read and fail if anything was modified in between.  Nothing in the
// manifest depends on wall-clock time, so identical config + seeds reproduce
// every artifact byte for byte.
//
// Randomness bookkeeping: model initialization, per-stage training, and each
// attack draw from streams folded from the config seed with fixed tags, so
// adding or removing one stage never shifts another stage's randomness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spc/attacks.hpp"
#include "spc/checkpoint.hpp"
#include "spc/common.hpp"
#include "spc/config.hpp"
#include "spc/data.hpp"
#include "spc/dictionary.hpp"
#include "spc/metrics.hpp"
#include "spc/models.hpp"
#include "spc/training.hpp"

namespace spc {

struct RunSummary {
  std::string out_dir;
  std::vector<std::string> stages_completed;
  std::map<std::string, std::string> artifacts;  // relative path -> sha256
};

namespace detail {

struct ScopedThreads {
  int saved;
  explicit ScopedThreads(int n) : saved(max_threads()) { max_threads() = n; }
  ~ScopedThreads() { max_threads() = saved; }
};

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("short write: " + path);
}

inline std::string format17(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Minimal CSV reader for our own outputs (no quoting, no embedded commas).
inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

// Without-replacement subset in draw order (partial Fisher-Yates).
template <class T>
Dataset<T> subsample(const Dataset<T>& full, int count,
                     const std::vector<std::uint64_t>& words) {
  if (count > full.count())
    throw DataError("subset larger than the dataset (" +
                    std::to_string(count) + " > " +
                    std::to_string(full.count()) + ")");
  Rng rng = Rng::from_key(Rng::fold_words(words.data(), words.size()));
  std::vector<int> pool(full.count());
  for (int i = 0; i < full.count(); ++i) pool[i] = i;
  Dataset<T> out;
  out.image_side = full.image_side;
  const std::size_t plane =
      static_cast<std::size_t>(3) * full.image_side * full.image_side;
  for (int i = 0; i < count; ++i) {
    const int j =
        i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(
                full.count() - i)));
    std::swap(pool[i], pool[j]);
    const T* src = full.image(pool[i]);
    out.images.insert(out.images.end(), src, src + plane);
    out.labels.push_back(full.labels[pool[i]]);
  }
  return out;
}

inline std::vector<int> label_histogram(const std::vector<int>& labels) {
  std::vector<int> h(10, 0);
  for (int l : labels) ++h[static_cast<std::size_t>(l)];
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Report assembly from the evaluation CSVs.  Missing inputs are listed and a
// partial report is still produced; blank table cells carry a footnote.  The
// pipeline ordering checks are annotated PASS / FAIL when the cells they
// need are present, SKIPPED otherwise.
inline std::string emit_report(const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::ostringstream rep;
  std::vector<std::string> missing;

  auto load = [&](const char* name,
                  std::vector<std::vector<std::string>>& rows) {
    const std::string p = out_dir + "/" + name;
    if (!fs::exists(p)) {
      missing.push_back(name);
      return false;
    }
    rows = detail::read_csv(p);
    return !rows.empty();
  };

  std::vector<std::vector<std::string>> acc, summary, corruption, ensemble;
  const bool have_acc = load("accuracy.csv", acc);
  const bool have_summary = load("attack_summary.csv", summary);
  const bool have_corr = load("corruption_summary.csv", corruption);
  const bool have_ens = load("ensemble.csv", ensemble);

  rep << "experiment report\n=================\n";
  if (!missing.empty()) {
    rep << "missing inputs:";
    for (const std::string& m : missing) rep << ' ' << m;
    rep << '\n';
  }

  // attack name -> (mode, target), for the ordering checks.
  std::map<std::string, std::pair<std::string, std::string>> attack_info;
  if (have_summary)
    for (std::size_t r = 1; r < summary.size(); ++r)
      if (summary[r].size() >= 3)
        attack_info[summary[r][0]] = {summary[r][2], summary[r][1]};

  auto cell_value = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    try {
      return std::stod(s);
    } catch (...) {
      return std::nullopt;
    }
  };

  bool any_blank = false;
  std::optional<double> nat_pgd, def_clean, def_wnfga, def_pwt;
  if (have_acc) {
    rep << "\naccuracy (fraction correct; '-' = not computed)\n";
    std::vector<std::size_t> width(acc[0].size(), 0);
    for (const auto& row : acc)
      for (std::size_t cidx = 0; cidx < row.size(); ++cidx)
        width[cidx] = std::max(
            width[cidx], std::max<std::size_t>(row[cidx].size(), 6));
    for (std::size_t r = 0; r < acc.size(); ++r) {
      for (std::size_t cidx = 0; cidx < acc[r].size(); ++cidx) {
        std::string cell = acc[r][cidx];
        if (r > 0 && cidx > 0) {
          auto v = cell_value(cell);
          if (!v) {
            cell = "-";
            any_blank = true;
          } else {
            std::ostringstream os;
            os.precision(4);
            os << std::fixed << *v;
            cell = os.str();
          }
        }
        rep << cell;
        if (cidx + 1 < acc[r].size())
          rep << std::string(width[cidx] + 2 - std::min(width[cidx] + 2,
                                                        cell.size()) ,
                             ' ');
      }
      rep << '\n';
    }
    if (any_blank)
      rep << "(-) cell not computed: model, archive, or evaluation missing\n";

    // Pull the cells the ordering checks need.  Columns are attack names;
    // modes come from attack_summary.csv, with the name itself as fallback.
    auto column_mode = [&](const std::string& name) {
      auto it = attack_info.find(name);
      return it == attack_info.end() ? name : it->second.first;
    };
    for (std::size_t r = 1; r < acc.size(); ++r) {
      const std::string& model = acc[r][0];
      for (std::size_t cidx = 1; cidx < acc[r].size() && cidx < acc[0].size();
           ++cidx) {
        const std::string& col = acc[0][cidx];
        auto v = cell_value(acc[r][cidx]);
        if (!v) continue;
        if (col == "clean" && model == "defense") def_clean = v;
        const std::string mode = column_mode(col);
        if (model == "natural" && mode == "pgd") nat_pgd = v;
        if (model == "defense" && mode == "wnfga") def_wnfga = v;
        if (model == "defense" && mode == "pwt") def_pwt = v;
      }
    }
  }

  std::optional<double> z_wnfga, z_pwt;
  if (have_corr) {
    rep << "\nmean corrupted-patch fraction\n";
    for (std::size_t r = 1; r < corruption.size(); ++r) {
      if (corruption[r].size() < 3) continue;
      rep << "  " << corruption[r][0] << ": " << corruption[r][2] << '\n';
      auto v = cell_value(corruption[r][2]);
      if (!v) continue;
      auto it = attack_info.find(corruption[r][0]);
      const std::string mode =
          it == attack_info.end() ? corruption[r][0] : it->second.first;
      if (mode == "wnfga") z_wnfga = v;
      if (mode == "pwt") z_pwt = v;
    }
  }

  std::optional<double> ens_one, ens_many;
  if (have_ens) {
    rep << "\nensemble clean accuracy\n";
    for (std::size_t r = 1; r < ensemble.size(); ++r) {
      if (ensemble[r].size() < 3 || ensemble[r][0] != "defense") continue;
      rep << "  E=" << ensemble[r][1] << ": " << ensemble[r][2] << '\n';
      auto v = cell_value(ensemble[r][2]);
      if (!v) continue;
      if (ensemble[r][1] == "1")
        ens_one = v;
      else
        ens_many = v;
    }
  }

  rep << "\npipeline ordering checks\n";
  auto check = [&rep](const char* what, std::optional<bool> ok) {
    rep << "  " << what << ": "
        << (!ok ? "SKIPPED (missing data)" : (*ok ? "PASS" : "FAIL")) << '\n';
  };
  auto both = [](const std::optional<double>& a, const std::optional<double>& b,
                 auto cmp) -> std::optional<bool> {
    if (!a || !b) return std::nullopt;
    return cmp(*a, *b);
  };
  check("natural model under pgd falls below 0.05",
        nat_pgd ? std::optional<bool>(*nat_pgd < 0.05) : std::nullopt);
  check("defense under wnfga beats natural-under-pgd by >= 0.20",
        both(def_wnfga, nat_pgd,
             [](double a, double b) { return a >= b + 0.20; }));
  check("defense clean exceeds defense under wnfga",
        both(def_clean, def_wnfga, [](double a, double b) { return a > b; }));
  check("defense under wnfga >= defense under pwt - 0.02",
        both(def_wnfga, def_pwt,
             [](double a, double b) { return a >= b - 0.02; }));
  check("pwt corrupts more patches than wnfga",
        both(z_pwt, z_wnfga, [](double a, double b) { return a > b; }));
  check("ensemble clean accuracy at high E >= E=1 - 0.005",
        both(ens_many, ens_one,
             [](double a, double b) { return a >= b - 0.005; }));
  return rep.str();
}

// ---------------------------------------------------------------------------

template <class T>
class ExperimentRun {
 public:
  ExperimentRun(const ProjectConfig& cfg, std::string out_dir)
      : cfg_(cfg), out_(std::move(out_dir)) {
    const ExperimentSection& e = cfg_.experiment;
    if (e.stages.empty() && e.trainings.empty() && e.attacks.empty())
      resolve_experiment_defaults(cfg_);
  }

  RunSummary run() {
    namespace fs = std::filesystem;
    fs::create_directories(out_);
    detail::ScopedThreads threads(cfg_.threads);
    load_prior_manifest();
    write_manifest();
    for (const std::string& stage : cfg_.experiment.stages) {
      // Rethrow with the stage name but the same dynamic type, so callers
      // can still map the error class to an exit code.  Artifacts written
      // before the failure stay on disk and in the manifest.
      auto prefix = [&stage](const Error& e) {
        return "stage '" + stage + "': " + e.what();
      };
      try {
        dispatch(stage);
      } catch (const ConfigError& e) {
        write_manifest();
        throw ConfigError(prefix(e));
      } catch (const DataError& e) {
        write_manifest();
        throw DataError(prefix(e));
      } catch (const DivergenceError& e) {
        write_manifest();
        throw DivergenceError(prefix(e));
      } catch (const Error& e) {
        write_manifest();
        throw Error(prefix(e));
      }
      if (std::find(completed_.begin(), completed_.end(), stage) ==
          completed_.end())
        completed_.push_back(stage);
      write_manifest();
    }
    RunSummary s;
    s.out_dir = out_;
    s.stages_completed = completed_;
    s.artifacts = artifacts_;
    return s;
  }

 private:
  ProjectConfig cfg_;
  std::string out_;
  std::vector<std::string> completed_;
  std::map<std::string, std::string> artifacts_;
  std::optional<Dataset<T>> train_, eval_;
  std::optional<Dictionary> dict_;
  std::map<std::string, DefenseModel<T>> models_;
  std::map<std::string, PerturbationArchive> archives_;
  std::map<std::string, std::vector<int>> label_hists_;

  std::string path(const std::string& rel) const { return out_ + "/" + rel; }

  // The experiment's identity: everything in the config except the stage
  // list, which only says what to do on one invocation.  Two runs with the
  // same identity share one artifact ledger.
  static std::string identity_blob(Json config) {
    if (config.contains("experiment") && config["experiment"].is_object())
      config["experiment"].erase("stages");
    return config.dump();
  }

  // A run into a directory holding a manifest for the same experiment
  // identity resumes it: recorded artifact hashes carry over (so stale or
  // tampered files are caught on read) and the completed-stage list
  // accumulates.  A manifest from a different identity is ignored; the
  // directory is treated as scratch.
  void load_prior_manifest() {
    const std::string mpath = path("manifest.json");
    if (!std::filesystem::exists(mpath)) return;
    Json m;
    try {
      std::ifstream in(mpath, std::ios::binary);
      in >> m;
    } catch (...) {
      return;
    }
    if (!m.contains("config") ||
        identity_blob(m["config"]) != identity_blob(to_json(cfg_)))
      return;
    if (m.contains("artifacts"))
      for (const auto& item : m["artifacts"].items())
        if (item.value().is_string() &&
            std::filesystem::exists(path(item.key())))
          artifacts_[item.key()] = item.value().get<std::string>();
    if (m.contains("stages_completed"))
      for (const Json& s : m["stages_completed"])
        if (s.is_string()) completed_.push_back(s.get<std::string>());
  }

  void record(const std::string& rel) {
    artifacts_[rel] = hex(sha256_file(path(rel)));
  }

  // Later stages must never consume an artifact that changed since it was
  // written.
  void check_unmodified(const std::string& rel) {
    auto it = artifacts_.find(rel);
    if (it == artifacts_.end()) return;
    if (hex(sha256_file(path(rel))) != it->second)
      throw DataError("artifact modified since it was written: " + rel);
  }

  void dispatch(const std::string& stage) {
    if (stage == "learn-dictionary") return stage_learn_dictionary();
    if (stage == "attacks") return stage_attacks();
    if (stage == "evaluate") return stage_evaluate();
    if (stage == "report") return stage_report();
    stage_train(stage);
  }

  // ---- data ---------------------------------------------------------------

  const Dataset<T>& data(int split) {
    std::optional<Dataset<T>>& slot = split == 0 ? train_ : eval_;
    if (slot) return *slot;
    const int want =
        split == 0 ? cfg_.data.train_images : cfg_.data.eval_images;
    if (cfg_.data.source == "synthetic") {
      slot = synth_dataset<T>(want, cfg_.data.image_side, cfg_.seed,
                              static_cast<std::uint64_t>(split));
    } else {
      std::vector<std::string> files;
      if (split == 0)
        for (int b = 1; b <= 5; ++b)
          files.push_back(cfg_.data.path + "/data_batch_" + std::to_string(b) +
                          ".bin");
      else
        files.push_back(cfg_.data.path + "/test_batch.bin");
      Dataset<T> full = load_cifar_files<T>(files, cfg_.data.image_side);
      slot = detail::subsample(
          full, want,
          {cfg_.seed, static_cast<std::uint64_t>(StreamTag::kShuffle), 0xD5,
           static_cast<std::uint64_t>(split)});
    }
    label_hists_[split == 0 ? "train" : "eval"] =
        detail::label_histogram(slot->labels);
    return *slot;
  }

  // ---- artifacts on demand --------------------------------------------------

  const Dictionary& dict() {
    if (dict_) return *dict_;
    const std::string rel = "dictionary.ssd1";
    if (!std::filesystem::exists(path(rel)))
      throw DataError(
          "missing artifact dictionary.ssd1 (run the learn-dictionary stage)");
    check_unmodified(rel);
    dict_ = load_dictionary(path(rel));
    return *dict_;
  }

  DefenseModel<T> fresh_model(const std::string& name) {
    DefenseModel<T> m;
    m.image_side = cfg_.data.image_side;
    ClassifierGeometry cg = cfg_.classifier;
    if (name == "natural" || name == "adversarial") {
      m.front = FrontEnd::kIdentity;
      m.classifier = make_classifier<T>(
          cg, Rng::fold(cfg_.seed, name == "natural" ? 0x11 : 0x41));
      return m;
    }
    m.front = FrontEnd::kSparse;
    m.dict = dict();
    m.enc = cfg_.encoder;
    DecoderGeometry dg;
    dg.in_ch = m.dict.L;
    dg.layers = cfg_.decoder_layers;
    const std::uint64_t base = name == "defense" ? 0x21 : 0x31;
    m.decoder = make_decoder<T>(dg, Rng::fold(cfg_.seed, base));
    m.classifier = make_classifier<T>(cg, Rng::fold(cfg_.seed, base + 1));
    return m;
  }

  DefenseModel<T>* try_model(const std::string& name) {
    auto it = models_.find(name);
    if (it != models_.end()) return &it->second;
    const std::string rel = name + ".ssck";
    if (!std::filesystem::exists(path(rel))) return nullptr;
    check_unmodified(rel);
    DefenseModel<T> m = fresh_model(name);
    load_checkpoint_into_model(load_checkpoint_file(path(rel)), m);
    return &(models_[name] = std::move(m));
  }

  DefenseModel<T>& model(const std::string& name) {
    DefenseModel<T>* m = try_model(name);
    if (!m)
      throw DataError("missing artifact " + name +
                      ".ssck (run the train-" + name + " stage)");
    return *m;
  }

  // ---- stages ---------------------------------------------------------------

  void stage_learn_dictionary() {
    const Dataset<T>& train = data(0);
    const int n = cfg_.encoder.n;
    const int nbar = 3 * n * n;
    const int M = cfg_.dictionary.patches;
    const int span = cfg_.data.image_side - n + 1;
    if (span < 1) throw ConfigError("patch side exceeds the image side");
    Rng rng = Rng::stream({cfg_.seed,
                           static_cast<std::uint64_t>(StreamTag::kPatchSample),
                           std::uint64_t{1} << 32});
    std::vector<double> X(static_cast<std::size_t>(M) * nbar);
    const int N = cfg_.data.image_side;
    for (int i = 0; i < M; ++i) {
      const int img = static_cast<int>(
          rng.next_below(static_cast<std::uint64_t>(train.count())));
      const int r0 = static_cast<int>(
          rng.next_below(static_cast<std::uint64_t>(span)));
      const int c0 = static_cast<int>(
          rng.next_below(static_cast<std::uint64_t>(span)));
      const T* im = train.image(img);
      double* row = X.data() + static_cast<std::size_t>(i) * nbar;
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < n; ++r)
          for (int col = 0; col < n; ++col)
            row[(c * n + r) * n + col] = static_cast<double>(
                im[(static_cast<std::size_t>(c) * N + r0 + r) * N + c0 + col]);
    }
    DictLearnOptions opts;
    opts.batch = cfg_.dictionary.batch;
    opts.lasso_tol = cfg_.dictionary.lasso_tol;
    opts.lasso_max_iter = cfg_.dictionary.lasso_max_iter;
    DictLearnResult res =
        learn_dictionary(X.data(), M, nbar, cfg_.dictionary.L,
                         cfg_.dictionary.lambda, cfg_.dictionary.iters,
                         cfg_.seed, opts);
    save_dictionary(res.dict, path("dictionary.ssd1"));
    record("dictionary.ssd1");
    std::ostringstream trace;
    trace.precision(17);
    trace << "alternation,objective_mid,objective\n";
    for (std::size_t i = 0; i < res.trace.objective.size(); ++i)
      trace << i << ',' << res.trace.objective_mid[i] << ','
            << res.trace.objective[i] << '\n';
    detail::write_text_file(path("dictionary_trace.csv"), trace.str());
    record("dictionary_trace.csv");
    dict_ = std::move(res.dict);
  }

  TrainOptions train_options(const TrainingSection& ts, TrainMode mode,
                             std::uint64_t seed_tag,
                             const std::string& model_name) {
    TrainOptions o;
    o.mode = mode;
    o.epochs = ts.epochs;
    o.batch = ts.batch;
    o.eta_min = ts.eta_min;
    o.eta_max = ts.eta_max;
    o.momentum = ts.momentum;
    o.subset = ts.subset;
    o.at_steps = ts.at_steps;
    o.at_delta = ts.at_delta;
    o.at_eps = ts.at_eps;
    o.seed = Rng::fold(cfg_.seed, seed_tag);
    o.divergence_checkpoint = path(model_name + "_divergence.ssck");
    o.config_json = canonical_config(cfg_);
    return o;
  }

  void write_train_csv(const std::string& rel, const TrainLog& log) {
    std::ostringstream os;
    write_training_csv(os, log.rows);
    detail::write_text_file(path(rel), os.str());
    record(rel);
  }

  void stage_train(const std::string& stage) {
    const std::string name = stage.substr(std::string("train-").size());
    const TrainingSection& ts = cfg_.experiment.trainings.at(stage);
    DefenseModel<T> m = fresh_model(name);
    if (stage == "train-sibling") {
      TrainLog dec = train_model(
          m, data(0),
          train_options(ts, TrainMode::kUnsupervisedDecoder, 0x53, name));
      write_train_csv(name + "_decoder_train.csv", dec);
      TrainLog clf = train_model(
          m, data(0),
          train_options(ts, TrainMode::kClassifierOnly, 0x54, name));
      write_train_csv(name + "_classifier_train.csv", clf);
    } else {
      TrainMode mode = parse_train_mode(ts.mode);
      const std::uint64_t tag = stage == "train-natural"     ? 0x51
                                : stage == "train-defense"   ? 0x52
                                                             : 0x55;
      TrainLog log = train_model(m, data(0), train_options(ts, mode, tag, name));
      write_train_csv(name + "_train.csv", log);
    }
    CheckpointData ck = checkpoint_from_model(m, canonical_config(cfg_));
    save_checkpoint_file(ck, path(name + ".ssck"));
    record(name + ".ssck");
    models_[name] = std::move(m);
  }

  static AttackSpec map_attack(const AttackSection& s, const std::string& mode) {
    AttackSpec a;
    if (mode == "pgd")
      a.mode = AttackMode::kPgd;
    else if (mode == "pgd-eot" || mode == "wnfga")
      a.mode = AttackMode::kFullChain;
    else if (mode == "waiga")
      a.mode = AttackMode::kAutoencoderImage;
    else
      throw ConfigError("attack mode '" + mode + "' is not directly craftable");
    a.steps = s.steps;
    a.delta = s.delta;
    a.eps = s.eps;
    a.restarts = s.restarts;
    a.eot = s.eot;
    a.surrogate = s.surrogate == "identity" ? SurrogateKind::kIdentity
                                            : SurrogateKind::kSmooth;
    a.sigma = s.sigma;
    a.random_start = s.random_start;
    a.cw_loss = s.loss == "cw-margin";
    a.normalized_aggregation = s.eot_aggregation == "mean-normalized-grad";
    return a;
  }

  // Transfer modes craft on a different model than they are evaluated on.
  std::pair<std::string, std::string> craft_plan(const AttackEntry& e) const {
    if (e.section.mode == "pwt") return {"sibling", e.section.source_attack};
    if (e.section.mode == "bt") return {"adversarial", "pgd"};
    return {e.target, e.section.mode};
  }

  void stage_attacks() {
    const Dataset<T>& eval = data(1);
    std::ostringstream summary;
    summary.precision(17);
    summary << "name,target,mode,craft_model,images,craft_success_rate\n";
    for (std::size_t idx = 0; idx < cfg_.experiment.attacks.size(); ++idx) {
      const AttackEntry& entry = cfg_.experiment.attacks[idx];
      const auto [craft_name, craft_mode] = craft_plan(entry);
      const DefenseModel<T>& craft = model(craft_name);
      const AttackSpec spec = map_attack(entry.section, craft_mode);
      const int K = std::min(entry.section.images, eval.count());
      if (K < 1) throw ConfigError("attack '" + entry.name + "' has no images");
      const std::uint64_t seed =
          Rng::fold(cfg_.seed, 0x100 + static_cast<std::uint64_t>(idx));

      std::vector<AttackOutcome<T>> outcomes(K);
      const std::size_t workers = std::max<std::size_t>(
          1, std::min<std::size_t>(max_threads(), static_cast<std::size_t>(K)));
      parallel_for(workers, [&](std::size_t w) {
        const std::size_t lo = static_cast<std::size_t>(K) * w / workers;
        const std::size_t hi = static_cast<std::size_t>(K) * (w + 1) / workers;
        if (lo >= hi) return;
        DefenseModel<T> local = inference_clone(craft);
        for (std::size_t i = lo; i < hi; ++i)
          outcomes[i] =
              attack_image(local, eval.image(static_cast<int>(i)),
                           eval.labels[i], spec, seed,
                           static_cast<std::uint64_t>(i));
      });

      PerturbationArchive archive;
      archive.side = static_cast<std::uint32_t>(cfg_.data.image_side);
      std::vector<AttackManifestRow> rows;
      int wins = 0;
      for (int i = 0; i < K; ++i) {
        PerturbationRecord rec;
        rec.index = static_cast<std::uint64_t>(i);
        rec.values.assign(outcomes[i].perturbation.begin(),
                          outcomes[i].perturbation.end());
        archive.records.push_back(std::move(rec));
        rows.push_back({static_cast<std::uint64_t>(i), eval.labels[i],
                        outcomes[i].clean_pred, outcomes[i].adv_pred,
                        outcomes[i].loss});
        wins += outcomes[i].success ? 1 : 0;
      }
      const std::string rel = "attack_" + entry.name + ".sspb";
      save_perturbations(archive, path(rel));
      record(rel);
      std::ostringstream man;
      write_attack_manifest(man, rows);
      detail::write_text_file(path("attack_" + entry.name + "_manifest.csv"),
                              man.str());
      record("attack_" + entry.name + "_manifest.csv");
      archives_[entry.name] = std::move(archive);
      summary << entry.name << ',' << entry.target << ',' << entry.section.mode
              << ',' << craft_name << ',' << K << ','
              << static_cast<double>(wins) / K << '\n';
    }
    detail::write_text_file(path("attack_summary.csv"), summary.str());
    record("attack_summary.csv");
  }

  const PerturbationArchive* try_archive(const std::string& name) {
    auto it = archives_.find(name);
    if (it != archives_.end()) return &it->second;
    const std::string rel = "attack_" + name + ".sspb";
    if (!std::filesystem::exists(path(rel))) return nullptr;
    check_unmodified(rel);
    return &(archives_[name] = load_perturbations(path(rel)));
  }

  void stage_evaluate() {
    const Dataset<T>& eval = data(1);
    const int E = cfg_.eval.ensemble;
    const std::size_t limit = static_cast<std::size_t>(
        std::min(cfg_.eval.images, eval.count()));
    static const char* kModelOrder[] = {"natural", "defense", "sibling",
                                        "adversarial"};

    std::map<std::string, double> clean;
    for (const char* name : kModelOrder)
      if (DefenseModel<T>* m = try_model(name))
        clean[name] = evaluate_accuracy(*m, eval, E, cfg_.seed, limit);
    if (clean.empty())
      throw DataError(
          "no model checkpoints found (run the train stages first)");

    // model -> attack name -> accuracy under that archive.
    std::map<std::string, std::map<std::string, double>> attacked;
    const std::size_t plane = static_cast<std::size_t>(3) *
                              cfg_.data.image_side * cfg_.data.image_side;
    for (const AttackEntry& entry : cfg_.experiment.attacks) {
      const PerturbationArchive* archive = try_archive(entry.name);
      DefenseModel<T>* target = try_model(entry.target);
      if (!archive || !target) continue;
      Dataset<T> pert;
      pert.image_side = cfg_.data.image_side;
      for (const PerturbationRecord& rec : archive->records) {
        const T* x = eval.image(static_cast<int>(rec.index));
        for (std::size_t k = 0; k < plane; ++k)
          pert.images.push_back(x[k] + static_cast<T>(rec.values[k]));
        pert.labels.push_back(eval.labels[rec.index]);
      }
      attacked[entry.target][entry.name] =
          evaluate_accuracy(*target, pert, E, cfg_.seed);
    }

    std::ostringstream acc;
    acc.precision(17);
    acc << "model,clean";
    for (const AttackEntry& e : cfg_.experiment.attacks) acc << ',' << e.name;
    acc << '\n';
    for (const char* name : kModelOrder) {
      if (!clean.count(name)) continue;
      acc << name << ',' << clean[name];
      for (const AttackEntry& e : cfg_.experiment.attacks) {
        acc << ',';
        auto mit = attacked.find(name);
        if (mit != attacked.end() && mit->second.count(e.name))
          acc << mit->second[e.name];
      }
      acc << '\n';
    }
    detail::write_text_file(path("accuracy.csv"), acc.str());
    record("accuracy.csv");

    if (DefenseModel<T>* defense = try_model("defense")) {
      std::ostringstream ens;
      ens.precision(17);
      ens << "model,E,accuracy\n";
      ens << "defense,1,"
          << evaluate_accuracy(*defense, eval, 1, cfg_.seed, limit) << '\n';
      ens << "defense," << E << ',' << clean["defense"] << '\n';
      detail::write_text_file(path("ensemble.csv"), ens.str());
      record("ensemble.csv");

      std::ostringstream corr;
      corr.precision(17);
      corr << "attack,images,mean_z\n";
      bool any = false;
      for (const AttackEntry& entry : cfg_.experiment.attacks) {
        DefenseModel<T>* target = try_model(entry.target);
        if (!target || target->front != FrontEnd::kSparse) continue;
        if (entry.section.eps > target->enc.eps) continue;  // out of budget
        const PerturbationArchive* archive = try_archive(entry.name);
        if (!archive) continue;
        CorruptionReport rep =
            corrupted_patch_distribution(*target, eval, *archive);
        double mean_z = 0.0;
        for (double z : rep.z) mean_z += z;
        mean_z /= static_cast<double>(rep.z.size());
        corr << entry.name << ',' << rep.z.size() << ',' << mean_z << '\n';
        std::ostringstream zh;
        write_histogram_csv(zh, rep.z_hist);
        detail::write_text_file(path("corruption_" + entry.name + ".csv"),
                                zh.str());
        record("corruption_" + entry.name + ".csv");
        any = true;
      }
      if (any) {
        detail::write_text_file(path("corruption_summary.csv"), corr.str());
        record("corruption_summary.csv");
      }

      // Patch/filter correlations need the stem to fit inside the patch
      // frame; configs with smaller patches simply skip these artifacts.
      const auto& stem_shape = defense->classifier.stem.kernel.shape();
      const bool stem_fits = stem_shape[2] <= cfg_.encoder.n &&
                             stem_shape[3] <= cfg_.encoder.n;
      const int imgs = std::min(cfg_.eval.correlation_images, eval.count());
      if (imgs > 0 && stem_fits) {
        std::vector<T> rows;
        int count = 0;
        for (int i = 0; i < imgs; ++i) {
          PatchGrid<T> grid =
              extract_patches(eval.image(i), cfg_.data.image_side,
                              cfg_.encoder.n, cfg_.encoder.S);
          rows.insert(rows.end(), grid.data.begin(), grid.data.end());
          count += grid.count();
        }
        CorrelationStats stats =
            correlation_stats(defense->dict, defense->classifier.stem.kernel,
                              rows.data(), count, cfg_.encoder.n);
        std::ostringstream rh, gh;
        write_histogram_csv(rh, make_histogram(stats.rho, 100));
        write_histogram_csv(gh, make_histogram(stats.gamma, 100));
        detail::write_text_file(path("correlation_rho.csv"), rh.str());
        record("correlation_rho.csv");
        detail::write_text_file(path("correlation_gamma.csv"), gh.str());
        record("correlation_gamma.csv");
      }
    }
  }

  void stage_report() {
    detail::write_text_file(path("report.txt"), emit_report(out_));
    record("report.txt");
  }

  void write_manifest() {
    Json m;
    m["schema_version"] = kConfigSchemaVersion;
    m["code_version"] = kVersion;
    m["precision"] = cfg_.precision;
    m["seed"] = cfg_.seed;
    m["threads"] = cfg_.threads;
    m["config"] = to_json(cfg_);
    const std::string canon = canonical_config(cfg_);
    m["config_sha256"] = hex(sha256(canon.data(), canon.size()));
    m["stages_completed"] = completed_;
    Json arts = Json::object();
    for (const auto& [rel, digest] : artifacts_) arts[rel] = digest;
    m["artifacts"] = arts;
    Json hists = Json::object();
    for (const auto& [split, h] : label_hists_) hists[split] = h;
    m["label_histograms"] = hists;
    detail::write_text_file(path("manifest.json"), m.dump(2) + "\n");
  }
};

inline RunSummary run_experiment(const ProjectConfig& cfg,
                                 const std::string& out_dir) {
  if (cfg.precision == "fp64") return ExperimentRun<double>(cfg, out_dir).run();
  return ExperimentRun<float>(cfg, out_dir).run();
}

}  // namespace spc
