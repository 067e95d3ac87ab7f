// Command-line front end. Exit codes: 0 ok, 2 config error, 3 data error,
// 4 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "nrf/archive.hpp"
#include "nrf/attacks.hpp"
#include "nrf/checkpoint.hpp"
#include "nrf/corruptions.hpp"
#include "nrf/distill.hpp"
#include "nrf/evaluation.hpp"
#include "nrf/experiment.hpp"
#include "nrf/metrics.hpp"

using namespace nrf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

// Options shared by every subcommand: a config file, dotted overrides and
// named flags that are sugar for overrides.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::map<std::string, std::string> named;  // config path -> value text
  std::string log_level = "info";

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON experiment config (schema_version 1)");
    app->add_option("--set", sets, "Override a config key, e.g. --set train.lr=0.1")->take_all();
    app->add_option("--log-level", log_level, "trace|debug|info|warn|error|off");
  }
  // Adds --flag mirroring config key `path`.
  void mirror(CLI::App* app, const std::string& flag, const std::string& path, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, path](const std::string& v) { named[path] = v; }, help + " (" + path + ")");
  }

  ExperimentConfig build() const {
    json doc = {{"schema_version", ExperimentConfig::kSchemaVersion}};
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw ConfigError("cannot open config file '" + config + "'");
      doc = json::parse(in, nullptr, false, true);
      if (doc.is_discarded()) throw ConfigError("config file '" + config + "' is not valid JSON");
    }
    for (const auto& [path, value] : named) apply_override(doc, path + "=" + value);
    for (const auto& s : sets) apply_override(doc, s);
    return ExperimentConfig::from_json(doc);
  }
};

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_text_file(path, text);
}

void emit_json(const std::string& path, const json& j) {
  if (path.empty() || path == "-") std::cout << j.dump(2) << "\n";
  else write_text(path, j.dump(2) + "\n");
}

ImageDataset split_of(const ExperimentConfig& cfg, const std::string& split) {
  if (split == "test") return load_experiment_data(cfg, false, true).test;
  DatasetSplits s = load_experiment_data(cfg, true, false);
  if (split == "train") return std::move(s.train);
  if (split == "val") return std::move(s.val);
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

ModelSpec model_for(const ExperimentConfig& cfg, const ImageDataset& d) {
  ModelSpec m = cfg.model;
  m.in_channels = static_cast<int>(d.channels());
  m.num_classes = d.num_classes;
  return m;
}

std::string csv_of(const std::vector<EvalSection>& sections, const std::string& checkpoint) {
  std::string out = "checkpoint,mode,balanced_accuracy,auc,samples\n";
  for (const auto& s : sections) {
    out += checkpoint + "," + eval_mode_name(s.mode) + "," + std::to_string(s.balanced_accuracy) + "," +
           std::to_string(s.auc) + "," + std::to_string(s.samples) + "\n";
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Robust and nonrobust feature laboratory"};
  app.require_subcommand(1);
  Common common;
  std::function<void()> action;

  // train / train-robust
  std::string train_out, train_record;
  for (const bool robust : {false, true}) {
    CLI::App* sub = app.add_subcommand(robust ? "train-robust" : "train",
                                       robust ? "TRADES training on the train/val splits" : "Standard training on the train/val splits");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "NPZ dataset or 'synthetic'");
    common.mirror(sub, "--lr", "train.lr", "Peak learning rate");
    common.mirror(sub, "--batch-size", "train.batch_size", "Batch size");
    common.mirror(sub, "--epochs", "train.max_epochs", "Maximum epochs");
    common.mirror(sub, "--augment", "train.augmentation", "Crop and flip augmentation (true|false)");
    common.mirror(sub, "--seed", "seed", "Master seed");
    common.mirror(sub, "--arch", "model.arch", "wrn|small_cnn");
    common.mirror(sub, "--depth", "model.depth", "WRN depth");
    common.mirror(sub, "--width", "model.widen_factor", "WRN widen factor");
    if (robust) {
      common.mirror(sub, "--epsilon", "epsilons", "Perturbation bound as a JSON list, e.g. '[\"4/255\"]'");
      common.mirror(sub, "--beta", "trades.beta", "TRADES trade-off weight");
      common.mirror(sub, "--inner-steps", "trades.inner_steps", "Inner PGD steps");
    }
    sub->add_option("--out", train_out, "Checkpoint path")->required();
    sub->add_option("--record", train_record, "Run record JSON (default <out>.json)");
    sub->callback([&, robust] {
      action = [&, robust] {
        const auto cfg = common.build();
        const auto s = load_experiment_data(cfg, true, false);
        const RunKind kind = robust ? RunKind::robust : RunKind::standard;
        TradesConfig trades = cfg.trades;
        trades.epsilon = cfg.epsilons.front();
        const GridPoint p{grid_point_id(kind, cfg.train.lr, cfg.train.batch_size, cfg.train.augmentation, cfg.train.max_epochs),
                          cfg.train};
        const RunRecord r = train_run(p, kind, s.train, s.val, model_for(cfg, s.train), robust ? &trades : nullptr,
                                      train_out, robust ? "train-robust" : "train", cfg);
        emit_json(train_record.empty() ? train_out + ".json" : train_record, r.to_json());
        spdlog::info("{}: {} = {:.4f} at epoch {}", r.run_id, r.selection_metric, r.val_metric, r.best_epoch);
      };
    });
  }

  // distill
  std::string distill_ckpt, distill_out, distill_control, distill_audit;
  {
    CLI::App* sub = app.add_subcommand("distill", "Build the nonrobust-feature dataset from a trained model");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "Source dataset");
    common.mirror(sub, "--epsilon", "epsilons", "Perturbation bound as a JSON list");
    common.mirror(sub, "--steps", "distill.steps", "Targeted PGD steps");
    common.mirror(sub, "--seed", "seed", "Master seed");
    sub->add_option("--checkpoint", distill_ckpt, "Base model checkpoint")->required();
    sub->add_option("--out", distill_out, "Output NPZ")->required();
    sub->add_option("--control", distill_control, "Also write the permuted-label control NPZ here");
    sub->add_option("--audit", distill_audit, "Audit JSON path (default stdout)");
    sub->callback([&] {
      action = [&] {
        const auto cfg = common.build();
        const auto s = load_experiment_data(cfg, true, false);
        const Checkpoint base = load_checkpoint(distill_ckpt);
        DistillConfig dc = cfg.distill;
        dc.epsilon = cfg.epsilons.front();
        dc.seed = derive_seed(cfg.seed, "distill_" + epsilon_tag(dc.epsilon));
        dc.checkpoint_hash = file_sha256(distill_ckpt);
        const DistilledDataset d = build_nonrobust_dataset(base.model, s.train, dc);
        save_distilled(distill_out, d, &s.val);
        if (!distill_control.empty()) {
          const ImageDataset ctl = permuted_control(d, derive_seed(cfg.seed, "control"));
          save_dataset(distill_control, {&ctl, &s.val});
        }
        const DistillAudit audit = audit_distilled(d, s.train, base.model, dc.epsilon);
        emit_json(distill_audit, audit.to_json());
        if (!audit.ok) throw std::runtime_error("distilled dataset failed its audit");
      };
    });
  }

  // corrupt
  std::string cor_split = "test", cor_kind, cor_out;
  int cor_severity = 0, cor_workers = 1;
  std::uint64_t cor_seed = 0;
  {
    CLI::App* sub = app.add_subcommand("corrupt", "Write a corrupted copy of one split");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "Dataset");
    sub->add_option("--split", cor_split, "train|val|test");
    sub->add_option("--kind", cor_kind, "Corruption kind")->required();
    sub->add_option("--severity", cor_severity, "Severity 1..5")->required();
    sub->add_option("--corruption-seed", cor_seed, "Corruption seed");
    sub->add_option("--workers", cor_workers, "Worker threads");
    sub->add_option("--out", cor_out, "Output NPZ")->required();
    sub->callback([&] {
      action = [&] {
        const auto cfg = common.build();
        CorruptionSpec spec{parse_corruption(cor_kind), cor_severity, cor_seed, std::nullopt};
        spec.validate();
        ImageDataset d = split_of(cfg, cor_split);
        d.images = apply_corruption(d.images, spec, 0, cor_workers);
        d.provenance["corruption"] = spec.label();
        d.provenance["corruption_parameter"] = std::to_string(spec.value());
        d.provenance["corruption_seed"] = std::to_string(cor_seed);
        save_dataset(cor_out, {&d});
      };
    });
  }

  // attack
  std::string atk_ckpt, atk_split = "test", atk_method = "ensemble", atk_out, atk_adv;
  std::int64_t atk_max = 0;
  {
    CLI::App* sub = app.add_subcommand("attack", "Run an L-infinity attack and report robust balanced accuracy");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "Dataset");
    common.mirror(sub, "--epsilon", "epsilons", "Perturbation bound as a JSON list");
    common.mirror(sub, "--steps", "attack.pgd_steps", "PGD steps");
    common.mirror(sub, "--restarts", "attack.restarts", "PGD restarts");
    common.mirror(sub, "--queries", "attack.square_queries", "Square-search query budget");
    common.mirror(sub, "--seed", "seed", "Master seed");
    sub->add_option("--checkpoint", atk_ckpt, "Model checkpoint")->required();
    sub->add_option("--split", atk_split, "train|val|test");
    sub->add_option("--method", atk_method, "ensemble|pgd|pgd-margin|square");
    sub->add_option("--max-samples", atk_max, "Evaluate only the first N rows");
    sub->add_option("--out", atk_out, "Result JSON (default stdout)");
    sub->add_option("--save-adversarial", atk_adv, "Write adversarial images as NPZ");
    sub->callback([&] {
      action = [&] {
        const auto cfg = common.build();
        ImageDataset d = split_of(cfg, atk_split);
        if (atk_max > 0 && atk_max < d.size()) d = d.take(atk_max);
        const Checkpoint ck = load_checkpoint(atk_ckpt);
        const NetworkClassifier clf(ck.model);
        const float eps = cfg.epsilons.front();
        const std::uint64_t seed = derive_seed(cfg.seed, "attack_" + epsilon_tag(eps));
        json out = {{"checkpoint", atk_ckpt}, {"epsilon", eps}, {"method", atk_method}, {"samples", d.size()}};
        Tensor adv;
        if (atk_method == "ensemble") {
          EnsembleConfig e = cfg.attack;
          e.epsilon = eps;
          e.seed = seed;
          const auto r = ensemble_eval(clf, d.images, d.labels, e);
          out["clean_balanced_accuracy"] = r.clean_balacc;
          out["robust_balanced_accuracy"] = r.robust_balacc;
          out["robust_accuracy"] = r.robust_accuracy;
          out["label"] = r.label;
          adv = r.adversarial;
        } else {
          AttackConfig a;
          a.epsilon = eps;
          a.seed = seed;
          a.restarts = cfg.attack.restarts;
          a.batch_size = cfg.attack.batch_size;
          AttackResult r;
          if (atk_method == "pgd" || atk_method == "pgd-margin") {
            a.steps = cfg.attack.pgd_steps;
            a.loss = atk_method == "pgd" ? AttackLoss::ce : AttackLoss::margin;
            r = pgd(clf, d.images, d.labels, a);
          } else if (atk_method == "square") {
            a.steps = cfg.attack.square_queries;
            r = square_attack(clf, d.images, d.labels, a);
          } else {
            throw ConfigError("unknown attack method '" + atk_method + "' (expected ensemble, pgd, pgd-margin or square)");
          }
          const auto clean = argmax_rows(clf.logits(d.images));
          std::vector<int> worst(d.labels.size());
          for (std::size_t i = 0; i < worst.size(); ++i) worst[i] = clean[i] == d.labels[i] ? r.predictions[i] : clean[i];
          out["clean_balanced_accuracy"] = balanced_accuracy(d.labels, clean, d.num_classes);
          out["robust_balanced_accuracy"] = balanced_accuracy(d.labels, worst, d.num_classes);
          out["success_rate"] = r.success_rate();
          adv = r.adversarial;
        }
        out["max_linf"] = linf_distance(d.images, adv);
        out["constraint_violations"] = constraint_violations(d.images, adv, eps);
        if (!atk_adv.empty()) {
          ImageDataset a = d;
          a.images = adv;
          a.provenance["adversarial"] = atk_method + " eps=" + std::to_string(eps);
          save_dataset(atk_adv, {&a});
        }
        emit_json(atk_out, out);
      };
    });
  }

  // eval
  std::string ev_ckpt, ev_split = "test", ev_json, ev_csv;
  std::vector<std::string> ev_modes{"clean"};
  std::int64_t ev_max = 0, ev_adv_max = 0;
  {
    CLI::App* sub = app.add_subcommand("eval", "Balanced accuracy and macro one-vs-rest AUC per mode");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "Dataset");
    common.mirror(sub, "--epsilon", "epsilons", "Perturbation bound as a JSON list");
    common.mirror(sub, "--seed", "seed", "Master seed");
    sub->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
    sub->add_option("--split", ev_split, "train|val|test");
    sub->add_option("--mode", ev_modes, "clean|corrupted|adversarial (repeatable)")->take_all();
    sub->add_option("--max-samples", ev_max, "Clean/corrupted: first N rows only");
    sub->add_option("--adversarial-max-samples", ev_adv_max, "Adversarial: first N rows only");
    sub->add_option("--json", ev_json, "JSON output (default stdout)");
    sub->add_option("--csv", ev_csv, "CSV output");
    sub->callback([&] {
      action = [&] {
        const auto cfg = common.build();
        std::vector<EvalMode> modes;
        for (const auto& m : ev_modes) modes.push_back(parse_eval_mode(m));
        const ImageDataset d = split_of(cfg, ev_split);
        const Checkpoint ck = load_checkpoint(ev_ckpt);
        std::vector<EvalSection> sections;
        json out = {{"checkpoint", ev_ckpt}, {"checkpoint_sha256", file_sha256(ev_ckpt)}, {"split", ev_split},
                    {"config_hash", cfg.hash()}, {"num_classes", d.num_classes}, {"sections", json::array()}};
        for (EvalMode m : modes) {
          EvalOptions o;
          o.corruption_seed = cfg.eval.corruption_seed;
          o.workers = cfg.eval.workers;
          o.max_samples = m == EvalMode::adversarial ? ev_adv_max : ev_max;
          o.ensemble = cfg.attack;
          o.ensemble.epsilon = cfg.epsilons.front();
          o.ensemble.seed = derive_seed(cfg.seed, "attack_" + epsilon_tag(o.ensemble.epsilon));
          sections.push_back(evaluate_model(ck.model, d, m, o));
          out["sections"].push_back(sections.back().to_json());
        }
        emit_json(ev_json, out);
        if (!ev_csv.empty()) write_text(ev_csv, csv_of(sections, ev_ckpt));
      };
    });
  }

  // saliency
  std::vector<std::string> sal_ckpts;
  std::string sal_split = "test", sal_out, sal_json;
  int sal_count = 8;
  {
    CLI::App* sub = app.add_subcommand("saliency", "Export clean/adversarial saliency panels and their rank stability");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "Dataset");
    common.mirror(sub, "--epsilon", "epsilons", "Perturbation bound as a JSON list");
    common.mirror(sub, "--seed", "seed", "Master seed");
    sub->add_option("--checkpoint", sal_ckpts, "One or more checkpoints; the first one generates the adversarial pair")
        ->required()
        ->take_all();
    sub->add_option("--split", sal_split, "train|val|test");
    sub->add_option("--count", sal_count, "Number of images");
    sub->add_option("--out", sal_out, "PGM panel path")->required();
    sub->add_option("--json", sal_json, "Stability JSON (default stdout)");
    sub->callback([&] {
      action = [&] {
        const auto cfg = common.build();
        ImageDataset d = split_of(cfg, sal_split);
        if (sal_count < 1) throw ConfigError("--count must be positive");
        if (sal_count < d.size()) d = d.take(sal_count);
        std::vector<Checkpoint> models;
        for (const auto& p : sal_ckpts) models.push_back(load_checkpoint(p));
        AttackConfig a;
        a.epsilon = cfg.epsilons.front();
        a.steps = cfg.attack.pgd_steps;
        a.seed = derive_seed(cfg.seed, "saliency_pair");
        const Tensor adv = pgd(NetworkClassifier(models.front().model), d.images, d.labels, a).adversarial;
        const auto n = d.size(), h = d.height(), w = d.width(), c = d.channels();
        // Display images as the channel mean.
        const auto gray = [&](const Tensor& x, std::int64_t i) {
          Tensor g({h, w}, 0.0f);
          for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t k = 0; k < h * w; ++k) g[k] += x[(i * c + ch) * h * w + k] / static_cast<float>(c);
          return g;
        };
        std::vector<std::vector<Tensor>> rows(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
          rows[static_cast<std::size_t>(i)].push_back(gray(d.images, i));
          rows[static_cast<std::size_t>(i)].push_back(gray(adv, i));
        }
        json out = {{"epsilon", a.epsilon}, {"samples", n}, {"panel", sal_out}, {"models", json::array()}};
        for (std::size_t m = 0; m < models.size(); ++m) {
          const NetworkClassifier clf(models[m].model);
          const Tensor s0 = saliency(clf, d.images, true), s1 = saliency(clf, adv, true);
          for (std::int64_t i = 0; i < n; ++i) {
            rows[static_cast<std::size_t>(i)].push_back(s0.slice_rows(i, i + 1).reshaped({h, w}));
            rows[static_cast<std::size_t>(i)].push_back(s1.slice_rows(i, i + 1).reshaped({h, w}));
          }
          const auto rho = map_rank_correlation(s0, s1);
          out["models"].push_back({{"checkpoint", sal_ckpts[m]}, {"mean_spearman", mean_finite(rho)}, {"spearman", rho}});
        }
        write_pgm_grid(sal_out, rows);
        emit_json(sal_json, out);
      };
    });
  }

  // grid
  std::string grid_kind = "standard", grid_out;
  {
    CLI::App* sub = app.add_subcommand("grid", "Run a hyperparameter grid and select on validation");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "Dataset (a distilled NPZ for nonrobust grids)");
    common.mirror(sub, "--epsilon", "epsilons", "Perturbation bound as a JSON list (robust grids)");
    common.mirror(sub, "--size-class", "grid.size_class", "large|small");
    common.mirror(sub, "--workers", "grid.workers", "Concurrent runs");
    sub->add_option("--kind", grid_kind, "standard|nonrobust|robust");
    sub->add_option("--out", grid_out, "Output directory")->required();
    sub->callback([&] {
      action = [&] {
        const auto cfg = common.build();
        const RunKind kind = parse_run_kind(grid_kind);
        const auto s = load_experiment_data(cfg, true, false);
        TradesConfig trades = cfg.trades;
        trades.epsilon = cfg.epsilons.front();
        const auto points = expand_grid(GridSpec::from_config(kind, cfg.grid), cfg.train);
        spdlog::info("grid '{}': {} configurations", grid_kind, points.size());
        const auto records = run_grid(points, kind, s.train, s.val, model_for(cfg, s.train),
                                      kind == RunKind::robust ? &trades : nullptr, grid_out, grid_kind, cfg);
        json sel = select_best(records).to_json();
        sel["test_split_untouched"] = !AccessLog::global().touched("test_");
        emit_json((fs::path(grid_out) / "selected.json").string(), sel);
        std::cout << sel["run_id"].get<std::string>() << "\n";
      };
    });
  }

  // pipeline
  std::string pipe_out, pipe_halt;
  bool pipe_no_resume = false;
  {
    CLI::App* sub = app.add_subcommand("pipeline", "Base, distill, nonrobust, robust, evaluate, report");
    common.attach(sub);
    common.mirror(sub, "--data", "data.source", "Dataset");
    common.mirror(sub, "--seed", "seed", "Master seed");
    sub->add_option("--out", pipe_out, "Output directory")->required();
    sub->add_flag("--no-resume", pipe_no_resume, "Ignore completed stages in the output directory");
    sub->add_option("--halt-after", pipe_halt, "Stop after the named stage");
    sub->callback([&] {
      action = [&] {
        const auto cfg = common.build();
        const auto r = run_pipeline(cfg, {pipe_out, !pipe_no_resume, pipe_halt});
        spdlog::info("pipeline: {} stage(s) run, {} resumed", r.executed.size(), r.skipped.size());
      };
    });
  }

  // report
  std::string rep_dir;
  {
    CLI::App* sub = app.add_subcommand("report", "Rebuild report.json / report.csv / figure_data.csv from evaluation records");
    sub->add_option("--dir", rep_dir, "Pipeline output directory")->required();
    sub->add_option("--log-level", common.log_level, "Log level");
    sub->callback([&] { action = [&] { write_report(rep_dir); }; });
  }

  // synth
  std::string syn_out;
  {
    CLI::App* sub = app.add_subcommand("synth", "Write the planted-feature corpus as an NPZ dataset");
    common.attach(sub);
    common.mirror(sub, "--seed", "seed", "Master seed");
    sub->add_option("--out", syn_out, "Output NPZ")->required();
    sub->callback([&] {
      action = [&] {
        auto cfg = common.build();
        cfg.data.source = "synthetic";
        const auto s = load_experiment_data(cfg, true, true);
        save_dataset(syn_out, {&s.train, &s.val, &s.test});
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(common.log_level));
  try {
    action();
  } catch (const PipelineHalted& e) {
    spdlog::info("{}", e.what());
    return 0;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    spdlog::error("data error: {}", e.what());
    return kExitData;
  } catch (const CheckpointMismatch& e) {
    spdlog::error("data error: {}", e.what());
    return kExitData;
  } catch (const ShapeError& e) {
    spdlog::error("data error (incompatible shapes): {}", e.what());
    return kExitData;
  } catch (const std::invalid_argument& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("runtime failure: {}", e.what());
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
