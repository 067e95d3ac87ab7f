#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "nrf/archive.hpp"
#include "nrf/experiment.hpp"

using namespace nrf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("nrf_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Small enough to run every stage in seconds.
json tiny_config() {
  return json::parse(R"({
    "schema_version": 1,
    "name": "tiny",
    "seed": 3,
    "data": {"source": "synthetic",
             "synthetic": {"size": 8, "train_per_class": 40, "val_per_class": 16, "test_per_class": 24}},
    "model": {"arch": "small_cnn", "base_width": 4},
    "train": {"lr": 0.05, "batch_size": 16, "max_epochs": 2, "augmentation": false, "val_attack_steps": 2},
    "trades": {"inner_steps": 2},
    "distill": {"steps": 5},
    "attack": {"pgd_steps": 3, "restarts": 1, "max_targets": 1, "square_queries": 10},
    "epsilons": ["4/255"]
  })");
}

RunRecord rec(const std::string& id, double metric, float lr, int bs) {
  RunRecord r;
  r.run_id = id;
  r.val_metric = metric;
  r.lr = lr;
  r.batch_size = bs;
  return r;
}

}  // namespace

TEST_CASE("reference grids expand to 32 configurations") {
  TrainConfig base;
  for (RunKind kind : {RunKind::standard, RunKind::nonrobust}) {
    for (SizeClass size : {SizeClass::large, SizeClass::small}) {
      const auto pts = expand_grid(GridSpec::reference(kind, size), base);
      CHECK(pts.size() == 32);
      std::set<std::string> ids;
      std::set<int> batches;
      std::set<float> lrs;
      std::set<bool> augs;
      std::set<int> epochs;
      for (const auto& p : pts) {
        ids.insert(p.id);
        batches.insert(p.train.batch_size);
        lrs.insert(p.train.lr);
        augs.insert(p.train.augmentation);
        epochs.insert(p.train.max_epochs);
      }
      CHECK(ids.size() == 32);
      CHECK(lrs == std::set<float>{0.4f, 0.3f, 0.2f, 0.1f});
      CHECK(batches == (size == SizeClass::large ? std::set<int>{1024, 512, 256, 32} : std::set<int>{256, 128, 64, 32}));
      if (kind == RunKind::nonrobust) {
        CHECK(augs == std::set<bool>{true, false});
        CHECK(epochs.size() == 1);
      } else {
        CHECK(epochs == std::set<int>{200, 400});
        CHECK(augs.size() == 1);
      }
    }
  }
}

TEST_CASE("grid deduplication and robust allowlist") {
  GridSpec g = GridSpec::reference(RunKind::standard, SizeClass::small);
  g.lrs = {0.1f, 0.1f, 0.2f};
  g.batch_sizes = {32, 32};
  CHECK(expand_grid(g, TrainConfig{}).size() == 2 * 1 * 2);

  GridSpec r = GridSpec::reference(RunKind::robust, SizeClass::small);
  CHECK(expand_grid(r, TrainConfig{}).size() == 32);
  for (int k = 0; k < 12; ++k) {
    r.allowlist.push_back(grid_point_id(RunKind::robust, r.lrs[static_cast<std::size_t>(k % 4)],
                                        r.batch_sizes[static_cast<std::size_t>(k / 4)], true, 200));
  }
  CHECK(expand_grid(r, TrainConfig{}).size() == 12);
  r.allowlist.push_back("lr9_bs1_ep1");
  CHECK_THROWS_AS(expand_grid(r, TrainConfig{}), ConfigError);
}

TEST_CASE("select_best: metric first, then lower lr, then smaller batch") {
  const std::vector<RunRecord> one{rec("a", 0.5, 0.1f, 32)};
  CHECK(select_best(one).run_id == "a");
  const std::vector<RunRecord> rs{rec("a", 0.8, 0.3f, 64), rec("b", 0.8, 0.1f, 256), rec("c", 0.8, 0.1f, 64),
                                  rec("d", 0.7, 0.05f, 16)};
  CHECK(select_best(rs).run_id == "c");
  std::vector<RunRecord> rev(rs.rbegin(), rs.rend());
  CHECK(select_best(rev).run_id == "c");
  const std::vector<RunRecord> top{rec("x", 0.9, 0.4f, 1024), rec("y", 0.8, 0.1f, 32)};
  CHECK(select_best(top).run_id == "x");
  CHECK_THROWS(select_best({}));
}

TEST_CASE("config parsing is strict and the hash tracks effective values") {
  const auto cfg = ExperimentConfig::from_json(tiny_config());
  CHECK(cfg.epsilons.at(0) == doctest::Approx(4.0 / 255.0));
  CHECK(cfg.model.arch == Arch::small_cnn);
  const auto again = ExperimentConfig::from_json(cfg.to_json());
  CHECK(again.hash() == cfg.hash());
  CHECK(again.to_json().dump() == cfg.to_json().dump());

  json typo = tiny_config();
  typo["train"]["learning_rate"] = 0.1;
  try {
    ExperimentConfig::from_json(typo);
    FAIL("typo accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.learning_rate") != std::string::npos);
  }
  json wrong = tiny_config();
  wrong["train"]["batch_size"] = 1.5;
  CHECK_THROWS_AS(ExperimentConfig::from_json(wrong), ConfigError);
  json unversioned = tiny_config();
  unversioned.erase("schema_version");
  CHECK_THROWS_AS(ExperimentConfig::from_json(unversioned), ConfigError);
  json future = tiny_config();
  future["schema_version"] = 2;
  CHECK_THROWS_AS(ExperimentConfig::from_json(future), ConfigError);
  json bad_model = tiny_config();
  bad_model["model"]["depht"] = 10;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad_model), ConfigError);
  CHECK(cfg.nonrobust_validation == "original");
  json distilled_val = tiny_config();
  distilled_val["distill"]["validation"] = "distilled";
  CHECK(ExperimentConfig::from_json(distilled_val).nonrobust_validation == "distilled");
  distilled_val["distill"]["validation"] = "relabelled";
  CHECK_THROWS_AS(ExperimentConfig::from_json(distilled_val).validate(), ConfigError);

  json over = tiny_config();
  apply_override(over, "train.lr=0.2");
  apply_override(over, "data.synthetic.a_nr=3/255");
  apply_override(over, "name=other");
  const auto o = ExperimentConfig::from_json(over);
  CHECK(o.train.lr == doctest::Approx(0.2));
  CHECK(o.data.synthetic.a_nr == doctest::Approx(3.0 / 255.0));
  CHECK(o.name == "other");
  CHECK(o.hash() != cfg.hash());
  CHECK_THROWS_AS(apply_override(over, "novalue"), ConfigError);
  CHECK(epsilon_tag(8.0f / 255.0f) == "eps8");
  CHECK_THROWS_AS(parse_epsilon(json("4/0")), ConfigError);
}

TEST_CASE("grid selection never reads the test split") {
  const auto dir = fresh_dir("grid_audit");
  SyntheticSpec s;
  s.size = 8;
  s.train_per_class = 20;
  s.val_per_class = 8;
  s.test_per_class = 8;
  const auto splits = make_synthetic(s);
  const auto path = (dir / "data.npz").string();
  save_dataset(path, {&splits.train, &splits.val, &splits.test});

  AccessLog::global().clear();
  const auto zip = ZipArchive::open(path);
  const auto train = load_split(zip, "train");
  const auto val = load_split(zip, "val");
  auto cfg = ExperimentConfig::from_json(tiny_config());
  cfg.train.max_epochs = 1;
  GridSpec g = GridSpec::reference(RunKind::standard, SizeClass::small);
  g.lrs = {0.05f, 0.02f};
  g.batch_sizes = {16};
  g.max_epochs = {1};
  ModelSpec m = cfg.model;
  m.in_channels = 1;
  const auto records = run_grid(expand_grid(g, cfg.train), RunKind::standard, train, val, m, nullptr,
                                (dir / "runs").string(), "base", cfg);
  const auto& best = select_best(records);
  CHECK(records.size() == 2);
  CHECK(fs::exists(best.checkpoint));
  CHECK(best.config_hash == cfg.hash());
  CHECK(RunRecord::from_json(best.to_json()).to_json() == best.to_json());
  CHECK(AccessLog::global().touched("train_"));
  CHECK(AccessLog::global().touched("val_"));
  CHECK_FALSE(AccessLog::global().touched("test_"));
  fs::remove_all(dir);
}

TEST_CASE("pipeline: full run, resume after a halt gives identical reports") {
  const auto cfg = ExperimentConfig::from_json(tiny_config());
  const auto a = fresh_dir("pipe_a"), b = fresh_dir("pipe_b");

  PipelineOptions straight{b.string(), true, ""};
  const auto full = run_pipeline(cfg, straight);
  CHECK(full.skipped.empty());
  CHECK(full.report["records"] == 3);
  CHECK(full.report["chance"]["synthetic"].get<double>() == doctest::Approx(0.5));
  CHECK(fs::exists(b / "figure_data.csv"));

  PipelineOptions halting{a.string(), true, "distill_eps4"};
  CHECK_THROWS_AS(run_pipeline(cfg, halting), PipelineHalted);
  CHECK_FALSE(fs::exists(a / "eval"));
  PipelineOptions resume{a.string(), true, ""};
  const auto resumed = run_pipeline(cfg, resume);
  CHECK(resumed.skipped == std::vector<std::string>{"data", "base", "distill_eps4"});
  CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));
  CHECK(slurp(a / "figure_data.csv") == slurp(b / "figure_data.csv"));

  // Re-running on a finished directory redoes nothing.
  const auto noop = run_pipeline(cfg, resume);
  CHECK(noop.executed.empty());
  CHECK(noop.report == resumed.report);

  auto other = cfg;
  other.train.lr = 0.01f;
  CHECK_THROWS_AS(run_pipeline(other, resume), ConfigError);

  const auto again = write_report(a.string());
  CHECK(again.csv == slurp(a / "report.csv"));
  const auto sel = json::parse(slurp(a / "runs" / "base" / "selected.json"));
  CHECK(sel["test_split_untouched"] == true);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("report is order independent and lists chance levels") {
  const auto section = [](const char* mode, double ba, double auc) {
    return json{{"mode", mode}, {"balanced_accuracy", ba}, {"auc", auc}, {"samples", 10}, {"detail", json::object()}};
  };
  std::vector<json> recs;
  for (const char* kind : {"robust", "base", "nonrobust"}) {
    recs.push_back({{"dataset", "toy"},
                    {"epsilon", 4.0 / 255.0},
                    {"model_kind", kind},
                    {"run_id", std::string(kind) + "/x"},
                    {"num_classes", 9},
                    {"sections", {section("clean", 0.9, 0.95), section("corrupted", 0.7, 0.8), section("adversarial", 0.1, 0.2)}}});
  }
  const Report r1 = build_report(recs);
  std::reverse(recs.begin(), recs.end());
  const Report r2 = build_report(recs);
  CHECK(r1.csv == r2.csv);
  CHECK(r1.figure_csv == r2.figure_csv);
  CHECK(r1.json["rows"].size() == 3 * 3 * 2);
  CHECK(r1.json["chance"]["toy"].get<double>() == doctest::Approx(1.0 / 9.0));
  CHECK(r1.figure_csv.find("toy,0.01568627451,base,balanced_accuracy,0.9,0.7,0.1,0.1111111111") != std::string::npos);
}

TEST_CASE("stratified subsample keeps class proportions") {
  ImageDataset d;
  d.num_classes = 3;
  d.images = Tensor({100, 1, 2, 2}, 0.5f);
  for (int i = 0; i < 100; ++i) d.labels.push_back(i < 50 ? 0 : (i < 80 ? 1 : 2));
  const auto s = stratified_subsample(d, 10, 1);
  const auto counts = class_counts(s);
  CHECK(counts == std::vector<std::int64_t>{5, 3, 2});
  CHECK(stratified_subsample(d, 0, 1).size() == 100);
  const auto t = stratified_subsample(d, 10, 1);
  CHECK(t.labels == s.labels);
}
