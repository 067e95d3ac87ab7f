#include <algorithm>
#include <filesystem>
#include <fstream>

#include <spdlog/spdlog.h>

#include "nrf/archive.hpp"
#include "nrf/checkpoint.hpp"
#include "nrf/experiment.hpp"
#include "nrf/rng.hpp"

namespace nrf {

using nlohmann::json;
namespace fs = std::filesystem;

ImageDataset stratified_subsample(const ImageDataset& d, std::int64_t n, std::uint64_t seed) {
  if (n <= 0 || n >= d.size()) return d;
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(d.num_classes));
  for (std::int64_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])].push_back(i);
  // Largest-remainder allocation proportional to class frequency.
  std::vector<std::int64_t> quota(by_class.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::int64_t assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const double share = static_cast<double>(n) * static_cast<double>(by_class[c].size()) / static_cast<double>(d.size());
    quota[c] = static_cast<std::int64_t>(share);
    assigned += quota[c];
    rem.emplace_back(share - static_cast<double>(quota[c]), c);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n && k < rem.size(); ++k, ++assigned) ++quota[rem[k].second];
  std::vector<std::int64_t> rows;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    Rng rng(seed, "subsample", c);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    idx.resize(static_cast<std::size_t>(std::min<std::int64_t>(quota[c], static_cast<std::int64_t>(idx.size()))));
    rows.insert(rows.end(), idx.begin(), idx.end());
  }
  std::sort(rows.begin(), rows.end());
  ImageDataset out = d.subset(rows);
  out.provenance["subsample"] = std::to_string(rows.size()) + " of " + std::to_string(d.size()) + ", class-stratified";
  return out;
}

namespace {


json read_json(const fs::path& path) {
  const auto bytes = read_file(path.string());
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw DataError("'" + path.string() + "' is not valid JSON");
  return j;
}

std::string dataset_name(const DataConfig& d) {
  return d.source == "synthetic" ? "synthetic" : fs::path(d.source).stem().string();
}

ImageDataset prepare_split(ImageDataset d, const DataConfig& cfg, std::int64_t max_rows, std::uint64_t seed) {
  d = stratified_subsample(d, max_rows, seed);
  if (cfg.resize > 0 && (d.height() != cfg.resize || d.width() != cfg.resize)) d = resize(d, cfg.resize, cfg.resize_filter);
  d.validate();
  return d;
}

void assert_test_untouched(const std::string& stage) {
  if (AccessLog::global().touched("test_")) {
    throw std::logic_error("test split was read before the evaluation stage (during or before '" + stage + "')");
  }
}

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& cfg, const PipelineOptions& opts) : cfg_(cfg), opts_(opts), out_(opts.out_dir) {}

  PipelineResult run() {
    fs::create_directories(out_);
    const std::string hash = cfg_.hash();
    const fs::path state_path = out_ / "state.json";
    if (opts_.resume && fs::exists(state_path)) {
      state_ = read_json(state_path);
      if (state_.value("config_hash", "") != hash) {
        throw ConfigError("output directory '" + out_.string() + "' holds a run of a different config (hash " +
                          state_.value("config_hash", "?") + "); use a fresh directory or --no-resume");
      }
    } else {
      state_ = {{"config_hash", hash}, {"completed", json::object()}};
    }
    write_text_file((out_ / "config.json").string(), cfg_.to_json().dump(2));
    AccessLog::global().clear();

    stage("data", [&] { return stage_data(); });
    stage("base", [&] { return stage_grid("base", RunKind::standard, 0.0f); });
    for (float eps : cfg_.epsilons) {
      const std::string tag = epsilon_tag(eps);
      stage("distill_" + tag, [&] { return stage_distill(eps, tag); });
      stage("nonrobust_" + tag, [&] { return stage_grid("nonrobust_" + tag, RunKind::nonrobust, eps); });
      stage("robust_" + tag, [&] { return stage_grid("robust_" + tag, RunKind::robust, eps); });
    }
    stage("eval", [&] { return stage_eval(); });
    stage("report", [&] {
      const Report r = write_report(out_.string());
      result_.report = r.json;
      return json{{"artifacts", {"report.json", "report.csv", "figure_data.csv"}}};
    });
    if (result_.report.is_null()) result_.report = read_json(out_ / "report.json");
    return result_;
  }

 private:
  template <class Fn>
  void stage(const std::string& name, Fn&& fn) {
    auto& done = state_["completed"];
    if (done.contains(name) && artifacts_intact(done[name])) {
      spdlog::info("stage '{}' already complete; skipping", name);
      result_.skipped.push_back(name);
    } else {
      spdlog::info("stage '{}' starting", name);
      json info = fn();
      json hashes = json::object();
      const json artifacts = info.value("artifacts", json::array());
      for (const auto& a : artifacts) {
        hashes[a.get<std::string>()] = file_sha256((out_ / a.get<std::string>()).string());
      }
      info["artifact_sha256"] = hashes;
      done[name] = info;
      write_text_file((out_ / "state.json").string(), state_.dump(2));
      result_.executed.push_back(name);
    }
    if (opts_.halt_after == name) throw PipelineHalted("pipeline halted after stage '" + name + "' as requested");
  }

  bool artifacts_intact(const json& info) const {
    const json hashes = info.value("artifact_sha256", json::object());
    for (const auto& [rel, sha] : hashes.items()) {
      const fs::path p = out_ / rel;
      if (!fs::exists(p) || file_sha256(p.string()) != sha.get<std::string>()) return false;
    }
    return true;
  }

  json& info(const std::string& name) { return state_["completed"][name]; }

  std::pair<ImageDataset, ImageDataset> load_trainval() const {
    const auto zip = ZipArchive::open((out_ / "data" / "trainval.npz").string());
    return {load_split(zip, "train"), load_split(zip, "val")};
  }

  json stage_data() {
    fs::create_directories(out_ / "data");
    const auto& dc = cfg_.data;
    json artifacts = json::array({"data/trainval.npz"});
    // Synthetic test rows are generated with the rest but kept in their own
    // archive, which nothing opens before the eval stage.
    const bool synthetic = dc.source == "synthetic";
    DatasetSplits s = load_experiment_data(cfg_, true, synthetic);
    if (synthetic) {
      save_dataset((out_ / "data" / "test.npz").string(), {&s.test});
      artifacts.push_back("data/test.npz");
    }
    const ImageDataset& train = s.train;
    const ImageDataset& val = s.val;
    save_dataset((out_ / "data" / "trainval.npz").string(), {&train, &val});
    assert_test_untouched("data");
    return {{"artifacts", artifacts},
            {"dataset", dataset_name(dc)},
            {"num_classes", train.num_classes},
            {"channels", train.channels()},
            {"size", train.height()},
            {"train", train.size()},
            {"val", val.size()}};
  }

  ModelSpec model_spec() {
    ModelSpec m = cfg_.model;
    m.in_channels = info("data")["channels"].get<int>();
    m.num_classes = info("data")["num_classes"].get<int>();
    return m;
  }

  json stage_grid(const std::string& name, RunKind kind, float eps) {
    assert_test_untouched(name);
    ImageDataset train, val;
    if (kind == RunKind::nonrobust) {
      const std::string tag = epsilon_tag(eps);
      DistilledDataset d = load_distilled((out_ / "distill" / (tag + ".npz")).string(), &val);
      train = std::move(d.data);
    } else {
      std::tie(train, val) = load_trainval();
    }
    std::vector<GridPoint> points;
    if (cfg_.grid.enabled) {
      points = expand_grid(GridSpec::from_config(kind, cfg_.grid), cfg_.train);
    } else {
      points.push_back({grid_point_id(kind, cfg_.train.lr, cfg_.train.batch_size, cfg_.train.augmentation, cfg_.train.max_epochs),
                        cfg_.train});
    }
    TradesConfig trades = cfg_.trades;
    trades.epsilon = eps;
    const auto records = run_grid(points, kind, train, val, model_spec(), kind == RunKind::robust ? &trades : nullptr,
                                  (out_ / "runs" / name).string(), name, cfg_);
    assert_test_untouched(name);
    const RunRecord& best = select_best(records);
    json sel = best.to_json();
    sel["test_split_untouched"] = true;
    const fs::path sel_path = out_ / "runs" / name / "selected.json";
    write_text_file(sel_path.string(), sel.dump(2));
    json artifacts = json::array({fs::relative(sel_path, out_).string(), fs::relative(best.checkpoint, out_).string()});
    return {{"artifacts", artifacts},
            {"selected", best.run_id},
            {"checkpoint", fs::relative(best.checkpoint, out_).string()},
            {"checkpoint_sha256", best.checkpoint_sha256},
            {"val_metric", best.val_metric},
            {"selection_metric", best.selection_metric},
            {"runs", records.size()}};
  }

  json stage_distill(float eps, const std::string& tag) {
    assert_test_untouched("distill_" + tag);
    const fs::path ckpt = out_ / info("base")["checkpoint"].get<std::string>();
    const Checkpoint base = load_checkpoint(ckpt.string());
    auto [train, val] = load_trainval();
    DistillConfig dc = cfg_.distill;
    dc.epsilon = eps;
    dc.seed = derive_seed(cfg_.seed, "distill_" + tag);
    dc.checkpoint_hash = file_sha256(ckpt.string());
    const DistilledDataset d = build_nonrobust_dataset(base.model, train, dc);
    const DistillAudit audit = audit_distilled(d, train, base.model, eps);
    if (!audit.ok) throw std::runtime_error("distilled dataset failed its audit: " + audit.to_json().dump());
    fs::create_directories(out_ / "distill");
    const std::string rel = "distill/" + tag + ".npz";
    if (cfg_.nonrobust_validation == "distilled") {
      dc.seed = derive_seed(cfg_.seed, "distill_val_" + tag);
      val = build_nonrobust_dataset(base.model, val, dc).data;
      val.split = "val";
    }
    save_distilled((out_ / rel).string(), d, &val);
    write_text_file((out_ / "distill" / (tag + ".audit.json")).string(), audit.to_json().dump(2));
    return {{"artifacts", {rel, "distill/" + tag + ".audit.json"}},
            {"kept", d.data.size()},
            {"eligible", d.eligible},
            {"retention_rate", d.retention_rate()}};
  }

  ImageDataset load_test() const {
    if (cfg_.data.source == "synthetic") return load_split(ZipArchive::open((out_ / "data" / "test.npz").string()), "test");
    return load_experiment_data(cfg_, false, true).test;
  }

  json stage_eval() {
    const ImageDataset test = load_test();
    fs::create_directories(out_ / "eval");
    const std::string dataset = info("data")["dataset"].get<std::string>();
    const int classes = info("data")["num_classes"].get<int>();
    json artifacts = json::array();
    EvalOptions base_opts;
    base_opts.corruption_seed = cfg_.eval.corruption_seed;
    base_opts.workers = cfg_.eval.workers;
    base_opts.max_samples = cfg_.eval.max_samples;

    const auto evaluate = [&](const std::string& stage_name, const std::string& kind, float eps) {
      const json& si = info(stage_name);
      const Checkpoint ck = load_checkpoint((out_ / si["checkpoint"].get<std::string>()).string());
      const std::string tag = epsilon_tag(eps);
      json sections = json::array();
      sections.push_back(evaluate_model(ck.model, test, EvalMode::clean, base_opts).to_json());
      sections.push_back(evaluate_model(ck.model, test, EvalMode::corrupted, base_opts).to_json());
      EvalOptions adv = base_opts;
      adv.max_samples = cfg_.eval.adversarial_max_samples;
      adv.ensemble = cfg_.attack;
      adv.ensemble.epsilon = eps;
      adv.ensemble.seed = derive_seed(cfg_.seed, "attack_" + tag);
      sections.push_back(evaluate_model(ck.model, test, EvalMode::adversarial, adv).to_json());
      const json rec = {{"dataset", dataset},
                        {"epsilon", eps},
                        {"epsilon_tag", tag},
                        {"model_kind", kind},
                        {"run_id", si["selected"]},
                        {"checkpoint_sha256", si["checkpoint_sha256"]},
                        {"config_hash", cfg_.hash()},
                        {"num_classes", classes},
                        {"sections", sections}};
      const std::string rel = "eval/" + kind + "_" + tag + ".json";
      write_text_file((out_ / rel).string(), rec.dump(2));
      artifacts.push_back(rel);
    };
    for (float eps : cfg_.epsilons) {
      const std::string tag = epsilon_tag(eps);
      evaluate("base", "base", eps);
      evaluate("nonrobust_" + tag, "nonrobust", eps);
      evaluate("robust_" + tag, "robust", eps);
    }
    return {{"artifacts", artifacts}};
  }

  const ExperimentConfig& cfg_;
  const PipelineOptions& opts_;
  fs::path out_;
  json state_;
  PipelineResult result_;
};

}  // namespace

DatasetSplits load_experiment_data(const ExperimentConfig& cfg, bool train_val, bool test) {
  const auto& dc = cfg.data;
  DatasetSplits s;
  if (dc.source == "synthetic") {
    SyntheticSpec spec = dc.synthetic;
    spec.seed = cfg.seed;
    s = make_synthetic(spec);
    if (!train_val) s.train = s.val = ImageDataset{};
    if (!test) s.test = ImageDataset{};
  } else {
    const auto zip = ZipArchive::open(dc.source);
    if (train_val) {
      s.train = load_split(zip, "train", dc.num_classes);
      s.val = load_split(zip, "val", dc.num_classes);
    }
    if (test) s.test = load_split(zip, "test", dc.num_classes);
  }
  if (train_val) {
    s.train = prepare_split(std::move(s.train), dc, dc.max_train, derive_seed(cfg.seed, "subsample_train"));
    s.val = prepare_split(std::move(s.val), dc, dc.max_val, derive_seed(cfg.seed, "subsample_val"));
  }
  if (test) s.test = prepare_split(std::move(s.test), dc, dc.max_test, derive_seed(cfg.seed, "subsample_test"));
  return s;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opts) {
  if (opts.out_dir.empty()) throw ConfigError("pipeline: an output directory is required");
  cfg.validate();
  return Pipeline(cfg, opts).run();
}

}  // namespace nrf
