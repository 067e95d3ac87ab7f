#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "nrf/archive.hpp"
#include "nrf/checkpoint.hpp"
#include "nrf/experiment.hpp"

namespace nrf {

using nlohmann::json;

namespace {

template <class T>
std::vector<T> dedup(const std::vector<T>& v, const char* axis) {
  std::vector<T> out;
  for (const T& x : v) {
    if (std::find(out.begin(), out.end(), x) == out.end()) out.push_back(x);
  }
  if (out.size() != v.size()) spdlog::warn("grid axis '{}': {} duplicate value(s) dropped", axis, v.size() - out.size());
  return out;
}

std::string format_lr(float lr) {
  std::ostringstream os;
  os << std::setprecision(6) << lr;
  return os.str();
}


}  // namespace

GridSpec GridSpec::reference(RunKind kind, SizeClass size_class) {
  GridSpec g;
  g.kind = kind;
  g.size_class = size_class;
  g.lrs = {0.4f, 0.3f, 0.2f, 0.1f};
  g.batch_sizes = size_class == SizeClass::large ? std::vector<int>{1024, 512, 256, 32} : std::vector<int>{256, 128, 64, 32};
  if (kind == RunKind::nonrobust) g.augmentation = {true, false};
  else g.max_epochs = {200, 400};
  return g;
}

GridSpec GridSpec::from_config(RunKind kind, const GridConfig& c) {
  GridSpec g = reference(kind, c.size_class);
  if (!c.lrs.empty()) g.lrs = c.lrs;
  if (!c.batch_sizes.empty()) g.batch_sizes = c.batch_sizes;
  if (kind == RunKind::nonrobust && !c.augmentation.empty()) g.augmentation = c.augmentation;
  if (kind != RunKind::nonrobust && !c.max_epochs.empty()) g.max_epochs = c.max_epochs;
  if (kind == RunKind::robust) g.allowlist = c.robust_allowlist;
  return g;
}

std::string grid_point_id(RunKind kind, float lr, int batch, bool augmentation, int max_epochs) {
  std::string id = "lr" + format_lr(lr) + "_bs" + std::to_string(batch);
  if (kind == RunKind::nonrobust) id += augmentation ? "_aug" : "_noaug";
  else id += "_ep" + std::to_string(max_epochs);
  return id;
}

std::vector<GridPoint> expand_grid(const GridSpec& spec, const TrainConfig& base) {
  const auto lrs = dedup(spec.lrs, "lr");
  const auto batches = dedup(spec.batch_sizes, "batch_size");
  const bool nonrobust = spec.kind == RunKind::nonrobust;
  const auto augs = dedup(nonrobust ? spec.augmentation : std::vector<bool>{base.augmentation}, "augmentation");
  const auto epochs = dedup(nonrobust ? std::vector<int>{base.max_epochs} : spec.max_epochs, "max_epochs");
  if (lrs.empty() || batches.empty() || augs.empty() || epochs.empty()) throw ConfigError("grid: every axis needs at least one value");
  std::vector<GridPoint> out;
  for (float lr : lrs)
    for (int bs : batches)
      for (bool aug : augs)
        for (int ep : epochs) {
          GridPoint p;
          p.train = base;
          p.train.lr = lr;
          p.train.batch_size = bs;
          p.train.augmentation = aug;
          p.train.max_epochs = ep;
          p.id = grid_point_id(spec.kind, lr, bs, aug, ep);
          out.push_back(std::move(p));
        }
  if (!spec.allowlist.empty()) {
    std::set<std::string> ids;
    for (const auto& p : out) ids.insert(p.id);
    for (const auto& a : spec.allowlist) {
      if (!ids.count(a)) throw ConfigError("grid allowlist entry '" + a + "' is not a point of the grid");
    }
    const std::set<std::string> keep(spec.allowlist.begin(), spec.allowlist.end());
    std::erase_if(out, [&](const GridPoint& p) { return !keep.count(p.id); });
  }
  return out;
}

json RunRecord::to_json() const {
  return {{"run_id", run_id},
          {"stage", stage},
          {"kind", run_kind_name(kind)},
          {"config", config},
          {"config_hash", config_hash},
          {"train", train},
          {"seed", seed},
          {"lr", lr},
          {"batch_size", batch_size},
          {"selection_metric", selection_metric},
          {"val_metric", val_metric},
          {"best_epoch", best_epoch},
          {"epochs_run", epochs_run},
          {"stopped_early", stopped_early},
          {"epoch_log", epoch_log},
          {"checkpoint", checkpoint},
          {"checkpoint_sha256", checkpoint_sha256},
          {"wall_time", wall_time},
          {"metrics", metrics}};
}

RunRecord RunRecord::from_json(const json& j) {
  RunRecord r;
  try {
    r.run_id = j.at("run_id").get<std::string>();
    r.stage = j.at("stage").get<std::string>();
    r.kind = parse_run_kind(j.at("kind").get<std::string>());
    r.config = j.at("config");
    r.config_hash = j.at("config_hash").get<std::string>();
    r.train = j.at("train");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.lr = j.at("lr").get<float>();
    r.batch_size = j.at("batch_size").get<int>();
    r.selection_metric = j.at("selection_metric").get<std::string>();
    r.val_metric = j.at("val_metric").get<double>();
    r.best_epoch = j.at("best_epoch").get<int>();
    r.epochs_run = j.at("epochs_run").get<int>();
    r.stopped_early = j.at("stopped_early").get<bool>();
    r.epoch_log = j.at("epoch_log").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.checkpoint_sha256 = j.at("checkpoint_sha256").get<std::string>();
    r.wall_time = j.at("wall_time").get<double>();
    r.metrics = j.value("metrics", json::object());
  } catch (const json::exception& e) {
    throw DataError(std::string("run record: ") + e.what());
  }
  return r;
}

const RunRecord& select_best(const std::vector<RunRecord>& records) {
  if (records.empty()) throw std::invalid_argument("select_best: no run records");
  const auto better = [](const RunRecord& a, const RunRecord& b) {
    if (a.val_metric != b.val_metric) return a.val_metric > b.val_metric;
    if (a.lr != b.lr) return a.lr < b.lr;
    if (a.batch_size != b.batch_size) return a.batch_size < b.batch_size;
    return a.run_id < b.run_id;
  };
  const RunRecord* best = &records[0];
  for (const auto& r : records)
    if (better(r, *best)) best = &r;
  return *best;
}

RunRecord train_run(const GridPoint& p, RunKind kind, const ImageDataset& train, const ImageDataset& val,
                    const ModelSpec& model, const TradesConfig* trades, const std::string& checkpoint,
                    const std::string& stage, const ExperimentConfig& cfg) {
  if (kind == RunKind::robust && !trades) throw std::invalid_argument("train_run: robust runs need a TRADES config");
  TrainConfig t = p.train;
  t.seed = derive_seed(cfg.seed, "train_" + stage);
  const std::string stem = checkpoint.size() > 5 && checkpoint.ends_with(".ckpt") ? checkpoint.substr(0, checkpoint.size() - 5) : checkpoint;
  if (const auto parent = std::filesystem::path(checkpoint).parent_path(); !parent.empty()) std::filesystem::create_directories(parent);
  t.epoch_log_csv = stem + ".epochs.csv";
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res = kind == RunKind::robust ? train_trades(train, val, model, t, *trades) : train_standard(train, val, model, t);
  RunRecord r;
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.run_id = stage + "/" + p.id;
  r.stage = stage;
  r.kind = kind;
  r.config = cfg.to_json();
  r.config_hash = cfg.hash();
  r.train = train_config_json(t);
  if (kind == RunKind::robust) {
    r.train["trades"] = trades_config_json(*trades);
    r.train["trades"]["epsilon"] = trades->epsilon;
  }
  r.seed = t.seed;
  r.lr = t.lr;
  r.batch_size = t.batch_size;
  r.selection_metric = res.selection_metric;
  r.val_metric = res.best_metric;
  r.best_epoch = res.best_epoch;
  r.epochs_run = static_cast<int>(res.epochs.size());
  r.stopped_early = res.stopped_early;
  r.epoch_log = t.epoch_log_csv;
  r.checkpoint = checkpoint;
  const json meta = {{"run_id", r.run_id}, {"config_hash", r.config_hash}, {"stage", stage}, {"train", r.train}};
  r.checkpoint_sha256 = save_checkpoint(checkpoint, res.model, nullptr, nullptr, meta);
  return r;
}

std::vector<RunRecord> run_grid(const std::vector<GridPoint>& points, RunKind kind, const ImageDataset& train,
                                const ImageDataset& val, const ModelSpec& model, const TradesConfig* trades,
                                const std::string& dir, const std::string& stage, const ExperimentConfig& cfg) {
  if (points.empty()) throw ConfigError("grid '" + stage + "' has no runs");
  std::filesystem::create_directories(dir);
  std::vector<RunRecord> records(points.size());
  std::mutex write_mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  const auto job = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        {
          std::lock_guard<std::mutex> lock(write_mu);
          if (failure) return;
        }
        const GridPoint& p = points[i];
        const std::string stem = (std::filesystem::path(dir) / p.id).string();
        spdlog::info("[{}] run {} ({}/{})", stage, p.id, i + 1, points.size());
        RunRecord r = train_run(p, kind, train, val, model, trades, stem + ".ckpt", stage, cfg);
        std::lock_guard<std::mutex> lock(write_mu);
        write_text_file(stem + ".json", r.to_json().dump(2));
        records[i] = std::move(r);
      } catch (...) {
        std::lock_guard<std::mutex> lock(write_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const int workers = std::max(1, std::min<int>(cfg.grid.workers, static_cast<int>(points.size())));
  if (workers == 1) {
    job();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(job);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return records;
}

}  // namespace nrf
