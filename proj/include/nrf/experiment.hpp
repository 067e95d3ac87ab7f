#pragma once
// Experiment configuration, grid search, run records, the five-stage
// pipeline and report generation.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nrf/attacks.hpp"
#include "nrf/datasets.hpp"
#include "nrf/distill.hpp"
#include "nrf/evaluation.hpp"
#include "nrf/model.hpp"
#include "nrf/training.hpp"

namespace nrf {

// Invalid or unknown configuration. Maps to the CLI's config-error exit code.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class RunKind { standard, nonrobust, robust };
std::string run_kind_name(RunKind k);
RunKind parse_run_kind(const std::string& s);

enum class SizeClass { large, small };
std::string size_class_name(SizeClass s);
SizeClass parse_size_class(const std::string& s);

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or an NPZ path
  int num_classes = 0;               // 0 = from the archive
  std::int64_t max_train = 0;        // 0 = all rows; otherwise a class-stratified subsample
  std::int64_t max_val = 0;
  std::int64_t max_test = 0;
  int resize = 0;                    // 0 = keep the stored size
  ResizeFilter resize_filter = ResizeFilter::bilinear;
  SyntheticSpec synthetic;
};

struct GridConfig {
  bool enabled = false;              // false: every stage runs the single `train` config
  SizeClass size_class = SizeClass::small;
  std::vector<float> lrs;            // empty = table default
  std::vector<int> batch_sizes;      // empty = table default for size_class
  std::vector<bool> augmentation;    // nonrobust third axis; empty = {true,false}
  std::vector<int> max_epochs;       // standard/robust third axis; empty = {200,400}
  std::vector<std::string> robust_allowlist;  // run ids; empty = full grid
  int workers = 1;
};

struct EvalConfig {
  std::uint64_t corruption_seed = 0;
  std::int64_t max_samples = 0;              // clean and corrupted modes
  std::int64_t adversarial_max_samples = 0;  // adversarial mode
  int workers = 1;
};

struct ExperimentConfig {
  static constexpr int kSchemaVersion = 1;
  std::string name = "experiment";
  std::uint64_t seed = 0;
  DataConfig data;
  ModelSpec model;
  TrainConfig train;
  TradesConfig trades;      // epsilon is taken from `epsilons`
  DistillConfig distill;    // epsilon and seed are set per stage
  // Validation split for nonrobust-only runs: "original" (unchanged labels) or
  // "distilled" (the validation split relabelled by the same procedure).
  std::string nonrobust_validation = "original";
  EnsembleConfig attack;    // epsilon and seed are set per evaluation
  std::vector<float> epsilons{4.0f / 255.0f};
  GridConfig grid;
  EvalConfig eval;

  // Strict parse: unknown keys, wrong types and a missing or different
  // schema_version raise ConfigError naming the offending path.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
  // Every field, defaults included; keys sorted. Feeds the config hash.
  nlohmann::json to_json() const;
  std::string hash() const;
  void validate() const;
};

// Sets a dotted path (e.g. "train.lr") in a JSON document. The value text is
// parsed as JSON when possible, otherwise stored as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Accepts a number or a "k/255"-style fraction.
float parse_epsilon(const nlohmann::json& v);
std::string epsilon_tag(float eps);  // e.g. "eps4" for 4/255

struct GridSpec {
  RunKind kind = RunKind::standard;
  SizeClass size_class = SizeClass::small;
  std::vector<float> lrs;
  std::vector<int> batch_sizes;
  std::vector<bool> augmentation;
  std::vector<int> max_epochs;
  std::vector<std::string> allowlist;

  // Reference axes: lr {0.4,0.3,0.2,0.1}; batch {1024,512,256,32} (large) or
  // {256,128,64,32} (small); augmentation {true,false} for nonrobust runs,
  // max epochs {200,400} otherwise.
  static GridSpec reference(RunKind kind, SizeClass size_class);
  static GridSpec from_config(RunKind kind, const GridConfig& g);
};

struct GridPoint {
  std::string id;
  TrainConfig train;
};

// Cartesian expansion in (lr, batch, third axis) order. Duplicate axis values
// are dropped with a warning; a non-empty allowlist keeps only listed ids and
// rejects unknown ones.
std::vector<GridPoint> expand_grid(const GridSpec& spec, const TrainConfig& base);
std::string grid_point_id(RunKind kind, float lr, int batch, bool augmentation, int max_epochs);

struct RunRecord {
  std::string run_id;
  std::string stage;
  RunKind kind = RunKind::standard;
  nlohmann::json config;  // canonical experiment config
  std::string config_hash;
  nlohmann::json train;   // effective TrainConfig (and TradesConfig for robust runs)
  std::uint64_t seed = 0;
  float lr = 0.0f;
  int batch_size = 0;
  std::string selection_metric;
  double val_metric = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
  bool stopped_early = false;
  std::string epoch_log;
  std::string checkpoint;
  std::string checkpoint_sha256;
  double wall_time = 0.0;
  nlohmann::json metrics = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

// Highest val_metric; ties go to the lower lr, then the smaller batch, then
// the lexicographically smaller run id. Reads nothing but the records.
const RunRecord& select_best(const std::vector<RunRecord>& records);

nlohmann::json train_config_json(const TrainConfig& t);
nlohmann::json trades_config_json(const TradesConfig& t);

// One training run; writes the checkpoint (EMA weights at the selected epoch)
// and <stem>.epochs.csv next to it.
RunRecord train_run(const GridPoint& point, RunKind kind, const ImageDataset& train, const ImageDataset& val,
                    const ModelSpec& model, const TradesConfig* trades, const std::string& checkpoint,
                    const std::string& stage, const ExperimentConfig& cfg);

// Runs every grid point (bounded worker pool; record writes serialized) and
// writes <dir>/<id>.ckpt, <id>.epochs.csv and <id>.json.
std::vector<RunRecord> run_grid(const std::vector<GridPoint>& points, RunKind kind, const ImageDataset& train,
                                const ImageDataset& val, const ModelSpec& model, const TradesConfig* trades,
                                const std::string& dir, const std::string& stage, const ExperimentConfig& cfg);

struct PipelineOptions {
  std::string out_dir;
  bool resume = true;
  std::string halt_after;  // stop (as a failure) right after this stage completes
};

class PipelineHalted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineResult {
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
  nlohmann::json report;
};

// Stages: data, base, then per epsilon distill_<tag>, nonrobust_<tag>,
// robust_<tag>, then eval and report. Completed stages are recorded in
// <out>/state.json with artifact hashes and skipped on resume. The test
// split is read only in the eval stage; earlier stages assert this.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opts);

// Model kinds in report order.
const std::vector<std::string>& report_model_kinds();

// Builds the report from evaluation records ({dataset, epsilon, model_kind,
// run_id, num_classes, sections: [EvalSection json]}). Pure.
struct Report {
  nlohmann::json json;
  std::string csv;         // long format: one metric per row
  std::string figure_csv;  // bar-chart layout: in / out / adversarial columns plus chance
};
Report build_report(const std::vector<nlohmann::json>& eval_records);
// Reads <dir>/eval/*.json and writes report.json, report.csv, figure_data.csv.
Report write_report(const std::string& dir);

// Loads cfg.data (synthetic or NPZ), applying subsampling and resizing.
// Only the requested splits are read from disk.
DatasetSplits load_experiment_data(const ExperimentConfig& cfg, bool train_val, bool test);

// Class-stratified deterministic subsample keeping at most n rows.
ImageDataset stratified_subsample(const ImageDataset& d, std::int64_t n, std::uint64_t seed);

}  // namespace nrf
