#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>

#include "nrf/archive.hpp"
#include "nrf/experiment.hpp"

namespace nrf {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<std::string>& report_model_kinds() {
  static const std::vector<std::string> kinds = {"base", "nonrobust", "robust"};
  return kinds;
}

namespace {

std::string distribution_of(const std::string& mode) {
  if (mode == "clean") return "in_distribution";
  if (mode == "corrupted") return "out_of_distribution";
  return "adversarial";
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

int kind_rank(const std::string& k) {
  const auto& kinds = report_model_kinds();
  const auto it = std::find(kinds.begin(), kinds.end(), k);
  return static_cast<int>(it - kinds.begin());
}

}  // namespace

Report build_report(const std::vector<json>& eval_records) {
  std::vector<const json*> recs;
  for (const auto& r : eval_records) recs.push_back(&r);
  std::stable_sort(recs.begin(), recs.end(), [](const json* a, const json* b) {
    const auto key = [](const json* r) {
      return std::make_tuple((*r)["dataset"].get<std::string>(), (*r)["epsilon"].get<double>(),
                             kind_rank((*r)["model_kind"].get<std::string>()), (*r)["run_id"].get<std::string>());
    };
    return key(a) < key(b);
  });

  Report out;
  json rows = json::array();
  json chance = json::object();
  std::ostringstream csv, fig;
  csv << "dataset,epsilon,model_kind,mode,distribution,metric,value,chance,run_id\n";
  fig << "dataset,epsilon,model_kind,metric,in_distribution,out_of_distribution,adversarial,chance\n";
  for (const json* r : recs) {
    const std::string dataset = (*r)["dataset"].get<std::string>();
    const std::string kind = (*r)["model_kind"].get<std::string>();
    const std::string run_id = (*r)["run_id"].get<std::string>();
    const double eps = (*r)["epsilon"].get<double>();
    const int classes = (*r)["num_classes"].get<int>();
    const double chance_level = 1.0 / classes;
    chance[dataset] = chance_level;
    std::map<std::string, std::map<std::string, double>> by_metric;
    for (const auto& s : (*r)["sections"]) {
      const std::string mode = s["mode"].get<std::string>();
      for (const char* metric : {"balanced_accuracy", "auc"}) {
        const double v = s[metric].get<double>();
        by_metric[metric][distribution_of(mode)] = v;
        rows.push_back({{"dataset", dataset},
                        {"epsilon", eps},
                        {"model_kind", kind},
                        {"mode", mode},
                        {"distribution", distribution_of(mode)},
                        {"metric", metric},
                        {"value", v},
                        {"chance", chance_level},
                        {"run_id", run_id}});
        csv << dataset << ',' << num(eps) << ',' << kind << ',' << mode << ',' << distribution_of(mode) << ',' << metric
            << ',' << num(v) << ',' << num(chance_level) << ',' << run_id << '\n';
      }
    }
    for (const char* metric : {"balanced_accuracy", "auc"}) {
      auto& m = by_metric[metric];
      const auto cell = [&](const char* k) { return m.count(k) ? num(m[k]) : std::string(); };
      fig << dataset << ',' << num(eps) << ',' << kind << ',' << metric << ',' << cell("in_distribution") << ','
          << cell("out_of_distribution") << ',' << cell("adversarial") << ',' << num(chance_level) << '\n';
    }
  }
  out.json = {{"rows", rows}, {"chance", chance}, {"records", recs.size()}};
  out.csv = csv.str();
  out.figure_csv = fig.str();
  return out;
}

Report write_report(const std::string& dir) {
  const fs::path eval_dir = fs::path(dir) / "eval";
  if (!fs::is_directory(eval_dir)) throw DataError("no evaluation records under '" + eval_dir.string() + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(eval_dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no evaluation records under '" + eval_dir.string() + "'");
  std::vector<json> records;
  for (const auto& f : files) {
    const auto bytes = read_file(f.string());
    json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded() || !j.contains("sections")) throw DataError("'" + f.string() + "' is not an evaluation record");
    records.push_back(std::move(j));
  }
  Report r = build_report(records);
  const auto put = [&](const char* name, const std::string& text) { write_text_file((fs::path(dir) / name).string(), text); };
  put("report.json", r.json.dump(2));
  put("report.csv", r.csv);
  put("figure_data.csv", r.figure_csv);
  return r;
}

}  // namespace nrf
