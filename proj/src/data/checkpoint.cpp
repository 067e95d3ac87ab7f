#include "nrf/checkpoint.hpp"

#include <set>

#include "nrf/archive.hpp"

namespace nrf {

nlohmann::json model_spec_to_json(const ModelSpec& s) {
  return {{"arch", arch_name(s.arch)},
          {"depth", s.depth},
          {"widen_factor", s.widen_factor},
          {"in_channels", s.in_channels},
          {"num_classes", s.num_classes},
          {"activation", "swish"},
          {"bn_epsilon", s.bn_epsilon},
          {"bn_momentum", s.bn_momentum},
          {"base_width", s.base_width},
          {"input_mean", s.input_mean},
          {"input_std", s.input_std}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("model spec must be an object");
  static const std::set<std::string> known = {"arch",        "depth",      "widen_factor", "in_channels",
                                              "num_classes", "activation", "bn_epsilon",   "bn_momentum",
                                              "base_width",  "input_mean", "input_std"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw std::invalid_argument("unknown model key '" + k + "'");
  }
  ModelSpec s;
  try {
    if (j.contains("arch")) s.arch = parse_arch(j["arch"].get<std::string>());
    if (j.contains("activation") && j["activation"].get<std::string>() != "swish") {
      throw std::invalid_argument("unsupported activation '" + j["activation"].get<std::string>() + "' (expected swish)");
    }
    s.depth = j.value("depth", s.depth);
    s.widen_factor = j.value("widen_factor", s.widen_factor);
    s.in_channels = j.value("in_channels", s.in_channels);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.bn_epsilon = j.value("bn_epsilon", s.bn_epsilon);
    s.bn_momentum = j.value("bn_momentum", s.bn_momentum);
    s.base_width = j.value("base_width", s.base_width);
    s.input_mean = j.value("input_mean", s.input_mean);
    s.input_std = j.value("input_std", s.input_std);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("model spec: ") + e.what());
  }
  return s;
}

std::vector<std::uint8_t> checkpoint_bytes(const Model& model, const EmaState* ema, const OptimState* optim,
                                           const nlohmann::json& metadata) {
  Npz npz;
  auto put = [&](const std::string& prefix, const ParamSet& set) {
    for (int i = 0; i < set.size(); ++i) npz.arrays[prefix + set.name(i)] = NpyArray::from_tensor(set[i]);
  };
  put("param/", model.params);
  put("buffer/", model.buffers);
  nlohmann::json meta = {{"format", "nrf-checkpoint"}, {"version", 1}, {"model_spec", model_spec_to_json(model.spec)}};
  if (ema) {
    put("ema/param/", ema->shadow);
    put("ema/buffer/", ema->shadow_buffers);
    meta["ema"] = {{"decay", ema->decay}, {"updates", ema->updates}};
  }
  if (optim) {
    put("optim/velocity/", optim->velocity);
    meta["optim"] = {{"step", optim->step},
                     {"base_lr", optim->base_lr},
                     {"momentum", optim->momentum},
                     {"total_steps", optim->total_steps}};
  }
  meta["run"] = metadata;
  npz.texts["metadata.json"] = meta.dump(2);
  return write_npz(npz);
}

std::string save_checkpoint(const std::string& path, const Model& model, const EmaState* ema, const OptimState* optim,
                            const nlohmann::json& metadata) {
  const auto bytes = checkpoint_bytes(model, ema, optim, metadata);
  write_file(path, bytes);
  return sha256_hex(bytes);
}

namespace {

void fill_set(const ZipArchive& zip, const std::string& prefix, ParamSet& set) {
  for (int i = 0; i < set.size(); ++i) {
    const std::string key = prefix + set.name(i);
    if (!zip.contains(key + ".npy")) {
      throw CheckpointMismatch(set.name(i), zip.source() + ": checkpoint has no tensor '" + key + "'");
    }
    const NpyArray a = read_npz_array(zip, key);
    if (a.dtype != DType::f32 || a.shape != set[i].shape()) {
      throw CheckpointMismatch(set.name(i), zip.source() + ": tensor '" + key + "' has shape " + shape_str(a.shape) +
                                                " but the model expects " + shape_str(set[i].shape()));
    }
    set[i] = a.to_tensor();
  }
}

nlohmann::json read_meta(const ZipArchive& zip) {
  if (!zip.contains("metadata.json")) throw DataError(zip.source() + ": not a checkpoint (no metadata.json)");
  const auto b = zip.read("metadata.json");
  auto j = nlohmann::json::parse(b.begin(), b.end(), nullptr, false);
  if (j.is_discarded() || j.value("format", "") != "nrf-checkpoint") throw DataError(zip.source() + ": not a checkpoint");
  return j;
}

Checkpoint load_from(const ZipArchive& zip) {
  const auto meta = read_meta(zip);
  Checkpoint ck;
  ModelSpec spec;
  try {
    spec = model_spec_from_json(meta.at("model_spec"));
  } catch (const std::exception& e) {
    throw DataError(zip.source() + ": bad model spec: " + e.what());
  }
  ck.model = build_model(spec, 0);
  fill_set(zip, "param/", ck.model.params);
  fill_set(zip, "buffer/", ck.model.buffers);
  if (meta.contains("ema")) {
    EmaState e = EmaState::from(ck.model.params, ck.model.buffers, meta["ema"]["decay"].get<float>());
    e.updates = meta["ema"]["updates"].get<std::int64_t>();
    fill_set(zip, "ema/param/", e.shadow);
    fill_set(zip, "ema/buffer/", e.shadow_buffers);
    ck.ema = std::move(e);
  }
  if (meta.contains("optim")) {
    const auto& o = meta["optim"];
    OptimState s = OptimState::for_params(ck.model.params, o["base_lr"].get<float>(), o["momentum"].get<float>(),
                                          o["total_steps"].get<std::int64_t>());
    s.step = o["step"].get<std::int64_t>();
    fill_set(zip, "optim/velocity/", s.velocity);
    ck.optim = std::move(s);
  }
  ck.metadata = meta.value("run", nlohmann::json::object());
  return ck;
}

}  // namespace

Checkpoint load_checkpoint(const std::string& path) { return load_from(ZipArchive::open(path)); }

Checkpoint load_checkpoint_bytes(std::vector<std::uint8_t> bytes, const std::string& label) {
  return load_from(ZipArchive::from_bytes(std::move(bytes), label));
}

void load_weights_into(Model& model, const std::string& path) {
  const auto zip = ZipArchive::open(path);
  read_meta(zip);
  Model staged = model;
  fill_set(zip, "param/", staged.params);
  fill_set(zip, "buffer/", staged.buffers);
  model = std::move(staged);
}

std::string file_sha256(const std::string& path) { return sha256_hex(read_file(path)); }

}  // namespace nrf
