#pragma once
// Named-tensor checkpoints in the NPZ convention:
//   param/<name>, buffer/<name>, ema/param/<name>, ema/buffer/<name>,
//   optim/velocity/<name>, plus metadata.json (model spec, optimizer and EMA
//   scalars, free-form run metadata).

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nrf/model.hpp"
#include "nrf/optim.hpp"

namespace nrf {

class CheckpointMismatch : public std::runtime_error {
 public:
  CheckpointMismatch(const std::string& tensor, const std::string& what) : std::runtime_error(what), tensor(tensor) {}
  std::string tensor;
};

nlohmann::json model_spec_to_json(const ModelSpec& spec);
// Throws std::invalid_argument on unknown keys or bad values.
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct Checkpoint {
  Model model;
  std::optional<EmaState> ema;
  std::optional<OptimState> optim;
  nlohmann::json metadata = nlohmann::json::object();
};

std::vector<std::uint8_t> checkpoint_bytes(const Model& model, const EmaState* ema = nullptr, const OptimState* optim = nullptr,
                                           const nlohmann::json& metadata = nlohmann::json::object());
// Returns the SHA-256 of the written archive.
std::string save_checkpoint(const std::string& path, const Model& model, const EmaState* ema = nullptr,
                            const OptimState* optim = nullptr, const nlohmann::json& metadata = nlohmann::json::object());

// Rebuilds the model from the stored spec.
Checkpoint load_checkpoint(const std::string& path);
Checkpoint load_checkpoint_bytes(std::vector<std::uint8_t> bytes, const std::string& label = "<memory>");

// Copies stored parameters and buffers into an existing model. Any missing
// tensor or shape difference throws CheckpointMismatch naming the first
// offending tensor in model order.
void load_weights_into(Model& model, const std::string& path);

std::string file_sha256(const std::string& path);

}  // namespace nrf
