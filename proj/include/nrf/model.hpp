#pragma once
// WideResNet family builder and the Model bundle (graph + parameters +
// batch-norm buffers).

#include <cstdint>
#include <functional>
#include <string>

#include "nrf/graph.hpp"

namespace nrf {

enum class Arch { wrn, small_cnn };
enum class Activation { swish };

struct ModelSpec {
  Arch arch = Arch::wrn;
  int depth = 16;
  int widen_factor = 8;
  int in_channels = 3;
  int num_classes = 2;
  Activation activation = Activation::swish;
  float bn_epsilon = 1e-5f;
  float bn_momentum = 0.9f;
  // small_cnn only: stem width; the second stage doubles it.
  int base_width = 8;
  // Model-side input standardisation, applied per channel.
  float input_mean = 0.5f;
  float input_std = 0.25f;

  // Throws std::invalid_argument naming the violated rule.
  void validate() const;
};

struct Model {
  ModelSpec spec;
  Graph graph;
  ParamSet params;
  ParamSet buffers;
};

// Standard pre-activation WideResNet: 3x3 stem with 16 filters, three groups
// of (depth-4)/6 residual blocks at widths {16,32,64}*widen_factor with
// strides {1,2,2}, final BN-swish, global average pool, linear classifier.
Model build_wrn(const ModelSpec& spec, std::uint64_t init_seed);

// Two-group pre-activation residual network (one block per group) of widths
// {w, 2w}: the desk-scale test CNN.
Model build_small_cnn(const ModelSpec& spec, std::uint64_t init_seed);

// Dispatches on spec.arch.
Model build_model(const ModelSpec& spec, std::uint64_t init_seed);

// Re-draws all parameters (He-normal convs, unit BN scale, zero BN shift,
// uniform linear) and resets running statistics.
void initialize(Model& model, std::uint64_t init_seed);

std::string arch_name(Arch arch);
Arch parse_arch(const std::string& name);

// Batched eval-mode logits, processed in chunks of `batch` rows.
Tensor predict_logits(const Model& model, const Tensor& x, std::int64_t batch = 256);

// Input-space view of a classifier, used by attacks and saliency. The loss
// seed function maps logits [N,C] to d(loss)/d(logits) [N,C]; per-sample
// losses must be independent so that the returned input gradient is per-sample.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual int num_classes() const = 0;
  virtual Tensor logits(const Tensor& x) const = 0;
  virtual Tensor input_gradient(const Tensor& x, const std::function<Tensor(const Tensor&)>& seed,
                                Tensor* logits_out = nullptr) const = 0;
};

// Eval-mode (running statistics) classifier over a Model. Holds a reference;
// the model must outlive it and must not be mutated while in use.
class NetworkClassifier final : public Classifier {
 public:
  explicit NetworkClassifier(const Model& model) : model_(model) {}
  int num_classes() const override { return model_.spec.num_classes; }
  Tensor logits(const Tensor& x) const override;
  Tensor input_gradient(const Tensor& x, const std::function<Tensor(const Tensor&)>& seed,
                        Tensor* logits_out = nullptr) const override;

 private:
  const Model& model_;
};

}  // namespace nrf
