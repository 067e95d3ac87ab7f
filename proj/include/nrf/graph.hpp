#pragma once
// Static network description plus a reverse-mode executor.
//
// A Graph is an ordered list of nodes; each node names its input nodes (which
// must precede it), the trainable parameters it reads, and any non-trainable
// buffers (batch-norm running statistics). A Tape runs one forward pass over a
// Graph, keeps the activations it needs, and then produces gradients with
// respect to every parameter and to the graph input.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrf/tensor.hpp"

namespace nrf {

enum class OpKind { input, standardize, conv2d, batch_norm, swish, add, global_avg_pool, linear, sum };

std::string_view op_name(OpKind kind);

struct Node {
  OpKind kind = OpKind::input;
  std::vector<int> inputs;
  std::vector<int> params;   // conv2d: {w}; batch_norm: {gamma, beta}; linear: {w, b}
  std::vector<int> buffers;  // batch_norm: {running_mean, running_var}
  int stride = 1;
  int padding = 0;
  float eps = 1e-5f;
  float momentum = 0.9f;
  std::vector<float> mean;   // standardize
  std::vector<float> stdev;  // standardize
};

// Named, ordered tensor collection. Used for trainable parameters, for
// batch-norm buffers, and for gradients/velocities that mirror them.
class ParamSet {
 public:
  int add(std::string name, Tensor value);
  int size() const noexcept { return static_cast<int>(values_.size()); }
  Tensor& operator[](int i) { return values_.at(static_cast<std::size_t>(i)); }
  const Tensor& operator[](int i) const { return values_.at(static_cast<std::size_t>(i)); }
  const std::string& name(int i) const { return names_.at(static_cast<std::size_t>(i)); }
  std::optional<int> find(std::string_view name) const;
  std::int64_t total_numel() const;
  const std::vector<Tensor>& values() const noexcept { return values_; }
  std::vector<Tensor>& values() noexcept { return values_; }
  const std::vector<std::string>& names() const noexcept { return names_; }

  // Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Graph {
 public:
  Graph();

  int input() const noexcept { return 0; }
  int standardize(int x, std::vector<float> mean, std::vector<float> stdev);
  int conv2d(int x, int weight, int stride, int padding);
  int batch_norm(int x, int gamma, int beta, int running_mean, int running_var, float eps, float momentum);
  int swish(int x);
  int add(int a, int b);
  int global_avg_pool(int x);
  int linear(int x, int weight, int bias);
  int sum(int x);

  void set_output(int node);
  int output() const noexcept { return output_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }

  // Checks topological order and that referenced parameter/buffer ids exist.
  void validate(const ParamSet& params, const ParamSet& buffers) const;

 private:
  int push(Node n);
  std::vector<Node> nodes_;
  int output_ = 0;
};

enum class Mode { train, eval };

struct ForwardOptions {
  Mode mode = Mode::eval;
  // Train mode only: write batch statistics into the running buffers.
  bool update_running_stats = true;
};

struct BackwardOptions {
  bool param_grads = true;
  bool input_grad = true;
};

struct Gradients {
  std::vector<Tensor> params;  // aligned with ParamSet order; empty if not requested
  Tensor input;                // empty if not requested
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// One forward/backward evaluation. Not thread-safe; use one Tape per thread.
// The Graph and parameters must outlive the Tape and stay unchanged between
// forward() and backward().
class Tape {
 public:
  // `buffers` is only written when mode == train and update_running_stats.
  Tensor forward(const Graph& graph, const ParamSet& params, ParamSet& buffers, const Tensor& input,
                 ForwardOptions options);
  // Eval-mode forward that never touches the buffers.
  Tensor forward(const Graph& graph, const ParamSet& params, const ParamSet& buffers, const Tensor& input);

  // Seeds d(output) with output_grad. Throws StateError if forward() has not run.
  Gradients backward(const Tensor& output_grad, BackwardOptions options = {});
  // For graphs whose output is a scalar (e.g. a sum node): seed 1.
  Gradients backward(BackwardOptions options = {});

  bool has_forward() const noexcept { return graph_ != nullptr; }
  const Tensor& value(int node) const { return values_.at(static_cast<std::size_t>(node)); }

 private:
  struct BnCache {
    std::vector<float> mean, invstd;
  };
  Tensor run(const Graph& graph, const ParamSet& params, const ParamSet& buffers, ParamSet* running,
             const Tensor& input, ForwardOptions options);

  const Graph* graph_ = nullptr;
  const ParamSet* params_ = nullptr;
  Mode mode_ = Mode::eval;
  std::vector<Tensor> values_;
  std::vector<BnCache> bn_;
};

}  // namespace nrf
