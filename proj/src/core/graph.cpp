#include "nrf/graph.hpp"

#include <string>

#include "nrf/kernels.hpp"
#include "nrf/ops.hpp"

namespace nrf {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::standardize: return "standardize";
    case OpKind::conv2d: return "conv2d";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::swish: return "swish";
    case OpKind::add: return "add";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::linear: return "linear";
    case OpKind::sum: return "sum";
  }
  return "?";
}

int ParamSet::add(std::string name, Tensor value) {
  if (find(name)) throw GraphError("duplicate tensor name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return size() - 1;
}

std::optional<int> ParamSet::find(std::string_view name) const {
  for (int i = 0; i < size(); ++i) {
    if (names_[static_cast<std::size_t>(i)] == name) return i;
  }
  return std::nullopt;
}

std::int64_t ParamSet::total_numel() const {
  std::int64_t n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (int i = 0; i < size(); ++i) out.add(name(i), Tensor((*this)[i].shape()));
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (size() != other.size()) return false;
  for (int i = 0; i < size(); ++i) {
    if (name(i) != other.name(i) || (*this)[i].shape() != other[i].shape()) return false;
  }
  return true;
}

Graph::Graph() { nodes_.push_back(Node{}); }

int Graph::push(Node n) {
  const int id = static_cast<int>(nodes_.size());
  for (int in : n.inputs) {
    if (in < 0 || in >= id) throw GraphError("node input " + std::to_string(in) + " does not precede node " + std::to_string(id));
  }
  nodes_.push_back(std::move(n));
  output_ = id;
  return id;
}

int Graph::standardize(int x, std::vector<float> mean, std::vector<float> stdev) {
  if (mean.size() != stdev.size() || mean.empty()) throw GraphError("standardize: mean/std size mismatch");
  for (float s : stdev) {
    if (!(s > 0.0f)) throw GraphError("standardize: std must be positive");
  }
  Node n{OpKind::standardize, {x}};
  n.mean = std::move(mean);
  n.stdev = std::move(stdev);
  return push(std::move(n));
}

int Graph::conv2d(int x, int weight, int stride, int padding) {
  Node n{OpKind::conv2d, {x}, {weight}};
  n.stride = stride;
  n.padding = padding;
  return push(std::move(n));
}

int Graph::batch_norm(int x, int gamma, int beta, int running_mean, int running_var, float eps, float momentum) {
  Node n{OpKind::batch_norm, {x}, {gamma, beta}, {running_mean, running_var}};
  n.eps = eps;
  n.momentum = momentum;
  return push(std::move(n));
}

int Graph::swish(int x) { return push(Node{OpKind::swish, {x}}); }
int Graph::add(int a, int b) { return push(Node{OpKind::add, {a, b}}); }
int Graph::global_avg_pool(int x) { return push(Node{OpKind::global_avg_pool, {x}}); }
int Graph::linear(int x, int weight, int bias) { return push(Node{OpKind::linear, {x}, {weight, bias}}); }
int Graph::sum(int x) { return push(Node{OpKind::sum, {x}}); }

void Graph::set_output(int node) {
  if (node < 0 || node >= static_cast<int>(nodes_.size())) throw GraphError("output node out of range");
  output_ = node;
}

void Graph::validate(const ParamSet& params, const ParamSet& buffers) const {
  for (std::size_t i = 1; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::input) throw GraphError("only node 0 may be an input");
    for (int in : n.inputs) {
      if (in < 0 || in >= static_cast<int>(i)) throw GraphError("graph is not topologically ordered");
    }
    for (int p : n.params) {
      if (p < 0 || p >= params.size()) throw GraphError("node references missing parameter " + std::to_string(p));
    }
    for (int b : n.buffers) {
      if (b < 0 || b >= buffers.size()) throw GraphError("node references missing buffer " + std::to_string(b));
    }
  }
}

Tensor Tape::forward(const Graph& graph, const ParamSet& params, ParamSet& buffers, const Tensor& input,
                     ForwardOptions options) {
  ParamSet* running = (options.mode == Mode::train && options.update_running_stats) ? &buffers : nullptr;
  return run(graph, params, buffers, running, input, options);
}

Tensor Tape::forward(const Graph& graph, const ParamSet& params, const ParamSet& buffers, const Tensor& input) {
  return run(graph, params, buffers, nullptr, input, ForwardOptions{Mode::eval, false});
}

Tensor Tape::run(const Graph& graph, const ParamSet& params, const ParamSet& buffers, ParamSet* running,
                 const Tensor& input, ForwardOptions options) {
  graph_ = nullptr;
  const auto& nodes = graph.nodes();
  values_.assign(nodes.size(), Tensor{});
  bn_.assign(nodes.size(), BnCache{});
  values_[0] = input;
  const ops::BnMode bn_mode = options.mode == Mode::train ? ops::BnMode::train : ops::BnMode::eval;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    const Tensor& x = values_[static_cast<std::size_t>(n.inputs.at(0))];
    Tensor y;
    switch (n.kind) {
      case OpKind::input:
        throw GraphError("input node after position 0");
      case OpKind::standardize:
        y = ops::standardize(x, n.mean, n.stdev);
        break;
      case OpKind::conv2d:
        y = ops::conv2d(x, params[n.params[0]], n.stride, n.padding);
        break;
      case OpKind::batch_norm: {
        ops::BnRunning upd;
        if (running) {
          upd.mean = &(*running)[n.buffers[0]];
          upd.var = &(*running)[n.buffers[1]];
          upd.momentum = n.momentum;
        }
        ops::BnSaved saved;
        y = ops::batch_norm(x, params[n.params[0]], params[n.params[1]], bn_mode, buffers[n.buffers[0]],
                            buffers[n.buffers[1]], n.eps, upd, &saved);
        bn_[i] = BnCache{std::move(saved.mean), std::move(saved.invstd)};
        break;
      }
      case OpKind::swish:
        y = ops::swish(x);
        break;
      case OpKind::add:
        y = ops::add(x, values_[static_cast<std::size_t>(n.inputs.at(1))]);
        break;
      case OpKind::global_avg_pool:
        y = ops::global_avg_pool(x);
        break;
      case OpKind::linear:
        y = ops::linear(x, params[n.params[0]], params[n.params[1]]);
        break;
      case OpKind::sum:
        y = Tensor({1}, kernels::sum(x.data()));
        break;
    }
    values_[i] = std::move(y);
  }
  graph_ = &graph;
  params_ = &params;
  mode_ = options.mode;
  return values_[static_cast<std::size_t>(graph.output())];
}

Gradients Tape::backward(BackwardOptions options) {
  if (!graph_) throw StateError("backward() called before forward()");
  const Tensor& out = values_[static_cast<std::size_t>(graph_->output())];
  if (out.numel() != 1) {
    throw StateError("backward() without a seed needs a scalar output, got shape " + shape_str(out.shape()));
  }
  return backward(Tensor(out.shape(), 1.0f), options);
}

Gradients Tape::backward(const Tensor& output_grad, BackwardOptions options) {
  if (!graph_) throw StateError("backward() called before forward()");
  const auto& nodes = graph_->nodes();
  const auto out_id = static_cast<std::size_t>(graph_->output());
  if (output_grad.shape() != values_[out_id].shape()) {
    throw ShapeError("backward seed shape " + shape_str(output_grad.shape()) + " does not match output " +
                     shape_str(values_[out_id].shape()));
  }
  const ParamSet& params = *params_;
  const ops::BnMode bn_mode = mode_ == Mode::train ? ops::BnMode::train : ops::BnMode::eval;

  // needs[i]: some requested gradient flows through node i.
  std::vector<char> needs(nodes.size(), 0);
  needs[0] = options.input_grad;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    bool v = options.param_grads && !nodes[i].params.empty();
    for (int in : nodes[i].inputs) v = v || needs[static_cast<std::size_t>(in)];
    needs[i] = v;
  }

  Gradients result;
  if (options.param_grads) {
    result.params.reserve(static_cast<std::size_t>(params.size()));
    for (const auto& p : params.values()) result.params.emplace_back(p.shape());
  }
  std::vector<Tensor> grads(nodes.size());
  grads[out_id] = output_grad;

  auto accumulate = [&](int target, Tensor g) {
    auto& slot = grads[static_cast<std::size_t>(target)];
    if (slot.empty() && slot.shape().empty()) {
      slot = std::move(g);
    } else {
      kernels::axpy(1.0f, g.data(), slot.data());
    }
  };

  for (std::size_t i = out_id; i >= 1; --i) {
    const Node& n = nodes[i];
    Tensor& dy = grads[i];
    if (!needs[i] || (dy.empty() && dy.shape().empty())) continue;
    const int in0 = n.inputs.at(0);
    const Tensor& x = values_[static_cast<std::size_t>(in0)];
    const bool want_dx = needs[static_cast<std::size_t>(in0)];
    switch (n.kind) {
      case OpKind::input:
        break;
      case OpKind::standardize:
        if (want_dx) accumulate(in0, ops::standardize_backward(dy, n.stdev));
        break;
      case OpKind::conv2d: {
        Tensor dx;
        ops::conv2d_backward(x, params[n.params[0]], dy, n.stride, n.padding, want_dx ? &dx : nullptr,
                             options.param_grads ? &result.params[static_cast<std::size_t>(n.params[0])] : nullptr);
        if (want_dx) accumulate(in0, std::move(dx));
        break;
      }
      case OpKind::batch_norm: {
        Tensor dx;
        ops::BnSaved saved{bn_[i].mean, bn_[i].invstd};
        Tensor* dg = options.param_grads ? &result.params[static_cast<std::size_t>(n.params[0])] : nullptr;
        Tensor* db = options.param_grads ? &result.params[static_cast<std::size_t>(n.params[1])] : nullptr;
        ops::batch_norm_backward(x, params[n.params[0]], dy, bn_mode, saved, want_dx ? &dx : nullptr, dg, db);
        if (want_dx) accumulate(in0, std::move(dx));
        break;
      }
      case OpKind::swish:
        if (want_dx) accumulate(in0, ops::swish_backward(x, dy));
        break;
      case OpKind::add:
        if (want_dx) accumulate(in0, dy);
        if (needs[static_cast<std::size_t>(n.inputs.at(1))]) accumulate(n.inputs.at(1), dy);
        break;
      case OpKind::global_avg_pool:
        if (want_dx) accumulate(in0, ops::global_avg_pool_backward(x.shape(), dy));
        break;
      case OpKind::linear: {
        Tensor dx;
        Tensor* dw = options.param_grads ? &result.params[static_cast<std::size_t>(n.params[0])] : nullptr;
        Tensor* db = options.param_grads ? &result.params[static_cast<std::size_t>(n.params[1])] : nullptr;
        ops::linear_backward(x, params[n.params[0]], dy, want_dx ? &dx : nullptr, dw, db);
        if (want_dx) accumulate(in0, std::move(dx));
        break;
      }
      case OpKind::sum:
        if (want_dx) accumulate(in0, Tensor(x.shape(), dy[0]));
        break;
    }
    dy = Tensor{};  // release
  }
  if (options.input_grad) {
    result.input = grads[0].empty() && grads[0].shape().empty() ? Tensor(values_[0].shape()) : std::move(grads[0]);
  }
  return result;
}

}  // namespace nrf
