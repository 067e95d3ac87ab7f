#include "nrf/model.hpp"

#include <cmath>
#include <stdexcept>

#include "nrf/rng.hpp"

namespace nrf {
namespace {

class Builder {
 public:
  Builder(Model& m) : m_(m) {}

  int conv(int x, const std::string& name, int cin, int cout, int k, int stride, int pad) {
    const int w = m_.params.add(name + ".w", Tensor({cout, cin, k, k}));
    return m_.graph.conv2d(x, w, stride, pad);
  }

  int bn(int x, const std::string& name, int channels) {
    const int g = m_.params.add(name + ".gamma", Tensor({channels}, 1.0f));
    const int b = m_.params.add(name + ".beta", Tensor({channels}, 0.0f));
    const int rm = m_.buffers.add(name + ".running_mean", Tensor({channels}, 0.0f));
    const int rv = m_.buffers.add(name + ".running_var", Tensor({channels}, 1.0f));
    return m_.graph.batch_norm(x, g, b, rm, rv, m_.spec.bn_epsilon, m_.spec.bn_momentum);
  }

  int act(int x) { return m_.graph.swish(x); }

  // Pre-activation residual block.
  int block(int x, const std::string& name, int cin, int cout, int stride) {
    const bool identity = cin == cout && stride == 1;
    const int o = act(bn(x, name + ".bn1", cin));
    int y = conv(o, name + ".conv1", cin, cout, 3, stride, 1);
    y = act(bn(y, name + ".bn2", cout));
    y = conv(y, name + ".conv2", cout, cout, 3, 1, 1);
    const int shortcut = identity ? x : conv(o, name + ".shortcut", cin, cout, 1, stride, 0);
    return m_.graph.add(y, shortcut);
  }

  int stem(int channels) {
    const auto c = static_cast<std::size_t>(m_.spec.in_channels);
    const int s = m_.graph.standardize(m_.graph.input(), std::vector<float>(c, m_.spec.input_mean),
                                       std::vector<float>(c, m_.spec.input_std));
    return conv(s, "stem.conv", m_.spec.in_channels, channels, 3, 1, 1);
  }

  void head(int x, int channels) {
    x = act(bn(x, "head.bn", channels));
    x = m_.graph.global_avg_pool(x);
    const int w = m_.params.add("head.fc.w", Tensor({m_.spec.num_classes, channels}));
    const int b = m_.params.add("head.fc.b", Tensor({m_.spec.num_classes}));
    m_.graph.set_output(m_.graph.linear(x, w, b));
  }

 private:
  Model& m_;
};

}  // namespace

void ModelSpec::validate() const {
  if (in_channels < 1) throw std::invalid_argument("ModelSpec: in_channels must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("ModelSpec: num_classes must be >= 2");
  if (!(bn_epsilon > 0.0f)) throw std::invalid_argument("ModelSpec: bn_epsilon must be > 0");
  if (!(bn_momentum >= 0.0f && bn_momentum < 1.0f)) throw std::invalid_argument("ModelSpec: bn_momentum must be in [0,1)");
  if (!(input_std > 0.0f)) throw std::invalid_argument("ModelSpec: input_std must be > 0");
  if (arch == Arch::wrn) {
    if (depth < 10 || (depth - 4) % 6 != 0) {
      throw std::invalid_argument("ModelSpec: WideResNet depth " + std::to_string(depth) +
                                  " violates (depth - 4) mod 6 == 0 (valid: 10, 16, 22, 28, ...)");
    }
    if (widen_factor < 1) throw std::invalid_argument("ModelSpec: widen_factor must be >= 1");
  } else if (base_width < 1) {
    throw std::invalid_argument("ModelSpec: base_width must be >= 1");
  }
}

Model build_wrn(const ModelSpec& spec, std::uint64_t init_seed) {
  ModelSpec s = spec;
  s.arch = Arch::wrn;
  s.validate();
  Model m;
  m.spec = s;
  Builder b(m);
  const int n = (s.depth - 4) / 6;
  const int widths[3] = {16 * s.widen_factor, 32 * s.widen_factor, 64 * s.widen_factor};
  const int strides[3] = {1, 2, 2};
  int x = b.stem(16);
  int cin = 16;
  for (int g = 0; g < 3; ++g) {
    for (int i = 0; i < n; ++i) {
      const std::string name = "g" + std::to_string(g + 1) + ".b" + std::to_string(i + 1);
      x = b.block(x, name, cin, widths[g], i == 0 ? strides[g] : 1);
      cin = widths[g];
    }
  }
  b.head(x, cin);
  m.graph.validate(m.params, m.buffers);
  initialize(m, init_seed);
  return m;
}

Model build_small_cnn(const ModelSpec& spec, std::uint64_t init_seed) {
  ModelSpec s = spec;
  s.arch = Arch::small_cnn;
  s.validate();
  Model m;
  m.spec = s;
  Builder b(m);
  const int w = s.base_width;
  int x = b.stem(w);
  x = b.block(x, "g1.b1", w, w, 1);
  x = b.block(x, "g2.b1", w, 2 * w, 2);
  b.head(x, 2 * w);
  m.graph.validate(m.params, m.buffers);
  initialize(m, init_seed);
  return m;
}

Model build_model(const ModelSpec& spec, std::uint64_t init_seed) {
  return spec.arch == Arch::wrn ? build_wrn(spec, init_seed) : build_small_cnn(spec, init_seed);
}

void initialize(Model& model, std::uint64_t init_seed) {
  for (int i = 0; i < model.params.size(); ++i) {
    Tensor& p = model.params[i];
    const std::string& name = model.params.name(i);
    Rng rng(init_seed, "init", static_cast<std::uint64_t>(i));
    auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".gamma")) {
      p.fill(1.0f);
    } else if (ends_with(".beta") || ends_with(".fc.b")) {
      p.fill(0.0f);
    } else if (ends_with(".fc.w")) {
      const float bound = 1.0f / std::sqrt(static_cast<float>(p.size(1)));
      for (auto& v : p.data()) v = rng.uniform(-bound, bound);
    } else {
      // conv [cout, cin, k, k], fan-out He normal
      const float fan_out = static_cast<float>(p.size(0) * p.size(2) * p.size(3));
      const float stdev = std::sqrt(2.0f / fan_out);
      for (auto& v : p.data()) v = rng.normal(0.0f, stdev);
    }
  }
  for (int i = 0; i < model.buffers.size(); ++i) {
    const bool is_var = model.buffers.name(i).ends_with(".running_var");
    model.buffers[i].fill(is_var ? 1.0f : 0.0f);
  }
}

std::string arch_name(Arch arch) { return arch == Arch::wrn ? "wrn" : "small_cnn"; }

Arch parse_arch(const std::string& name) {
  if (name == "wrn") return Arch::wrn;
  if (name == "small_cnn") return Arch::small_cnn;
  throw std::invalid_argument("unknown architecture '" + name + "' (expected wrn or small_cnn)");
}

Tensor predict_logits(const Model& model, const Tensor& x, std::int64_t batch) {
  std::vector<Tensor> parts;
  Tape tape;
  for (std::int64_t i = 0; i < x.size(0); i += batch) {
    const auto end = std::min(x.size(0), i + batch);
    parts.push_back(tape.forward(model.graph, model.params, model.buffers, x.slice_rows(i, end)));
  }
  if (parts.empty()) return Tensor({0, model.spec.num_classes});
  return concat_rows(parts);
}

Tensor NetworkClassifier::logits(const Tensor& x) const { return predict_logits(model_, x); }

Tensor NetworkClassifier::input_gradient(const Tensor& x, const std::function<Tensor(const Tensor&)>& seed,
                                         Tensor* logits_out) const {
  Tape tape;
  Tensor z = tape.forward(model_.graph, model_.params, model_.buffers, x);
  Tensor g = seed(z);
  Gradients grads = tape.backward(g, BackwardOptions{false, true});
  if (logits_out) *logits_out = std::move(z);
  return std::move(grads.input);
}

}  // namespace nrf
