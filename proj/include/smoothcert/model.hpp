#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "smoothcert/error.hpp"
#include "smoothcert/format.hpp"
#include "smoothcert/layers.hpp"
#include "smoothcert/loss.hpp"
#include "smoothcert/norms.hpp"
#include "smoothcert/random.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

enum class LayerKind { dense, conv2d, relu, norm, flatten, avgpool };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::norm: return "norm";
    case LayerKind::flatten: return "flatten";
    case LayerKind::avgpool: return "avgpool";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view name) {
  for (const LayerKind k : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu,
                            LayerKind::norm, LayerKind::flatten, LayerKind::avgpool}) {
    if (to_string(k) == name) return k;
  }
  throw Error("unknown layer kind '" + std::string(name) + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;   // dense: features in; conv2d: channels in; norm: channels
  std::size_t out = 0;  // dense: features out; conv2d: channels out
  NormKind norm = NormKind::layer;
  std::size_t groups = 0;  // group norm only; 0 selects the default
  double momentum = kNormMomentum;
  double eps = kNormEps;

  static LayerSpec dense(std::size_t in, std::size_t out) {
    return {LayerKind::dense, in, out};
  }
  static LayerSpec conv2d(std::size_t in, std::size_t out) {
    return {LayerKind::conv2d, in, out};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
  static LayerSpec avgpool() { return {LayerKind::avgpool}; }
  static LayerSpec normalization(NormKind kind, std::size_t channels,
                                 std::size_t groups = 0,
                                 double momentum = kNormMomentum) {
    LayerSpec s{LayerKind::norm, channels, channels, kind};
    s.groups = kind == NormKind::group ? (groups ? groups : default_groups(channels)) : 0;
    s.momentum = momentum;
    return s;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Declarative layer stack. The final layer is always the dense classification
// head; it is the only layer replaced on transfer.
struct ModelSpec {
  std::size_t in_channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<LayerSpec> layers;

  std::size_t head_index() const { return layers.size() - 1; }
  std::size_t num_classes() const { return layers.back().out; }

  // Propagates shapes through the stack; errors name the offending layer.
  void validate() const {
    if (in_channels == 0 || height == 0 || width == 0) {
      throw ShapeError("model input dimensions must be positive");
    }
    if (layers.empty() || layers.back().kind != LayerKind::dense) {
      throw ShapeError("model must end with a dense head layer");
    }
    Shape cur{in_channels, height, width};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      auto fail = [&](const std::string& why) {
        throw ShapeError(layer_name(i) + ": " + why + " (incoming shape " +
                         shape_str(cur) + ")");
      };
      switch (l.kind) {
        case LayerKind::conv2d:
          if (cur.size() != 3 || cur[0] != l.in) fail("channel mismatch");
          if (l.out == 0) fail("needs at least one output channel");
          cur[0] = l.out;
          break;
        case LayerKind::norm:
          if (cur.size() != 3 || cur[0] != l.in) fail("channel mismatch");
          if (l.norm == NormKind::group && (l.groups == 0 || l.in % l.groups)) {
            fail("channels not divisible by groups");
          }
          break;
        case LayerKind::relu:
          break;
        case LayerKind::flatten:
          if (cur.size() != 3) fail("flatten expects a feature map");
          cur = Shape{shape_numel(cur)};
          break;
        case LayerKind::avgpool:
          if (cur.size() != 3) fail("avgpool expects a feature map");
          cur = Shape{cur[0]};
          break;
        case LayerKind::dense:
          if (cur.size() != 1 || cur[0] != l.in) fail("feature mismatch");
          if (l.out == 0) fail("needs at least one output");
          cur = Shape{l.out};
          break;
      }
    }
  }

  std::string layer_name(std::size_t i) const {
    return "layer " + std::to_string(i) + " (" +
           std::string(to_string(layers.at(i).kind)) + ")";
  }

  // Canonical form: sorted keys, integers only; the two norm hyperparameters
  // are carried as shortest round-trip decimal strings.
  nlohmann::json to_json() const {
    nlohmann::json js;
    js["input"] = {in_channels, height, width};
    nlohmann::json arr = nlohmann::json::array();
    for (const LayerSpec& l : layers) {
      nlohmann::json e;
      e["kind"] = std::string(to_string(l.kind));
      switch (l.kind) {
        case LayerKind::dense:
        case LayerKind::conv2d:
          e["in"] = l.in;
          e["out"] = l.out;
          break;
        case LayerKind::norm:
          e["norm"] = std::string(to_string(l.norm));
          e["channels"] = l.in;
          if (l.norm == NormKind::group) e["groups"] = l.groups;
          e["momentum"] = format_double(l.momentum);
          e["eps"] = format_double(l.eps);
          break;
        default:
          break;
      }
      arr.push_back(std::move(e));
    }
    js["layers"] = std::move(arr);
    return js;
  }

  std::string canonical_json() const { return to_json().dump(); }

  static ModelSpec from_json(const nlohmann::json& js) {
    try {
      ModelSpec spec;
      const auto& input = js.at("input");
      spec.in_channels = input.at(0).get<std::size_t>();
      spec.height = input.at(1).get<std::size_t>();
      spec.width = input.at(2).get<std::size_t>();
      for (const auto& e : js.at("layers")) {
        LayerSpec l;
        l.kind = parse_layer_kind(e.at("kind").get<std::string>());
        switch (l.kind) {
          case LayerKind::dense:
          case LayerKind::conv2d:
            l.in = e.at("in").get<std::size_t>();
            l.out = e.at("out").get<std::size_t>();
            break;
          case LayerKind::norm:
            l.norm = parse_norm_kind(e.at("norm").get<std::string>());
            l.in = l.out = e.at("channels").get<std::size_t>();
            if (l.norm == NormKind::group) l.groups = e.at("groups").get<std::size_t>();
            l.momentum = parse_double(e.at("momentum").get<std::string>());
            l.eps = parse_double(e.at("eps").get<std::string>());
            break;
          default:
            break;
        }
        spec.layers.push_back(l);
      }
      spec.validate();
      return spec;
    } catch (const nlohmann::json::exception& e) {
      throw ShapeError(std::string("malformed model spec: ") + e.what());
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct ConvNetOptions {
  std::size_t in_channels = 1;
  std::size_t size = 16;
  std::vector<std::size_t> channels{8, 16};
  NormKind norm = NormKind::layer;
  std::size_t groups = 0;
  double norm_momentum = kNormMomentum;
  std::size_t num_classes = 10;
};

// conv -> norm -> relu blocks, global average pooling, dense head.
inline ModelSpec make_convnet(const ConvNetOptions& opt) {
  ModelSpec spec;
  spec.in_channels = opt.in_channels;
  spec.height = spec.width = opt.size;
  std::size_t c = opt.in_channels;
  for (const std::size_t out : opt.channels) {
    spec.layers.push_back(LayerSpec::conv2d(c, out));
    spec.layers.push_back(
        LayerSpec::normalization(opt.norm, out, opt.groups, opt.norm_momentum));
    spec.layers.push_back(LayerSpec::relu());
    c = out;
  }
  spec.layers.push_back(LayerSpec::avgpool());
  spec.layers.push_back(LayerSpec::dense(c, opt.num_classes));
  spec.validate();
  return spec;
}

template <typename T>
struct NamedParam {
  std::string name;
  BasicTensor<T>* tensor = nullptr;
  std::size_t layer = 0;
};

template <typename T>
using Layer = std::variant<Dense<T>, Conv2d<T>, Relu<T>, NormLayer<T>, Flatten<T>,
                           AvgPool<T>>;

// Sequential network with reverse-mode differentiation through its layers.
// Value type: copying a model copies every parameter and running statistic.
template <typename T>
class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    layers_.reserve(spec_.layers.size());
    for (const LayerSpec& l : spec_.layers) layers_.push_back(build(l));
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t head_index() const noexcept { return spec_.head_index(); }
  std::size_t num_classes() const noexcept { return spec_.num_classes(); }
  Shape input_shape() const { return {spec_.in_channels, spec_.height, spec_.width}; }

  Layer<T>& layer(std::size_t i) { return layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return layers_.at(i); }

  // Kaiming-style N(0, 2/fan_in) weights, zero biases, unit/zero norm affine.
  void init_parameters(std::uint64_t seed) {
    for (std::size_t i = 0; i < layers_.size(); ++i) init_layer(i, seed);
  }

  void init_layer(std::size_t index, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, 0x696e6974ULL, index);
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Dense<T>> || std::is_same_v<L, Conv2d<T>>) {
            const std::size_t fan_in = l.weight.size() / l.weight.dim(0);
            const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (T& w : l.weight.data()) w = static_cast<T>(stddev * rng.normal());
            l.bias.fill(T{0});
          } else if constexpr (std::is_same_v<L, NormLayer<T>>) {
            l.gamma.fill(T{1});
            l.beta.fill(T{0});
            l.running_mean.fill(T{0});
            l.running_var.fill(T{1});
            l.stats_initialized = false;
          }
        },
        layers_[index]);
  }

  // Discards the head and installs a freshly initialized one with
  // `num_classes` outputs. Every other layer is left untouched.
  void replace_head(std::size_t num_classes, std::uint64_t seed) {
    const std::size_t h = head_index();
    spec_.layers[h].out = num_classes;
    spec_.validate();
    layers_[h] = build(spec_.layers[h]);
    init_layer(h, seed);
  }

  void set_freeze_running_stats(bool freeze) {
    for (Layer<T>& l : layers_) {
      if (auto* n = std::get_if<NormLayer<T>>(&l)) n->freeze_running_stats = freeze;
    }
  }

  // Forward with caching for backward(). Mode only affects batch norm.
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) {
    check_input(x);
    BasicTensor<T> cur = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      cur = guarded(i, [&] {
        return std::visit(
            [&](auto& l) -> BasicTensor<T> {
              using L = std::decay_t<decltype(l)>;
              if constexpr (std::is_same_v<L, NormLayer<T>>) {
                return l.forward(cur, mode);
              } else {
                return l.forward(cur);
              }
            },
            layers_[i]);
      });
    }
    check_finite(cur);
    return cur;
  }

  // Eval-mode forward that leaves the model untouched; safe to call from
  // several threads on one shared model.
  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    check_input(x);
    BasicTensor<T> cur = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      cur = guarded(i, [&] {
        return std::visit([&](const auto& l) { return l.infer(cur); }, layers_[i]);
      });
    }
    check_finite(cur);
    return cur;
  }

  // Argmax of infer(); ties resolve to the lowest class index.
  std::vector<int> classify(const BasicTensor<T>& x) const {
    const BasicTensor<T> logits = infer(x);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* z = logits.ptr() + i * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (z[j] > z[best]) best = j;
      }
      out[i] = static_cast<int>(best);
    }
    return out;
  }

  // Reverse pass from d loss / d logits, accumulating into parameter grads.
  // Layers below `first_layer` are skipped entirely.
  void backward(const BasicTensor<T>& grad_logits, std::size_t first_layer = 0) {
    BasicTensor<T> g = grad_logits;
    for (std::size_t i = layers_.size(); i-- > first_layer;) {
      const bool need_input = i > first_layer;
      g = guarded(i, [&] {
        return std::visit(
            [&](auto& l) -> BasicTensor<T> {
              using L = std::decay_t<decltype(l)>;
              if constexpr (std::is_same_v<L, Dense<T>> || std::is_same_v<L, Conv2d<T>>) {
                return l.backward(g, need_input);
              } else {
                return l.backward(g);
              }
            },
            layers_[i]);
      });
    }
  }

  // Train-mode forward, mean cross-entropy, and backward in one call.
  LossResult<T> forward_backward(const BasicTensor<T>& x, std::span<const int> labels,
                                 std::size_t first_layer = 0) {
    const BasicTensor<T> logits = forward(x, Mode::train);
    LossResult<T> res = softmax_cross_entropy(logits, labels);
    backward(res.grad, first_layer);
    return res;
  }

  // Learnable tensors of layers >= first_layer, in layer order.
  std::vector<NamedParam<T>> parameters(std::size_t first_layer = 0) {
    std::vector<NamedParam<T>> out;
    for (std::size_t i = first_layer; i < layers_.size(); ++i) {
      const std::string prefix = "layers." + std::to_string(i) + ".";
      std::visit(
          [&](auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Dense<T>> || std::is_same_v<L, Conv2d<T>>) {
              out.push_back({prefix + "weight", &l.weight, i});
              out.push_back({prefix + "bias", &l.bias, i});
            } else if constexpr (std::is_same_v<L, NormLayer<T>>) {
              out.push_back({prefix + "gamma", &l.gamma, i});
              out.push_back({prefix + "beta", &l.beta, i});
            }
          },
          layers_[i]);
    }
    return out;
  }

  std::vector<BasicTensor<T>*> parameter_tensors(std::size_t first_layer = 0) {
    std::vector<BasicTensor<T>*> out;
    for (auto& p : parameters(first_layer)) out.push_back(p.tensor);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

  void clear_caches() {
    for (Layer<T>& l : layers_) std::visit([](auto& x) { x.clear_cache(); }, l);
  }

  // Full persistent state: parameters, then batch-norm running statistics
  // and their initialized flags, in layer order.
  std::vector<std::pair<std::string, BasicTensor<T>>> state() const {
    std::vector<std::pair<std::string, BasicTensor<T>>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = "layers." + std::to_string(i) + ".";
      std::visit(
          [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Dense<T>> || std::is_same_v<L, Conv2d<T>>) {
              out.emplace_back(prefix + "weight", l.weight);
              out.emplace_back(prefix + "bias", l.bias);
            } else if constexpr (std::is_same_v<L, NormLayer<T>>) {
              out.emplace_back(prefix + "gamma", l.gamma);
              out.emplace_back(prefix + "beta", l.beta);
            }
          },
          layers_[i]);
    }
    for (auto& e : out) e.second.drop_grad();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (const auto* n = std::get_if<NormLayer<T>>(&layers_[i]);
          n && n->has_running_stats()) {
        const std::string prefix = "layers." + std::to_string(i) + ".";
        out.emplace_back(prefix + "running_mean", n->running_mean);
        out.emplace_back(prefix + "running_var", n->running_var);
        out.emplace_back(prefix + "stats_initialized",
                         BasicTensor<T>(Shape{1}, n->stats_initialized ? T{1} : T{0}));
      }
    }
    return out;
  }

  // Inverse of state(); names and shapes must match exactly.
  void load_state(const std::vector<std::pair<std::string, BasicTensor<T>>>& entries) {
    auto expected = state();
    if (expected.size() != entries.size()) {
      throw ShapeError("state has " + std::to_string(entries.size()) +
                       " tensors, model expects " + std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (expected[i].first != entries[i].first) {
        throw ShapeError("state tensor '" + entries[i].first + "' where '" +
                         expected[i].first + "' was expected");
      }
      if (expected[i].second.shape() != entries[i].second.shape()) {
        throw ShapeError("state tensor '" + entries[i].first + "' has shape " +
                         shape_str(entries[i].second.shape()) + ", expected " +
                         shape_str(expected[i].second.shape()));
      }
    }
    std::size_t k = 0;
    for (auto& p : parameters()) {
      auto data = entries[k++].second.data();
      std::copy(data.begin(), data.end(), p.tensor->data().begin());
    }
    for (Layer<T>& l : layers_) {
      if (auto* n = std::get_if<NormLayer<T>>(&l); n && n->has_running_stats()) {
        n->running_mean = entries[k++].second;
        n->running_var = entries[k++].second;
        n->stats_initialized = entries[k++].second[0] != T{0};
      }
    }
  }

  // Same architecture and values in another scalar type.
  template <typename U>
  Model<U> cast() const {
    Model<U> m(spec_);
    std::vector<std::pair<std::string, BasicTensor<U>>> converted;
    for (const auto& [name, t] : state()) converted.emplace_back(name, t.template cast<U>());
    m.load_state(converted);
    return m;
  }

 private:
  static Layer<T> build(const LayerSpec& l) {
    switch (l.kind) {
      case LayerKind::dense: return Dense<T>(l.in, l.out);
      case LayerKind::conv2d: return Conv2d<T>(l.in, l.out);
      case LayerKind::relu: return Relu<T>();
      case LayerKind::norm: return NormLayer<T>(l.norm, l.in, l.groups, l.momentum, l.eps);
      case LayerKind::flatten: return Flatten<T>();
      case LayerKind::avgpool: return AvgPool<T>();
    }
    throw Error("unreachable layer kind");
  }

  void check_input(const BasicTensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.height ||
        x.dim(3) != spec_.width) {
      throw ShapeError("input: expected [N," + std::to_string(spec_.in_channels) + "," +
                       std::to_string(spec_.height) + "," + std::to_string(spec_.width) +
                       "], got " + shape_str(x.shape()));
    }
  }

  static void check_finite(const BasicTensor<T>& logits) {
    if (!logits.all_finite()) throw NumericError("non-finite logits");
  }

  template <typename F>
  auto guarded(std::size_t i, F&& f) const {
    try {
      return f();
    } catch (const ShapeError& e) {
      throw ShapeError(spec_.layer_name(i) + ": " + e.what());
    }
  }

  ModelSpec spec_;
  std::vector<Layer<T>> layers_;
};

}  // namespace smoothcert
