#include "advpnml/models.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "advpnml/rng.hpp"

namespace advpnml {
namespace {

constexpr std::size_t kMnistSide = 28;
constexpr std::size_t kConvKernel = 5;
constexpr std::size_t kConvPadding = 2;
constexpr std::size_t kConv1Filters = 32;
constexpr std::size_t kConv2Filters = 64;
constexpr std::size_t kFlatten = kConv2Filters * 7 * 7;
constexpr std::size_t kHidden = 1024;
constexpr std::size_t kMnistClasses = 10;

}  // namespace

ModelSpec ModelSpec::mlp(std::vector<std::size_t> widths) {
  if (widths.size() < 2) throw ContractError("MLP needs at least input and output widths");
  if (std::any_of(widths.begin(), widths.end(), [](std::size_t w) { return w == 0; })) {
    throw ContractError("MLP widths must be positive");
  }
  return ModelSpec(MlpSpec{std::move(widths)});
}

ModelSpec ModelSpec::mnist_convnet() { return ModelSpec(MnistConvNetSpec{}); }

ModelSpec ModelSpec::parse(const std::string& descriptor) {
  if (descriptor == "mnist_convnet") return mnist_convnet();
  if (descriptor.rfind("mlp:", 0) == 0) {
    std::vector<std::size_t> widths;
    std::istringstream in(descriptor.substr(4));
    std::string item;
    while (std::getline(in, item, '-')) {
      try {
        std::size_t pos = 0;
        const unsigned long w = std::stoul(item, &pos);
        if (pos != item.size()) throw std::invalid_argument(item);
        widths.push_back(w);
      } catch (const std::exception&) {
        throw FormatError("bad MLP width '" + item + "' in descriptor '" + descriptor + "'");
      }
    }
    return mlp(std::move(widths));
  }
  throw FormatError("unknown model descriptor '" + descriptor + "'");
}

std::string ModelSpec::descriptor() const {
  if (!is_mlp()) return "mnist_convnet";
  std::string out = "mlp:";
  const auto& w = as_mlp().widths;
  for (std::size_t i = 0; i < w.size(); ++i) out += (i ? "-" : "") + std::to_string(w[i]);
  return out;
}

std::size_t ModelSpec::n_classes() const { return is_mlp() ? as_mlp().widths.back() : kMnistClasses; }

Shape ModelSpec::input_shape() const {
  if (is_mlp()) return {as_mlp().widths.front()};
  return {1, kMnistSide, kMnistSide};
}

std::vector<std::pair<std::string, Shape>> ModelSpec::parameter_layout() const {
  std::vector<std::pair<std::string, Shape>> layout;
  if (is_mlp()) {
    const auto& w = as_mlp().widths;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      const std::string name = "fc" + std::to_string(i + 1);
      layout.emplace_back(name + ".weight", Shape{w[i + 1], w[i]});
      layout.emplace_back(name + ".bias", Shape{w[i + 1]});
    }
    return layout;
  }
  layout.emplace_back("conv1.weight", Shape{kConv1Filters, 1, kConvKernel, kConvKernel});
  layout.emplace_back("conv1.bias", Shape{kConv1Filters});
  layout.emplace_back("conv2.weight", Shape{kConv2Filters, kConv1Filters, kConvKernel, kConvKernel});
  layout.emplace_back("conv2.bias", Shape{kConv2Filters});
  layout.emplace_back("fc1.weight", Shape{kHidden, kFlatten});
  layout.emplace_back("fc1.bias", Shape{kHidden});
  layout.emplace_back("fc2.weight", Shape{kMnistClasses, kHidden});
  layout.emplace_back("fc2.bias", Shape{kMnistClasses});
  return layout;
}

std::size_t ModelSpec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout()) n += shape_size(shape);
  return n;
}

Shape batched_shape(const ModelSpec& spec, const Shape& x_shape) {
  const Shape sample = spec.input_shape();
  if (x_shape == sample) {
    Shape out = sample;
    out.insert(out.begin(), 1);
    return out;
  }
  if (x_shape.size() == sample.size() + 1 && std::equal(sample.begin(), sample.end(), x_shape.begin() + 1)) {
    return x_shape;
  }
  throw DimensionError("input shape " + to_string(x_shape) + " does not match model input " + to_string(sample) +
                       " (optionally batched)");
}

template <typename T>
const Tensor<T>& ModelParams<T>::at(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
Tensor<T>& ModelParams<T>::at(std::string_view name) {
  return const_cast<Tensor<T>&>(std::as_const(*this).at(name));
}

template <typename T>
void ModelParams<T>::validate() const {
  const auto layout = spec.parameter_layout();
  if (layout.size() != tensors.size()) throw ContractError("parameter count does not match " + spec.descriptor());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].first != tensors[i].first || layout[i].second != tensors[i].second.shape()) {
      throw ContractError("parameter '" + tensors[i].first + "' does not match layout entry '" + layout[i].first +
                          "' " + to_string(layout[i].second));
    }
    if (!tensors[i].second.all_finite()) throw ContractError("parameter '" + tensors[i].first + "' is not finite");
  }
}

template <typename T>
ModelParams<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  ModelParams<T> params{spec, {}};
  std::uint64_t stream = 0;
  for (auto& [name, shape] : spec.parameter_layout()) {
    Tensor<T> t(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = shape_size(shape) / shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      CounterRng rng(derive_seed(seed, stream));
      for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    ++stream;
    params.tensors.emplace_back(name, std::move(t));
  }
  return params;
}

template <typename T>
std::vector<Var> bind_params(Tape<T>& tape, const ModelParams<T>& params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& [name, t] : params.tensors) vars.push_back(trainable ? tape.leaf_ref(t, name) : tape.constant_ref(t));
  return vars;
}

template <typename T>
Var forward_logits(Tape<T>& tape, const ModelParams<T>& params, std::span<const Var> bound, Var x) {
  const ModelSpec& spec = params.spec;
  if (bound.size() != params.tensors.size()) throw ContractError("bound parameter count mismatch");
  const Shape x_shape = tape.value(x).shape();
  const bool single = x_shape == spec.input_shape();
  const Shape batch_shape = batched_shape(spec, x_shape);
  const std::size_t n = batch_shape[0];
  Var h = single ? reshape(tape, x, batch_shape) : x;

  if (spec.is_mlp()) {
    const std::size_t layers = bound.size() / 2;
    for (std::size_t i = 0; i < layers; ++i) {
      h = linear(tape, h, bound[2 * i], bound[2 * i + 1]);
      if (i + 1 < layers) h = relu(tape, h);
    }
  } else {
    h = maxpool2d(tape, relu(tape, conv2d(tape, h, bound[0], bound[1], kConvPadding)));
    h = maxpool2d(tape, relu(tape, conv2d(tape, h, bound[2], bound[3], kConvPadding)));
    h = reshape(tape, h, Shape{n, kFlatten});
    h = relu(tape, linear(tape, h, bound[4], bound[5]));
    h = linear(tape, h, bound[6], bound[7]);
  }
  return single ? reshape(tape, h, Shape{spec.n_classes()}) : h;
}

template <typename T>
Tensor<T> forward_logits(const ModelParams<T>& params, const Tensor<T>& x) {
  Tape<T> tape;
  const auto bound = bind_params(tape, params, false);
  return tape.value(forward_logits(tape, params, bound, tape.constant(x)));
}

template <typename T>
Var loss(Tape<T>& tape, const ModelParams<T>& params, std::span<const Var> bound, Var x,
         std::span<const int> labels, Reduction reduction) {
  return softmax_cross_entropy(tape, forward_logits(tape, params, bound, x), labels, reduction);
}

template <typename T>
std::vector<Prediction<T>> predict(const ModelParams<T>& params, const Tensor<T>& batch) {
  const Shape shape = batched_shape(params.spec, batch.shape());
  const Tensor<T> probs = softmax(forward_logits(params, batch.reshaped(shape)));
  const std::size_t classes = params.spec.n_classes();
  std::vector<Prediction<T>> out(shape[0]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto row = probs.data().subspan(i * classes, classes);
    out[i].probabilities.assign(row.begin(), row.end());
    out[i].label = argmax(row);
  }
  return out;
}

template <typename T>
std::vector<int> predict_labels(const ModelParams<T>& params, const Tensor<T>& batch) {
  const Shape shape = batched_shape(params.spec, batch.shape());
  const Tensor<T> logits = forward_logits(params, batch.reshaped(shape));
  const std::size_t classes = params.spec.n_classes();
  std::vector<int> out(shape[0]);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(logits.data().subspan(i * classes, classes));
  return out;
}

#define ADVPNML_INSTANTIATE(T)                                                                          \
  template struct ModelParams<T>;                                                                       \
  template ModelParams<T> init_params<T>(const ModelSpec&, std::uint64_t);                              \
  template std::vector<Var> bind_params<T>(Tape<T>&, const ModelParams<T>&, bool);                      \
  template Var forward_logits<T>(Tape<T>&, const ModelParams<T>&, std::span<const Var>, Var);           \
  template Tensor<T> forward_logits<T>(const ModelParams<T>&, const Tensor<T>&);                        \
  template Var loss<T>(Tape<T>&, const ModelParams<T>&, std::span<const Var>, Var, std::span<const int>, \
                       Reduction);                                                                      \
  template std::vector<Prediction<T>> predict<T>(const ModelParams<T>&, const Tensor<T>&);              \
  template std::vector<int> predict_labels<T>(const ModelParams<T>&, const Tensor<T>&);

ADVPNML_INSTANTIATE(float)
ADVPNML_INSTANTIATE(double)

#undef ADVPNML_INSTANTIATE

}  // namespace advpnml
