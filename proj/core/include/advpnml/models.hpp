#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "advpnml/autodiff.hpp"
#include "advpnml/tensor.hpp"

namespace advpnml {

/// Fully connected ReLU network. widths.front() is the input dimension and
/// widths.back() the number of classes.
struct MlpSpec {
  std::vector<std::size_t> widths;
  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// conv(1->32, 5x5, pad 2) -> relu -> pool -> conv(32->64, 5x5, pad 2) -> relu
/// -> pool -> flatten -> fc(3136->1024) -> relu -> fc(1024->10)
struct MnistConvNetSpec {
  friend bool operator==(const MnistConvNetSpec&, const MnistConvNetSpec&) = default;
};

class ModelSpec {
 public:
  static ModelSpec mlp(std::vector<std::size_t> widths);
  static ModelSpec mnist_convnet();
  /// Inverse of descriptor(): "mlp:2-64-64-64-2" or "mnist_convnet".
  static ModelSpec parse(const std::string& descriptor);

  std::string descriptor() const;
  std::size_t n_classes() const;
  /// Shape of one sample, without the batch axis.
  Shape input_shape() const;
  /// Ordered (name, shape) list of every parameter tensor.
  std::vector<std::pair<std::string, Shape>> parameter_layout() const;
  std::size_t parameter_count() const;

  bool is_mlp() const { return std::holds_alternative<MlpSpec>(variant_); }
  const MlpSpec& as_mlp() const { return std::get<MlpSpec>(variant_); }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;

 private:
  explicit ModelSpec(std::variant<MlpSpec, MnistConvNetSpec> v) : variant_(std::move(v)) {}
  std::variant<MlpSpec, MnistConvNetSpec> variant_;
};

template <typename T>
struct ModelParams {
  ModelSpec spec = ModelSpec::mnist_convnet();
  /// Same order as spec.parameter_layout().
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  const Tensor<T>& at(std::string_view name) const;
  Tensor<T>& at(std::string_view name);

  /// Throws ContractError unless names and shapes match the spec and every value is finite.
  void validate() const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out{spec, {}};
    for (const auto& [name, t] : tensors) out.tensors.emplace_back(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Weights ~ U[-sqrt(6/fan_in), sqrt(6/fan_in)], biases zero.
template <typename T>
ModelParams<T> init_params(const ModelSpec& spec, std::uint64_t seed);

/// Puts params on the tape by reference, as leaves when `trainable`, else as
/// constants. `params` must outlive the tape.
template <typename T>
std::vector<Var> bind_params(Tape<T>& tape, const ModelParams<T>& params, bool trainable);

/// Logits for x of shape input_shape() (-> [n_classes]) or [N, input_shape()...]
/// (-> [N x n_classes]).
template <typename T>
Var forward_logits(Tape<T>& tape, const ModelParams<T>& params, std::span<const Var> bound, Var x);

/// Tape-free convenience forward.
template <typename T>
Tensor<T> forward_logits(const ModelParams<T>& params, const Tensor<T>& x);

/// Summed cross entropy of a batch (or one sample).
template <typename T>
Var loss(Tape<T>& tape, const ModelParams<T>& params, std::span<const Var> bound, Var x,
         std::span<const int> labels, Reduction reduction = Reduction::kSum);

/// Index of the largest value; ties go to the lowest index.
template <typename T>
int argmax(std::span<const T> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

template <typename T>
struct Prediction {
  int label = 0;
  std::vector<T> probabilities;
};

/// Softmax + argmax per sample of a batch [N, input_shape()...].
template <typename T>
std::vector<Prediction<T>> predict(const ModelParams<T>& params, const Tensor<T>& batch);

/// Argmax labels per sample of a batch.
template <typename T>
std::vector<int> predict_labels(const ModelParams<T>& params, const Tensor<T>& batch);

/// Prepends a unit batch axis when x has exactly the sample shape.
Shape batched_shape(const ModelSpec& spec, const Shape& x_shape);

}  // namespace advpnml
