#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "advpnml/tensor.hpp"

namespace advpnml {

/// Two-class planar set: class 0 ~ N(0, variance I), class 1 ~ N(M, variance I)
/// with M uniform on the circle of the given radius.
struct SyntheticSpec {
  std::size_t n_per_class = 2500;
  double variance = 0.01;
  double radius = 2.0;
  std::uint64_t seed = 0;
};

struct LabeledSet {
  Tensor<float> inputs;  // [N x sample shape...]
  std::vector<int> labels;
  ValueRange input_range;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
  /// Samples at `indices`, in that order.
  LabeledSet subset(std::span<const std::size_t> indices) const;
  /// First n samples (all when n >= size()).
  LabeledSet head(std::size_t n) const;
};

/// Class 0 occupies rows [0, n), class 1 rows [n, 2n). Inputs are unclipped.
LabeledSet gen_synthetic(const SyntheticSpec& spec);

/// Raw (uncompressed) IDX files. Pixels are scaled by 1/255 into [0, 1].
LabeledSet load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
/// Same, from in-memory file contents.
LabeledSet parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

/// Deterministic shuffled partition into batches; the last one may be short.
std::vector<LabeledSet> batches(const LabeledSet& set, std::size_t batch_size, std::uint64_t seed);
/// Index form of batches(): the permutation split into consecutive chunks.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed);

/// Columns x0, x1, ..., label. Values printed round-trip exact.
void write_csv(std::ostream& out, const LabeledSet& set);

}  // namespace advpnml
