#include "advpnml/datasets.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <ostream>

#include <fmt/format.h>

#include "advpnml/rng.hpp"

namespace advpnml {
namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw IoError("truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DimensionError("empty subset");
  const std::size_t row = inputs.size() / size();
  Shape shape = inputs.shape();
  shape[0] = indices.size();
  std::vector<float> data;
  data.reserve(indices.size() * row);
  std::vector<int> out_labels;
  out_labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw IndexError("subset index " + std::to_string(i) + " out of range");
    auto src = inputs.data().subspan(i * row, row);
    data.insert(data.end(), src.begin(), src.end());
    out_labels.push_back(labels[i]);
  }
  return {Tensor<float>(std::move(shape), std::move(data)), std::move(out_labels), input_range};
}

LabeledSet LabeledSet::head(std::size_t n) const {
  n = std::min(n, size());
  return {inputs.slice_rows(0, n), std::vector<int>(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n)),
          input_range};
}

LabeledSet gen_synthetic(const SyntheticSpec& spec) {
  if (!(spec.variance > 0.0)) throw DomainError("synthetic variance must be positive");
  if (!(spec.radius > 0.0)) throw DomainError("synthetic radius must be positive");
  if (spec.n_per_class == 0) throw DomainError("n_per_class must be positive");
  const double sigma = std::sqrt(spec.variance);
  CounterRng class0(derive_seed(spec.seed, 0));
  CounterRng class1(derive_seed(spec.seed, 1));
  const std::size_t n = spec.n_per_class;
  std::vector<float> data(4 * n);
  std::vector<int> labels(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    data[2 * i] = static_cast<float>(sigma * class0.normal());
    data[2 * i + 1] = static_cast<float>(sigma * class0.normal());
    labels[i] = 0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double phi = class1.uniform(0.0, 2.0 * std::numbers::pi);
    const double cx = spec.radius * std::cos(phi);
    const double cy = spec.radius * std::sin(phi);
    data[2 * (n + i)] = static_cast<float>(cx + sigma * class1.normal());
    data[2 * (n + i) + 1] = static_cast<float>(cy + sigma * class1.normal());
    labels[n + i] = 1;
  }
  return {Tensor<float>({2 * n, 2}, std::move(data)), std::move(labels), ValueRange::unbounded()};
}

LabeledSet parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  const std::uint32_t img_magic = read_be32(images, 0);
  if (img_magic != kImagesMagic) throw FormatError(fmt::format("IDX images magic 0x{:08x}, expected 0x{:08x}", img_magic, kImagesMagic));
  const std::uint32_t lbl_magic = read_be32(labels, 0);
  if (lbl_magic != kLabelsMagic) throw FormatError(fmt::format("IDX labels magic 0x{:08x}, expected 0x{:08x}", lbl_magic, kLabelsMagic));
  const std::size_t count = read_be32(images, 4);
  const std::size_t rows = read_be32(images, 8);
  const std::size_t cols = read_be32(images, 12);
  const std::size_t label_count = read_be32(labels, 4);
  if (count != label_count) {
    throw ConsistencyError(fmt::format("IDX image count {} differs from label count {}", count, label_count));
  }
  if (count == 0 || rows == 0 || cols == 0) throw FormatError("IDX file with zero extent");
  const std::size_t pixels = count * rows * cols;
  if (images.size() < 16 + pixels) throw IoError("truncated IDX image data");
  if (labels.size() < 8 + count) throw IoError("truncated IDX label data");

  std::vector<float> data(pixels);
  for (std::size_t i = 0; i < pixels; ++i) data[i] = static_cast<float>(images[16 + i]) / 255.0f;
  std::vector<int> out_labels(count);
  for (std::size_t i = 0; i < count; ++i) out_labels[i] = labels[8 + i];
  return {Tensor<float>({count, 1, rows, cols}, std::move(data)), std::move(out_labels), ValueRange::unit()};
}

LabeledSet load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = slurp(images_path);
  const auto labels = slurp(labels_path);
  return parse_mnist_idx(images, labels);
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw DomainError("batch_size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);  // Fisher-Yates
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<LabeledSet> batches(const LabeledSet& set, std::size_t batch_size, std::uint64_t seed) {
  std::vector<LabeledSet> out;
  for (const auto& idx : batch_indices(set.size(), batch_size, seed)) out.push_back(set.subset(idx));
  return out;
}

void write_csv(std::ostream& out, const LabeledSet& set) {
  const std::size_t row = set.inputs.size() / set.size();
  for (std::size_t j = 0; j < row; ++j) out << 'x' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t j = 0; j < row; ++j) out << fmt::format("{},", set.inputs[i * row + j]);
    out << set.labels[i] << '\n';
  }
}

}  // namespace advpnml
