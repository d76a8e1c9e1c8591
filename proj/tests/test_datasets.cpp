#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>

#include "advpnml/datasets.hpp"
#include "advpnml/experiment.hpp"

using namespace advpnml;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

std::vector<std::uint8_t> idx_images(std::uint32_t magic, std::uint32_t n, std::uint8_t fill) {
  std::vector<std::uint8_t> out;
  put_u32(out, magic);
  put_u32(out, n);
  put_u32(out, 28);
  put_u32(out, 28);
  out.insert(out.end(), n * 28 * 28, fill);
  return out;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t magic, std::uint32_t n) {
  std::vector<std::uint8_t> out;
  put_u32(out, magic);
  put_u32(out, n);
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(i % 10));
  return out;
}

}  // namespace

TEST_CASE("synthetic set is a pure function of its spec") {
  SyntheticSpec spec;
  spec.n_per_class = 100;
  spec.seed = 9;
  const LabeledSet a = gen_synthetic(spec);
  const LabeledSet b = gen_synthetic(spec);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 200);
  CHECK(!a.input_range.bounded());
  spec.seed = 10;
  CHECK(!(gen_synthetic(spec).inputs == a.inputs));
}

TEST_CASE("synthetic class statistics") {
  SyntheticSpec spec;
  spec.n_per_class = 10000;
  spec.seed = 2021;
  const LabeledSet s = gen_synthetic(spec);
  const double sigma = std::sqrt(spec.variance);
  const double n = static_cast<double>(spec.n_per_class);
  const double tol = 3.0 * sigma / std::sqrt(n);

  double mx = 0.0, my = 0.0, radius = 0.0;
  for (std::size_t i = 0; i < spec.n_per_class; ++i) {
    CHECK(s.labels[i] == 0);
    mx += s.inputs[2 * i];
    my += s.inputs[2 * i + 1];
  }
  for (std::size_t i = spec.n_per_class; i < 2 * spec.n_per_class; ++i) {
    CHECK(s.labels[i] == 1);
    radius += std::hypot(s.inputs[2 * i], s.inputs[2 * i + 1]);
  }
  CHECK(std::abs(mx / n) <= tol);
  CHECK(std::abs(my / n) <= tol);
  // The norm of N(M, s^2 I) with |M| = r is Rice distributed with mean
  // r + s^2 / (2r) up to O(s^4 / r^3).
  const double rice_mean = spec.radius + spec.variance / (2.0 * spec.radius);
  CHECK(std::abs(radius / n - rice_mean) <= tol);
}

TEST_CASE("synthetic csv export") {
  SyntheticSpec spec;
  spec.n_per_class = 3;
  std::ostringstream out;
  write_csv(out, gen_synthetic(spec));
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "x0,x1,label");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 6);
}

TEST_CASE("IDX parsing") {
  const auto images = idx_images(0x803, 3, 255);
  const auto labels = idx_labels(0x801, 3);
  const LabeledSet s = parse_mnist_idx(images, labels);
  CHECK(s.inputs.shape() == Shape{3, 1, 28, 28});
  CHECK(s.inputs[0] == 1.0f);
  CHECK(s.labels == std::vector<int>{0, 1, 2});
  CHECK(s.input_range == ValueRange::unit());
  CHECK(parse_mnist_idx(idx_images(0x803, 3, 0), labels).inputs[5] == 0.0f);

  CHECK_THROWS_AS(parse_mnist_idx(idx_images(0x801, 3, 0), labels), FormatError);
  CHECK_THROWS_AS(parse_mnist_idx(images, idx_labels(0x803, 3)), FormatError);
  CHECK_THROWS_AS(parse_mnist_idx(images, idx_labels(0x801, 4)), ConsistencyError);
  auto truncated = images;
  truncated.resize(truncated.size() - 10);
  CHECK_THROWS_AS(parse_mnist_idx(truncated, labels), IoError);
  CHECK_THROWS_AS(parse_mnist_idx(std::vector<std::uint8_t>(3, 0), labels), IoError);
}

TEST_CASE("bundled MNIST subset loads") {
  const std::filesystem::path dir = std::filesystem::path(ADVPNML_SOURCE_DIR) / "data" / "mnist";
  const LabeledSet test = parse_mnist_idx(read_file_maybe_gzip(dir / "t10k-images-idx3-ubyte.gz"),
                                          read_file_maybe_gzip(dir / "t10k-labels-idx1-ubyte.gz"));
  CHECK(test.size() == 1000);
  CHECK(test.sample_shape() == Shape{1, 28, 28});
  bool in_range = true;
  for (float v : test.inputs.data()) in_range = in_range && v >= 0.0f && v <= 1.0f;
  CHECK(in_range);
  std::set<int> classes(test.labels.begin(), test.labels.end());
  CHECK(classes == std::set<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("batches partition the set") {
  SyntheticSpec spec;
  spec.n_per_class = 5;
  const LabeledSet set = gen_synthetic(spec);
  const auto parts = batches(set, 3, 17);
  REQUIRE(parts.size() == 4);
  CHECK(parts[0].size() == 3);
  CHECK(parts[1].size() == 3);
  CHECK(parts[2].size() == 3);
  CHECK(parts[3].size() == 1);

  CHECK(batch_indices(10, 3, 17) == batch_indices(10, 3, 17));
  CHECK(batch_indices(10, 3, 17) != batch_indices(10, 3, 18));

  std::multiset<std::size_t> seen;
  for (const auto& chunk : batch_indices(1000, 7, 3)) seen.insert(chunk.begin(), chunk.end());
  CHECK(seen.size() == 1000);
  for (std::size_t i = 0; i < 1000; ++i) CHECK(seen.count(i) == 1);
}
