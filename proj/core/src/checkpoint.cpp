#include "advpnml/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace advpnml {
namespace {

constexpr std::array<char, 8> kMagic = {'A', 'P', 'N', 'M', 'L', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open " + path.string());
  }

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError("truncated file " + path_.string());
  }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    bytes(&v, sizeof v);
    return v;
  }

  std::string string(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  nlohmann::json header = {{"kind", archive.kind}, {"spec", archive.spec}};
  header["metadata"] = nlohmann::json::parse(archive.metadata_json.empty() ? "{}" : archive.metadata_json);
  const std::string text = header.dump();
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u32(out, static_cast<std::uint32_t>(archive.records.size()));
  for (const auto& [name, t] : archive.records) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  Reader in(path);
  std::array<char, 8> magic{};
  in.bytes(magic.data(), magic.size());
  if (magic != kMagic) throw FormatError(path.string() + " is not a tensor archive (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("archive version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  }
  TensorArchive archive;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.string(in.u32()));
    archive.kind = header.at("kind").get<std::string>();
    archive.spec = header.at("spec").get<std::string>();
    archive.metadata_json = header.at("metadata").dump();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad archive header in " + path.string() + ": " + e.what());
  }
  const std::uint32_t count = in.u32();
  for (std::uint32_t r = 0; r < count; ++r) {
    std::string name = in.string(in.u32());
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    std::vector<float> values(shape_size(shape));
    in.bytes(values.data(), values.size() * sizeof(float));
    archive.records.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  return archive;
}

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path,
                     const TrainingMetadata& meta) {
  params.validate();
  TensorArchive archive{"checkpoint", params.spec.descriptor(),
                        nlohmann::json{{"epochs", meta.epochs}, {"seed", meta.seed}}.dump(),
                        params.tensors};
  write_archive(path, archive);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelSpec>& expected) {
  TensorArchive archive = read_archive(path);
  if (archive.kind != "checkpoint") throw FormatError(path.string() + " holds '" + archive.kind + "', not a checkpoint");
  std::optional<ModelSpec> spec;
  try {
    spec = ModelSpec::parse(archive.spec);
  } catch (const std::exception& e) {
    throw CheckpointSpecError(std::string("unreadable model spec: ") + e.what());
  }
  if (expected && !(*expected == *spec)) {
    throw CheckpointSpecError("checkpoint holds " + spec->descriptor() + ", expected " + expected->descriptor());
  }
  Checkpoint ckpt{ModelParams<float>{*spec, std::move(archive.records)}, {}};
  try {
    ckpt.params.validate();
  } catch (const ContractError& e) {
    throw CheckpointSpecError(e.what());
  }
  const auto meta = nlohmann::json::parse(archive.metadata_json);
  ckpt.meta.epochs = meta.value("epochs", 0);
  ckpt.meta.seed = meta.value("seed", std::uint64_t{0});
  return ckpt;
}

}  // namespace advpnml
