#include "aerialformer/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace aerialformer {

namespace {

constexpr std::array<char, 8> kMagic = {'A', 'F', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) throw DataError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void write_archive(std::ostream& os, const nn::NamedTensors& tensors) {
  os.write(kMagic.data(), kMagic.size());
  put<std::uint64_t>(os, tensors.size());
  for (const auto& entry : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(entry.path.size()));
    os.write(entry.path.data(), static_cast<std::streamsize>(entry.path.size()));
    const Shape& shape = entry.tensor.shape();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (Index d : shape) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (double v : entry.tensor.data()) put<double>(os, v);
  }
}

TensorArchive read_archive(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw DataError("not a checkpoint archive (bad magic)");
  }
  TensorArchive archive;
  const auto count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string path(len, '\0');
    if (!is.read(path.data(), len)) throw DataError("checkpoint truncated in entry name");
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(get<std::uint64_t>(is));
    Buffer values(static_cast<std::size_t>(numel(shape)));
    for (double& v : values) v = get<double>(is);
    archive[path] = Tensor::from(std::move(shape), std::move(values));
  }
  return archive;
}

void save_checkpoint(const std::filesystem::path& path, const nn::NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  write_archive(os, tensors);
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  try {
    return read_archive(is);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void restore(const TensorArchive& archive, const nn::NamedTensors& targets) {
  for (const auto& target : targets) {
    auto it = archive.find(target.path);
    if (it == archive.end()) throw DataError("checkpoint is missing tensor " + target.path);
    if (it->second.shape() != target.tensor.shape()) {
      throw DataError("checkpoint tensor " + target.path + " has shape " +
                      shape_str(it->second.shape()) + ", model expects " +
                      shape_str(target.tensor.shape()));
    }
    Tensor dst = target.tensor;
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
  if (archive.size() != targets.size()) {
    for (const auto& [name, tensor] : archive) {
      const bool known = std::any_of(targets.begin(), targets.end(),
                                     [&name = name](const nn::NamedTensor& t) { return t.path == name; });
      if (!known) throw DataError("checkpoint has tensor " + name + " that the model does not define");
    }
  }
}

}  // namespace aerialformer
