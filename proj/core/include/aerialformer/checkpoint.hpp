#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "aerialformer/nn.hpp"
#include "aerialformer/tensor.hpp"

namespace aerialformer {

/// Binary tensor archive. All integers and floats are little-endian:
///
///   magic    8 bytes  "AFCKPT01"
///   count    u64      number of entries
///   entry *  count:
///     path_len u32, path bytes (UTF-8, no terminator)
///     rank     u32, dims u64 * rank
///     values   f64 * product(dims), row-major
///
/// Entries are written in the order given; readers must not depend on it.
using TensorArchive = std::map<std::string, Tensor>;

void write_archive(std::ostream& os, const nn::NamedTensors& tensors);
TensorArchive read_archive(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const nn::NamedTensors& tensors);
TensorArchive load_archive(const std::filesystem::path& path);

/// Copies archive values into `targets` in place. Every target path must be
/// present with an identical shape; DataError otherwise.
void restore(const TensorArchive& archive, const nn::NamedTensors& targets);

}  // namespace aerialformer
