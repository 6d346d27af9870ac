#pragma once

// Portable tensor dump (".gtd"). All integers are unsigned 64-bit
// little-endian, all values IEEE-754 binary64 little-endian:
//
//   magic        8 bytes  "GENIETD\0"
//   version      u64      (currently 1)
//   count        u64      number of tensors that follow
//   per tensor:
//     name_len   u64
//     name       name_len bytes, UTF-8, no terminator
//     rank       u64
//     dims       rank x u64
//     values     product(dims) x f64, row-major

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "genie/tensor.hpp"

namespace genie {

inline constexpr char kTensorDumpMagic[8] = {'G', 'E', 'N', 'I', 'E', 'T', 'D', '\0'};
inline constexpr std::uint64_t kTensorDumpVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& in);

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partially written dump.
void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

/// Atomic text write with the same temp-then-rename protocol.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace genie
