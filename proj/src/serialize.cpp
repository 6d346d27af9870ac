#include "genie/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace genie {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw Error(ErrorCode::kIo, "tensor dump truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kTensorDumpMagic, sizeof(kTensorDumpMagic));
  put_u64(out, kTensorDumpVersion);
  put_u64(out, tensors.size());
  for (const auto& [name, value] : tensors) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, value.rank());
    for (auto d : value.shape()) put_u64(out, d);
    for (double v : value.data()) put_f64(out, v);
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing tensor dump");
}

std::vector<NamedTensor> read_tensors(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kTensorDumpMagic, 8) != 0) {
    throw Error(ErrorCode::kIo, "not a tensor dump (bad magic)");
  }
  const auto version = get_u64(in);
  if (version != kTensorDumpVersion) {
    throw Error(ErrorCode::kIo, "unsupported tensor dump version " + std::to_string(version));
  }
  const auto count = get_u64(in);
  std::vector<NamedTensor> out;
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = get_u64(in);
    if (name_len > (1u << 20)) throw Error(ErrorCode::kIo, "tensor dump name length implausible");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len))) throw Error(ErrorCode::kIo, "tensor dump truncated");
    const auto rank = get_u64(in);
    if (rank > 16) throw Error(ErrorCode::kIo, "tensor dump rank implausible");
    Shape shape(rank);
    for (auto& d : shape) d = get_u64(in);
    const std::size_t n = numel(shape);
    std::vector<double> values(n);
    for (auto& v : values) v = std::bit_cast<double>(get_u64(in));
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  return out;
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot open " + tmp.string() + " for writing");
    write_tensors(out, tensors);
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_tensors(in);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw Error(ErrorCode::kIo, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw Error(ErrorCode::kIo, "tensor '" + name + "' not found in dump");
}

}  // namespace genie
