#include "genie/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "genie/serialize.hpp"

namespace genie {

namespace {

[[noreturn]] void io_error(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorCode::kIo, path.string() + ": " + what);
}

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.get();
    if (c == EOF) break;
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw_shape("PNM output needs [1|3, H, W], got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ostringstream out;
  out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  const auto d = image.data();
  std::string pixels(c * h * w, '\0');
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(d[(ch * h + y) * w + x], 0.0, 1.0);
        pixels[(y * w + x) * c + ch] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    }
  }
  write_text_atomic(path, out.str() + pixels);
}

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_error(path, "cannot open");
  const std::string magic = next_token(in);
  if (magic != "P5" && magic != "P6") io_error(path, "not a binary P5/P6 image");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token(in));
    h = std::stoul(next_token(in));
    maxval = std::stoul(next_token(in));
  } catch (const std::exception&) {
    io_error(path, "malformed header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) io_error(path, "unsupported dimensions or depth");
  const std::size_t c = magic == "P5" ? 1 : 3;
  std::string pixels(c * h * w, '\0');
  if (!in.read(pixels.data(), static_cast<std::streamsize>(pixels.size()))) io_error(path, "truncated pixel data");
  std::vector<double> v(c * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        v[(ch * h + y) * w + x] =
            static_cast<double>(static_cast<unsigned char>(pixels[(y * w + x) * c + ch])) / static_cast<double>(maxval);
      }
    }
  }
  return Tensor::from({c, h, w}, std::move(v));
}

Tensor batch_item(const Tensor& batch, std::size_t index) {
  if (batch.rank() < 1 || index >= batch.dim(0)) throw_invalid("batch index out of range");
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = numel(s);
  const auto d = batch.data();
  return Tensor::from(s, std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(index * n),
                                             d.begin() + static_cast<std::ptrdiff_t>((index + 1) * n)));
}

Tensor stack_items(const std::vector<Tensor>& items) {
  if (items.empty()) throw_invalid("cannot stack zero items");
  Shape s = items.front().shape();
  std::vector<double> v;
  v.reserve(items.size() * numel(s));
  for (const auto& t : items) {
    if (t.shape() != s) throw_shape("stacked items differ: " + shape_str(t.shape()) + " vs " + shape_str(s));
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  s.insert(s.begin(), items.size());
  return Tensor::from(std::move(s), std::move(v));
}

}  // namespace genie
