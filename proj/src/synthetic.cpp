#include "genie/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "genie/image_io.hpp"
#include "genie/serialize.hpp"

namespace genie {

namespace {

using Colour = std::array<double, 3>;

struct Canvas {
  std::size_t size;
  std::vector<double> rgb;  // [3, S, S]
  explicit Canvas(std::size_t s) : size(s), rgb(3 * s * s, 0.0) {}
  double& at(std::size_t c, std::size_t y, std::size_t x) { return rgb[(c * size + y) * size + x]; }
};

Colour random_colour(Rng& rng, double lo = 0.1, double hi = 0.9) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

// Two-colour linear ramp along a random direction.
struct Ramp {
  Colour a, b;
  double cos_t, sin_t;

  static Ramp random(Rng& rng) {
    Ramp r;
    r.a = random_colour(rng);
    r.b = random_colour(rng);
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    r.cos_t = std::cos(theta);
    r.sin_t = std::sin(theta);
    return r;
  }

  // (u, v) in [0, 1]^2 relative to the ramp's own frame.
  double colour(std::size_t c, double u, double v) const {
    const double s = std::clamp(0.5 + ((u - 0.5) * cos_t + (v - 0.5) * sin_t) / std::numbers::sqrt2, 0.0, 1.0);
    return (1.0 - s) * a[c] + s * b[c];
  }

  void paint(Canvas& canvas) const {
    const double n = static_cast<double>(canvas.size);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < canvas.size; ++y) {
        for (std::size_t x = 0; x < canvas.size; ++x) canvas.at(c, y, x) = colour(c, (x + 0.5) / n, (y + 0.5) / n);
      }
    }
  }
};

struct Rect {
  std::size_t x0, y0, w, h;
  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h; }
};

// Rectangle on the 4-pixel grid with sides between a quarter and a half of the image.
Rect random_grid_rect(Rng& rng, std::size_t size) {
  const std::size_t cells = size / 4;
  const std::size_t lo = std::max<std::size_t>(1, cells / 4), hi = std::max(lo, cells / 2);
  Rect r;
  r.w = 4 * (lo + rng.index(hi - lo + 1));
  r.h = 4 * (lo + rng.index(hi - lo + 1));
  r.x0 = 4 * rng.index((size - r.w) / 4 + 1);
  r.y0 = 4 * rng.index((size - r.h) / 4 + 1);
  return r;
}

struct Item {
  Canvas ref, tar, truth;
  std::vector<double> mask;
  std::array<double, 2> offset{0.0, 0.0};
  explicit Item(std::size_t s) : ref(s), tar(s), truth(s), mask(s * s, 0.0) {}
};

void fill_mask(Item& item, const Rect& r) {
  const std::size_t s = item.tar.size;
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) item.mask[y * s + x] = r.contains(x, y) ? 1.0 : 0.0;
  }
}

Item copy_patch(Rng& rng, std::size_t s) {
  Item item(s);
  Ramp texture = Ramp::random(rng);
  // gentle gradient so the copied patch is mostly its mean colour
  for (std::size_t c = 0; c < 3; ++c) texture.b[c] = std::clamp(texture.a[c] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  texture.paint(item.ref);
  Ramp::random(rng).paint(item.tar);
  fill_mask(item, random_grid_rect(rng, s));
  for (std::size_t i = 0; i < item.truth.rgb.size(); ++i) {
    const double m = item.mask[i % (s * s)];
    item.truth.rgb[i] = m * item.ref.rgb[i] + (1.0 - m) * item.tar.rgb[i];
  }
  return item;
}

Item recolor(Rng& rng, std::size_t s) {
  Item item(s);
  const Rect obj = random_grid_rect(rng, s);
  const Colour ref_colour = random_colour(rng);
  const Colour tar_colour = random_colour(rng);
  const double shade_dir = rng.uniform(0.0, 2.0 * std::numbers::pi);

  // Reference: neutral backdrop with a flat swatch of the wanted colour.
  const Rect swatch = random_grid_rect(rng, s);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) item.ref.at(c, y, x) = swatch.contains(x, y) ? ref_colour[c] : 0.5;
    }
  }
  Ramp::random(rng).paint(item.tar);
  fill_mask(item, obj);
  const double n = static_cast<double>(s);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      if (!obj.contains(x, y)) {
        for (std::size_t c = 0; c < 3; ++c) item.truth.at(c, y, x) = item.tar.at(c, y, x);
        continue;
      }
      const double u = (x + 0.5) / n - 0.5, v = (y + 0.5) / n - 0.5;
      const double shade = 0.8 + 0.2 * std::clamp((u * std::cos(shade_dir) + v * std::sin(shade_dir)) * 2.0, -1.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        item.tar.at(c, y, x) = tar_colour[c] * shade;
        item.truth.at(c, y, x) = ref_colour[c] * shade;
      }
    }
  }
  return item;
}

Item translate(Rng& rng, std::size_t s) {
  Item item(s);
  const std::size_t patch = std::max<std::size_t>(1, s / 4);
  const long reach = static_cast<long>(s / 4);
  const long dx = static_cast<long>(rng.index(2 * s / 4 + 1)) - reach;
  const long dy = static_cast<long>(rng.index(2 * s / 4 + 1)) - reach;
  item.offset = {static_cast<double>(dx), static_cast<double>(dy)};
  const Ramp texture = Ramp::random(rng);
  const long centre = static_cast<long>(s / 2 - patch / 2);
  const Rect at_ref{static_cast<std::size_t>(centre + dx), static_cast<std::size_t>(centre + dy), patch, patch};
  const Rect at_tar{static_cast<std::size_t>(centre), static_cast<std::size_t>(centre), patch, patch};

  const double pn = static_cast<double>(patch);
  const auto texel = [&](std::size_t c, const Rect& r, std::size_t x, std::size_t y) {
    return texture.colour(c, (x - r.x0 + 0.5) / pn, (y - r.y0 + 0.5) / pn);
  };
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) item.ref.at(c, y, x) = at_ref.contains(x, y) ? texel(c, at_ref, x, y) : 0.5;
    }
  }
  Ramp::random(rng).paint(item.tar);
  fill_mask(item, at_tar);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        item.truth.at(c, y, x) = at_tar.contains(x, y) ? texel(c, at_tar, x, y) : item.tar.at(c, y, x);
      }
    }
  }
  return item;
}

Tensor gather(const Tensor& t, std::span<const std::size_t> indices) {
  std::vector<Tensor> items;
  items.reserve(indices.size());
  for (auto i : indices) items.push_back(batch_item(t, i));
  return stack_items(items);
}

}  // namespace

SyntheticDataset generate_synthetic(const std::string& task, std::size_t count, std::size_t image_size,
                                    std::uint64_t seed) {
  if (!is_known_task(task)) throw_invalid("unknown synthetic task '" + task + "'");
  if (count == 0) throw_invalid("synthetic dataset needs at least one item");
  if (image_size < 8 || image_size % ModelConfig::kLatentFactor != 0) {
    throw_invalid("image size " + std::to_string(image_size) + " must be a multiple of 4 and at least 8");
  }
  Rng rng = Rng::derive(seed, 0xda7a);
  const std::size_t s = image_size, plane = s * s;
  std::vector<double> ref, tar, mask, truth, offset;
  ref.reserve(count * 3 * plane);
  tar.reserve(count * 3 * plane);
  truth.reserve(count * 3 * plane);
  mask.reserve(count * plane);
  for (std::size_t i = 0; i < count; ++i) {
    const Item item = task == "copy-patch" ? copy_patch(rng, s) : task == "recolor" ? recolor(rng, s) : translate(rng, s);
    ref.insert(ref.end(), item.ref.rgb.begin(), item.ref.rgb.end());
    tar.insert(tar.end(), item.tar.rgb.begin(), item.tar.rgb.end());
    truth.insert(truth.end(), item.truth.rgb.begin(), item.truth.rgb.end());
    mask.insert(mask.end(), item.mask.begin(), item.mask.end());
    offset.insert(offset.end(), item.offset.begin(), item.offset.end());
  }
  SyntheticDataset d;
  d.task = task;
  d.reference = Tensor::from({count, 3, s, s}, std::move(ref));
  d.target = Tensor::from({count, 3, s, s}, std::move(tar));
  d.mask = Tensor::from({count, 1, s, s}, std::move(mask));
  d.truth = Tensor::from({count, 3, s, s}, std::move(truth));
  if (task == "translate") d.offset = Tensor::from({count, 2}, std::move(offset));
  return d;
}

TrainingBatch make_batch(const SyntheticDataset& data, std::span<const std::size_t> indices) {
  TrainingBatch b;
  b.inputs.reference = gather(data.reference, indices);
  b.inputs.target = gather(data.target, indices);
  b.inputs.mask = gather(data.mask, indices);
  b.truth = gather(data.truth, indices);
  return b;
}

SyntheticDataset slice_dataset(const SyntheticDataset& data, std::size_t first, std::size_t count) {
  if (first + count > data.size() || count == 0) throw_invalid("dataset slice out of range");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  SyntheticDataset out;
  out.task = data.task;
  out.reference = gather(data.reference, idx);
  out.target = gather(data.target, idx);
  out.mask = gather(data.mask, idx);
  out.truth = gather(data.truth, idx);
  if (data.offset.defined()) out.offset = gather(data.offset, idx);
  return out;
}

void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& data, bool write_images) {
  std::filesystem::create_directories(dir);
  std::vector<NamedTensor> tensors{
      {"reference", data.reference}, {"target", data.target}, {"mask", data.mask}, {"truth", data.truth}};
  if (data.offset.defined()) tensors.push_back({"offset", data.offset});
  save_tensors(dir / "dataset.gtd", tensors);
  if (!write_images) return;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string stem = std::to_string(i);
    write_pnm(dir / (stem + "_ref.ppm"), batch_item(data.reference, i));
    write_pnm(dir / (stem + "_tar.ppm"), batch_item(data.target, i));
    write_pnm(dir / (stem + "_mask.pgm"), batch_item(data.mask, i));
    write_pnm(dir / (stem + "_gt.ppm"), batch_item(data.truth, i));
  }
}

SyntheticDataset load_dataset(const std::filesystem::path& file) {
  const auto tensors = load_tensors(file);
  SyntheticDataset d;
  d.reference = find_tensor(tensors, "reference");
  d.target = find_tensor(tensors, "target");
  d.mask = find_tensor(tensors, "mask");
  d.truth = find_tensor(tensors, "truth");
  for (const auto& t : tensors) {
    if (t.name == "offset") d.offset = t.value;
  }
  EditingInputs{d.reference, d.target, d.mask}.validate();
  if (d.truth.shape() != d.target.shape()) throw Error(ErrorCode::kIo, file.string() + ": truth/target shapes differ");
  return d;
}

}  // namespace genie
