#include "genie/metrics.hpp"

#include <cmath>

#include "genie/image_io.hpp"

namespace genie {

namespace {

double psnr_from_mse(double mse, double max_val) {
  if (mse <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(max_val * max_val / mse));
}

struct Grey {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
};

Grey to_grey(const Tensor& img) {
  Grey g;
  std::size_t c = 1;
  if (img.rank() == 2) {
    g.h = img.dim(0);
    g.w = img.dim(1);
  } else if (img.rank() == 3 || (img.rank() == 4 && img.dim(0) == 1)) {
    c = img.dim(img.rank() - 3);
    g.h = img.dim(img.rank() - 2);
    g.w = img.dim(img.rank() - 1);
  } else {
    throw_shape("SSIM expects one image, got " + shape_str(img.shape()));
  }
  const std::size_t plane = g.h * g.w;
  g.v.assign(plane, 0.0);
  const auto d = img.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) g.v[i] += d[ch * plane + i];
  }
  if (c > 1) {
    for (auto& x : g.v) x /= static_cast<double>(c);
  }
  return g;
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double centre = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - centre;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (auto& x : k) x /= total;
  return k;
}

// Separable valid-mode filtering.
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                 const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * src[y * w + x + i];
      rows[y * ow + x] = s;
    }
  }
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double max_val) {
  if (a.shape() != b.shape()) throw_shape("PSNR inputs differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.numel() == 0) throw_invalid("PSNR of empty images");
  const auto da = a.data(), db = b.data();
  double sse = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = da[i] - db[i];
    sse += d * d;
  }
  return psnr_from_mse(sse / static_cast<double>(da.size()), max_val);
}

double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& mask, double max_val) {
  if (a.shape() != b.shape()) {
    throw_shape("masked PSNR inputs differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.rank() < 3 || mask.rank() != a.rank() || mask.dim(a.rank() - 3) != 1) {
    throw_shape("mask " + shape_str(mask.shape()) + " does not fit images " + shape_str(a.shape()));
  }
  const std::size_t r = a.rank();
  const std::size_t batch = r == 4 ? a.dim(0) : 1;
  const std::size_t c = a.dim(r - 3), plane = a.dim(r - 2) * a.dim(r - 1);
  if ((r == 4 && mask.dim(0) != batch) || mask.dim(r - 2) * mask.dim(r - 1) != plane) {
    throw_shape("mask " + shape_str(mask.shape()) + " does not fit images " + shape_str(a.shape()));
  }
  const auto da = a.data(), db = b.data(), dm = mask.data();
  double sse = 0, count = 0;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < plane; ++p) {
        if (dm[n * plane + p] == 0.0) continue;
        const std::size_t i = (n * c + ch) * plane + p;
        const double d = da[i] - db[i];
        sse += d * d;
        count += 1;
      }
    }
  }
  if (count == 0) return kPsnrCapDb;
  return psnr_from_mse(sse / count, max_val);
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts) {
  if (a.shape() != b.shape()) throw_shape("SSIM inputs differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Grey ga = to_grey(a), gb = to_grey(b);
  if (opts.window == 0 || ga.h < opts.window || ga.w < opts.window) {
    throw_invalid("image " + std::to_string(ga.h) + "x" + std::to_string(ga.w) + " is smaller than the SSIM window " +
                  std::to_string(opts.window));
  }
  const auto k = gaussian_window(opts.window, opts.sigma);
  const std::size_t plane = ga.v.size();
  std::vector<double> aa(plane), bb(plane), ab(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    aa[i] = ga.v[i] * ga.v[i];
    bb[i] = gb.v[i] * gb.v[i];
    ab[i] = ga.v[i] * gb.v[i];
  }
  const auto mu_a = filter_valid(ga.v, ga.h, ga.w, k);
  const auto mu_b = filter_valid(gb.v, ga.h, ga.w, k);
  const auto e_aa = filter_valid(aa, ga.h, ga.w, k);
  const auto e_bb = filter_valid(bb, ga.h, ga.w, k);
  const auto e_ab = filter_valid(ab, ga.h, ga.w, k);
  const double c1 = (opts.k1 * opts.max_val) * (opts.k1 * opts.max_val);
  const double c2 = (opts.k2 * opts.max_val) * (opts.k2 * opts.max_val);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

MetricSummary evaluate_batch(const Tensor& predicted, const Tensor& truth, const Tensor& mask) {
  if (predicted.rank() != 4 || predicted.shape() != truth.shape()) {
    throw_shape("batch metrics need equal [N, C, H, W] tensors, got " + shape_str(predicted.shape()) + " and " +
                shape_str(truth.shape()));
  }
  MetricSummary s;
  const std::size_t n = predicted.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor p = batch_item(predicted, i), t = batch_item(truth, i);
    s.psnr_db.push_back(psnr(p, t));
    s.ssim.push_back(ssim(p, t));
    s.mean_psnr += s.psnr_db.back() / static_cast<double>(n);
    s.mean_ssim += s.ssim.back() / static_cast<double>(n);
  }
  if (mask.defined()) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      total += masked_psnr(batch_item(predicted, i), batch_item(truth, i), batch_item(mask, i));
    }
    s.mean_masked_psnr = total / static_cast<double>(n);
  }
  return s;
}

}  // namespace genie
