#include "genie/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace genie {

namespace {

constexpr std::size_t kAutoencoderWidth = 32;
// keeps freshly initialised latents near unit scale
constexpr double kHeadInitGain = 0.1;

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

[[noreturn]] void non_finite(const std::string& what) {
  throw Error(ErrorCode::kNumeric, "non-finite values detected; first offending tensor: " + what);
}

}  // namespace

void EditingInputs::validate() const {
  if (!reference.defined() || !target.defined() || !mask.defined()) throw_invalid("editing inputs incomplete");
  if (reference.rank() != 4 || reference.dim(1) != 3) {
    throw_shape("reference image must be [N, 3, H, W], got " + shape_str(reference.shape()));
  }
  if (target.shape() != reference.shape()) {
    throw_shape("target image " + shape_str(target.shape()) + " differs from reference " + shape_str(reference.shape()));
  }
  const Shape expect_mask{target.dim(0), 1, target.dim(2), target.dim(3)};
  if (mask.shape() != expect_mask) {
    throw_shape("mask must be " + shape_str(expect_mask) + ", got " + shape_str(mask.shape()));
  }
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw_invalid("mask must be strictly binary");
  }
  for (const Tensor* img : {&reference, &target}) {
    for (double v : img->data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw_invalid("image values must lie in [0, 1]");
    }
  }
  if (target.dim(2) % ModelConfig::kLatentFactor != 0 || target.dim(3) % ModelConfig::kLatentFactor != 0) {
    throw_shape("image size " + shape_str(target.shape()) + " not divisible by the latent factor 4");
  }
}

// ---------------------------------------------------------------------------
// Building blocks

Autoencoder::Autoencoder(ParamStore& store, std::size_t latent_channels, Rng& rng) {
  enc_.push_back(make_conv(store, "encoder.conv1", 3, kAutoencoderWidth, 3, {2, 1}, rng));
  enc_.push_back(make_conv(store, "encoder.conv2", kAutoencoderWidth, latent_channels, 3, {2, 1}, rng));
  dec_.push_back(make_conv(store, "decoder.conv1", latent_channels, kAutoencoderWidth, 3, {1, 1}, rng));
  dec_.push_back(make_conv(store, "decoder.conv2", kAutoencoderWidth, 3, 3, {1, 1}, rng));
}

Tensor Autoencoder::encode(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) throw_shape("encoder expects [N, 3, H, W], got " + shape_str(image.shape()));
  if (image.dim(2) % ModelConfig::kLatentFactor != 0 || image.dim(3) % ModelConfig::kLatentFactor != 0) {
    throw_shape("encoder input " + shape_str(image.shape()) + " not divisible by the downsample factor 4");
  }
  return enc_[1](silu(enc_[0](image)));
}

Tensor Autoencoder::decode(const Tensor& latent) const {
  const Tensor h = silu(dec_[0](upsample_nearest2x(latent)));
  return sigmoid(dec_[1](upsample_nearest2x(h)));
}

Tensor ResBlock::operator()(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1(silu(x));
  if (time_proj.weight.defined()) {
    const Tensor t = time_proj(temb);
    h = add(h, reshape(t, {t.dim(0), t.dim(1), 1, 1}));
  }
  h = conv2(silu(h));
  return add(skip.weight.defined() ? skip(x) : x, h);
}

namespace {

ResBlock make_resblock(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t time_dim, Rng& rng) {
  ResBlock b;
  b.conv1 = make_conv(store, name + ".conv1", in, out, 3, {1, 1}, rng);
  if (time_dim > 0) b.time_proj = make_linear(store, name + ".time", time_dim, out, rng);
  b.conv2 = make_conv(store, name + ".conv2", out, out, 3, {1, 1}, rng);
  if (in != out) b.skip = make_conv(store, name + ".skip", in, out, 1, {1, 0}, rng);
  return b;
}

}  // namespace

UNet::UNet(ParamStore& store, const std::string& prefix, std::size_t in_channels, std::size_t out_channels,
           std::size_t base_width, std::size_t levels, std::size_t time_dim, Rng& rng)
    : base_width_(base_width) {
  if (levels == 0) throw_invalid("U-Net needs at least one level");
  stem_ = make_conv(store, prefix + "stem", in_channels, width(0), 3, {1, 1}, rng);
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t in = i == 0 ? width(0) : width(i - 1);
    down_blocks_.push_back(make_resblock(store, prefix + "down" + std::to_string(i), in, width(i), time_dim, rng));
    downsamplers_.push_back(
        make_conv(store, prefix + "down" + std::to_string(i) + ".pool", width(i), width(i), 3, {2, 1}, rng));
  }
  mid_block_ = make_resblock(store, prefix + "mid", width(levels - 1), width(levels - 1), time_dim, rng);
  up_blocks_.resize(levels);
  for (std::size_t j = levels; j-- > 0;) {
    const std::size_t below = j == levels - 1 ? width(levels - 1) : width(j + 1);
    up_blocks_[j] = make_resblock(store, prefix + "up" + std::to_string(j), below + width(j), width(j), time_dim, rng);
  }
  if (out_channels > 0) {
    // small head; a frozen target U-Net still has to pass gradients upstream
    head_ = make_conv(store, prefix + "head", width(0), out_channels, 3, {1, 1}, rng, kHeadInitGain);
    has_head_ = true;
  }
}

UNet::Encoded UNet::down(const Tensor& x, const Tensor& temb) const {
  Encoded e;
  Tensor h = stem_(x);
  for (std::size_t i = 0; i < down_blocks_.size(); ++i) {
    h = down_blocks_[i](h, temb);
    e.skips.push_back(h);
    h = downsamplers_[i](h);
  }
  e.hidden = h;
  return e;
}

Tensor UNet::mid(const Tensor& h, const Tensor& temb) const { return mid_block_(h, temb); }

Tensor UNet::up(std::size_t level, const Tensor& h, const Tensor& skip, const Tensor& temb) const {
  return up_blocks_.at(level)(concat_channels(upsample_nearest2x(h), skip), temb);
}

Tensor UNet::head(const Tensor& h) const {
  if (!has_head_) throw_invalid("this U-Net has no output head");
  return head_(silu(h));
}

std::size_t UNet::site_width(std::size_t site) const {
  const std::size_t l = levels();
  if (site > l) throw_invalid("injection site " + std::to_string(site) + " out of range");
  return site == 0 ? width(l - 1) : width(l - site);
}

ReferenceAdapter::ReferenceAdapter(ParamStore& store, std::size_t latent_channels, std::size_t token_count,
                                   std::size_t token_dim, const std::vector<std::size_t>& site_widths,
                                   std::size_t head_count, Rng& rng)
    : token_count_(token_count),
      token_dim_(token_dim),
      embed_(make_linear(store, "adapter.embed", latent_channels, token_count * token_dim, rng)) {
  for (std::size_t s = 0; s < site_widths.size(); ++s) {
    sites_.push_back(make_attention(store, "adapter.site" + std::to_string(s) + ".", site_widths[s], token_dim,
                                    site_widths[s], head_count, rng));
  }
}

Tensor ReferenceAdapter::embed(const Tensor& ref_latent) const {
  const Tensor pooled = global_avg_pool(ref_latent);
  return reshape(embed_(pooled), {ref_latent.dim(0), token_count_, token_dim_});
}

Tensor ReferenceAdapter::apply(std::size_t site, const Tensor& h, const Tensor& tokens) const {
  const Tensor read = attn(to_sequence(h), tokens, sites_.at(site));
  return add(h, from_sequence(read, h.dim(2), h.dim(3)));
}

ParamGroup group_of(const std::string& name) {
  const auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("encoder.") || starts("decoder.")) return ParamGroup::kAutoencoder;
  if (starts("sam.")) return ParamGroup::kAlignment;
  if (starts("ref_unet.")) return ParamGroup::kRefUNet;
  if (starts("arsm.")) return ParamGroup::kScaling;
  if (starts("tar_unet.")) return ParamGroup::kTarUNet;
  if (starts("paf.")) return ParamGroup::kFusion;
  if (starts("adapter.")) return ParamGroup::kAdapter;
  throw_invalid("parameter '" + name + "' belongs to no group");
}

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kAutoencoder: return "autoencoder";
    case ParamGroup::kAlignment: return "sam";
    case ParamGroup::kRefUNet: return "ref_unet";
    case ParamGroup::kScaling: return "arsm";
    case ParamGroup::kTarUNet: return "tar_unet";
    case ParamGroup::kFusion: return "paf";
    case ParamGroup::kAdapter: return "adapter";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Model

GenieModel::GenieModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  schedule_ = build_schedule(config_.timesteps, config_.beta_start, config_.beta_end);
  Rng rng = Rng::derive(config_.seed, 1);
  const std::size_t lc = config_.latent_channels;
  const std::size_t base = config_.base_width;
  const std::size_t levels = config_.level_count;

  autoencoder_ = std::make_unique<Autoencoder>(params_, lc, rng);
  alignment_ = std::make_unique<SpatialAlignment>(params_, "sam.", lc, rng);
  time1_ = make_linear(params_, "tar_unet.time.fc1", base, 2 * base, rng);
  time2_ = make_linear(params_, "tar_unet.time.fc2", 2 * base, 2 * base, rng);
  tar_unet_ = std::make_unique<UNet>(params_, "tar_unet.", 2 * lc + 1, lc, base, levels, 2 * base, rng);
  ref_unet_ = std::make_unique<UNet>(params_, "ref_unet.", lc, 0, base, levels, 0, rng);
  std::vector<std::size_t> widths;
  for (std::size_t s = 0; s <= levels; ++s) {
    const std::size_t w = tar_unet_->site_width(s);
    widths.push_back(w);
    scaling_.emplace_back(params_, "arsm." + std::to_string(s) + ".", w, w, config_.alpha_per_channel, rng);
    fusion_.emplace_back(params_, "paf." + std::to_string(s) + ".", w, config_.head_count, rng);
  }
  adapter_ = std::make_unique<ReferenceAdapter>(params_, lc, config_.adapter_tokens, base, widths,
                                                config_.head_count, rng);
}

Tensor GenieModel::time_embedding(std::span<const std::size_t> t) const {
  const std::size_t dim = config_.base_width;
  const std::size_t half = dim / 2;
  std::vector<double> emb(t.size() * dim, 0.0);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[b]) * freq;
      emb[b * dim + i] = std::sin(arg);
      emb[b * dim + half + i] = std::cos(arg);
    }
  }
  const Tensor e = Tensor::from({t.size(), dim}, std::move(emb));
  return time2_(silu(time1_(e)));
}

bool GenieModel::group_trainable(ParamGroup g) const {
  switch (g) {
    case ParamGroup::kRefUNet: return !config_.freeze_ref;
    case ParamGroup::kTarUNet: return !config_.freeze_tar;
    case ParamGroup::kAdapter: return !config_.freeze_adapter;
    default: return true;
  }
}

std::vector<bool> GenieModel::trainable_mask() const {
  std::vector<bool> mask;
  mask.reserve(params_.size());
  for (const auto& e : params_.entries()) mask.push_back(group_trainable(group_of(e.name)));
  return mask;
}

// ---------------------------------------------------------------------------
// Forward passes

ReferenceContext prepare_reference(const GenieModel& model, const Tensor& reference_image) {
  return prepare_reference_latent(model, model.autoencoder().encode(reference_image));
}

ReferenceContext prepare_reference_latent(const GenieModel& model, const Tensor& latent) {
  ReferenceContext ctx;
  ctx.aligned_latent = model.config().enable_sam ? model.alignment().forward(latent) : latent;
  ctx.adapter_tokens = model.adapter().embed(latent);
  return ctx;
}

Tensor mask_representation(const Tensor& mask, std::size_t factor) { return avg_pool2d(mask, factor); }

Tensor assemble_target_input(const Tensor& z_t, const Tensor& mask, const Tensor& z_masked) {
  if (z_t.shape() != z_masked.shape()) {
    throw_shape("noisy latent " + shape_str(z_t.shape()) + " and masked latent " + shape_str(z_masked.shape()) +
                " differ");
  }
  if (mask.rank() != 4 || mask.dim(2) % z_t.dim(2) != 0 || mask.dim(3) % z_t.dim(3) != 0 ||
      mask.dim(2) / z_t.dim(2) != mask.dim(3) / z_t.dim(3)) {
    throw_shape("mask " + shape_str(mask.shape()) + " cannot be downsampled to latent " + shape_str(z_t.shape()));
  }
  const Tensor phi = mask_representation(mask, mask.dim(2) / z_t.dim(2));
  return concat({z_t, phi, z_masked}, 1);
}

Tensor masked_target_latent(const GenieModel& model, const EditingInputs& inputs) {
  const Tensor keep = add_scalar(scale(inputs.mask, -1.0), 1.0);
  return model.autoencoder().encode(mul(inputs.target, keep));
}

std::vector<Tensor> reference_forward(const GenieModel& model, const Tensor& reference_image,
                                      const std::vector<Tensor>& target_site_features) {
  const auto& cfg = model.config();
  const ReferenceContext ctx = prepare_reference(model, reference_image);
  const UNet& unet = model.ref_unet();
  const auto purify = [&](std::size_t site, const Tensor& r) {
    if (!cfg.enable_arsm) return r;
    if (site >= target_site_features.size()) {
      throw_invalid("residual scaling at site " + std::to_string(site) + " needs the matching target feature");
    }
    return model.scaling(site).forward(r, target_site_features[site]);
  };
  std::vector<Tensor> out;
  const UNet::Encoded enc = unet.down(ctx.aligned_latent, Tensor());
  Tensor r = purify(0, unet.mid(enc.hidden, Tensor()));
  out.push_back(r);
  for (std::size_t s = 1; s <= unet.levels(); ++s) {
    const std::size_t level = unet.levels() - s;
    r = purify(s, unet.up(level, r, enc.skips[level], Tensor()));
    out.push_back(r);
  }
  return out;
}

Tensor predict_noise(const GenieModel& model, const Tensor& target_input, const ReferenceContext& reference,
                     std::span<const std::size_t> t, ForwardTrace* trace) {
  const auto& cfg = model.config();
  const UNet& tar = model.tar_unet();
  const UNet& ref = model.ref_unet();
  if (target_input.rank() != 4 || target_input.dim(1) != 2 * cfg.latent_channels + 1) {
    throw_shape("target input must be [N, " + std::to_string(2 * cfg.latent_channels + 1) + ", h, w], got " +
                shape_str(target_input.shape()));
  }
  const std::size_t granule = std::size_t{1} << tar.levels();
  if (target_input.dim(2) % granule != 0 || target_input.dim(3) % granule != 0) {
    throw_shape("latent size " + shape_str(target_input.shape()) + " not divisible by " + std::to_string(granule));
  }
  if (t.size() != target_input.dim(0)) throw_shape("need one timestep per batch item");
  for (auto ti : t) {
    if (ti >= cfg.timesteps) throw_invalid("timestep " + std::to_string(ti) + " out of range");
  }
  const bool use_ref = cfg.enable_paf;
  if (use_ref) {
    const Shape want{target_input.dim(0), cfg.latent_channels, target_input.dim(2), target_input.dim(3)};
    if (reference.aligned_latent.shape() != want) {
      throw_shape("reference latent " + shape_str(reference.aligned_latent.shape()) + " does not match " +
                  shape_str(want));
    }
  }
  AttentionTrace* attn_trace = trace ? trace->attention : nullptr;

  const Tensor temb = model.time_embedding(t);
  const UNet::Encoded tar_enc = tar.down(target_input, temb);
  UNet::Encoded ref_enc;
  if (use_ref) ref_enc = ref.down(reference.aligned_latent, Tensor());

  Tensor r;
  const auto inject = [&](std::size_t site, const Tensor& h) {
    if (trace) trace->target_features.push_back(h);
    // The fused attention takes the place of the host block's self-attention, inside its residual.
    if (!use_ref) return add(h, model.fusion(site).structural_only(h, attn_trace));
    if (cfg.enable_arsm) r = model.scaling(site).forward(r, h);
    if (trace) trace->ref_features.push_back(r);
    return add(h, model.fusion(site).fuse(h, r, attn_trace));
  };

  Tensor h = model.adapter().apply(0, tar.mid(tar_enc.hidden, temb), reference.adapter_tokens);
  if (use_ref) r = ref.mid(ref_enc.hidden, Tensor());
  h = inject(0, h);
  for (std::size_t s = 1; s <= tar.levels(); ++s) {
    const std::size_t level = tar.levels() - s;
    h = model.adapter().apply(s, tar.up(level, h, tar_enc.skips[level], temb), reference.adapter_tokens);
    if (use_ref) r = ref.up(level, r, ref_enc.skips[level], Tensor());
    h = inject(s, h);
  }
  return tar.head(h);
}

Tensor noise_objective(const Tensor& eps_hat, const Tensor& eps) {
  if (eps_hat.shape() != eps.shape()) {
    throw_shape("predicted noise " + shape_str(eps_hat.shape()) + " vs target noise " + shape_str(eps.shape()));
  }
  return mean(square(sub(eps_hat, eps)));
}

LossTerms compute_loss(const GenieModel& model, const TrainingBatch& batch, std::span<const std::size_t> t,
                       const Tensor& eps, bool detach_latents) {
  const auto& in = batch.inputs;
  in.validate();
  if (batch.truth.shape() != in.target.shape()) {
    throw_shape("ground truth " + shape_str(batch.truth.shape()) + " differs from target " + shape_str(in.target.shape()));
  }
  const Autoencoder& ae = model.autoencoder();
  const Tensor z_truth = ae.encode(batch.truth);
  LossTerms out;
  out.recon = mean(square(sub(ae.decode(z_truth), batch.truth)));
  const auto cut = [&](const Tensor& z) { return detach_latents ? z.detach() : z; };
  const Tensor z0 = cut(z_truth);
  const Tensor z_masked = cut(masked_target_latent(model, in));
  const ReferenceContext ctx = prepare_reference_latent(model, cut(ae.encode(in.reference)));
  const Tensor z_t = add_noise(z0, eps, t, model.schedule());
  out.eps_hat = predict_noise(model, assemble_target_input(z_t, in.mask, z_masked), ctx, t);
  out.noise = noise_objective(out.eps_hat, eps);
  out.total = add(out.noise, scale(out.recon, model.config().recon_weight));
  return out;
}

AdamState make_optimizer(const GenieModel& model) {
  AdamConfig c;
  c.learning_rate = model.config().learning_rate;
  AdamState s = make_adam(model.params().entries(), c);
  for (const auto& e : model.params().entries()) {
    const bool gate = e.name.ends_with(".beta") || e.name.ends_with(".gamma") || e.name.ends_with(".lambda");
    s.lr_scale.push_back(gate ? model.config().fusion_lr_scale : 1.0);
  }
  return s;
}

StepResult training_step(GenieModel& model, AdamState& optimizer, const TrainingBatch& batch, Rng& rng) {
  const auto& cfg = model.config();
  const std::size_t n = batch.inputs.target.dim(0);
  std::vector<std::size_t> t(n);
  for (auto& ti : t) ti = rng.index(cfg.timesteps);
  const std::size_t f = ModelConfig::kLatentFactor;
  const Tensor eps = rng.normal_tensor(
      {n, cfg.latent_channels, batch.inputs.target.dim(2) / f, batch.inputs.target.dim(3) / f});

  model.params().zero_grad();
  const LossTerms terms = compute_loss(model, batch, t, eps);
  if (!std::isfinite(terms.total.item())) {
    const auto& in = batch.inputs;
    for (const auto& [name, tensor] : std::vector<NamedTensor>{{"reference", in.reference}, {"target", in.target},
                                                                {"mask", in.mask}, {"truth", batch.truth}}) {
      if (!all_finite(tensor.data())) non_finite("input '" + name + "'");
    }
    for (const auto& e : model.params().entries()) {
      if (!all_finite(e.value.data())) non_finite("parameter '" + e.name + "'");
    }
    if (!all_finite(terms.eps_hat.data())) non_finite("predicted noise");
    if (!all_finite(terms.recon.data())) non_finite("reconstruction loss");
    non_finite("noise loss");
  }
  terms.total.backward();
  for (const auto& e : model.params().entries()) {
    if (!all_finite(e.value.grad())) non_finite("gradient of '" + e.name + "'");
  }
  adam_update(model.params().entries(), optimizer, model.trainable_mask());
  return {terms.noise.item(), terms.recon.item(), terms.total.item()};
}

Tensor sample(const GenieModel& model, const EditingInputs& inputs, std::uint64_t seed) {
  inputs.validate();
  NoGradGuard no_grad;
  const auto& sched = model.schedule();
  const ReferenceContext ctx = prepare_reference(model, inputs.reference);
  const Tensor z_masked = masked_target_latent(model, inputs);
  Rng rng = Rng::derive(seed, 0x5eed);
  Tensor z = rng.normal_tensor(z_masked.shape());
  const std::size_t n = z.dim(0);

  for (std::size_t step = sched.steps(); step-- > 0;) {
    const std::vector<std::size_t> t(n, step);
    const Tensor eps = predict_noise(model, assemble_target_input(z, inputs.mask, z_masked), ctx, t);
    const double beta = sched.betas[step];
    const double alpha_bar = sched.alpha_bars[step];
    const double alpha_bar_prev = step == 0 ? 1.0 : sched.alpha_bars[step - 1];
    const double coef = beta / std::sqrt(1.0 - alpha_bar);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double sigma = step == 0 ? 0.0 : std::sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar));
    std::vector<double> next(z.numel());
    const auto zd = z.data();
    const auto ed = eps.data();
    for (std::size_t i = 0; i < next.size(); ++i) next[i] = inv_sqrt_alpha * (zd[i] - coef * ed[i]);
    if (step > 0) {
      for (auto& v : next) v += sigma * rng.normal();
    }
    z = Tensor::from(z.shape(), std::move(next));
  }

  const Tensor decoded = model.autoencoder().decode(z);
  const auto dd = decoded.data();
  const auto td = inputs.target.data();
  const auto md = inputs.mask.data();
  const std::size_t c = decoded.dim(1), hw = decoded.dim(2) * decoded.dim(3);
  std::vector<double> out(decoded.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (b * c + ch) * hw + p;
        const double m = md[b * hw + p];
        out[i] = m * std::clamp(dd[i], 0.0, 1.0) + (1.0 - m) * td[i];
      }
    }
  }
  return Tensor::from(decoded.shape(), std::move(out));
}

}  // namespace genie
