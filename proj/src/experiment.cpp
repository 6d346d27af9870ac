#include "genie/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "genie/image_io.hpp"
#include "genie/serialize.hpp"

namespace genie {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointFormat = "genie-checkpoint";
constexpr int kCheckpointVersion = 1;

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

json eval_json(const EvalMetrics& m) {
  return {{"masked_psnr", m.masked_psnr}, {"psnr", m.psnr}, {"ssim", m.ssim}};
}

[[noreturn]] void io_error(const std::string& what) { throw Error(ErrorCode::kIo, what); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

EditingInputs inputs_of(const SyntheticDataset& d) { return {d.reference, d.target, d.mask}; }

std::vector<std::string> changed_groups(const std::vector<NamedTensor>& before, const std::vector<NamedTensor>& after) {
  std::map<ParamGroup, bool> changed;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const ParamGroup g = group_of(before[i].name);
    const auto a = before[i].value.data();
    const auto b = after.at(i).value.data();
    const bool moved = !std::equal(a.begin(), a.end(), b.begin(), b.end());
    changed[g] = changed[g] || moved;
  }
  std::vector<std::string> out;
  for (const auto& [g, moved] : changed) {
    if (moved) out.push_back(group_name(g));
  }
  return out;
}

}  // namespace

RunData make_run_data(const ModelConfig& cfg) {
  cfg.validate();
  const SyntheticDataset all =
      generate_synthetic(cfg.task, cfg.train_samples + cfg.eval_samples, cfg.image_size, cfg.seed);
  return {slice_dataset(all, 0, cfg.train_samples), slice_dataset(all, cfg.train_samples, cfg.eval_samples)};
}

EvalMetrics evaluate_model(const GenieModel& model, const SyntheticDataset& eval, Tensor* samples) {
  const Tensor out = sample(model, inputs_of(eval), model.config().seed);
  const MetricSummary s = evaluate_batch(out, eval.truth, eval.mask);
  if (samples) *samples = out;
  return {s.mean_masked_psnr.value_or(kPsnrCapDb), s.mean_psnr, s.mean_ssim};
}

std::string TrainRecord::to_json_line() const {
  json j;
  j["step"] = step;
  if (step > 0) {
    j["loss"] = loss;
    j["noise_loss"] = noise_loss;
    j["recon_loss"] = recon_loss;
  }
  if (eval) {
    j["masked_psnr"] = eval->masked_psnr;
    j["psnr"] = eval->psnr;
    j["ssim"] = eval->ssim;
  }
  j["wall_ms"] = wall_ms;
  return j.dump();
}

TrainOutcome train_model(GenieModel& model, const RunData& data, const TrainOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (data.train.size() == 0) throw_invalid("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  const std::vector<NamedTensor> before = model.state();
  AdamState optimizer = make_optimizer(model);
  Rng rng = Rng::derive(cfg.seed, 2);
  TrainOutcome outcome;

  const auto emit = [&](TrainRecord rec) {
    rec.wall_ms = elapsed_ms(start);
    if (opts.on_record) opts.on_record(rec);
    outcome.records.push_back(std::move(rec));
  };

  if (opts.eval_initial || cfg.steps == 0) {
    TrainRecord rec;
    rec.eval = evaluate_model(model, data.eval);
    outcome.final_eval = *rec.eval;
    emit(std::move(rec));
  }
  std::vector<std::size_t> indices(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& i : indices) i = rng.index(data.train.size());
    const StepResult r = training_step(model, optimizer, make_batch(data.train, indices), rng);
    TrainRecord rec;
    rec.step = step;
    rec.loss = r.total_loss;
    rec.noise_loss = r.noise_loss;
    rec.recon_loss = r.recon_loss;
    if (step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0)) {
      rec.eval = evaluate_model(model, data.eval);
      outcome.final_eval = *rec.eval;
    }
    emit(std::move(rec));
  }
  outcome.changed_groups = changed_groups(before, model.state());
  return outcome;
}

double moving_average(const std::vector<TrainRecord>& records, std::size_t first, std::size_t window,
                      double TrainRecord::*field) {
  std::vector<double> losses;
  for (const auto& r : records) {
    if (r.step > 0) losses.push_back(r.*field);
  }
  if (window == 0 || first + window > losses.size()) throw_invalid("moving-average window exceeds the loss record");
  double total = 0.0;
  for (std::size_t i = first; i < first + window; ++i) total += losses[i];
  return total / static_cast<double>(window);
}

void save_checkpoint(const fs::path& dir, const GenieModel& model, std::size_t step) {
  fs::create_directories(dir);
  save_tensors(dir / "params.gtd", model.state());
  const json manifest = {{"format", kCheckpointFormat},
                         {"version", kCheckpointVersion},
                         {"step", step},
                         {"tensor_count", model.params().size()},
                         {"param_count", model.params().scalar_count()},
                         {"config", model.config().to_text()}};
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    io_error("checkpoint manifest in " + dir.string() + " is not valid JSON: " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) io_error(dir.string() + " is not a checkpoint directory");
  if (manifest.value("version", 0) != kCheckpointVersion) {
    io_error("unsupported checkpoint version in " + dir.string());
  }
  LoadedCheckpoint out;
  out.model = std::make_unique<GenieModel>(ModelConfig::parse(manifest.at("config").get<std::string>()));
  out.model->load_state(load_tensors(dir / "params.gtd"));
  out.step = manifest.at("step").get<std::size_t>();
  return out;
}

std::string attention_debug_lines(const GenieModel& model, const SyntheticDataset& eval) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  const SyntheticDataset few = slice_dataset(eval, 0, std::min<std::size_t>(2, eval.size()));
  const EditingInputs in = inputs_of(few);
  const ReferenceContext ctx = prepare_reference(model, in.reference);
  const Tensor z0 = model.autoencoder().encode(few.truth);
  Rng rng = Rng::derive(cfg.seed, 4);
  const Tensor eps = rng.normal_tensor(z0.shape());
  const std::vector<std::size_t> t(few.size(), cfg.timesteps / 2);
  const Tensor z_t = add_noise(z0, eps, t, model.schedule());
  AttentionTrace attention;
  ForwardTrace trace;
  trace.attention = &attention;
  predict_noise(model, assemble_target_input(z_t, in.mask, masked_target_latent(model, in)), ctx, t, &trace);
  std::string out;
  for (const auto& s : summarize(attention)) {
    out += json{{"branch", s.branch},
                {"timestep", t.front()},
                {"row_sum_min", s.row_sum_min},
                {"row_sum_max", s.row_sum_max},
                {"mean_entropy", s.mean_entropy}}
               .dump();
    out += '\n';
  }
  return out;
}

std::string run_training(const ModelConfig& cfg, const fs::path& out, bool debug_attention) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const RunData data = make_run_data(cfg);
  GenieModel model(cfg);
  fs::create_directories(out);
  write_text_atomic(out / "config.txt", cfg.to_text());
  const fs::path stream_path = out / "metrics.jsonl";
  std::ofstream stream(stream_path, std::ios::trunc);
  if (!stream) io_error("cannot write " + stream_path.string());

  TrainOptions opts;
  opts.eval_initial = true;
  opts.on_record = [&](const TrainRecord& r) { stream << r.to_json_line() << '\n' << std::flush; };
  const TrainOutcome outcome = train_model(model, data, opts);
  stream.close();
  save_checkpoint(out / "checkpoint", model, cfg.steps);
  if (debug_attention) write_text_atomic(out / "attention.jsonl", attention_debug_lines(model, data.eval));

  json summary = {{"steps", cfg.steps},
                  {"seed", cfg.seed},
                  {"task", cfg.task},
                  {"param_count", model.params().scalar_count()},
                  {"initial", eval_json(outcome.records.front().eval.value())},
                  {"final", eval_json(outcome.final_eval)},
                  {"changed_groups", outcome.changed_groups}};
  const std::size_t window = std::min<std::size_t>(10, cfg.steps);
  if (window > 0) {
    summary["loss_ma_start"] = moving_average(outcome.records, 0, window);
    summary["loss_ma_end"] = moving_average(outcome.records, cfg.steps - window, window);
    summary["noise_loss_ma_start"] = moving_average(outcome.records, 0, window, &TrainRecord::noise_loss);
    summary["noise_loss_ma_end"] =
        moving_average(outcome.records, cfg.steps - window, window, &TrainRecord::noise_loss);
  }
  summary["wall_ms"] = elapsed_ms(start);
  const std::string text = summary.dump(2) + "\n";
  write_text_atomic(out / "summary.json", text);
  return text;
}

std::string run_sampling(const GenieModel& model, const SyntheticDataset& data, std::uint64_t seed,
                         const fs::path& out) {
  if (data.size() == 0) throw_invalid("no items to sample");
  const Tensor samples = sample(model, inputs_of(data), seed);
  fs::create_directories(out / "samples");
  fs::create_directories(out / "truth");
  fs::create_directories(out / "masks");
  save_tensors(out / "samples.gtd", {{"samples", samples}});
  const MetricSummary m = evaluate_batch(samples, data.truth, data.mask);
  json items = json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string stem = std::to_string(i);
    write_pnm(out / "samples" / (stem + ".ppm"), batch_item(samples, i));
    write_pnm(out / "truth" / (stem + ".ppm"), batch_item(data.truth, i));
    write_pnm(out / "masks" / (stem + ".pgm"), batch_item(data.mask, i));
    items.push_back({{"index", i},
                     {"psnr", m.psnr_db[i]},
                     {"ssim", m.ssim[i]},
                     {"masked_psnr", masked_psnr(batch_item(samples, i), batch_item(data.truth, i),
                                                 batch_item(data.mask, i))}});
  }
  const json report = {{"count", data.size()},
                       {"seed", seed},
                       {"mean_masked_psnr", m.mean_masked_psnr.value_or(kPsnrCapDb)},
                       {"mean_psnr", m.mean_psnr},
                       {"mean_ssim", m.mean_ssim},
                       {"items", items}};
  const std::string text = report.dump(2) + "\n";
  write_text_atomic(out / "sample.json", text);
  return text;
}

namespace {

bool image_extension(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".gtd";
}

std::map<std::string, fs::path> images_by_stem(const fs::path& dir) {
  if (!fs::is_directory(dir)) io_error(dir.string() + " is not a directory");
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !image_extension(entry.path())) continue;
    const std::string stem = entry.path().stem().string();
    if (!out.emplace(stem, entry.path()).second) io_error("two images share the stem '" + stem + "' in " + dir.string());
  }
  return out;
}

Tensor load_image(const fs::path& path) {
  if (path.extension() != ".gtd") return read_pnm(path);
  const auto tensors = load_tensors(path);
  if (tensors.empty()) io_error(path.string() + " holds no tensors");
  const Tensor& t = tensors.front().value;
  if (t.rank() == 3) return t;
  if (t.rank() == 2) return reshape(t, {1, t.dim(0), t.dim(1)});
  if (t.rank() == 4 && t.dim(0) == 1) return reshape(t, {t.dim(1), t.dim(2), t.dim(3)});
  throw_shape(path.string() + ": expected one [C, H, W] image, got " + shape_str(t.shape()));
}

}  // namespace

std::string evaluate_directories(const fs::path& predicted, const fs::path& truth,
                                 const std::optional<fs::path>& masks) {
  const auto pred_files = images_by_stem(predicted);
  const auto truth_files = images_by_stem(truth);
  std::map<std::string, fs::path> mask_files;
  if (masks) mask_files = images_by_stem(*masks);

  json pairs = json::array();
  double psnr_total = 0.0, ssim_total = 0.0, masked_total = 0.0;
  for (const auto& [stem, pred_path] : pred_files) {
    const auto it = truth_files.find(stem);
    if (it == truth_files.end()) io_error("no ground truth for '" + stem + "' in " + truth.string());
    const Tensor a = load_image(pred_path);
    const Tensor b = load_image(it->second);
    if (a.shape() != b.shape()) {
      throw_shape("'" + stem + "': prediction " + shape_str(a.shape()) + " vs truth " + shape_str(b.shape()));
    }
    json pair = {{"name", stem}, {"psnr", psnr(a, b)}, {"ssim", ssim(a, b)}};
    psnr_total += pair["psnr"].get<double>();
    ssim_total += pair["ssim"].get<double>();
    if (masks) {
      const auto m = mask_files.find(stem);
      if (m == mask_files.end()) io_error("no mask for '" + stem + "' in " + masks->string());
      pair["masked_psnr"] = masked_psnr(a, b, load_image(m->second));
      masked_total += pair["masked_psnr"].get<double>();
    }
    pairs.push_back(std::move(pair));
  }
  if (pairs.empty()) io_error("no images found in " + predicted.string());
  const double n = static_cast<double>(pairs.size());
  json report = {{"count", pairs.size()}, {"mean_psnr", psnr_total / n}, {"mean_ssim", ssim_total / n}};
  if (masks) report["mean_masked_psnr"] = masked_total / n;
  report["pairs"] = std::move(pairs);
  return report.dump(2) + "\n";
}

Lattice parse_lattice(const std::string& name) {
  if (name == "components") return Lattice::kComponents;
  if (name == "training") return Lattice::kTraining;
  throw Error(ErrorCode::kConfig, "unknown lattice '" + name + "' (components, training)");
}

std::string lattice_name(Lattice l) { return l == Lattice::kComponents ? "components" : "training"; }

std::vector<LatticeRow> lattice_rows(Lattice lattice, const ModelConfig& base) {
  std::vector<LatticeRow> rows;
  if (lattice == Lattice::kComponents) {
    const struct {
      const char* label;
      bool sam, paf, arsm;
    } table[] = {{"B", false, false, false},
                 {"B+S", true, false, false},
                 {"B+S+F", true, true, false},
                 {"B+S+F+A", true, true, true}};
    for (const auto& r : table) {
      ModelConfig c = base;
      c.enable_sam = r.sam;
      c.enable_paf = r.paf;
      c.enable_arsm = r.arsm;
      rows.push_back({r.label, c});
    }
    return rows;
  }
  // trained parts: reference U-Net, target U-Net, adapter
  const bool table[][3] = {{true, true, true},  {true, true, false}, {true, false, false},
                           {true, false, true}, {false, true, true}, {false, true, false}};
  for (const auto& r : table) {
    ModelConfig c = base;
    c.freeze_ref = !r[0];
    c.freeze_tar = !r[1];
    c.freeze_adapter = !r[2];
    std::string label;
    const char* names[] = {"R", "T", "I"};
    for (int k = 0; k < 3; ++k) {
      if (!r[k]) continue;
      if (!label.empty()) label += '+';
      label += names[k];
    }
    rows.push_back({label, c});
  }
  return rows;
}

std::size_t resolve_threads(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("GENIE_THREADS")) {
      try {
        n = static_cast<std::size_t>(std::stoul(env));
      } catch (const std::exception&) {
        throw Error(ErrorCode::kConfig, std::string("GENIE_THREADS must be a positive integer, got '") + env + "'");
      }
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, jobs));
}

AblationReport run_ablation(const ModelConfig& base, Lattice lattice, const AblationOptions& opts) {
  base.validate();
  AblationReport report;
  report.lattice = lattice;
  const std::vector<LatticeRow> rows = lattice_rows(lattice, base);
  report.rows.resize(rows.size());
  const RunData data = make_run_data(base);

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(rows.size());
  const auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      try {
        const auto start = std::chrono::steady_clock::now();
        GenieModel model(rows[i].config);
        const TrainOutcome outcome = train_model(model, data);
        AblationRow& row = report.rows[i];
        row.label = rows[i].label;
        row.config = rows[i].config;
        row.final_loss = outcome.records.back().step > 0 ? outcome.records.back().loss : 0.0;
        row.metrics = outcome.final_eval;
        row.changed_groups = outcome.changed_groups;
        if (!opts.out.empty()) {
          const fs::path dir = opts.out / "rows" / row.label;
          fs::create_directories(dir);
          std::string lines;
          for (const auto& r : outcome.records) lines += r.to_json_line() + "\n";
          write_text_atomic(dir / "metrics.jsonl", lines);
          save_checkpoint(dir / "checkpoint", model, rows[i].config.steps);
          if (opts.debug_attention) write_text_atomic(dir / "attention.jsonl", attention_debug_lines(model, data.eval));
        }
        row.wall_ms = elapsed_ms(start);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = resolve_threads(opts.threads, rows.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  if (!opts.out.empty()) {
    write_text_atomic(opts.out / "ablation.json", report.to_json());
    write_text_atomic(opts.out / "ablation.txt", report.to_text());
  }
  return report;
}

std::string AblationReport::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json row = {{"label", r.label},
                {"enable_sam", r.config.enable_sam},
                {"enable_paf", r.config.enable_paf},
                {"enable_arsm", r.config.enable_arsm},
                {"freeze_ref", r.config.freeze_ref},
                {"freeze_tar", r.config.freeze_tar},
                {"freeze_adapter", r.config.freeze_adapter},
                {"steps", r.config.steps},
                {"final_loss", r.final_loss},
                {"changed_groups", r.changed_groups},
                {"wall_ms", r.wall_ms}};
    row.update(eval_json(r.metrics));
    rows_json.push_back(std::move(row));
  }
  const json j = {{"lattice", lattice_name(lattice)}, {"rows", rows_json}};
  return j.dump(2) + "\n";
}

std::string AblationReport::to_text() const {
  std::ostringstream os;
  char line[256];
  const bool components = lattice == Lattice::kComponents;
  std::snprintf(line, sizeof line, "%-9s %-16s %10s %12s %9s %7s\n", "row", components ? "sam paf arsm" : "frozen",
                "loss", "masked_psnr", "psnr", "ssim");
  os << line;
  for (const auto& r : rows) {
    std::string flags;
    if (components) {
      flags = std::string(r.config.enable_sam ? "on " : "off") + " " + (r.config.enable_paf ? "on " : "off") + " " +
              (r.config.enable_arsm ? "on " : "off");
    } else {
      if (r.config.freeze_ref) flags += "R ";
      if (r.config.freeze_tar) flags += "T ";
      if (r.config.freeze_adapter) flags += "I ";
      if (flags.empty()) flags = "-";
    }
    std::snprintf(line, sizeof line, "%-9s %-16s %10.5f %12.3f %9.3f %7.4f\n", r.label.c_str(), flags.c_str(),
                  r.final_loss, r.metrics.masked_psnr, r.metrics.psnr, r.metrics.ssim);
    os << line;
  }
  return os.str();
}

}  // namespace genie
