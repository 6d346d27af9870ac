#pragma once

// Training runs, checkpoints, evaluation and the two ablation lattices.
//
// A run is fully determined by its ModelConfig: the seed fixes the synthetic
// data, the initial parameters, batch order, timesteps, noise and the
// sampler. Output files carry no timestamps; the only wall-clock values are
// the "wall_ms" fields of JSON records.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "genie/metrics.hpp"
#include "genie/pipeline.hpp"
#include "genie/synthetic.hpp"

namespace genie {

struct RunData {
  SyntheticDataset train;
  SyntheticDataset eval;
};

/// train_samples + eval_samples items of cfg.task from cfg.seed; the eval
/// split is the tail.
RunData make_run_data(const ModelConfig& cfg);

struct EvalMetrics {
  double masked_psnr = 0;
  double psnr = 0;
  double ssim = 0;
};

/// Samples every eval item (seeded by cfg.seed) and scores it against the truth.
EvalMetrics evaluate_model(const GenieModel& model, const SyntheticDataset& eval, Tensor* samples = nullptr);

/// One line of the metrics stream.
struct TrainRecord {
  std::size_t step = 0;
  double loss = 0;
  double noise_loss = 0;
  double recon_loss = 0;
  std::optional<EvalMetrics> eval;
  double wall_ms = 0;

  std::string to_json_line() const;
};

struct TrainOutcome {
  std::vector<TrainRecord> records;  // one per step, plus a step-0 record when evaluated before training
  EvalMetrics final_eval;
  std::vector<std::string> changed_groups;  // parameter groups whose values moved
};

struct TrainOptions {
  /// Evaluate the untrained model and emit it as step 0.
  bool eval_initial = false;
  std::function<void(const TrainRecord&)> on_record;
};

/// Runs cfg.steps training steps with evaluation every cfg.eval_every steps
/// (and always after the last one).
TrainOutcome train_model(GenieModel& model, const RunData& data, const TrainOptions& opts = {});

/// Mean of `window` consecutive per-step values of `field` starting at step `first` + 1.
double moving_average(const std::vector<TrainRecord>& records, std::size_t first, std::size_t window,
                      double TrainRecord::*field = &TrainRecord::loss);

/// <dir>/params.gtd and <dir>/manifest.json (format, config text, step, parameter count).
void save_checkpoint(const std::filesystem::path& dir, const GenieModel& model, std::size_t step);

struct LoadedCheckpoint {
  std::unique_ptr<GenieModel> model;
  std::size_t step = 0;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Attention-map summaries of one predict_noise call on the first eval items
/// at t = T / 2, as JSON lines.
std::string attention_debug_lines(const GenieModel& model, const SyntheticDataset& eval);

/// Full train command: writes config.txt, metrics.jsonl, checkpoint/ and
/// summary.json under `out`. Returns the summary JSON.
std::string run_training(const ModelConfig& cfg, const std::filesystem::path& out, bool debug_attention);

/// Sample command: writes samples.gtd, samples/<i>.ppm, truth/<i>.ppm,
/// masks/<i>.pgm and sample.json. Returns the JSON.
std::string run_sampling(const GenieModel& model, const SyntheticDataset& data, std::uint64_t seed,
                         const std::filesystem::path& out);

/// Pairs files by stem across two directories (.ppm, .pgm or .gtd); masks,
/// when given, come from a third directory with matching stems. Returns
/// per-pair and aggregate JSON.
std::string evaluate_directories(const std::filesystem::path& predicted, const std::filesystem::path& truth,
                                 const std::optional<std::filesystem::path>& masks);

enum class Lattice { kComponents, kTraining };

Lattice parse_lattice(const std::string& name);
std::string lattice_name(Lattice l);

struct LatticeRow {
  std::string label;
  ModelConfig config;
};

/// Components: B, B+S, B+S+F, B+S+F+A (enable flags).
/// Training: rows named by the trained parts among R (reference U-Net),
/// T (target U-Net) and I (adapter); the rest are frozen.
std::vector<LatticeRow> lattice_rows(Lattice lattice, const ModelConfig& base);

struct AblationRow {
  std::string label;
  ModelConfig config;
  double final_loss = 0;
  EvalMetrics metrics;
  std::vector<std::string> changed_groups;
  double wall_ms = 0;
};

struct AblationReport {
  Lattice lattice = Lattice::kComponents;
  std::vector<AblationRow> rows;

  std::string to_json() const;
  std::string to_text() const;
};

struct AblationOptions {
  /// 0: GENIE_THREADS if set, else hardware concurrency.
  std::size_t threads = 0;
  /// Per-row subdirectories (metrics.jsonl, checkpoint/) when non-empty.
  std::filesystem::path out;
  bool debug_attention = false;
};

/// Trains every row of the lattice on the same data and seed, evaluates each
/// on the held-out split.
AblationReport run_ablation(const ModelConfig& base, Lattice lattice, const AblationOptions& opts = {});

/// Worker count for row-parallel runs.
std::size_t resolve_threads(std::size_t requested, std::size_t jobs);

}  // namespace genie
