#pragma once

// Run configuration, training loop with exact resume, depth/weight-decay
// sweeps, metric reports and the JSON-in/JSON-out entry points behind the
// C API and CLI.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geoproj/dynamics.hpp"
#include "geoproj/flowmatch.hpp"
#include "geoproj/nn.hpp"

namespace geoproj::harness {

using Json = nlohmann::json;
using nn::Mat;

/// Relative paths are resolved against $GEOPROJ_OUT_ROOT when it is set.
std::string resolve_out(const std::string& path);

struct RunConfig {
  std::string data;                    // dataset CSV
  std::string out = "runs/default";    // run directory
  nn::ModelSpec model;
  std::string projector = "analytic";  // Flow variants: analytic | projector checkpoint stem
  double lr = 1e-3;
  double weight_decay = 0.0;
  int epochs = 2000;
  int batch = 500;
  std::optional<std::uint64_t> seed;
  double plateau_factor = 0.5;
  int plateau_patience = 100;
  int early_stop_patience = 200;
  double clip = 0.0;                   // <= 0 disables clipping
  int checkpoint_every = 0;            // training state also written every k epochs
  int stop_after = 0;                  // > 0: leave the loop after this epoch (state kept)
  bool resume = false;
  std::vector<int> sweep_depths;       // empty: single run
  std::vector<double> sweep_weight_decays;
  int jobs = 1;

  static RunConfig from_json(const Json& j);
  Json to_json() const;
  /// Throws Config for a missing seed/dataset or values outside range.
  void validate() const;
};

/// Learned projector or the kernel's analytic projection, as required by
/// the Flow variants.
std::shared_ptr<const nn::DifferentiableProjector> make_projector(const std::string& source,
                                                                  const ManifoldKernel& m);

struct HistoryEntry {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

Json history_to_json(const std::vector<HistoryEntry>& h);
std::vector<HistoryEntry> history_from_json(const Json& j);
void write_history_csv(const std::string& path, const std::vector<HistoryEntry>& h);

struct TrainResult {
  std::string dir;
  double initial_val = 0.0;
  double best_val = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  bool finished = false;
  std::vector<HistoryEntry> history;
  Json to_json() const;
};

/// Trains one configuration. Writes <out>/best.{json,bin} (best validation
/// parameters), <out>/state.{json,bin} (everything needed to resume) and
/// <out>/history.csv. Test rows are never read.
TrainResult train_loop(const RunConfig& cfg);

struct SweepRun {
  int depth = 0;
  double weight_decay = 0.0;
  std::string dir;
  double best_val = 0.0;
};

/// Lowest best-validation loss; ties go to the lower (depth, weight decay).
std::size_t select_run(const std::vector<SweepRun>& runs);

struct MetricsReport {
  std::string variant;
  std::string kernel;
  std::string checkpoint;
  int n_test = 0;
  double test_mse = 0.0;
  double mean_residual = 0.0;
  double max_residual = 0.0;
  std::vector<HistoryEntry> history;
  Json to_json() const;
};

/// Field names every serialized MetricsReport carries.
const std::vector<std::string>& metrics_fields();

/// Test-split metrics of a saved model.
MetricsReport evaluate_model(const std::string& checkpoint, const dyn::TrajectoryDataset& ds);

/// Trains every (depth, weight decay) pair of the sweep grid, selects on
/// validation loss, then evaluates the selected checkpoint on the test split.
Json run_sweep(const RunConfig& cfg);

/// Flow-matching projector on the unique train/val points of a dataset.
Json train_projector(const Json& cfg);

// JSON entry points. Each returns the report that the CLI prints.
Json gen_data(const Json& args);
Json train(const Json& args);
Json evaluate(const Json& args);
Json project(const Json& args);
Json verify(const Json& args);

/// Rows of a headerless or headed numeric CSV.
Mat read_points_csv(const std::string& path);
void write_points_csv(const std::string& path, const Mat& x);

}  // namespace geoproj::harness
