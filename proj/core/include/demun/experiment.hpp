#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "demun/dataset.hpp"
#include "demun/train.hpp"

namespace demun {

struct DatasetSpec {
  std::string dir;
  std::string cache;  // optional cache file; used when present, else written
  int64_t k = 50;
  int64_t n_test = 0;
  int64_t n_train = 0;
  int64_t n_val = 0;
  int64_t max_sources = 0;
};

/// The unit of a reproducible run: dataset, operator, noise, plan, loss and
/// training hyperparameters, plus the output directory.
struct ExperimentConfig {
  DatasetSpec dataset;
  TrainConfig train;
  std::string out;

  /// Parses and validates a config. Malformed or out-of-range values raise
  /// ConfigError naming the offending key path. A relative `out` is placed
  /// under out_root.
  static ExperimentConfig from_json_text(const std::string& text, const std::string& out_root);
  static ExperimentConfig from_file(const std::filesystem::path& path, const std::string& out_root);
  std::string to_json() const;
};

Dataset load_dataset(const DatasetSpec& spec);

struct RunResult {
  std::filesystem::path run_dir;
  double mean_psnr = 0.0;
  std::vector<double> curve;
};

/// Trains, evaluates on the test split, and writes config.json,
/// checkpoint.dmck, report.json, per_image.csv and curve.csv into the run
/// directory. Artifacts are a pure function of (config bytes, seeds);
/// timing lives only in report.json.
RunResult run_experiment(const ExperimentConfig& config);

/// Re-evaluates a saved checkpoint against a dataset split and writes
/// report files into out_dir.
RunResult evaluate_checkpoint_files(const std::filesystem::path& checkpoint_path,
                                    const DatasetSpec& dataset_spec, Split split,
                                    const std::filesystem::path& out_dir);

struct GridCellResult {
  std::string cell;
  std::vector<std::string> axis_values;
  double mean_psnr = 0.0;
  bool failed = false;
  std::string error;
};

struct GridResult {
  std::filesystem::path table_path;
  std::vector<std::string> axis_paths;
  std::vector<GridCellResult> cells;
};

/// Expands the cartesian grid in a grid file, runs every cell on a worker
/// pool, and writes table.csv (one row per cell, mean test PSNR, failed
/// cells marked). Per-cell train seeds are base seed + cell index.
GridResult run_grid(const std::filesystem::path& grid_file, const std::string& out_root, int jobs,
                    int64_t seed_override = -1);

/// Long-format per-projection PSNR CSV (run,rate,step,psnr) collected from
/// run directories.
std::string curves_csv(std::span<const std::string> run_dirs);

struct SnrTable {
  std::vector<double> rates;
  std::vector<double> sigmas;
  std::vector<std::vector<double>> values_db;  // [rate][sigma]
};

/// Input-SNR of the config's operator kind over the test split for a grid
/// of sampling rates and noise levels.
SnrTable snr_table(const ExperimentConfig& config, std::span<const double> rates,
                   std::span<const double> sigmas);
std::string snr_table_text(const SnrTable& table);
std::string snr_table_csv(const SnrTable& table);

/// Deterministic double formatting used by all CSV artifacts.
std::string format_double(double v);

}  // namespace demun
