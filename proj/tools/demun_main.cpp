// Command-line harness for training and evaluating unrolled reconstruction
// networks: single runs, ablation grids, per-projection curves, checkpoint
// re-evaluation, and input-SNR tables.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "demun/experiment.hpp"

namespace {

std::string default_out_root(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("DEMUN_OUT_ROOT")) return env;
  return "";
}

std::vector<double> parse_list(const std::string& csv) {
  std::vector<double> out;
  size_t start = 0;
  while (start <= csv.size()) {
    const size_t comma = csv.find(',', start);
    const std::string item = csv.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!item.empty()) out.push_back(std::stod(item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

demun::Split parse_split(const std::string& name) {
  if (name == "test") return demun::Split::kTest;
  if (name == "train") return demun::Split::kTrain;
  if (name == "val") return demun::Split::kVal;
  throw demun::ConfigError("split must be one of test|train|val, got '" + name + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unrolled networks for linear inverse problems"};
  app.require_subcommand(1);

  std::string config_path, out_root, split_name = "test", checkpoint_path, csv_out;
  std::string rates_csv = "0.1,0.2,0.3,0.4", sigmas_csv = "0.01,0.025,0.05,0.1";
  std::vector<std::string> run_dirs;
  int jobs = 1;
  long long seed_override = -1;

  CLI::App* run = app.add_subcommand("run", "train and evaluate one configuration");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out", out_root, "output root for relative run dirs");
  run->add_option("--seed-override", seed_override, "replace the config's train seed");

  CLI::App* grid = app.add_subcommand("grid", "expand and run a cartesian grid");
  grid->add_option("--config", config_path, "grid file (JSON)")->required();
  grid->add_option("--out", out_root, "output root for relative run dirs");
  grid->add_option("--jobs", jobs, "parallel grid cells")->check(CLI::PositiveNumber);
  grid->add_option("--seed-override", seed_override, "replace the base train seed");

  CLI::App* curves = app.add_subcommand("curves", "collect per-projection PSNR curves");
  curves->add_option("dirs", run_dirs, "run directories")->required();
  curves->add_option("--out", csv_out, "output CSV path (default stdout)");

  CLI::App* eval = app.add_subcommand("eval", "re-evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("--config", config_path, "config with the dataset spec")->required();
  eval->add_option("--split", split_name, "test|train|val");
  eval->add_option("--out", out_root, "output directory")->required();

  CLI::App* snr = app.add_subcommand("snr", "input-SNR table over rates and noise levels");
  snr->add_option("--config", config_path, "config with dataset and operator kind")->required();
  snr->add_option("--rates", rates_csv, "comma-separated sampling rates");
  snr->add_option("--sigmas", sigmas_csv, "comma-separated noise levels");
  snr->add_option("--csv", csv_out, "also write the table as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      demun::ExperimentConfig cfg =
          demun::ExperimentConfig::from_file(config_path, default_out_root(out_root));
      if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);
      const demun::RunResult result = demun::run_experiment(cfg);
      std::cout << "run dir: " << result.run_dir.string() << "\n"
                << "mean test PSNR: " << result.mean_psnr << " dB\n";
    } else if (grid->parsed()) {
      const demun::GridResult result =
          demun::run_grid(config_path, default_out_root(out_root), jobs, seed_override);
      int failures = 0;
      for (const auto& cell : result.cells)
        if (cell.failed) ++failures;
      std::cout << "table: " << result.table_path.string() << " (" << result.cells.size()
                << " cells, " << failures << " failed)\n";
      if (failures > 0) return 1;
    } else if (curves->parsed()) {
      const std::string csv = demun::curves_csv(run_dirs);
      if (csv_out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream out(csv_out, std::ios::binary);
        out << csv;
        std::cout << "curves: " << csv_out << "\n";
      }
    } else if (eval->parsed()) {
      demun::ExperimentConfig cfg = demun::ExperimentConfig::from_file(config_path, "");
      const demun::RunResult result = demun::evaluate_checkpoint_files(
          checkpoint_path, cfg.dataset, parse_split(split_name), out_root);
      std::cout << "report dir: " << result.run_dir.string() << "\n"
                << "mean PSNR: " << result.mean_psnr << " dB\n";
    } else if (snr->parsed()) {
      demun::ExperimentConfig cfg = demun::ExperimentConfig::from_file(config_path, "");
      const demun::SnrTable table =
          demun::snr_table(cfg, parse_list(rates_csv), parse_list(sigmas_csv));
      std::cout << demun::snr_table_text(table);
      if (!csv_out.empty()) {
        std::ofstream out(csv_out, std::ios::binary);
        out << demun::snr_table_csv(table);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
