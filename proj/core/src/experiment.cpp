#include "demun/experiment.hpp"

#include <unistd.h>

#include <atomic>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace demun {

using json = nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

/// json access that reports the dotted key path on any failure.
class Ctx {
 public:
  Ctx(const json& j, std::string path) : j_(&j), path_(std::move(path)) {}

  bool has(const std::string& key) const { return j_->contains(key); }

  Ctx child(const std::string& key) const {
    if (!j_->contains(key)) throw ConfigError(join(key) + ": missing required key");
    return Ctx((*j_)[key], join(key));
  }

  template <typename T>
  T get(const std::string& key) const {
    if (!j_->contains(key)) throw ConfigError(join(key) + ": missing required key");
    try {
      return (*j_)[key].get<T>();
    } catch (const json::exception&) {
      throw ConfigError(join(key) + ": wrong value type");
    }
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) const {
    if (!j_->contains(key)) return fallback;
    return get<T>(key);
  }

  void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(join(key) + ": " + msg);
  }

  std::string join(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json* j_;
  std::string path_;
};

ExperimentConfig parse_config(const json& j, const std::string& out_root) {
  Ctx root(j, "");
  ExperimentConfig cfg;

  {
    Ctx d = root.child("dataset");
    cfg.dataset.dir = d.get_or<std::string>("dir", "");
    cfg.dataset.cache = d.get_or<std::string>("cache", "");
    if (cfg.dataset.dir.empty() && cfg.dataset.cache.empty())
      d.fail("dir", "either dataset.dir or dataset.cache is required");
    cfg.dataset.k = d.get<int64_t>("k");
    if (cfg.dataset.k < 1) d.fail("k", "resolution must be >= 1");
    cfg.dataset.n_test = d.get<int64_t>("n_test");
    cfg.dataset.n_train = d.get<int64_t>("n_train");
    cfg.dataset.n_val = d.get<int64_t>("n_val");
    if (cfg.dataset.n_test < 0 || cfg.dataset.n_train < 1 || cfg.dataset.n_val < 0)
      d.fail("n_train", "split sizes must be non-negative with n_train >= 1");
    cfg.dataset.max_sources = d.get_or<int64_t>("max_sources", 0);
  }

  {
    Ctx o = root.child("operator");
    const std::string kind = o.get<std::string>("kind");
    if (kind == "gaussian")
      cfg.train.op.kind = MeasurementOperator::Kind::kGaussian;
    else if (kind == "dct")
      cfg.train.op.kind = MeasurementOperator::Kind::kDct;
    else
      o.fail("kind", "unknown operator kind '" + kind + "' (expected gaussian|dct)");
    cfg.train.op.m = o.get_or<int64_t>("m", 0);
    cfg.train.op.rate = o.get_or<double>("rate", 0.0);
    if (cfg.train.op.m <= 0) {
      const double r = cfg.train.op.rate;
      if (!(r == 0.1 || r == 0.2 || r == 0.3 || r == 0.4))
        o.fail("rate", "rate must be one of {0.1,0.2,0.3,0.4} (or give an explicit m), got " +
                           format_double(r));
    }
    cfg.train.op.seed = o.get<uint64_t>("seed");
  }

  {
    Ctx nz = root.child("noise");
    cfg.train.noise.sigma = nz.get<double>("sigma");
    if (cfg.train.noise.sigma < 0) nz.fail("sigma", "sigma must be >= 0");
    cfg.train.noise.seed = nz.get_or<uint64_t>("seed", 0);
  }

  {
    Ctx p = root.child("plan");
    const std::string alg = p.get<std::string>("algorithm");
    try {
      cfg.train.plan.algorithm = parse_algorithm(alg);
    } catch (const ConfigError& e) {
      p.fail("algorithm", e.what());
    }
    cfg.train.plan.steps = p.get<int64_t>("steps");
    if (cfg.train.plan.steps < 1) p.fail("steps", "steps must be >= 1");
    cfg.train.plan.residual = p.get<bool>("residual");
    cfg.train.plan.tie_weights = p.get_or<bool>("tie_weights", false);
    cfg.train.plan.amp_probe_eps = p.get_or<double>("amp_probe_eps", 1e-3);
    if (cfg.train.plan.amp_probe_eps <= 0) p.fail("amp_probe_eps", "must be > 0");
    cfg.train.plan.projector.depth_L = p.get<int64_t>("depth");
    cfg.train.plan.projector.channels = p.get<int64_t>("channels");
    cfg.train.plan.projector.kernel = p.get_or<int64_t>("kernel", 3);
    cfg.train.plan.projector.image_k = cfg.dataset.k;
    try {
      cfg.train.plan.projector.validate();
    } catch (const ConfigError& e) {
      p.fail("depth", e.what());
    }
  }

  {
    const std::string id = root.get<std::string>("loss");
    try {
      cfg.train.loss = LossSpec::parse(id);
      cfg.train.loss.validate(cfg.train.plan.steps);
    } catch (const ConfigError& e) {
      root.fail("loss", e.what());
    }
  }

  {
    Ctx t = root.child("train");
    cfg.train.epochs = t.get<int64_t>("epochs");
    if (cfg.train.epochs < 1) t.fail("epochs", "epochs must be >= 1");
    cfg.train.batch_size = t.get_or<int64_t>("batch_size", 32);
    if (cfg.train.batch_size < 1) t.fail("batch_size", "batch_size must be >= 1");
    cfg.train.lr = t.get_or<double>("lr", 1e-4);
    if (cfg.train.lr < 0) t.fail("lr", "lr must be >= 0");
    cfg.train.seed = t.get<uint64_t>("seed");
    cfg.train.clip_norm = t.get_or<double>("clip_norm", 0.0);
  }

  cfg.out = root.get_or<std::string>("out", "run");
  if (!cfg.out.empty() && !std::filesystem::path(cfg.out).is_absolute() && !out_root.empty())
    cfg.out = (std::filesystem::path(out_root) / cfg.out).string();
  return cfg;
}

json config_to_json_obj(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = {{"dir", cfg.dataset.dir},   {"cache", cfg.dataset.cache},
                  {"k", cfg.dataset.k},       {"n_test", cfg.dataset.n_test},
                  {"n_train", cfg.dataset.n_train}, {"n_val", cfg.dataset.n_val},
                  {"max_sources", cfg.dataset.max_sources}};
  j["operator"] = {{"kind", cfg.train.op.kind == MeasurementOperator::Kind::kGaussian ? "gaussian"
                                                                                      : "dct"},
                   {"rate", cfg.train.op.rate},
                   {"m", cfg.train.op.m},
                   {"seed", cfg.train.op.seed}};
  j["noise"] = {{"sigma", cfg.train.noise.sigma}, {"seed", cfg.train.noise.seed}};
  j["plan"] = {{"algorithm", algorithm_id(cfg.train.plan.algorithm)},
               {"steps", cfg.train.plan.steps},
               {"residual", cfg.train.plan.residual},
               {"tie_weights", cfg.train.plan.tie_weights},
               {"amp_probe_eps", cfg.train.plan.amp_probe_eps},
               {"depth", cfg.train.plan.projector.depth_L},
               {"channels", cfg.train.plan.projector.channels},
               {"kernel", cfg.train.plan.projector.kernel}};
  j["loss"] = cfg.train.loss.id();
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"lr", cfg.train.lr},
                {"seed", cfg.train.seed},
                {"clip_norm", cfg.train.clip_norm}};
  j["out"] = cfg.out;
  return j;
}

std::string csv_from_report(const MetricsReport& report, bool per_image) {
  std::ostringstream os;
  if (per_image) {
    os << "index,psnr\n";
    for (size_t i = 0; i < report.per_image.size(); ++i)
      os << i << "," << format_double(report.per_image[i]) << "\n";
  } else {
    os << "step,psnr\n";
    for (size_t i = 0; i < report.curve.size(); ++i)
      os << (i + 1) << "," << format_double(report.curve[i]) << "\n";
  }
  return os.str();
}

void write_report_files(const std::filesystem::path& dir, const MetricsReport& report,
                        const Checkpoint* ckpt) {
  json rj;
  rj["mean_psnr"] = report.mean_psnr;
  rj["curve"] = report.curve;
  rj["per_image_count"] = report.per_image.size();
  rj["wall_seconds"] = report.wall_seconds;
  rj["config"] = json::parse(report.config_json);
  if (ckpt != nullptr) {
    rj["best_epoch"] = ckpt->best_epoch;
    rj["val_history"] = ckpt->val_history;
    rj["train_history"] = ckpt->train_history;
    rj["operator_sidecar"] = json::parse(ckpt->operator_sidecar);
  }
  write_file(dir / "report.json", rj.dump(2) + "\n");
  write_file(dir / "per_image.csv", csv_from_report(report, true));
  write_file(dir / "curve.csv", csv_from_report(report, false));
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text,
                                                  const std::string& out_root) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j, out_root);
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path,
                                             const std::string& out_root) {
  return from_json_text(read_file(path), out_root);
}

std::string ExperimentConfig::to_json() const { return config_to_json_obj(*this).dump(2) + "\n"; }

Dataset load_dataset(const DatasetSpec& spec) {
  Dataset ds;
  const bool has_cache = !spec.cache.empty() && std::filesystem::exists(spec.cache);
  if (has_cache) {
    ds = load_cache(spec.cache);
    check_config(ds.k == spec.k, "dataset cache resolution " + std::to_string(ds.k) +
                                     " does not match configured k=" + std::to_string(spec.k));
  } else {
    check_config(!spec.dir.empty(), "dataset.dir is required when no cache file exists");
    ds = ingest(spec.dir, spec.k, IngestLimits{spec.max_sources});
    if (!spec.cache.empty()) {
      // Write-then-rename so concurrent grid cells never read a partial cache.
      const std::filesystem::path tmp =
          spec.cache + ".tmp." + std::to_string(::getpid()) + "." +
          std::to_string(reinterpret_cast<uintptr_t>(&ds) & 0xffff);
      save_cache(ds, tmp);
      std::error_code ec;
      std::filesystem::rename(tmp, spec.cache, ec);
      if (ec) std::filesystem::remove(tmp, ec);
    }
  }
  split(ds, spec.n_test, spec.n_train, spec.n_val);
  return ds;
}

RunResult run_experiment(const ExperimentConfig& config) {
  Dataset dataset = load_dataset(config.dataset);
  std::filesystem::create_directories(config.out);
  write_file(std::filesystem::path(config.out) / "config.json", config.to_json());

  Checkpoint ckpt = train(config.train, dataset);
  save_checkpoint(ckpt, std::filesystem::path(config.out) / "checkpoint.dmck");

  MetricsReport report = evaluate(ckpt, dataset, Split::kTest);
  write_report_files(config.out, report, &ckpt);

  RunResult result;
  result.run_dir = config.out;
  result.mean_psnr = report.mean_psnr;
  result.curve = report.curve;
  return result;
}

RunResult evaluate_checkpoint_files(const std::filesystem::path& checkpoint_path,
                                    const DatasetSpec& dataset_spec, Split split,
                                    const std::filesystem::path& out_dir) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  Dataset dataset = load_dataset(dataset_spec);
  MetricsReport report = evaluate(ckpt, dataset, split);
  std::filesystem::create_directories(out_dir);
  write_report_files(out_dir, report, &ckpt);
  RunResult result;
  result.run_dir = out_dir;
  result.mean_psnr = report.mean_psnr;
  result.curve = report.curve;
  return result;
}

// ---- grids -------------------------------------------------------------------

namespace {

void set_by_path(json& j, const std::string& path, const json& value) {
  json* cur = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

std::string value_slug(const json& v) {
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  return s;
}

}  // namespace

GridResult run_grid(const std::filesystem::path& grid_file, const std::string& out_root, int jobs,
                    int64_t seed_override) {
  json spec;
  try {
    spec = json::parse(read_file(grid_file));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grid file is not valid JSON: ") + e.what());
  }
  if (!spec.contains("base")) throw ConfigError("base: missing required key");
  if (!spec.contains("axes") || !spec["axes"].is_object())
    throw ConfigError("axes: missing or not an object");
  const std::string grid_out_rel = spec.value("out", std::string("grid"));
  std::filesystem::path grid_out = grid_out_rel;
  if (!grid_out.is_absolute() && !out_root.empty()) grid_out = std::filesystem::path(out_root) / grid_out;

  std::vector<std::string> axis_paths;
  std::vector<std::vector<json>> axis_values;
  for (const auto& [key, values] : spec["axes"].items()) {  // nlohmann iterates sorted keys
    if (!values.is_array() || values.empty())
      throw ConfigError("axes." + key + ": must be a non-empty array");
    axis_paths.push_back(key);
    axis_values.emplace_back(values.begin(), values.end());
  }

  int64_t total = 1;
  for (const auto& vals : axis_values) total *= static_cast<int64_t>(vals.size());

  struct Cell {
    json config;
    std::string name;
    std::vector<std::string> axis_values;
  };
  std::vector<Cell> cells;
  cells.reserve(static_cast<size_t>(total));
  for (int64_t idx = 0; idx < total; ++idx) {
    json cfg = spec["base"];
    int64_t rem = idx;
    std::string slug;
    std::vector<std::string> cell_axis_values;
    for (size_t a = axis_paths.size(); a-- > 0;) {
      const auto& vals = axis_values[a];
      const size_t pick = static_cast<size_t>(rem % static_cast<int64_t>(vals.size()));
      rem /= static_cast<int64_t>(vals.size());
      set_by_path(cfg, axis_paths[a], vals[pick]);
      cell_axis_values.insert(cell_axis_values.begin(),
                              vals[pick].is_string() ? vals[pick].get<std::string>()
                                                     : vals[pick].dump());
      slug = "__" + value_slug(vals[pick]) + slug;
    }
    // Per-cell seed: base train seed + cell index (unless a seed axis set it).
    const uint64_t base_seed = seed_override >= 0
                                   ? static_cast<uint64_t>(seed_override)
                                   : cfg.at("train").at("seed").get<uint64_t>();
    bool seed_is_axis = false;
    for (const auto& p : axis_paths)
      if (p == "train.seed") seed_is_axis = true;
    if (!seed_is_axis) cfg["train"]["seed"] = base_seed + static_cast<uint64_t>(idx);

    char cellname[64];
    std::snprintf(cellname, sizeof(cellname), "cell_%04lld", static_cast<long long>(idx));
    cfg["out"] = (grid_out / (std::string(cellname) + slug)).string();
    cells.push_back({std::move(cfg), cellname, std::move(cell_axis_values)});
  }

  GridResult result;
  result.axis_paths = axis_paths;
  result.cells.resize(cells.size());

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      GridCellResult& out = result.cells[i];
      out.cell = cells[i].name;
      out.axis_values = cells[i].axis_values;
      try {
        ExperimentConfig cfg = parse_config(cells[i].config, "");
        RunResult run = run_experiment(cfg);
        out.mean_psnr = run.mean_psnr;
      } catch (const std::exception& e) {
        out.failed = true;
        out.error = e.what();
      }
    }
  };
  const int nthreads = std::max(1, jobs);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nthreads));
  for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::filesystem::create_directories(grid_out);
  std::ostringstream table;
  table << "cell";
  for (const auto& p : axis_paths) table << "," << p;
  table << ",mean_psnr,status\n";
  for (const GridCellResult& cell : result.cells) {
    table << cell.cell;
    for (const auto& v : cell.axis_values) table << "," << v;
    if (cell.failed) {
      std::string msg = cell.error;
      for (char& c : msg)
        if (c == ',' || c == '\n') c = ';';
      table << ",,failed: " << msg << "\n";
    } else {
      table << "," << format_double(cell.mean_psnr) << ",ok\n";
    }
  }
  result.table_path = grid_out / "table.csv";
  write_file(result.table_path, table.str());
  return result;
}

// ---- curves ------------------------------------------------------------------

std::string curves_csv(std::span<const std::string> run_dirs) {
  std::ostringstream os;
  os << "run,rate,step,psnr\n";
  for (const std::string& dir : run_dirs) {
    const std::filesystem::path report_path = std::filesystem::path(dir) / "report.json";
    if (!std::filesystem::exists(report_path))
      throw IoError("curves: missing report " + report_path.string());
    json report = json::parse(read_file(report_path));
    const json& op = report.at("config").at("operator");
    double rate = op.value("rate", 0.0);
    const auto m = op.value("m", static_cast<int64_t>(0));
    if (m > 0) {
      const auto k = report.at("config").at("dataset").at("k").get<int64_t>();
      rate = static_cast<double>(m) / static_cast<double>(k * k);
    }
    const std::string run_id = std::filesystem::path(dir).filename().string();
    const auto curve = report.at("curve").get<std::vector<double>>();
    for (size_t s = 0; s < curve.size(); ++s)
      os << run_id << "," << format_double(rate) << "," << (s + 1) << ","
         << format_double(curve[s]) << "\n";
  }
  return os.str();
}

// ---- input SNR ----------------------------------------------------------------

SnrTable snr_table(const ExperimentConfig& config, std::span<const double> rates,
                   std::span<const double> sigmas) {
  check_config(!rates.empty() && !sigmas.empty(), "snr: need at least one rate and one sigma");
  Dataset dataset = load_dataset(config.dataset);
  check_config(dataset.n_test > 0, "snr: dataset has no test split");
  std::vector<Tensor> images(
      dataset.tiles.begin() + dataset.split_begin(Split::kTest),
      dataset.tiles.begin() + dataset.split_begin(Split::kTest) + dataset.n_test);

  SnrTable table;
  table.rates.assign(rates.begin(), rates.end());
  table.sigmas.assign(sigmas.begin(), sigmas.end());
  for (double rate : rates) {
    OperatorSpec spec = config.train.op;
    spec.m = 0;
    spec.rate = rate;
    OperatorPtr op = build_operator(spec, dataset.k);
    std::vector<double> row;
    for (double sigma : sigmas) {
      check_config(sigma > 0.0, "snr: sigma values must be > 0");
      row.push_back(input_snr(*op, images, NoiseModel{sigma, config.train.noise.seed}));
    }
    table.values_db.push_back(std::move(row));
  }
  return table;
}

std::string snr_table_text(const SnrTable& table) {
  std::ostringstream os;
  os << "rate    ";
  for (double s : table.sigmas) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sigma=%-8g", s);
    os << buf;
  }
  os << "\n";
  for (size_t r = 0; r < table.rates.size(); ++r) {
    char head[32];
    std::snprintf(head, sizeof(head), "%-8g", table.rates[r]);
    os << head;
    for (double v : table.values_db[r]) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%-14.2f", v);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

std::string snr_table_csv(const SnrTable& table) {
  std::ostringstream os;
  os << "rate";
  for (double s : table.sigmas) os << ",sigma_" << format_double(s);
  os << "\n";
  for (size_t r = 0; r < table.rates.size(); ++r) {
    os << format_double(table.rates[r]);
    for (double v : table.values_db[r]) os << "," << format_double(v);
    os << "\n";
  }
  return os.str();
}

}  // namespace demun
