#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "demun/tensor.hpp"

namespace demun {

struct TileRef {
  std::string file;   // source file name (no directory)
  int32_t tile = 0;   // 0..8, row-major within the 3x3 crop grid
};

enum class Split { kTest, kTrain, kVal };

/// Tiles in [0,1] at resolution k, in deterministic order (lexicographic
/// source files x row-major tiles), plus contiguous split ranges allotted
/// test-first.
struct Dataset {
  int64_t k = 0;
  std::vector<Tensor> tiles;     // each [k*k]
  std::vector<TileRef> manifest;
  int64_t n_test = 0, n_train = 0, n_val = 0;

  int64_t total() const { return static_cast<int64_t>(tiles.size()); }
  int64_t n() const { return k * k; }

  int64_t split_begin(Split s) const;
  int64_t split_size(Split s) const;
};

struct IngestLimits {
  int64_t max_sources = 0;  // 0 = no limit
};

/// Reads every .png/.pgm in dir (lexicographic by file name), converts to
/// grayscale, center-crops 3k x 3k, splits into 9 k x k tiles (row-major)
/// and scales by 1/255. Undersized images are skipped with a warning on
/// stderr; an empty yield is an error.
Dataset ingest(const std::filesystem::path& dir, int64_t k, const IngestLimits& limits = {});

/// Allots contiguous disjoint ranges in manifest order: test, then train,
/// then validation.
void split(Dataset& dataset, int64_t n_test, int64_t n_train, int64_t n_val);

/// Versioned binary cache of a dataset for fast reload.
void save_cache(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_cache(const std::filesystem::path& path);

}  // namespace demun
