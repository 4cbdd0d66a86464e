#include "demun/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>

#include "demun/image_io.hpp"

namespace demun {

int64_t Dataset::split_begin(Split s) const {
  switch (s) {
    case Split::kTest: return 0;
    case Split::kTrain: return n_test;
    case Split::kVal: return n_test + n_train;
  }
  return 0;
}

int64_t Dataset::split_size(Split s) const {
  switch (s) {
    case Split::kTest: return n_test;
    case Split::kTrain: return n_train;
    case Split::kVal: return n_val;
  }
  return 0;
}

Dataset ingest(const std::filesystem::path& dir, int64_t k, const IngestLimits& limits) {
  check_config(k >= 1, "ingest: resolution k must be >= 1");
  if (!std::filesystem::is_directory(dir)) throw IoError("ingest: not a directory: " + dir.string());

  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".pgm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) {
    return a.filename().string() < b.filename().string();
  });

  Dataset ds;
  ds.k = k;
  const int64_t crop = 3 * k;
  int64_t used = 0;
  for (const auto& path : files) {
    if (limits.max_sources > 0 && used >= limits.max_sources) break;
    GrayImage img = load_image(path);
    if (img.width < crop || img.height < crop) {
      std::cerr << "ingest: skipping " << path.filename().string() << " (" << img.width << "x"
                << img.height << " < " << crop << "x" << crop << ")\n";
      continue;
    }
    const int64_t oy = (img.height - crop) / 2;
    const int64_t ox = (img.width - crop) / 2;
    for (int64_t tr = 0; tr < 3; ++tr) {
      for (int64_t tc = 0; tc < 3; ++tc) {
        Tensor tile({k * k});
        for (int64_t r = 0; r < k; ++r)
          for (int64_t c = 0; c < k; ++c)
            tile[r * k + c] = img.at(oy + tr * k + r, ox + tc * k + c) / 255.0;
        ds.tiles.push_back(std::move(tile));
        ds.manifest.push_back({path.filename().string(), static_cast<int32_t>(tr * 3 + tc)});
      }
    }
    ++used;
  }
  if (ds.tiles.empty())
    throw IoError("ingest: no usable images (>= " + std::to_string(crop) + "x" +
                  std::to_string(crop) + ") in " + dir.string());
  return ds;
}

void split(Dataset& dataset, int64_t n_test, int64_t n_train, int64_t n_val) {
  check_config(n_test >= 0 && n_train >= 0 && n_val >= 0, "split: counts must be >= 0");
  check_config(n_test + n_train + n_val <= dataset.total(),
               "split: " + std::to_string(n_test + n_train + n_val) + " tiles requested, only " +
                   std::to_string(dataset.total()) + " available");
  dataset.n_test = n_test;
  dataset.n_train = n_train;
  dataset.n_val = n_val;
}

namespace {

constexpr char kCacheMagic[8] = {'D', 'M', 'N', 'D', 'S', '0', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_cache(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCacheMagic, sizeof(kCacheMagic));
  write_pod<uint64_t>(out, static_cast<uint64_t>(dataset.k));
  write_pod<uint64_t>(out, static_cast<uint64_t>(dataset.total()));
  write_pod<uint64_t>(out, static_cast<uint64_t>(dataset.n_test));
  write_pod<uint64_t>(out, static_cast<uint64_t>(dataset.n_train));
  write_pod<uint64_t>(out, static_cast<uint64_t>(dataset.n_val));
  for (const TileRef& ref : dataset.manifest) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(ref.file.size()));
    out.write(ref.file.data(), static_cast<std::streamsize>(ref.file.size()));
    write_pod<int32_t>(out, ref.tile);
  }
  for (const Tensor& tile : dataset.tiles) {
    out.write(reinterpret_cast<const char*>(tile.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(tile.numel())));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Dataset load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0)
    throw IoError(path.string() + ": not a dataset cache file");
  Dataset ds;
  ds.k = static_cast<int64_t>(read_pod<uint64_t>(in));
  const auto count = read_pod<uint64_t>(in);
  ds.n_test = static_cast<int64_t>(read_pod<uint64_t>(in));
  ds.n_train = static_cast<int64_t>(read_pod<uint64_t>(in));
  ds.n_val = static_cast<int64_t>(read_pod<uint64_t>(in));
  ds.manifest.resize(count);
  for (uint64_t i = 0; i < count; ++i) {
    const auto len = read_pod<uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    ds.manifest[i].file = std::move(name);
    ds.manifest[i].tile = read_pod<int32_t>(in);
  }
  const int64_t n = ds.k * ds.k;
  ds.tiles.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Tensor tile({n});
    in.read(reinterpret_cast<char*>(tile.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(n)));
    ds.tiles.push_back(std::move(tile));
  }
  if (!in) throw IoError(path.string() + ": truncated dataset cache");
  return ds;
}

}  // namespace demun
