#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "demun/train.hpp"

namespace demun {

using json = nlohmann::json;

namespace {

constexpr char kCkptMagic[8] = {'D', 'M', 'N', 'C', 'K', 'P', '0', '1'};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  json header;
  header["version"] = ckpt.version;
  header["config"] = ckpt.config_json;
  header["operator"] = ckpt.operator_sidecar;
  header["best_epoch"] = ckpt.best_epoch;
  header["val_history"] = ckpt.val_history;
  header["train_history"] = ckpt.train_history;
  json tensors = json::array();
  for (const NamedBlob& blob : ckpt.blobs) {
    tensors.push_back({{"name", blob.name},
                       {"shape", blob.tensor.shape()},
                       {"trainable", blob.trainable}});
  }
  header["tensors"] = std::move(tensors);
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCkptMagic, sizeof(kCkptMagic));
  const uint64_t len = header_text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_text.data(), static_cast<std::streamsize>(len));
  for (const NamedBlob& blob : ckpt.blobs) {
    out.write(reinterpret_cast<const char*>(blob.tensor.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(blob.tensor.numel())));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw IoError(path.string() + ": not a checkpoint file");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header_text(len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path.string() + ": truncated checkpoint header");

  json header = json::parse(header_text);
  Checkpoint ckpt;
  ckpt.version = header.at("version").get<uint32_t>();
  if (ckpt.version != 1)
    throw IoError(path.string() + ": unsupported checkpoint version " +
                  std::to_string(ckpt.version));
  ckpt.config_json = header.at("config").get<std::string>();
  ckpt.operator_sidecar = header.at("operator").get<std::string>();
  ckpt.best_epoch = header.at("best_epoch").get<int64_t>();
  ckpt.val_history = header.at("val_history").get<std::vector<double>>();
  ckpt.train_history = header.at("train_history").get<std::vector<double>>();

  for (const json& t : header.at("tensors")) {
    NamedBlob blob;
    blob.name = t.at("name").get<std::string>();
    blob.trainable = t.at("trainable").get<bool>();
    blob.tensor = Tensor(t.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(blob.tensor.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(blob.tensor.numel())));
    ckpt.blobs.push_back(std::move(blob));
  }
  if (!in) throw IoError(path.string() + ": truncated checkpoint payload");
  return ckpt;
}

}  // namespace demun
