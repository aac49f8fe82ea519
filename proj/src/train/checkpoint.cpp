#include "sdclip/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sdclip/rng.hpp"

namespace sdclip {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

struct Entry {
  std::string name;
  Shape shape;
  std::vector<float>* storage;
};

// Fixed enumeration order shared by save and load.
std::vector<Entry> enumerate(ModelState& state) {
  std::vector<Entry> out;
  auto add_params = [&out](const ParamList<float>& params) {
    for (const auto& p : params) {
      out.push_back({p.name, p.tensor.shape(), &p.tensor.node()->data});
    }
  };
  const ParamList<float> trainable = state.trainable();
  add_params(trainable);
  add_params(state.image_teacher_params());
  add_params(state.text_teacher_params());
  out.push_back({"center", Shape{state.center.values().size()}, &state.center.values()});
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    out.push_back({"optim/m/" + trainable[i].name, trainable[i].tensor.shape(),
                   &state.optimizer.first_moments()[i]});
    out.push_back({"optim/v/" + trainable[i].name, trainable[i].tensor.shape(),
                   &state.optimizer.second_moments()[i]});
  }
  return out;
}

std::string crc_hex(const std::vector<char>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc;
  return os.str();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& config,
                     const ModelState& state) {
  std::filesystem::create_directories(dir);
  auto& mutable_state = const_cast<ModelState&>(state);  // enumerate() only reads here
  const auto entries = enumerate(mutable_state);

  std::vector<char> bytes;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    const std::size_t offset = bytes.size();
    const std::size_t count = e.storage->size();
    bytes.resize(offset + count * sizeof(float));
    std::memcpy(bytes.data() + offset, e.storage->data(), count * sizeof(float));
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}, {"count", count}});
  }

  nlohmann::ordered_json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["step"] = state.step;
  manifest["optimizer_steps"] = state.optimizer.steps();
  const std::size_t spe = config.steps_per_epoch();
  manifest["epoch"] = spe ? state.step / spe : 0;
  manifest["lambda_at_epoch"] = config.lambda_schedule().at(spe ? state.step / spe : 0, config.epochs);
  manifest["rng_algorithm"] = kRngAlgorithm;
  manifest["config"] = to_json(config);
  manifest["weights_bytes"] = bytes.size();
  manifest["weights_crc32"] = crc_hex(bytes);
  manifest["tensors"] = tensors;

  {
    std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing " + (dir / "weights.bin").string());
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw CheckpointError("failed writing " + (dir / "manifest.json").string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw CheckpointError("missing " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError("unreadable manifest: " + std::string(e.what()));
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }

  std::ifstream wf(dir / "weights.bin", std::ios::binary);
  if (!wf) throw CheckpointError("missing " + (dir / "weights.bin").string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(wf)), std::istreambuf_iterator<char>());
  const auto expected_bytes = manifest.at("weights_bytes").get<std::size_t>();
  if (bytes.size() != expected_bytes) {
    throw CheckpointError("weights.bin has " + std::to_string(bytes.size()) +
                          " bytes, manifest expects " + std::to_string(expected_bytes));
  }
  const std::string crc = crc_hex(bytes);
  if (crc != manifest.at("weights_crc32").get<std::string>()) {
    throw CheckpointError("weights.bin checksum mismatch");
  }

  LoadedCheckpoint loaded{train_config_from_json(manifest.at("config")),
                          init_model(train_config_from_json(manifest.at("config"))), crc};
  auto entries = enumerate(loaded.state);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != entries.size()) {
    throw CheckpointError("manifest lists " + std::to_string(tensors.size()) +
                          " tensors, model expects " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& t = tensors[i];
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (name != entries[i].name || shape != entries[i].shape ||
        count != entries[i].storage->size()) {
      throw CheckpointError("tensor " + std::to_string(i) + " '" + name + "' " +
                            shape_str(shape) + " does not match model tensor '" +
                            entries[i].name + "' " + shape_str(entries[i].shape));
    }
    if (offset + count * sizeof(float) > bytes.size()) {
      throw CheckpointError("tensor '" + name + "' extends past the end of weights.bin");
    }
    std::memcpy(entries[i].storage->data(), bytes.data() + offset, count * sizeof(float));
  }
  loaded.state.step = manifest.at("step").get<std::size_t>();
  loaded.state.optimizer.set_steps(manifest.at("optimizer_steps").get<std::size_t>());
  return loaded;
}

}  // namespace sdclip
