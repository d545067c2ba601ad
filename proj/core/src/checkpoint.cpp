#include "pttt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "pttt/sha256.hpp"

namespace pttt {

namespace {

void append_u32(std::string& out, std::uint32_t value) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

void append_u8(std::string& out, std::uint8_t value) {
  out.push_back(static_cast<char>(value));
}

void append_string(std::string& out, const std::string& value) {
  append_u32(out, static_cast<std::uint32_t>(value.size()));
  out.append(value);
}

void append_tensor(std::string& out, const std::string& name,
                   const Mat<float>& tensor) {
  append_string(out, name);
  append_u8(out, 0);
  append_u32(out, static_cast<std::uint32_t>(tensor.rows()));
  append_u32(out, static_cast<std::uint32_t>(tensor.cols()));
  const std::size_t bytes = sizeof(float) * static_cast<std::size_t>(
                                                tensor.rows() * tensor.cols());
  const std::size_t offset = out.size();
  out.resize(out.size() + bytes);
  std::memcpy(out.data() + offset, tensor.data(), bytes);
}

class Reader {
 public:
  Reader(const std::string& data, std::size_t end) : data_(data), end_(end) {}

  std::uint32_t read_u32() {
    need(4);
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
      value |= std::uint32_t(static_cast<unsigned char>(data_[pos_ + i]))
               << (8 * i);
    }
    pos_ += 4;
    return value;
  }

  std::uint8_t read_u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

  std::string read_string() {
    const std::uint32_t len = read_u32();
    need(len);
    std::string value = data_.substr(pos_, len);
    pos_ += len;
    return value;
  }

  Mat<float> read_tensor_data(std::uint32_t rows, std::uint32_t cols) {
    const std::size_t bytes = sizeof(float) * std::size_t(rows) * cols;
    need(bytes);
    Mat<float> tensor(rows, cols);
    std::memcpy(tensor.data(), data_.data() + pos_, bytes);
    pos_ += bytes;
    return tensor;
  }

  bool exhausted() const { return pos_ == end_; }

 private:
  void need(std::size_t bytes) {
    if (pos_ + bytes > end_) {
      throw std::runtime_error("truncated checkpoint");
    }
  }

  const std::string& data_;
  std::size_t pos_ = 8 + 4 + 4;  // past magic, version, section count
  std::size_t end_;
};

nlohmann::json config_to_json(const ModelConfig& config) {
  return {{"num_layers", config.num_layers},   {"model_dim", config.model_dim},
          {"num_heads", config.num_heads},     {"ffn_dim", config.ffn_dim},
          {"max_positions", config.max_positions},
          {"vocab_size", config.vocab_size},   {"seed", config.seed}};
}

ModelConfig config_from_json(const nlohmann::json& meta) {
  ModelConfig config;
  config.num_layers = meta.at("num_layers").get<int>();
  config.model_dim = meta.at("model_dim").get<int>();
  config.num_heads = meta.at("num_heads").get<int>();
  config.ffn_dim = meta.at("ffn_dim").get<int>();
  config.max_positions = meta.at("max_positions").get<int>();
  config.vocab_size = meta.at("vocab_size").get<int>();
  config.seed = meta.at("seed").get<std::uint64_t>();
  return config;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const BackboneWeights<float>& weights,
                     const ClassifierHead* head) {
  std::string payload;
  payload.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  append_u32(payload, kCheckpointFormatVersion);
  append_u32(payload, head != nullptr ? 2 : 1);

  append_string(payload, "backbone");
  append_string(payload, config_to_json(weights.config).dump());
  std::uint32_t tensor_count = 0;
  weights.visit([&tensor_count](const std::string&, const Mat<float>&) {
    ++tensor_count;
  });
  append_u32(payload, tensor_count);
  weights.visit([&payload](const std::string& name, const Mat<float>& tensor) {
    append_tensor(payload, name, tensor);
  });

  if (head != nullptr) {
    append_string(payload, "classifier_head");
    const nlohmann::json meta = {
        {"num_classes", head->num_classes()},
        {"model_dim", static_cast<int>(head->weight.cols())}};
    append_string(payload, meta.dump());
    append_u32(payload, 2);
    append_tensor(payload, "weight", head->weight);
    append_tensor(payload, "bias", head->bias);
  }

  Sha256 hasher;
  hasher.update(payload.data(), payload.size());
  const auto digest = hasher.finish();
  payload.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open checkpoint path for writing: " +
                             path);
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) {
    throw std::runtime_error("checkpoint write failed: " + path);
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open checkpoint: " + path);
  }
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kCheckpointMagic) + 8 + 32) {
    throw std::runtime_error("truncated checkpoint");
  }
  if (std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) !=
      0) {
    throw std::runtime_error("not a checkpoint file: bad magic");
  }

  const std::size_t payload_end = data.size() - 32;
  Sha256 hasher;
  hasher.update(data.data(), payload_end);
  const auto digest = hasher.finish();
  if (std::memcmp(digest.data(), data.data() + payload_end, 32) != 0) {
    throw std::runtime_error("checkpoint checksum mismatch");
  }

  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) {
    version |= std::uint32_t(static_cast<unsigned char>(data[8 + i]))
               << (8 * i);
  }
  if (version != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format_version " +
                             std::to_string(version));
  }
  std::uint32_t section_count = 0;
  for (int i = 0; i < 4; ++i) {
    section_count |= std::uint32_t(static_cast<unsigned char>(data[12 + i]))
                     << (8 * i);
  }

  Reader reader(data, payload_end);
  LoadedCheckpoint loaded;
  bool saw_backbone = false;
  for (std::uint32_t s = 0; s < section_count; ++s) {
    const std::string section_name = reader.read_string();
    const std::string meta_text = reader.read_string();
    const std::uint32_t tensor_count = reader.read_u32();

    if (section_name == "backbone") {
      const ModelConfig config =
          config_from_json(nlohmann::json::parse(meta_text));
      config.validate();
      // Allocate the expected layout, then demand exact name/shape agreement.
      BackboneWeights<float> weights = init_backbone<float>(config);
      std::uint32_t seen = 0;
      weights.visit([&](const std::string& name, Mat<float>& tensor) {
        if (seen >= tensor_count) {
          throw std::runtime_error("checkpoint missing tensor " + name);
        }
        ++seen;
        const std::string stored_name = reader.read_string();
        if (stored_name != name) {
          throw std::runtime_error("checkpoint tensor order mismatch: got " +
                                   stored_name + ", expected " + name);
        }
        const std::uint8_t dtype = reader.read_u8();
        if (dtype != 0) {
          throw std::runtime_error("unsupported tensor dtype in checkpoint");
        }
        const std::uint32_t rows = reader.read_u32();
        const std::uint32_t cols = reader.read_u32();
        if (rows != static_cast<std::uint32_t>(tensor.rows()) ||
            cols != static_cast<std::uint32_t>(tensor.cols())) {
          throw std::runtime_error(
              "checkpoint shape mismatch for " + name + ": stored " +
              std::to_string(rows) + "x" + std::to_string(cols) +
              ", config implies " + std::to_string(tensor.rows()) + "x" +
              std::to_string(tensor.cols()));
        }
        tensor = reader.read_tensor_data(rows, cols);
      });
      if (seen != tensor_count) {
        throw std::runtime_error("checkpoint has extra backbone tensors");
      }
      loaded.weights = std::move(weights);
      saw_backbone = true;
    } else if (section_name == "classifier_head") {
      if (tensor_count != 2) {
        throw std::runtime_error("classifier_head section wants 2 tensors");
      }
      ClassifierHead head;
      for (int t = 0; t < 2; ++t) {
        const std::string tensor_name = reader.read_string();
        const std::uint8_t dtype = reader.read_u8();
        if (dtype != 0) {
          throw std::runtime_error("unsupported tensor dtype in checkpoint");
        }
        const std::uint32_t rows = reader.read_u32();
        const std::uint32_t cols = reader.read_u32();
        Mat<float> tensor = reader.read_tensor_data(rows, cols);
        if (tensor_name == "weight") {
          head.weight = std::move(tensor);
        } else if (tensor_name == "bias") {
          head.bias = std::move(tensor);
        } else {
          throw std::runtime_error("unknown classifier_head tensor " +
                                   tensor_name);
        }
      }
      loaded.head = std::move(head);
    } else {
      throw std::runtime_error("unknown checkpoint section: " + section_name);
    }
  }
  if (!saw_backbone) {
    throw std::runtime_error("checkpoint has no backbone section");
  }
  if (!reader.exhausted()) {
    throw std::runtime_error("trailing bytes after checkpoint sections");
  }
  return loaded;
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open file for hashing: " + path);
  }
  Sha256 hasher;
  char buffer[65536];
  while (in) {
    in.read(buffer, sizeof(buffer));
    hasher.update(buffer, static_cast<std::size_t>(in.gcount()));
  }
  return to_hex(hasher.finish());
}

}  // namespace pttt
