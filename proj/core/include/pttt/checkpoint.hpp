#pragma once

#include <optional>
#include <string>

#include "pttt/backbone.hpp"
#include "pttt/heads.hpp"

namespace pttt {

// Self-describing binary container, little-endian throughout:
//   magic "PTTTCKPT" | u32 format_version | u32 section_count
//   section: u32 name_len, name | u32 meta_len, meta JSON | u32 tensor_count
//   tensor:  u32 name_len, name | u8 dtype (0 = f32) | u32 rows | u32 cols
//            | rows*cols*4 bytes row-major
//   trailer: 32-byte SHA-256 of everything before it
// Sections: "backbone" (meta = ModelConfig), optional "classifier_head".

inline constexpr char kCheckpointMagic[8] = {'P', 'T', 'T', 'T',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

void save_checkpoint(const std::string& path,
                     const BackboneWeights<float>& weights,
                     const ClassifierHead* head = nullptr);

struct LoadedCheckpoint {
  BackboneWeights<float> weights;
  std::optional<ClassifierHead> head;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Hex SHA-256 of the file's full contents; recorded in run summaries.
std::string file_sha256(const std::string& path);

// Guarded assignment: shapes (via config) must match the live model.
template <typename S>
void restore(BackboneWeights<S>& model, const BackboneWeights<S>& snapshot) {
  if (!(model.config == snapshot.config)) {
    throw std::invalid_argument(
        "snapshot shape mismatch: model config differs");
  }
  model = snapshot;
}

}  // namespace pttt
