#pragma once

// Versioned binary checkpoints. All integers are 64-bit little-endian, reals
// are IEEE-754 binary64 little-endian, strings are length-prefixed.
//
//   magic "MTCKPT01" | u32 format version | string kind | body
//
//   microlm body:   ArchConfig (6 x u64) | tensor group
//   tensor group:   u64 count | count x (string name | u64 rows | u64 cols | rows*cols f64)
//   metatuner body: pipeline + LoRA config | generator arch | actor arch |
//                   u64 section count | count x (string section | tensor group)
//                   sections: phi_s, phi_p, snapshot, phi_q, actor[, param_encoder]
//   lora body:      u64 layers | tensor group (layers.<i>.theta_b / theta_a)
//
// Loaders validate every tensor's shape against the declared configuration.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "metatuner/adapters.hpp"
#include "metatuner/microlm.hpp"
#include "metatuner/pipeline.hpp"

namespace metatuner {

inline constexpr char kCheckpointMagic[8] = {'M', 'T', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_microlm(std::ostream& os, const MicroLMWeights& w);
MicroLMWeights read_microlm(std::istream& is);

void write_metatuner(std::ostream& os, const MetaTunerModel& model);
MetaTunerModel read_metatuner(std::istream& is);

void write_lora_factors(std::ostream& os, const LoraFactors& factors);
LoraFactors read_lora_factors(std::istream& is);

void save_microlm(const std::filesystem::path& path, const MicroLMWeights& w);
MicroLMWeights load_microlm(const std::filesystem::path& path);
void save_metatuner(const std::filesystem::path& path, const MetaTunerModel& model);
MetaTunerModel load_metatuner(const std::filesystem::path& path);

/// Reads only the kind string ("microlm", "metatuner", "lora") of a checkpoint.
std::string checkpoint_kind(const std::filesystem::path& path);

}  // namespace metatuner
