#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace unihema {

enum class UpsampleMode { kBilinear, kLearnable };

std::string to_string(UpsampleMode mode);
UpsampleMode upsample_mode_from_string(const std::string& s);

// Architecture hyper-parameters. Everything here changes parameter shapes or
// wiring and is therefore recorded in checkpoints.
struct ModelConfig {
  std::size_t model_dim = 64;          // M
  std::size_t text_dim = 64;           // N
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;      // image encoder
  std::size_t decoder_layers = 2;      // image decoder
  std::size_t text_encoder_layers = 2;
  std::size_t text_decoder_layers = 2;
  std::size_t num_queries = 20;        // K = D_t
  std::size_t fusion_queries = 16;     // L_f
  std::size_t num_classes = 4;
  std::size_t num_morph = 6;
  std::vector<std::size_t> backbone_channels{32, 64, 128};
  std::size_t stem_stride = 4;
  std::size_t mlp_ratio = 2;
  std::size_t mask_dim = 64;           // C, channels of G_proj
  std::size_t upsampler_hidden = 8;
  bool integrate_backbone = true;      // classifier sees pooled top backbone level
  std::size_t vocab_size = 0;

  // Runtime switch, not part of the architecture.
  UpsampleMode upsampler = UpsampleMode::kLearnable;

  void validate() const;
  std::size_t total_stride() const;
  std::vector<std::pair<std::string, double>> architecture_entries() const;
};

struct LossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double no_object = 0.1;
  double morph = 1.0;
  double objectness = 1.0;
};

inline constexpr std::size_t kStageCount = 6;

struct TrainConfig {
  ModelConfig model;
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 0;
  double grad_clip = 1.0;
  std::array<std::size_t, kStageCount> epochs{3, 3, 4, 4, 4, 3};
  // Non-zero entries override the epoch-derived step count of a stage.
  std::array<std::size_t, kStageCount> steps{0, 0, 0, 0, 0, 0};
  std::uint64_t seed = 0;
  std::size_t batch_per_task = 2;
  LossWeights loss;

  static TrainConfig long_schedule();
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
// Reads the flat key set written by to_json; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);

// FNV-1a over the canonical JSON dump, as 16 hex digits.
std::string config_digest(const nlohmann::json& j);

}  // namespace unihema
