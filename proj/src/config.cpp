#include "unihema/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "unihema/error.hpp"

namespace unihema {

std::string to_string(UpsampleMode mode) {
  return mode == UpsampleMode::kBilinear ? "bilinear" : "learnable";
}

UpsampleMode upsample_mode_from_string(const std::string& s) {
  if (s == "bilinear") return UpsampleMode::kBilinear;
  if (s == "learnable") return UpsampleMode::kLearnable;
  throw ConfigError("unknown upsampler mode '" + s + "'");
}

std::size_t ModelConfig::total_stride() const {
  std::size_t s = stem_stride;
  for (std::size_t i = 1; i < backbone_channels.size(); ++i) s *= 2;
  return s;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(model_dim, "M");
  positive(text_dim, "N");
  positive(heads, "heads");
  positive(encoder_layers, "encoder_layers");
  positive(decoder_layers, "decoder_layers");
  positive(text_encoder_layers, "text_encoder_layers");
  positive(text_decoder_layers, "text_decoder_layers");
  positive(num_queries, "K");
  positive(fusion_queries, "L_f");
  positive(num_classes, "num_classes");
  positive(num_morph, "num_morph");
  positive(mlp_ratio, "mlp_ratio");
  positive(mask_dim, "mask_dim");
  positive(upsampler_hidden, "upsampler_hidden");
  if (model_dim % heads != 0) {
    throw ConfigError("M=" + std::to_string(model_dim) + " not divisible by heads=" +
                      std::to_string(heads));
  }
  if (text_dim % heads != 0) {
    throw ConfigError("N=" + std::to_string(text_dim) + " not divisible by heads=" +
                      std::to_string(heads));
  }
  if (model_dim % 4 != 0) throw ConfigError("M must be a multiple of 4 for 2d positions");
  if (text_dim % 2 != 0) throw ConfigError("N must be even for 1d positions");
  if (backbone_channels.size() < 2) throw ConfigError("backbone needs at least 2 levels");
  for (auto c : backbone_channels) positive(c, "backbone_channels");
  if (stem_stride < 2 || stem_stride % 2 != 0) {
    throw ConfigError("stem_stride must be even and >= 2");
  }
}

std::vector<std::pair<std::string, double>> ModelConfig::architecture_entries() const {
  std::vector<std::pair<std::string, double>> e{
      {"M", static_cast<double>(model_dim)},
      {"N", static_cast<double>(text_dim)},
      {"heads", static_cast<double>(heads)},
      {"encoder_layers", static_cast<double>(encoder_layers)},
      {"decoder_layers", static_cast<double>(decoder_layers)},
      {"text_encoder_layers", static_cast<double>(text_encoder_layers)},
      {"text_decoder_layers", static_cast<double>(text_decoder_layers)},
      {"K", static_cast<double>(num_queries)},
      {"L_f", static_cast<double>(fusion_queries)},
      {"num_classes", static_cast<double>(num_classes)},
      {"num_morph", static_cast<double>(num_morph)},
      {"backbone_levels", static_cast<double>(backbone_channels.size())},
      {"stem_stride", static_cast<double>(stem_stride)},
      {"mlp_ratio", static_cast<double>(mlp_ratio)},
      {"mask_dim", static_cast<double>(mask_dim)},
      {"upsampler_hidden", static_cast<double>(upsampler_hidden)},
      {"integrate_backbone", integrate_backbone ? 1.0 : 0.0},
      {"vocab_size", static_cast<double>(vocab_size)},
  };
  for (std::size_t i = 0; i < backbone_channels.size(); ++i) {
    e.emplace_back("backbone_channels." + std::to_string(i),
                   static_cast<double>(backbone_channels[i]));
  }
  return e;
}

TrainConfig TrainConfig::long_schedule() {
  TrainConfig c;
  c.model.encoder_layers = 6;
  c.model.decoder_layers = 6;
  // Stage 2 keeps the short default; no longer count is known for it.
  c.epochs = {24, 3, 12, 12, 24, 8};
  return c;
}

void TrainConfig::validate() const {
  model.validate();
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_per_task == 0) throw ConfigError("batch_per_task must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"M", c.model_dim},
      {"N", c.text_dim},
      {"heads", c.heads},
      {"encoder_layers", c.encoder_layers},
      {"decoder_layers", c.decoder_layers},
      {"text_encoder_layers", c.text_encoder_layers},
      {"text_decoder_layers", c.text_decoder_layers},
      {"K", c.num_queries},
      {"L_f", c.fusion_queries},
      {"num_classes", c.num_classes},
      {"num_morph", c.num_morph},
      {"backbone_channels", c.backbone_channels},
      {"stem_stride", c.stem_stride},
      {"mlp_ratio", c.mlp_ratio},
      {"mask_dim", c.mask_dim},
      {"upsampler_hidden", c.upsampler_hidden},
      {"upsampler", to_string(c.upsampler)},
      {"integrate_backbone", c.integrate_backbone},
      {"vocab_size", c.vocab_size},
  };
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = to_json(c.model);
  j["learning_rate"] = c.learning_rate;
  j["warmup_steps"] = c.warmup_steps;
  j["grad_clip"] = c.grad_clip;
  j["epochs"] = c.epochs;
  j["steps"] = c.steps;
  j["seed"] = c.seed;
  j["batch_per_task"] = c.batch_per_task;
  j["loss_weights"] = {{"cls", c.loss.cls},           {"l1", c.loss.l1},
                       {"giou", c.loss.giou},         {"no_object", c.loss.no_object},
                       {"morph", c.loss.morph},       {"objectness", c.loss.objectness}};
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{
      "M",           "N",         "heads",          "encoder_layers",
      "decoder_layers", "text_encoder_layers", "text_decoder_layers", "K",
      "L_f",         "num_classes", "num_morph",    "backbone_channels",
      "stem_stride", "mlp_ratio", "mask_dim",       "upsampler_hidden",
      "upsampler",   "integrate_backbone", "vocab_size", "learning_rate",
      "warmup_steps", "grad_clip", "epochs",        "steps",
      "seed",        "batch_per_task", "loss_weights"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig c;
  try {
    auto& m = c.model;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("M", m.model_dim);
    get("N", m.text_dim);
    get("heads", m.heads);
    get("encoder_layers", m.encoder_layers);
    get("decoder_layers", m.decoder_layers);
    get("text_encoder_layers", m.text_encoder_layers);
    get("text_decoder_layers", m.text_decoder_layers);
    get("K", m.num_queries);
    get("L_f", m.fusion_queries);
    get("num_classes", m.num_classes);
    get("num_morph", m.num_morph);
    get("backbone_channels", m.backbone_channels);
    get("stem_stride", m.stem_stride);
    get("mlp_ratio", m.mlp_ratio);
    get("mask_dim", m.mask_dim);
    get("upsampler_hidden", m.upsampler_hidden);
    get("integrate_backbone", m.integrate_backbone);
    get("vocab_size", m.vocab_size);
    if (j.contains("upsampler")) m.upsampler = upsample_mode_from_string(j.at("upsampler"));
    get("learning_rate", c.learning_rate);
    get("warmup_steps", c.warmup_steps);
    get("grad_clip", c.grad_clip);
    get("epochs", c.epochs);
    get("steps", c.steps);
    get("seed", c.seed);
    get("batch_per_task", c.batch_per_task);
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      for (const auto& [key, value] : w.items()) {
        double v = value.get<double>();
        if (key == "cls") c.loss.cls = v;
        else if (key == "l1") c.loss.l1 = v;
        else if (key == "giou") c.loss.giou = v;
        else if (key == "no_object") c.loss.no_object = v;
        else if (key == "morph") c.loss.morph = v;
        else if (key == "objectness") c.loss.objectness = v;
        else throw ConfigError("unknown loss weight '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
  return train_config_from_json(j);
}

std::string config_digest(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace unihema
