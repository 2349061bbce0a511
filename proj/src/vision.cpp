#include "unihema/vision.hpp"

#include <cmath>

#include "unihema/error.hpp"
#include "unihema/ops.hpp"

namespace unihema {

namespace {
Tensor kaiming_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  return normal_init({out, in, k, k}, stddev, rng);
}
}  // namespace

Backbone::Backbone(ParameterStore& store, const std::vector<std::size_t>& channels,
                   std::size_t stem_stride, Rng& rng) {
  if (channels.size() < 2) throw ConfigError("backbone needs at least 2 levels");
  std::size_t in = 3;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    Stage s;
    const std::size_t k = i == 0 ? 2 * stem_stride : 4;
    s.stride = i == 0 ? stem_stride : 2;
    s.pad = i == 0 ? stem_stride / 2 : 1;
    const std::string name = "backbone.level" + std::to_string(i);
    s.weight = store.create(name + ".weight", kaiming_conv(channels[i], in, k, rng));
    s.bias = store.create(name + ".bias", Tensor::zeros({channels[i]}));
    stages.push_back(s);
    in = channels[i];
  }
}

std::size_t Backbone::total_stride() const {
  std::size_t s = 1;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

MultiScaleFeatures Backbone::forward(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw DimensionError("backbone: expected [3xHxW] image, got " + shape_str(image.shape()));
  }
  const std::size_t stride = total_stride();
  if (image.dim(1) % stride != 0 || image.dim(2) % stride != 0) {
    throw ConfigError("backbone: image extents " + shape_str(image.shape()) +
                      " not divisible by total stride " + std::to_string(stride));
  }
  MultiScaleFeatures out;
  Tensor x = image;
  for (const auto& st : stages) {
    x = gelu(conv2d(x, st.weight, st.bias, st.stride, st.pad));
    out.levels.push_back(x);
  }
  return out;
}

Tensor feature_map_to_tokens(const Tensor& fmap) {
  const std::size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  return transpose(reshape(fmap, {c, h * w}));
}

Tensor tokens_to_feature_map(const Tensor& tokens, std::size_t height, std::size_t width) {
  if (tokens.ndim() != 2 || tokens.dim(0) != height * width) {
    throw DimensionError("tokens " + shape_str(tokens.shape()) + " do not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t c = tokens.dim(1);
  return reshape(transpose(tokens), {c, height, width});
}

TokenProjector::TokenProjector(ParameterStore& store, const std::vector<std::size_t>& channels,
                               std::size_t model_dim, Rng& rng) {
  for (std::size_t i = 0; i < channels.size(); ++i) {
    level_proj.emplace_back(store, "image_encoder.input.level" + std::to_string(i), channels[i],
                            model_dim, rng);
  }
  level_embed = store.create("image_encoder.input.level_embed",
                             normal_init({channels.size(), model_dim}, 0.02, rng));
}

SpatialEmbeddings TokenProjector::forward(const MultiScaleFeatures& features) const {
  if (features.levels.size() != level_proj.size()) {
    throw DimensionError("token projector: " + std::to_string(features.levels.size()) +
                         " levels, expected " + std::to_string(level_proj.size()));
  }
  SpatialEmbeddings out;
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  const std::size_t dim = level_embed.dim(1);
  for (std::size_t i = 0; i < features.levels.size(); ++i) {
    const Tensor& f = features.levels[i];
    const std::size_t h = f.dim(1), w = f.dim(2);
    Tensor tokens = level_proj[i].forward(feature_map_to_tokens(f));
    tokens = add(tokens, sinusoidal_2d(h, w, dim));
    tokens = add_bias(tokens, reshape(slice_rows(level_embed, i, i + 1), {dim}));
    parts.push_back(tokens);
    out.levels.push_back({h, w, offset});
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) out.origin.push_back({i, r, c});
    }
    offset += h * w;
  }
  out.tokens = concat_rows(parts);
  return out;
}

ImageEncoder::ImageEncoder(ParameterStore& store, std::size_t count, std::size_t model_dim,
                           std::size_t heads, std::size_t hidden, Rng& rng) {
  if (count == 0) throw ConfigError("image encoder needs at least one layer");
  for (std::size_t i = 0; i < count; ++i) {
    layers.emplace_back(store, "image_encoder.layer" + std::to_string(i), model_dim, heads,
                        hidden, rng);
  }
}

SpatialEmbeddings ImageEncoder::forward(const SpatialEmbeddings& input) const {
  SpatialEmbeddings out = input;
  for (const auto& layer : layers) out.tokens = layer.forward(out.tokens);
  return out;
}

}  // namespace unihema
