#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "unihema/nn.hpp"
#include "unihema/transformer.hpp"

namespace unihema {

// Backbone output {F_i}: level i is [c_i×m_i×n_i], extents strictly
// decreasing with i.
struct MultiScaleFeatures {
  std::vector<Tensor> levels;
};

struct TokenOrigin {
  std::size_t level = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const TokenOrigin&) const = default;
};

struct LevelExtent {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t offset = 0;  // index of the level's first token
};

// [V_t×M] token matrix with per-token provenance. Levels are flattened
// row-major and concatenated in level order.
struct SpatialEmbeddings {
  Tensor tokens;
  std::vector<TokenOrigin> origin;
  std::vector<LevelExtent> levels;

  std::size_t count() const { return tokens.dim(0); }
  std::size_t dim() const { return tokens.dim(1); }
};

// Strided conv stack: stem (kernel 2s, stride s, pad s/2) then stride-2
// stages (kernel 4, pad 1), GELU after each.
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParameterStore& store, const std::vector<std::size_t>& channels,
           std::size_t stem_stride, Rng& rng);

  MultiScaleFeatures forward(const Tensor& image) const;
  std::size_t total_stride() const;

  struct Stage {
    Tensor weight;
    Tensor bias;
    std::size_t stride = 1;
    std::size_t pad = 0;
  };
  std::vector<Stage> stages;
};

// Per-level 1×1 projection to M channels, flatten, concatenate, then add 2d
// sinusoidal positions and a learned per-level embedding.
class TokenProjector {
 public:
  TokenProjector() = default;
  TokenProjector(ParameterStore& store, const std::vector<std::size_t>& channels,
                 std::size_t model_dim, Rng& rng);

  SpatialEmbeddings forward(const MultiScaleFeatures& features) const;

  std::vector<Linear> level_proj;
  Tensor level_embed;  // [L×M]
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(ParameterStore& store, std::size_t layers, std::size_t model_dim,
               std::size_t heads, std::size_t hidden, Rng& rng);

  SpatialEmbeddings forward(const SpatialEmbeddings& input) const;

  std::vector<EncoderLayer> layers;
};

// [c×h×w] -> [(h·w)×c]
Tensor feature_map_to_tokens(const Tensor& fmap);
// [(h·w)×c] -> [c×h×w]
Tensor tokens_to_feature_map(const Tensor& tokens, std::size_t height, std::size_t width);

}  // namespace unihema
