#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "unihema/config.hpp"
#include "unihema/nn.hpp"
#include "unihema/text.hpp"
#include "unihema/vision.hpp"

namespace unihema {

// Cross-modal fusion: learned queries attend to projected text, then to
// projected visual tokens, each stage closed by a residual Norm. The result
// is projected to the text width.
class CrossModalFusion {
 public:
  CrossModalFusion() = default;
  CrossModalFusion(ParameterStore& store, std::size_t queries, std::size_t model_dim,
                   std::size_t text_dim, std::size_t heads, Rng& rng);

  // text [L_t×N], visual [V_t×M] -> [L_f×N]
  Tensor forward(const Tensor& text, const Tensor& visual) const;

  Tensor query;  // [L_f×M]
  Linear text_proj, visual_proj;
  MultiHeadAttention text_attn, visual_attn;
  LayerNorm norm1, norm2;
  Linear out_proj;
};

struct TopKQueries {
  Tensor queries;                       // [K×M], rows of the encoder tokens
  std::vector<std::size_t> indices;     // source token indices
  std::vector<double> scores;           // non-increasing
  Tensor logits;                        // [V_t×C] objectness logits for every token
};

// Indices of the `k` largest scores, ordered by score descending and, among
// equal scores, by lower index. Throws ConfigError when k > scores.size().
std::vector<std::size_t> topk_indices(const std::vector<double>& scores, std::size_t k);

// Token objectness = max over class logits; the top `k` tokens become queries.
TopKQueries select_topk(const Tensor& tokens, std::size_t k, const Linear& objectness_head);

// Text-guided visual refinement: P([k ‖ CrossAttn(k, P(text), P(text))]).
class TextGuidedRefinement {
 public:
  TextGuidedRefinement() = default;
  TextGuidedRefinement(ParameterStore& store, std::size_t model_dim, std::size_t text_dim,
                       std::size_t heads, std::size_t num_classes, Rng& rng);

  // k [K×M], text [L_t×N] -> [K×M]
  Tensor forward(const Tensor& k, const Tensor& text) const;

  Linear objectness;  // M -> classes
  Linear text_proj;   // N -> M
  MultiHeadAttention attn;
  Linear out_proj;    // 2M -> M
};

// Single-cell feature: P([mean(tokens) ‖ q]).
class SingleCellExtractor {
 public:
  SingleCellExtractor() = default;
  SingleCellExtractor(ParameterStore& store, std::size_t model_dim, Rng& rng);

  // tokens [V_t×M] -> [1×M]
  Tensor forward(const Tensor& tokens) const;

  Tensor query;  // [1×M]
  Linear proj;   // 2M -> M
};

struct SegmentationLogits {
  Tensor all;     // [D_t×m×n]
  Tensor binary;  // [1×m×n], the first query's map
};

class MaskUpsampler {
 public:
  MaskUpsampler() = default;
  MaskUpsampler(ParameterStore& store, const std::string& name, std::size_t hidden, Rng& rng);

  // [1×m×n] -> [1×H×W]. Bilinear mode is parameter-free; learnable mode adds
  // a two-stage transposed-conv residual at 4× before the bilinear remainder.
  Tensor forward(const Tensor& logits, std::size_t height, std::size_t width,
                 UpsampleMode mode) const;

  Tensor conv1_weight, conv1_bias;  // [1×hidden×4×4], [hidden]
  Tensor conv2_weight, conv2_bias;  // [hidden×1×4×4], [1]; zero-initialized
};

// Query-guided mask former.
class QueryMaskFormer {
 public:
  QueryMaskFormer() = default;
  QueryMaskFormer(ParameterStore& store, std::size_t feature_channels, std::size_t model_dim,
                  std::size_t mask_dim, std::size_t upsampler_hidden, Rng& rng);

  // level0 [c0×m×n], tokens: encoder output with level 0 of extent m×n,
  // objects [D_t×M].
  SegmentationLogits forward(const Tensor& level0, const SpatialEmbeddings& tokens,
                             const Tensor& objects) const;
  // G_proj [C×m×n]
  Tensor fused_map(const Tensor& level0, const SpatialEmbeddings& tokens) const;
  // [D_t×C]
  Tensor mask_embeddings(const Tensor& objects) const;

  Linear feature_proj;  // c0 -> M
  Linear fuse_proj;     // M -> C
  MlpBlock mlp;         // M -> M -> M
  Linear mask_proj;     // M -> C
  MaskUpsampler upsampler;
};

// Strict threshold: sigmoid(logit) > 0.5, i.e. logit > 0. Ties are background.
std::vector<std::uint8_t> binarize(const Tensor& logits);

}  // namespace unihema
