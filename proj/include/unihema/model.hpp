#pragma once

#include <cstdint>
#include <vector>

#include "unihema/config.hpp"
#include "unihema/heads.hpp"
#include "unihema/hema_former.hpp"
#include "unihema/nn.hpp"
#include "unihema/text.hpp"
#include "unihema/vision.hpp"

namespace unihema {

struct VisionState {
  MultiScaleFeatures features;
  SpatialEmbeddings base;     // projected tokens before the encoder
  SpatialEmbeddings encoded;  // encoder output
};

struct DenseOutputs {
  TopKQueries topk;
  Tensor queries;  // refined, [K×M]
  Tensor objects;  // decoder output, [K×M]
  DetectionOutputs detection;
};

// The unified model: one parameter store, every sub-network, and the
// per-task forward paths.
class UniHema {
 public:
  UniHema(const ModelConfig& config, std::uint64_t seed);
  UniHema(const UniHema&) = delete;
  UniHema& operator=(const UniHema&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  VisionState see(const Tensor& image) const;

  // [1×C] class logits from the single-cell path.
  Tensor classify(const VisionState& vision) const;
  // Top-K, refinement and image decoding with the detection head.
  DenseOutputs dense(const VisionState& vision, const TokenIds& prompt_ids) const;
  // Full-resolution binary-mask logits [1×H×W].
  Tensor segment(const VisionState& vision, const DenseOutputs& dense, std::size_t height,
                 std::size_t width, UpsampleMode mode) const;
  // [L_f×N] fused tokens that condition the text decoder.
  Tensor fuse_text(const VisionState& vision, const TokenIds& prompt_ids) const;

  Backbone backbone;
  TokenProjector projector;
  ImageEncoder image_encoder;
  TextEncoder text_encoder;
  TextDecoder text_decoder;
  CrossModalFusion cmf;
  TextGuidedRefinement tgvr;
  SingleCellExtractor scfe;
  QueryMaskFormer qgmf;
  ImageDecoder image_decoder;
  DetectionHead detect_head;
  CellClassifier classifier;

 private:
  ModelConfig config_;
  ParameterStore store_;
};

}  // namespace unihema
