#include "unihema/model.hpp"

#include "unihema/error.hpp"
#include "unihema/ops.hpp"

namespace unihema {

UniHema::UniHema(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  if (config_.vocab_size <= Vocabulary::reserved().size()) {
    throw ConfigError("vocab_size must exceed the reserved tokens (got " +
                      std::to_string(config_.vocab_size) + ")");
  }
  const auto& c = config_;
  const std::size_t hidden_m = c.mlp_ratio * c.model_dim;
  const std::size_t hidden_n = c.mlp_ratio * c.text_dim;
  // Each sub-network draws from its own stream so that adding or removing
  // one leaves the others' initial values unchanged.
  auto stream = [seed](std::uint64_t k) { return Rng(seed * 1000003ULL + k); };
  Rng r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4), r5 = stream(5),
      r6 = stream(6), r7 = stream(7), r8 = stream(8), r9 = stream(9), r10 = stream(10),
      r11 = stream(11), r12 = stream(12);
  backbone = Backbone(store_, c.backbone_channels, c.stem_stride, r1);
  projector = TokenProjector(store_, c.backbone_channels, c.model_dim, r2);
  image_encoder = ImageEncoder(store_, c.encoder_layers, c.model_dim, c.heads, hidden_m, r3);
  text_encoder = TextEncoder(store_, c.vocab_size, c.text_dim, c.text_encoder_layers, c.heads,
                             hidden_n, r4);
  text_decoder = TextDecoder(store_, c.vocab_size, c.text_dim, c.text_decoder_layers, c.heads,
                             hidden_n, r5);
  cmf = CrossModalFusion(store_, c.fusion_queries, c.model_dim, c.text_dim, c.heads, r6);
  tgvr = TextGuidedRefinement(store_, c.model_dim, c.text_dim, c.heads, c.num_classes, r7);
  scfe = SingleCellExtractor(store_, c.model_dim, r8);
  qgmf = QueryMaskFormer(store_, c.backbone_channels.front(), c.model_dim, c.mask_dim,
                         c.upsampler_hidden, r9);
  image_decoder = ImageDecoder(store_, c.decoder_layers, c.model_dim, c.heads, hidden_m, r10);
  detect_head = DetectionHead(store_, c.model_dim, c.num_classes, c.num_morph, r11);
  classifier = CellClassifier(store_, c.model_dim,
                              c.integrate_backbone ? c.backbone_channels.back() : 0,
                              c.num_classes, r12);
}

VisionState UniHema::see(const Tensor& image) const {
  VisionState v;
  v.features = backbone.forward(image);
  v.base = projector.forward(v.features);
  v.encoded = image_encoder.forward(v.base);
  return v;
}

Tensor UniHema::classify(const VisionState& vision) const {
  Tensor z = scfe.forward(vision.encoded.tokens);
  Tensor pooled;
  if (classifier.integrates()) pooled = spatial_mean(vision.features.levels.back());
  return classifier.logits(z, pooled);
}

DenseOutputs UniHema::dense(const VisionState& vision, const TokenIds& prompt_ids) const {
  DenseOutputs d;
  Tensor text = text_encoder.forward(prompt_ids).tokens;
  d.topk = select_topk(vision.encoded.tokens, config_.num_queries, tgvr.objectness);
  d.queries = tgvr.forward(d.topk.queries, text);
  d.objects = image_decoder.forward(d.queries, vision.encoded.tokens);
  d.detection = detect_head.forward(d.objects);
  return d;
}

Tensor UniHema::segment(const VisionState& vision, const DenseOutputs& dense, std::size_t height,
                        std::size_t width, UpsampleMode mode) const {
  auto y = qgmf.forward(vision.features.levels.front(), vision.encoded, dense.objects);
  return qgmf.upsampler.forward(y.binary, height, width, mode);
}

Tensor UniHema::fuse_text(const VisionState& vision, const TokenIds& prompt_ids) const {
  Tensor text = text_encoder.forward(prompt_ids).tokens;
  return cmf.forward(text, vision.base.tokens);
}

}  // namespace unihema
