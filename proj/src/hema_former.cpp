#include "unihema/hema_former.hpp"

#include <algorithm>
#include <numeric>

#include "unihema/error.hpp"
#include "unihema/ops.hpp"

namespace unihema {

CrossModalFusion::CrossModalFusion(ParameterStore& store, std::size_t queries,
                                   std::size_t model_dim, std::size_t text_dim,
                                   std::size_t heads, Rng& rng) {
  const std::string p = "hema_former.cmf";
  query = store.create(p + ".query", normal_init({queries, model_dim}, 0.02, rng));
  text_proj = Linear(store, p + ".text_proj", text_dim, model_dim, rng);
  visual_proj = Linear(store, p + ".visual_proj", model_dim, model_dim, rng);
  text_attn = MultiHeadAttention(store, p + ".text_attn", model_dim, heads, rng);
  visual_attn = MultiHeadAttention(store, p + ".visual_attn", model_dim, heads, rng);
  norm1 = LayerNorm(store, p + ".norm1", model_dim);
  norm2 = LayerNorm(store, p + ".norm2", model_dim);
  out_proj = Linear(store, p + ".out", model_dim, text_dim, rng);
}

Tensor CrossModalFusion::forward(const Tensor& text, const Tensor& visual) const {
  if (!text.defined()) throw UsageError("cross-modal fusion requires text embeddings");
  Tensor t = text_proj.forward(text);
  Tensor j = norm1.forward(add(query, text_attn.forward(query, t)));
  Tensor v = visual_proj.forward(visual);
  Tensor w = norm2.forward(add(j, visual_attn.forward(j, v)));
  return out_proj.forward(w);
}

std::vector<std::size_t> topk_indices(const std::vector<double>& scores, std::size_t k) {
  if (k > scores.size()) {
    throw ConfigError("top-k: K=" + std::to_string(k) + " exceeds token count " +
                      std::to_string(scores.size()));
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

TopKQueries select_topk(const Tensor& tokens, std::size_t k, const Linear& objectness_head) {
  TopKQueries out;
  out.logits = objectness_head.forward(tokens);
  const std::size_t n = out.logits.dim(0), c = out.logits.dim(1);
  std::vector<double> scores(n);
  auto d = out.logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = *std::max_element(d.begin() + static_cast<long>(i * c),
                                  d.begin() + static_cast<long>((i + 1) * c));
  }
  out.indices = topk_indices(scores, k);
  for (auto i : out.indices) out.scores.push_back(scores[i]);
  out.queries = gather_rows(tokens, out.indices);
  return out;
}

TextGuidedRefinement::TextGuidedRefinement(ParameterStore& store, std::size_t model_dim,
                                           std::size_t text_dim, std::size_t heads,
                                           std::size_t num_classes, Rng& rng) {
  const std::string p = "hema_former.tgvr";
  objectness = Linear(store, p + ".objectness", model_dim, num_classes, rng);
  text_proj = Linear(store, p + ".text_proj", text_dim, model_dim, rng);
  attn = MultiHeadAttention(store, p + ".attn", model_dim, heads, rng);
  out_proj = Linear(store, p + ".out", 2 * model_dim, model_dim, rng);
}

Tensor TextGuidedRefinement::forward(const Tensor& k, const Tensor& text) const {
  if (!text.defined()) throw UsageError("text-guided refinement requires a disease prompt");
  Tensor attended = attn.forward(k, text_proj.forward(text));
  return out_proj.forward(concat_cols({k, attended}));
}

SingleCellExtractor::SingleCellExtractor(ParameterStore& store, std::size_t model_dim, Rng& rng) {
  query = store.create("hema_former.scfe.query", normal_init({1, model_dim}, 0.02, rng));
  proj = Linear(store, "hema_former.scfe.proj", 2 * model_dim, model_dim, rng);
}

Tensor SingleCellExtractor::forward(const Tensor& tokens) const {
  return proj.forward(concat_cols({mean_rows(tokens, true), query}));
}

MaskUpsampler::MaskUpsampler(ParameterStore& store, const std::string& name, std::size_t hidden,
                             Rng& rng) {
  conv1_weight = store.create(name + ".conv1.weight", normal_init({1, hidden, 4, 4}, 0.25, rng));
  conv1_bias = store.create(name + ".conv1.bias", Tensor::zeros({hidden}));
  conv2_weight = store.create(name + ".conv2.weight", Tensor::zeros({hidden, 1, 4, 4}));
  conv2_bias = store.create(name + ".conv2.bias", Tensor::zeros({1}));
}

Tensor MaskUpsampler::forward(const Tensor& logits, std::size_t height, std::size_t width,
                              UpsampleMode mode) const {
  const std::size_t m = logits.dim(1), n = logits.dim(2);
  if (height < m || width < n) {
    throw UsageError("upsample: target " + std::to_string(height) + "x" + std::to_string(width) +
                     " smaller than source " + std::to_string(m) + "x" + std::to_string(n));
  }
  if (mode == UpsampleMode::kBilinear) return bilinear_resize(logits, height, width);
  Tensor base = bilinear_resize(logits, 4 * m, 4 * n);
  Tensor hidden = gelu(conv_transpose2d(logits, conv1_weight, conv1_bias, 2, 1));
  Tensor residual = conv_transpose2d(hidden, conv2_weight, conv2_bias, 2, 1);
  return bilinear_resize(add(base, residual), height, width);
}

QueryMaskFormer::QueryMaskFormer(ParameterStore& store, std::size_t feature_channels,
                                 std::size_t model_dim, std::size_t mask_dim,
                                 std::size_t upsampler_hidden, Rng& rng) {
  const std::string p = "hema_former.qgmf";
  feature_proj = Linear(store, p + ".feature_proj", feature_channels, model_dim, rng);
  fuse_proj = Linear(store, p + ".fuse_proj", model_dim, mask_dim, rng);
  mlp = MlpBlock(store, p + ".mlp", model_dim, model_dim, model_dim, rng);
  mask_proj = Linear(store, p + ".mask_proj", model_dim, mask_dim, rng);
  upsampler = MaskUpsampler(store, p + ".upsampler", upsampler_hidden, rng);
}

Tensor QueryMaskFormer::fused_map(const Tensor& level0, const SpatialEmbeddings& tokens) const {
  if (tokens.levels.empty()) throw DimensionError("mask former: token levels missing");
  const auto& ext = tokens.levels[0];
  if (level0.ndim() != 3 || level0.dim(1) != ext.height || level0.dim(2) != ext.width) {
    throw DimensionError("mask former: level-0 map " + shape_str(level0.shape()) +
                         " does not match token grid " + std::to_string(ext.height) + "x" +
                         std::to_string(ext.width));
  }
  const std::size_t cells = ext.height * ext.width;
  Tensor slice = slice_rows(tokens.tokens, ext.offset, ext.offset + cells);
  Tensor fused = add(slice, feature_proj.forward(feature_map_to_tokens(level0)));
  return tokens_to_feature_map(fuse_proj.forward(fused), ext.height, ext.width);
}

Tensor QueryMaskFormer::mask_embeddings(const Tensor& objects) const {
  return mask_proj.forward(mlp.forward(objects));
}

SegmentationLogits QueryMaskFormer::forward(const Tensor& level0,
                                            const SpatialEmbeddings& tokens,
                                            const Tensor& objects) const {
  SegmentationLogits out;
  Tensor g = fused_map(level0, tokens);
  out.all = contract(mask_embeddings(objects), g);
  const std::size_t m = g.dim(1), n = g.dim(2);
  out.binary = reshape(slice_rows(reshape(out.all, {out.all.dim(0), m * n}), 0, 1), {1, m, n});
  return out;
}

std::vector<std::uint8_t> binarize(const Tensor& logits) {
  std::vector<std::uint8_t> out(logits.numel());
  auto d = logits.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > 0.0 ? 1 : 0;
  return out;
}

}  // namespace unihema
