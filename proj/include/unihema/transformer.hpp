#pragma once

#include <string>

#include "unihema/nn.hpp"

namespace unihema {

// Pre-norm self-attention block: x + Attn(Norm x), then x + Mlp(Norm x).
// With zeroed output projections the block is exactly the identity.
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterStore& store, const std::string& name, std::size_t dim,
               std::size_t heads, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& additive_mask = Tensor()) const;

  LayerNorm norm1;
  MultiHeadAttention self_attn;
  LayerNorm norm2;
  MlpBlock mlp;
};

// Pre-norm decoder block: self-attention (optionally masked), cross-attention
// over a memory, then MLP, each on a residual branch.
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParameterStore& store, const std::string& name, std::size_t dim,
               std::size_t heads, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& memory,
                 const Tensor& self_mask = Tensor()) const;

  LayerNorm norm1;
  MultiHeadAttention self_attn;
  LayerNorm norm2;
  MultiHeadAttention cross_attn;
  LayerNorm norm3;
  MlpBlock mlp;
};

}  // namespace unihema
