#include "unihema/transformer.hpp"

#include "unihema/ops.hpp"

namespace unihema {

EncoderLayer::EncoderLayer(ParameterStore& store, const std::string& name, std::size_t dim,
                           std::size_t heads, std::size_t hidden, Rng& rng)
    : norm1(store, name + ".norm1", dim),
      self_attn(store, name + ".attn", dim, heads, rng),
      norm2(store, name + ".norm2", dim),
      mlp(store, name + ".mlp", dim, hidden, dim, rng) {}

Tensor EncoderLayer::forward(const Tensor& x, const Tensor& additive_mask) const {
  Tensor h = norm1.forward(x);
  Tensor y = add(x, self_attn.forward(h, h, additive_mask));
  return add(y, mlp.forward(norm2.forward(y)));
}

DecoderLayer::DecoderLayer(ParameterStore& store, const std::string& name, std::size_t dim,
                           std::size_t heads, std::size_t hidden, Rng& rng)
    : norm1(store, name + ".norm1", dim),
      self_attn(store, name + ".self_attn", dim, heads, rng),
      norm2(store, name + ".norm2", dim),
      cross_attn(store, name + ".cross_attn", dim, heads, rng),
      norm3(store, name + ".norm3", dim),
      mlp(store, name + ".mlp", dim, hidden, dim, rng) {}

Tensor DecoderLayer::forward(const Tensor& x, const Tensor& memory,
                             const Tensor& self_mask) const {
  Tensor h = norm1.forward(x);
  Tensor y = add(x, self_attn.forward(h, h, self_mask));
  y = add(y, cross_attn.forward(norm2.forward(y), memory));
  return add(y, mlp.forward(norm3.forward(y)));
}

}  // namespace unihema
