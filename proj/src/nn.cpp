#include "unihema/nn.hpp"

#include <cmath>
#include <limits>

#include "unihema/error.hpp"
#include "unihema/ops.hpp"

namespace unihema {

Tensor& ParameterStore::create(const std::string& name, Tensor value) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  return params_.emplace(name, std::move(value)).first->second;
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterStore::total_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(-limit, limit);
  return Tensor(std::move(shape), std::move(d));
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(d));
}

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng, bool with_bias)
    : name(name) {
  if (in == 0 || out == 0) throw ConfigError("linear '" + name + "': zero extent");
  weight = store.create(name + ".weight", xavier_uniform({out, in}, in, out, rng));
  if (with_bias) bias = store.create(name + ".bias", Tensor::zeros({out}));
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight, bias); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim, double eps)
    : eps(eps) {
  gain = store.create(name + ".gain", Tensor::full({dim}, 1.0));
  bias = store.create(name + ".bias", Tensor::zeros({dim}));
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

MlpBlock::MlpBlock(ParameterStore& store, const std::string& name, std::size_t in,
                   std::size_t hidden, std::size_t out, Rng& rng)
    : fc1(store, name + ".fc1", in, hidden, rng), fc2(store, name + ".fc2", hidden, out, rng) {}

Tensor MlpBlock::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name,
                                       std::size_t model_dim, std::size_t head_count, Rng& rng)
    : q_proj(store, name + ".q", model_dim, model_dim, rng),
      k_proj(store, name + ".k", model_dim, model_dim, rng),
      v_proj(store, name + ".v", model_dim, model_dim, rng),
      out_proj(store, name + ".out", model_dim, model_dim, rng),
      heads_(head_count),
      dim_(model_dim) {
  if (head_count == 0 || model_dim % head_count != 0) {
    throw ConfigError("attention '" + name + "': model_dim " + std::to_string(model_dim) +
                      " not divisible by head_count " + std::to_string(head_count));
  }
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& key_value,
                                   const Tensor& additive_mask) const {
  return forward_with_weights(query, key_value, additive_mask).output;
}

AttentionOutput MultiHeadAttention::forward_with_weights(const Tensor& query,
                                                         const Tensor& key_value,
                                                         const Tensor& additive_mask) const {
  if (query.ndim() != 2 || key_value.ndim() != 2 || query.dim(1) != dim_ ||
      key_value.dim(1) != dim_) {
    throw DimensionError("attention: query " + shape_str(query.shape()) + " / key-value " +
                         shape_str(key_value.shape()) + " vs model_dim " + std::to_string(dim_));
  }
  const std::size_t head_dim = dim_ / heads_;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor q = q_proj.forward(query);
  Tensor k = k_proj.forward(key_value);
  Tensor v = v_proj.forward(key_value);

  AttentionOutput result;
  std::vector<Tensor> heads;
  heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t b = h * head_dim, e = b + head_dim;
    Tensor qh = heads_ == 1 ? q : slice_cols(q, b, e);
    Tensor kh = heads_ == 1 ? k : slice_cols(k, b, e);
    Tensor vh = heads_ == 1 ? v : slice_cols(v, b, e);
    Tensor scores = scale(matmul(qh, transpose(kh)), scale_factor);
    if (additive_mask.defined()) scores = add(scores, additive_mask);
    Tensor weights = softmax(scores);
    heads.push_back(matmul(weights, vh));
    result.weights.push_back(weights);
  }
  Tensor merged = heads_ == 1 ? heads[0] : concat_cols(heads);
  result.output = out_proj.forward(merged);
  return result;
}

Tensor sinusoidal_1d(std::size_t length, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) {
    throw ConfigError("positional encoding dim must be even, got " + std::to_string(dim));
  }
  std::vector<double> d(length * dim);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(dim));
      const double angle = static_cast<double>(p) * freq;
      d[p * dim + 2 * i] = std::sin(angle);
      d[p * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor({length, dim}, std::move(d));
}

Tensor sinusoidal_2d(std::size_t height, std::size_t width, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) {
    throw ConfigError("2d positional encoding dim must be a multiple of 4, got " +
                      std::to_string(dim));
  }
  const std::size_t half = dim / 2;
  Tensor rows = sinusoidal_1d(height, half);
  Tensor cols = sinusoidal_1d(width, half);
  std::vector<double> d(height * width * dim);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      double* out = d.data() + (r * width + c) * dim;
      for (std::size_t j = 0; j < half; ++j) out[j] = rows.data()[r * half + j];
      for (std::size_t j = 0; j < half; ++j) out[half + j] = cols.data()[c * half + j];
    }
  }
  return Tensor({height * width, dim}, std::move(d));
}

Tensor causal_mask(std::size_t length) {
  std::vector<double> d(length * length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) {
      d[i * length + j] = -std::numeric_limits<double>::infinity();
    }
  }
  return Tensor({length, length}, std::move(d));
}

}  // namespace unihema
