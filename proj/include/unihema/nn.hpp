#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "unihema/tensor.hpp"

namespace unihema {

// Seeded generator used for parameter init and data synthesis.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Registry of named trainable tensors, named `<module>.<block>.<field>`.
// Iteration order is lexicographic by name.
class ParameterStore {
 public:
  Tensor& create(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  std::size_t total_count() const;
  void zero_grad();

 private:
  std::map<std::string, Tensor> params_;
};

Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor normal_init(Shape shape, double stddev, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true);

  // x[t×in] -> x·Wᵀ + b
  Tensor forward(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor weight;
  Tensor bias;
  std::string name;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;

  Tensor gain;
  Tensor bias;
  double eps = 1e-5;
};

// in -> hidden -> out with GELU between.
class MlpBlock {
 public:
  MlpBlock() = default;
  MlpBlock(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
           std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;

  Linear fc1;
  Linear fc2;
};

struct AttentionOutput {
  Tensor output;                 // [t_q×d]
  std::vector<Tensor> weights;   // per head [t_q×t_k]
};

// Scaled dot-product attention over `head_count` heads, heads concatenated
// then passed through the output projection.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t model_dim,
                     std::size_t head_count, Rng& rng);

  // `additive_mask` is an optional constant [t_q×t_k] added to the scores.
  Tensor forward(const Tensor& query, const Tensor& key_value,
                 const Tensor& additive_mask = Tensor()) const;
  AttentionOutput forward_with_weights(const Tensor& query, const Tensor& key_value,
                                       const Tensor& additive_mask = Tensor()) const;

  std::size_t head_count() const { return heads_; }
  std::size_t model_dim() const { return dim_; }

  Linear q_proj, k_proj, v_proj, out_proj;

 private:
  std::size_t heads_ = 1;
  std::size_t dim_ = 0;
};

// [length×dim] table; even columns sin, odd columns cos.
Tensor sinusoidal_1d(std::size_t length, std::size_t dim);
// [(h·w)×dim] table: row-index encoding (dim/2) followed by column-index encoding (dim/2).
Tensor sinusoidal_2d(std::size_t height, std::size_t width, std::size_t dim);
// [t×t] additive mask with -inf above the diagonal.
Tensor causal_mask(std::size_t length);

}  // namespace unihema
