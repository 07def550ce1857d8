#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "cdnet/autograd.hpp"

namespace cdnet {

/// Weight stored as [in, out] so that y = x W + b.
struct LinearParams {
  Var weight;
  Var bias;
};

struct LayerNormParams {
  Var gain;
  Var bias;
};

struct AttentionParams {
  LinearParams query;
  LinearParams key;
  LinearParams value;
  LinearParams out;
};

struct MlpParams {
  LinearParams fc1;
  LinearParams fc2;
};

/// Pre-norm transformer layer: x' = x + MSA(LN(x)); y = x' + MLP(LN(x')).
struct TransformerBlockParams {
  LayerNormParams norm1;
  AttentionParams attn;
  LayerNormParams norm2;
  MlpParams mlp;
};

inline constexpr double kLayerNormEps = 1e-6;

// ---------------------------------------------------------------------------
// Forward building blocks

inline Var apply(const LinearParams& lin, const Var& x) { return linear(x, lin.weight, lin.bias); }

inline Var apply(const LayerNormParams& ln, const Var& x) { return layer_norm(x, ln.gain, ln.bias, kLayerNormEps); }

struct MhaOutput {
  Var out;      // same shape as the query input
  Tensor attn;  // [G, heads, T, S]
};

/// Multi-head attention. Inputs are [T, D] or grouped [G, T, D]; groups attend independently.
inline MhaOutput mha(const Var& x_q, const Var& x_kv, std::size_t heads, const AttentionParams& p) {
  const std::size_t D = x_q.value().cols();
  if (heads == 0 || D % heads != 0) {
    throw ConfigError("mha: width " + std::to_string(D) + " not divisible by heads " + std::to_string(heads));
  }
  auto grouped = [](const Var& x) {
    return x.value().rank() == 2 ? reshape(x, {1, x.shape()[0], x.shape()[1]}) : x;
  };
  const Shape out_shape = x_q.shape();
  Var q = apply(p.query, grouped(x_q));
  Var k = apply(p.key, grouped(x_kv));
  Var v = apply(p.value, grouped(x_kv));
  auto att = attention(q, k, v, heads);
  Var out = apply(p.out, att.out);
  if (out.shape() != out_shape) out = reshape(out, out_shape);
  return {std::move(out), std::move(att.probs)};
}

/// linear -> exact GELU -> linear.
inline Var mlp_block(const Var& x, const MlpParams& p) { return apply(p.fc2, gelu(apply(p.fc1, x))); }

struct BlockOutput {
  Var out;
  Tensor attn;
};

inline BlockOutput transformer_block(const Var& x, std::size_t heads, const TransformerBlockParams& p) {
  Var normed = apply(p.norm1, x);
  auto att = mha(normed, normed, heads, p.attn);
  Var mid = add(x, att.out);
  Var out = add(mid, mlp_block(apply(p.norm2, mid), p.mlp));
  return {std::move(out), std::move(att.attn)};
}

// ---------------------------------------------------------------------------
// Initialization

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Normal(0, std) resampled outside +-2 std.
  Tensor trunc_normal(Shape shape, double std) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std);
    for (auto& v : t.data()) {
      do {
        v = dist(rng_);
      } while (std::abs(v) > 2.0 * std);
    }
    return t;
  }

  /// Uniform weights scaled by 1/sqrt(fan_in) for a [in, out] matrix.
  Tensor fan_in(std::size_t in, std::size_t out) {
    Tensor t({in, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = dist(rng_);
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline LinearParams make_linear(std::size_t in, std::size_t out, Initializer& init) {
  return {parameter(init.fan_in(in, out)), parameter(Tensor({out}))};
}

inline LayerNormParams make_layer_norm(std::size_t dim) {
  return {parameter(Tensor({dim}, 1.0)), parameter(Tensor({dim}))};
}

inline TransformerBlockParams make_transformer_block(std::size_t dim, std::size_t mlp_ratio, Initializer& init) {
  TransformerBlockParams b;
  b.norm1 = make_layer_norm(dim);
  b.attn.query = make_linear(dim, dim, init);
  b.attn.key = make_linear(dim, dim, init);
  b.attn.value = make_linear(dim, dim, init);
  b.attn.out = make_linear(dim, dim, init);
  b.norm2 = make_layer_norm(dim);
  b.mlp.fc1 = make_linear(dim, dim * mlp_ratio, init);
  b.mlp.fc2 = make_linear(dim * mlp_ratio, dim, init);
  return b;
}

// ---------------------------------------------------------------------------
// Named traversal, used by checkpoints, EMA and optimizers.

template <class F>
void visit(LinearParams& p, const std::string& prefix, F&& f) {
  f(prefix + ".weight", p.weight);
  f(prefix + ".bias", p.bias);
}

template <class F>
void visit(LayerNormParams& p, const std::string& prefix, F&& f) {
  f(prefix + ".gain", p.gain);
  f(prefix + ".bias", p.bias);
}

template <class F>
void visit(TransformerBlockParams& p, const std::string& prefix, F&& f) {
  visit(p.norm1, prefix + ".norm1", f);
  visit(p.attn.query, prefix + ".attn.query", f);
  visit(p.attn.key, prefix + ".attn.key", f);
  visit(p.attn.value, prefix + ".attn.value", f);
  visit(p.attn.out, prefix + ".attn.out", f);
  visit(p.norm2, prefix + ".norm2", f);
  visit(p.mlp.fc1, prefix + ".mlp.fc1", f);
  visit(p.mlp.fc2, prefix + ".mlp.fc2", f);
}

}  // namespace cdnet
