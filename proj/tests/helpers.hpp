#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cdnet/autograd.hpp"
#include "cdnet/nn.hpp"
#include "cdnet/image.hpp"
#include "cdnet/mil.hpp"
#include "cdnet/pyramid.hpp"
#include "cdnet/tensor.hpp"

namespace testing_util {

inline cdnet::Tensor random_tensor(cdnet::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  cdnet::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline cdnet::Var random_param(cdnet::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return cdnet::parameter(random_tensor(std::move(shape), seed, lo, hi));
}

inline cdnet::Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  cdnet::Image img(h, w);
  for (auto& v : img.pixels()) v = static_cast<std::uint8_t>(u(rng));
  return img;
}

/// Random detail image with its exact box-downsampled context.
inline cdnet::PatchPair random_pair(std::size_t context_px, std::size_t ratio, std::uint64_t seed) {
  cdnet::PatchPair p;
  p.detail = random_image(context_px * ratio, context_px * ratio, seed);
  p.context = cdnet::box_downsample(p.detail, ratio);
  p.mag_ratio = ratio;
  return p;
}

/// Weighted sum with fixed pseudo-random coefficients: a scalar loss that exercises every
/// output entry with a distinct weight.
inline cdnet::Var probe_loss(const cdnet::Var& x, std::uint64_t seed = 99) {
  return cdnet::sum(cdnet::mul(x, cdnet::constant(random_tensor(x.shape(), seed))));
}

/// Bags of 8..24 standard-normal instances in `d` dimensions; positive bags carry one to
/// three instances whose mean is shifted by `shift` on every coordinate.
inline std::vector<cdnet::Bag> synthetic_bags(std::size_t count, std::size_t d, std::uint64_t seed,
                                              double shift = 1.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> size(8, 24), hits(1, 3);
  std::vector<cdnet::Bag> bags;
  for (std::size_t b = 0; b < count; ++b) {
    const int label = static_cast<int>(b % 2);
    const std::size_t n = size(rng);
    cdnet::Tensor f({n, d});
    for (auto& v : f.data()) v = normal(rng);
    if (label == 1) {
      const std::size_t k = hits(rng);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) f[i * d + j] += shift;
    }
    bags.push_back({std::move(f), label, "bag" + std::to_string(1000 + b)});
  }
  return bags;
}

// Direct evaluation of a pre-norm transformer layer on a [T, D] input, independent of the
// graph code: explicit loops for LayerNorm, per-head attention, GELU MLP.
inline cdnet::Tensor block_oracle(const cdnet::Tensor& x, std::size_t heads, const cdnet::TransformerBlockParams& p) {
  const std::size_t T = x.dim(0), D = x.dim(1), dh = D / heads;
  auto ln = [&](const cdnet::Tensor& in, const cdnet::LayerNormParams& n) {
    cdnet::Tensor out(in.shape());
    for (std::size_t t = 0; t < T; ++t) {
      double mu = 0, var = 0;
      for (std::size_t k = 0; k < D; ++k) mu += in[t * D + k] / D;
      for (std::size_t k = 0; k < D; ++k) var += (in[t * D + k] - mu) * (in[t * D + k] - mu) / D;
      for (std::size_t k = 0; k < D; ++k)
        out[t * D + k] = (in[t * D + k] - mu) / std::sqrt(var + 1e-6) * n.gain.value()[k] + n.bias.value()[k];
    }
    return out;
  };
  auto lin = [](const cdnet::Tensor& in, const cdnet::LinearParams& l) {
    const std::size_t R = in.rows(), I = in.cols(), O = l.weight.value().dim(1);
    cdnet::Tensor out({R, O});
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t o = 0; o < O; ++o) {
        double s = l.bias.value()[o];
        for (std::size_t i = 0; i < I; ++i) s += in[r * I + i] * l.weight.value()[i * O + o];
        out[r * O + o] = s;
      }
    return out;
  };
  const cdnet::Tensor h = ln(x, p.norm1);
  const cdnet::Tensor q = lin(h, p.attn.query), k = lin(h, p.attn.key), v = lin(h, p.attn.value);
  cdnet::Tensor ctx({T, D});
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> s(T);
      double mx = -1e300;
      for (std::size_t u = 0; u < T; ++u) {
        double d = 0;
        for (std::size_t c = 0; c < dh; ++c) d += q[t * D + hd * dh + c] * k[u * D + hd * dh + c];
        s[u] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[u]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0;
        for (std::size_t u = 0; u < T; ++u) acc += s[u] / z * v[u * D + hd * dh + c];
        ctx[t * D + hd * dh + c] = acc;
      }
    }
  }
  const cdnet::Tensor att = lin(ctx, p.attn.out);
  cdnet::Tensor mid(x.shape());
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = x[i] + att[i];
  cdnet::Tensor hid = lin(ln(mid, p.norm2), p.mlp.fc1);
  for (auto& e : hid.data()) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
  const cdnet::Tensor mlp = lin(hid, p.mlp.fc2);
  cdnet::Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mid[i] + mlp[i];
  return out;
}

}  // namespace testing_util
