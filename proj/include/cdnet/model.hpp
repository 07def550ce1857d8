#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdnet/autograd.hpp"
#include "cdnet/config.hpp"
#include "cdnet/nn.hpp"
#include "cdnet/pyramid.hpp"

namespace cdnet {

/// One context-detail block: a detail transformer layer applied per detail patch, the
/// fusion projection (m * dim2 -> dim1), and a context transformer layer.
struct CDBlockParams {
  TransformerBlockParams detail;
  LinearParams fuse;
  TransformerBlockParams context;
};

struct CDNetParams {
  LinearParams embed_context;  // [p*p*3, dim1]
  LinearParams embed_detail;   // [s*s*3, dim2]
  Var pos_context;             // [n+1, dim1], row 0 belongs to CLS
  Var pos_detail;              // [m, dim2]
  Var cls;                     // [dim1]
  std::vector<CDBlockParams> blocks;
  LayerNormParams final_norm;

  /// Parameters used by the single-resolution path (tokenizer, context layers, readout).
  template <class F>
  void visit_context(F&& f) {
    visit(embed_context, "embed_context", f);
    f("pos_context", pos_context);
    f("cls", cls);
    for (std::size_t l = 0; l < blocks.size(); ++l) visit(blocks[l].context, block_name(l) + ".context", f);
    visit(final_norm, "final_norm", f);
  }

  /// Parameters that exist only on the detail side, including the fusion projections.
  template <class F>
  void visit_detail(F&& f) {
    visit(embed_detail, "embed_detail", f);
    f("pos_detail", pos_detail);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      visit(blocks[l].detail, block_name(l) + ".detail", f);
      visit(blocks[l].fuse, block_name(l) + ".fuse", f);
    }
  }

  template <class F>
  void visit_all(F&& f) {
    visit_context(f);
    visit_detail(f);
  }

  std::vector<Var> all() {
    std::vector<Var> out;
    visit_all([&](const std::string&, Var& v) { out.push_back(v); });
    return out;
  }

  /// Deep copy with fresh leaves (same values, same requires_grad).
  CDNetParams clone() const {
    CDNetParams copy = *this;
    copy.visit_all([](const std::string&, Var& v) { v = make_leaf(v.value(), v.requires_grad()); });
    return copy;
  }

  static std::string block_name(std::size_t l) { return "block" + std::to_string(l); }
};

/// Truncated-normal (std 0.02) embeddings, position tables and CLS; fan-in scaled
/// weights everywhere else, including the residual output and fusion projections; zero biases.
/// Zero fusion would hide the detail stream from CLS at init, and DINO then never gets a
/// gradient that routes detail features into the embedding.
inline CDNetParams init_params(const CDNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Initializer init(seed);
  CDNetParams P;
  P.embed_context = make_linear(cfg.p * cfg.p * 3, cfg.dim1, init);
  P.embed_detail = make_linear(cfg.s * cfg.s * 3, cfg.dim2, init);
  P.pos_context = parameter(init.trunc_normal({cfg.n + 1, cfg.dim1}, 0.02));
  P.pos_detail = parameter(init.trunc_normal({cfg.m, cfg.dim2}, 0.02));
  P.cls = parameter(init.trunc_normal({cfg.dim1}, 0.02));
  for (std::size_t l = 0; l < cfg.L; ++l) {
    CDBlockParams b;
    b.detail = make_transformer_block(cfg.dim2, cfg.mlp_ratio, init);
    b.fuse = make_linear(cfg.m * cfg.dim2, cfg.dim1, init);
    b.context = make_transformer_block(cfg.dim1, cfg.mlp_ratio, init);
    P.blocks.push_back(std::move(b));
  }
  P.final_norm = make_layer_norm(cfg.dim1);
  return P;
}

// ---------------------------------------------------------------------------
// Patch unfolding (non-differentiable; operates on raw pixels)

/// Pixels scaled to [0, 1]; zero pixels map to zero so an all-black input embeds to the bias.
inline double pixel_value(std::uint8_t v) {
  static const auto table = [] {
    std::array<double, 256> t{};
    for (std::size_t i = 0; i < 256; ++i) t[i] = static_cast<double>(i) / 255.0;
    return t;
  }();
  return table[v];
}

/// Raw pixel rows, one flattened patch per row.
struct PixelRows {
  std::vector<std::uint8_t> bytes;
  std::size_t rows = 0;
  std::size_t width = 0;
};

/// Splits each image into a grid of cell x cell patches, row-major, each flattened as
/// (row, col, channel).
inline PixelRows unfold_patches(std::span<const Image* const> images, std::size_t cell) {
  const std::size_t side = images.front()->height();
  const std::size_t per_side = side / cell;
  PixelRows out{{}, images.size() * per_side * per_side, cell * cell * 3};
  out.bytes.resize(out.rows * out.width);
  std::uint8_t* dst = out.bytes.data();
  for (const Image* img : images) {
    for (std::size_t gr = 0; gr < per_side; ++gr)
      for (std::size_t gc = 0; gc < per_side; ++gc)
        for (std::size_t r = 0; r < cell; ++r) {
          const std::uint8_t* src = img->pixels().data() + ((gr * cell + r) * side + gc * cell) * 3;
          dst = std::copy_n(src, cell * 3, dst);
        }
  }
  return out;
}

/// Detail sub-patches: image split into q x q detail patches (row-major), each split into
/// s x s sub-patches (row-major), so row (j * m + k) is sub-patch k of detail patch j.
inline PixelRows unfold_detail(std::span<const Image* const> images, std::size_t q, std::size_t s) {
  const std::size_t side = images.front()->height();
  const std::size_t per_side = side / q;
  const std::size_t sub = q / s;
  PixelRows out{{}, images.size() * per_side * per_side * sub * sub, s * s * 3};
  out.bytes.resize(out.rows * out.width);
  std::uint8_t* dst = out.bytes.data();
  for (const Image* img : images) {
    for (std::size_t gr = 0; gr < per_side; ++gr)
      for (std::size_t gc = 0; gc < per_side; ++gc)
        for (std::size_t sr = 0; sr < sub; ++sr)
          for (std::size_t sc = 0; sc < sub; ++sc)
            for (std::size_t r = 0; r < s; ++r) {
              const std::size_t y = gr * q + sr * s + r;
              const std::size_t x = gc * q + sc * s;
              dst = std::copy_n(img->pixels().data() + (y * side + x) * 3, s * 3, dst);
            }
  }
  return out;
}

inline Tensor to_tensor(const PixelRows& px) {
  Tensor t({px.rows, px.width});
  for (std::size_t i = 0; i < px.bytes.size(); ++i) t[i] = pixel_value(px.bytes[i]);
  return t;
}

inline constexpr std::size_t kEmbedChunk = 32;

/// Strided patch projection: (pixels / 255) W + b over every row of `px`, computed in
/// cache-sized chunks straight from the 8-bit rows. Gradients reach W and b only.
inline Var embed_pixels(PixelRows px, const LinearParams& lin) {
  const std::size_t in = px.width, outw = lin.weight.shape()[1];
  if (lin.weight.shape()[0] != in) {
    throw DimensionError("embed_pixels: patch width " + std::to_string(in) + " vs weight " +
                         shape_str(lin.weight.shape()));
  }
  std::vector<double> wt(in * outw);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < outw; ++j) wt[j * in + i] = lin.weight.value()[i * outw + j];
  Tensor out({px.rows, outw});
  std::vector<double> buf(kEmbedChunk * in);
  auto load = [&px, in](std::vector<double>& dst, std::size_t r0, std::size_t count) {
    const std::uint8_t* src = px.bytes.data() + r0 * in;
    for (std::size_t i = 0; i < count * in; ++i) dst[i] = pixel_value(src[i]);
  };
  for (std::size_t r0 = 0; r0 < px.rows; r0 += kEmbedChunk) {
    const std::size_t count = std::min(kEmbedChunk, px.rows - r0);
    load(buf, r0, count);
    double* o = out.data().data() + r0 * outw;
    for (std::size_t r = 0; r < count; ++r) std::copy_n(lin.bias.value().data().begin(), outw, o + r * outw);
    kernels::gemm_nt(buf.data(), wt.data(), o, count, in, outw);
  }
  return detail::make_result(std::move(out), {lin.weight, lin.bias},
                             [px = std::move(px), in, outw](Node& self) {
                               Node& pw = *self.parents[0];
                               Node& pb = *self.parents[1];
                               std::vector<double> chunk(kEmbedChunk * in);
                               std::vector<double> gwt(outw * in, 0.0);
                               for (std::size_t r0 = 0; r0 < px.rows; r0 += kEmbedChunk) {
                                 const std::size_t count = std::min(kEmbedChunk, px.rows - r0);
                                 const double* gy = self.grad.data().data() + r0 * outw;
                                 if (pw.requires_grad) {
                                   const std::uint8_t* src = px.bytes.data() + r0 * in;
                                   for (std::size_t i = 0; i < count * in; ++i) chunk[i] = pixel_value(src[i]);
                                   kernels::gemm_tn(gy, chunk.data(), gwt.data(), outw, count, in);
                                 }
                                 if (pb.requires_grad) {
                                   auto& gb = pb.grad_buffer();
                                   for (std::size_t r = 0; r < count; ++r)
                                     for (std::size_t j = 0; j < outw; ++j) gb[j] += gy[r * outw + j];
                                 }
                               }
                               if (pw.requires_grad) {
                                 auto& gw = pw.grad_buffer();
                                 for (std::size_t i = 0; i < in; ++i)
                                   for (std::size_t j = 0; j < outw; ++j) gw[i * outw + j] += gwt[j * in + i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Forward pass

/// Token state for a batch of B pairs: context [B, n+1, dim1], detail [B*n, m, dim2].
struct TokenState {
  Var context;
  Var detail;
};

namespace detail {

inline void check_context_images(std::span<const Image* const> imgs, const CDNetConfig& cfg) {
  if (imgs.empty()) throw ConfigError("forward: empty batch");
  for (const Image* img : imgs) {
    if (img->height() != cfg.patch_px() || img->width() != cfg.patch_px()) {
      throw ConfigError("context image is " + std::to_string(img->height()) + "x" + std::to_string(img->width()) +
                        " but sqrt(n) * p = " + std::to_string(cfg.patch_px()));
    }
  }
}

inline void check_detail_images(std::span<const Image* const> imgs, const CDNetConfig& cfg) {
  for (const Image* img : imgs) {
    if (img->height() != cfg.detail_px() || img->width() != cfg.detail_px()) {
      throw ConfigError("detail image is " + std::to_string(img->height()) + "x" + std::to_string(img->width()) +
                        " but sqrt(n) * q = " + std::to_string(cfg.detail_px()));
    }
  }
}

}  // namespace detail

/// Context tokens with CLS prepended and position encodings added: [B, n+1, dim1].
inline Var tokenize_context(std::span<const Image* const> imgs, const CDNetParams& P, const CDNetConfig& cfg) {
  detail::check_context_images(imgs, cfg);
  Var tokens = reshape(embed_pixels(unfold_patches(imgs, cfg.p), P.embed_context), {imgs.size(), cfg.n, cfg.dim1});
  return add_broadcast_rows(prepend_row(tokens, P.cls), P.pos_context);
}

/// Detail sub-tokens with position encodings added: [B*n, m, dim2].
inline Var tokenize_detail(std::span<const Image* const> imgs, const CDNetParams& P, const CDNetConfig& cfg) {
  detail::check_detail_images(imgs, cfg);
  Var tokens =
      reshape(embed_pixels(unfold_detail(imgs, cfg.q, cfg.s), P.embed_detail), {imgs.size() * cfg.n, cfg.m, cfg.dim2});
  return add_broadcast_rows(tokens, P.pos_detail);
}

inline TokenState tokenize(std::span<const PatchPair> pairs, const CDNetParams& P, const CDNetConfig& cfg) {
  std::vector<const Image*> ctx, det;
  for (const auto& pr : pairs) {
    ctx.push_back(&pr.context);
    det.push_back(&pr.detail);
  }
  return {tokenize_context(ctx, P, cfg), tokenize_detail(det, P, cfg)};
}

/// Transformer layer over the m sub-tokens of each detail patch independently.
inline BlockOutput detail_block(const Var& detail_tokens, const CDBlockParams& block, const CDNetConfig& cfg) {
  return transformer_block(detail_tokens, cfg.head2, block.detail);
}

/// context[b, 1 + j] += fuse(concat_k detail[b*n + j, k]); the CLS row is untouched.
inline Var fuse(const Var& context_tokens, const Var& detail_tokens, const CDBlockParams& block,
                const CDNetConfig& cfg) {
  const std::size_t B = context_tokens.shape()[0];
  Var concat = reshape(detail_tokens, {B, cfg.n, cfg.m * cfg.dim2});
  return add_into_rows(context_tokens, apply(block.fuse, concat), 1);
}

inline BlockOutput context_block(const Var& context_tokens, const CDBlockParams& block, const CDNetConfig& cfg) {
  return transformer_block(context_tokens, cfg.head1, block.context);
}

struct ForwardOutput {
  Var embedding;                     // [B, dim1]
  std::vector<Tensor> context_attn;  // per block, [B, head1, n+1, n+1]
  std::vector<Tensor> detail_attn;   // per block, [B*n, head2, m, m]
};

namespace detail {

inline Var readout(const Var& context_tokens, const CDNetParams& P, const CDNetConfig& cfg) {
  const std::size_t B = context_tokens.shape()[0];
  std::vector<std::size_t> cls_rows(B);
  for (std::size_t b = 0; b < B; ++b) cls_rows[b] = b * (cfg.n + 1);
  return apply(P.final_norm, gather_rows(context_tokens, std::move(cls_rows)));
}

}  // namespace detail

/// Full multi-resolution forward: tokenize, then per block detail layer -> fuse -> context
/// layer, final LayerNorm, CLS row.
inline ForwardOutput forward(std::span<const PatchPair> pairs, const CDNetParams& P, const CDNetConfig& cfg) {
  TokenState st = tokenize(pairs, P, cfg);
  ForwardOutput out;
  for (const auto& block : P.blocks) {
    auto det = detail_block(st.detail, block, cfg);
    st.detail = det.out;
    out.detail_attn.push_back(std::move(det.attn));
    st.context = fuse(st.context, st.detail, block, cfg);
    auto ctx = context_block(st.context, block, cfg);
    st.context = ctx.out;
    out.context_attn.push_back(std::move(ctx.attn));
  }
  out.embedding = detail::readout(st.context, P, cfg);
  return out;
}

inline ForwardOutput forward(const PatchPair& pair, const CDNetParams& P, const CDNetConfig& cfg) {
  return forward(std::span<const PatchPair>(&pair, 1), P, cfg);
}

/// Single-resolution ViT over context images, sharing the context-side weights.
inline ForwardOutput vit_forward(std::span<const Image* const> imgs, const CDNetParams& P, const CDNetConfig& cfg) {
  Var tokens = tokenize_context(imgs, P, cfg);
  ForwardOutput out;
  for (const auto& block : P.blocks) {
    auto ctx = context_block(tokens, block, cfg);
    tokens = ctx.out;
    out.context_attn.push_back(std::move(ctx.attn));
  }
  out.embedding = detail::readout(tokens, P, cfg);
  return out;
}

inline ForwardOutput vit_forward(const Image& img, const CDNetParams& P, const CDNetConfig& cfg) {
  const Image* ptr = &img;
  return vit_forward(std::span<const Image* const>(&ptr, 1), P, cfg);
}

enum class Architecture { CDNet, ViT };

inline std::string to_string(Architecture a) { return a == Architecture::CDNet ? "cdnet" : "vit"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "cdnet") return Architecture::CDNet;
  if (s == "vit") return Architecture::ViT;
  throw ConfigError("unknown architecture '" + s + "' (expected cdnet or vit)");
}

/// Dispatches a batch of pairs to the chosen architecture (ViT sees only context images).
inline ForwardOutput encode(Architecture arch, std::span<const PatchPair> pairs, const CDNetParams& P,
                            const CDNetConfig& cfg) {
  if (arch == Architecture::CDNet) return forward(pairs, P, cfg);
  std::vector<const Image*> imgs;
  for (const auto& pr : pairs) imgs.push_back(&pr.context);
  return vit_forward(imgs, P, cfg);
}

/// CLS attention over the n context tokens at context block `layer` (1-based), averaged
/// over heads, as a sqrt(n) x sqrt(n) grid min-max normalized to [0, 1]. A constant field
/// maps to all zeros. Uses batch element `batch_index`.
inline Tensor attention_map(const std::vector<Tensor>& context_attn, std::size_t layer, std::size_t batch_index = 0) {
  if (layer < 1 || layer > context_attn.size()) {
    throw RangeError("attention_map: layer " + std::to_string(layer) + " outside 1.." +
                     std::to_string(context_attn.size()));
  }
  const Tensor& a = context_attn[layer - 1];
  const std::size_t B = a.dim(0), heads = a.dim(1), T = a.dim(2);
  if (batch_index >= B) throw RangeError("attention_map: batch index out of range");
  const std::size_t n = T - 1;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw DimensionError("attention_map: token count is not a square grid");
  Tensor map({side, side});
  for (std::size_t h = 0; h < heads; ++h) {
    const double* row = a.data().data() + ((batch_index * heads + h) * T + 0) * T;
    for (std::size_t j = 0; j < n; ++j) map[j] += row[1 + j] / static_cast<double>(heads);
  }
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double mn = *lo, mx = *hi;
  for (auto& v : map.data()) v = mx > mn ? (v - mn) / (mx - mn) : 0.0;
  return map;
}

}  // namespace cdnet
