#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdnet/autograd.hpp"
#include "cdnet/checkpoint.hpp"
#include "cdnet/model.hpp"
#include "cdnet/nn.hpp"
#include "cdnet/optim.hpp"

namespace cdnet {

// ---------------------------------------------------------------------------
// Augmentation

/// Per-view random transform. Geometry is drawn once per view and applied to both levels,
/// scaled by the magnification ratio, so the context/detail alignment survives.
struct AugmentationPolicy {
  double crop_scale_min = 0.6;  // crop side as a fraction of the patch side
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double brightness = 0.1;  // additive shift, fraction of full scale, drawn from [-b, b]
  double contrast = 0.2;    // multiplicative factor drawn from [1 - c, 1 + c]

  static AugmentationPolicy identity() { return {1.0, 1.0, 0.0, 0.0, 0.0}; }
  static AugmentationPolicy geometric_only() { return {0.6, 1.0, 0.5, 0.0, 0.0}; }
};

namespace detail {

inline std::uint8_t jitter_pixel(std::uint8_t v, double contrast, double shift) {
  const double out = (static_cast<double>(v) - 128.0) * contrast + 128.0 + shift;
  return static_cast<std::uint8_t>(std::clamp(std::lround(out), 0L, 255L));
}

}  // namespace detail

/// One augmented view. The crop is resampled back to full size by nearest neighbour on the
/// context level; each context pixel's R x R detail block is carried along unchanged, which
/// keeps box_downsample(detail) == context exact for crop/flip transforms.
inline PatchPair augment_view(const PatchPair& pair, const AugmentationPolicy& policy, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t P = pair.context.height();
  const std::size_t R = pair.mag_ratio;
  const double scale = policy.crop_scale_min + (policy.crop_scale_max - policy.crop_scale_min) * unit(rng);
  const std::size_t side = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * P)), 1, P);
  const std::size_t r0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(P - side + 1)) % (P - side + 1);
  const std::size_t c0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(P - side + 1)) % (P - side + 1);
  const bool flip = unit(rng) < policy.flip_prob;
  const double contrast = 1.0 + policy.contrast * (2.0 * unit(rng) - 1.0);
  const double shift = 255.0 * policy.brightness * (2.0 * unit(rng) - 1.0);

  PatchPair out;
  out.row = pair.row;
  out.col = pair.col;
  out.mag_ratio = R;
  out.context = Image(P, P);
  out.detail = Image(P * R, P * R);
  for (std::size_t r = 0; r < P; ++r) {
    const std::size_t sr = r0 + r * side / P;
    for (std::size_t c = 0; c < P; ++c) {
      const std::size_t tc = flip ? P - 1 - c : c;
      const std::size_t sc = c0 + c * side / P;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out.context.at(r, tc, ch) = detail::jitter_pixel(pair.context.at(sr, sc, ch), contrast, shift);
      }
      for (std::size_t dr = 0; dr < R; ++dr) {
        for (std::size_t dc = 0; dc < R; ++dc) {
          const std::size_t tdc = flip ? R - 1 - dc : dc;
          for (std::size_t ch = 0; ch < 3; ++ch) {
            out.detail.at(r * R + dr, tc * R + tdc, ch) =
                detail::jitter_pixel(pair.detail.at(sr * R + dr, sc * R + dc, ch), contrast, shift);
          }
        }
      }
    }
  }
  return out;
}

/// Two independent views drawn from a generator seeded with `seed`.
inline std::pair<PatchPair, PatchPair> augment_pair(const PatchPair& pair, const AugmentationPolicy& policy,
                                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PatchPair v1 = augment_view(pair, policy, rng);
  PatchPair v2 = augment_view(pair, policy, rng);
  return {std::move(v1), std::move(v2)};
}

// ---------------------------------------------------------------------------
// Projection head

struct HeadConfig {
  std::size_t hidden = 64;
  std::size_t bottleneck = 32;
  std::size_t prototypes = 256;  // K
};

/// dim1 -> hidden -> hidden -> bottleneck MLP (GELU between layers), L2 normalization, then
/// a weight-normalized (unit-norm rows, fixed gain) projection onto K prototypes.
struct HeadParams {
  LinearParams layer1;
  LinearParams layer2;
  LinearParams layer3;
  Var prototypes;  // [K, bottleneck]

  template <class F>
  void visit_all(F&& f) {
    visit(layer1, "layer1", f);
    visit(layer2, "layer2", f);
    visit(layer3, "layer3", f);
    f("prototypes", prototypes);
  }

  std::vector<Var> all() {
    std::vector<Var> out;
    visit_all([&](const std::string&, Var& v) { out.push_back(v); });
    return out;
  }

  HeadParams clone() const {
    HeadParams copy = *this;
    copy.visit_all([](const std::string&, Var& v) { v = make_leaf(v.value(), v.requires_grad()); });
    return copy;
  }
};

inline HeadParams init_head(std::size_t in_dim, const HeadConfig& hc, std::uint64_t seed) {
  Initializer init(seed);
  HeadParams h;
  h.layer1 = make_linear(in_dim, hc.hidden, init);
  h.layer2 = make_linear(hc.hidden, hc.hidden, init);
  h.layer3 = make_linear(hc.hidden, hc.bottleneck, init);
  h.prototypes = parameter(init.trunc_normal({hc.prototypes, hc.bottleneck}, 0.02));
  return h;
}

struct HeadOutput {
  Var bottleneck;  // unit-norm rows, [B, bottleneck]
  Var logits;      // [B, K]
};

inline HeadOutput head_forward(const Var& x, const HeadParams& h) {
  Var z = apply(h.layer3, gelu(apply(h.layer2, gelu(apply(h.layer1, x)))));
  Var unit = l2_normalize(z);
  Var logits = matmul(unit, transpose(l2_normalize(h.prototypes)));
  return {unit, logits};
}

// ---------------------------------------------------------------------------
// Loss and teacher updates

/// softmax((teacher - center) / tau_t) row-wise, as a constant target distribution.
inline Tensor teacher_distribution(const Tensor& teacher_logits, const Tensor& center, double tau_t) {
  const std::size_t K = teacher_logits.cols(), R = teacher_logits.rows();
  if (center.size() != K) throw DimensionError("teacher_distribution: center size does not match logits");
  Tensor out(teacher_logits.shape());
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, (teacher_logits[r * K + k] - center[k]) / tau_t);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += (out[r * K + k] = std::exp((teacher_logits[r * K + k] - center[k]) / tau_t - mx));
    for (std::size_t k = 0; k < K; ++k) out[r * K + k] /= z;
  }
  return out;
}

/// Cross-entropy H(P_t, P_s), averaged over rows. Only the student side is differentiable.
inline Var dino_loss(const Var& student_logits, const Tensor& teacher_logits, double tau_s, double tau_t,
                     const Tensor& center) {
  if (tau_s <= 0.0 || tau_t <= 0.0) throw ConfigError("dino_loss: temperatures must be positive");
  return soft_cross_entropy(student_logits, teacher_distribution(teacher_logits, center, tau_t), tau_s);
}

namespace detail {

template <class Params>
std::vector<std::pair<std::string, Var>> named(Params& p) {
  std::vector<std::pair<std::string, Var>> out;
  p.visit_all([&](const std::string& name, Var& v) { out.emplace_back(name, v); });
  return out;
}

}  // namespace detail

/// teacher <- momentum * teacher + (1 - momentum) * student, matched by parameter name.
template <class Params>
void ema_update(Params& teacher, Params& student, double momentum) {
  if (momentum < 0.0 || momentum > 1.0) throw RangeError("ema_update: momentum must lie in [0, 1]");
  auto t = detail::named(teacher);
  auto s = detail::named(student);
  if (t.size() != s.size()) throw IntegrityError("ema_update: parameter sets differ in size");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].first != s[i].first || t[i].second.shape() != s[i].second.shape()) {
      throw IntegrityError("ema_update: parameter mismatch at '" + t[i].first + "' vs '" + s[i].first + "'");
    }
    auto& tv = t[i].second.value();
    const auto& sv = s[i].second.value();
    if (momentum == 1.0) continue;
    if (momentum == 0.0) {
      tv = sv;
      continue;
    }
    for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = momentum * tv[k] + (1.0 - momentum) * sv[k];
  }
}

/// center <- momentum * center + (1 - momentum) * mean over rows of teacher_logits.
inline Tensor center_update(const Tensor& center, const Tensor& teacher_logits, double momentum) {
  if (momentum < 0.0 || momentum > 1.0) throw RangeError("center_update: momentum must lie in [0, 1]");
  const std::size_t K = teacher_logits.cols(), R = teacher_logits.rows();
  if (center.size() != K) throw DimensionError("center_update: center size does not match logits");
  Tensor out(center.shape());
  for (std::size_t k = 0; k < K; ++k) {
    double mean = 0.0;
    for (std::size_t r = 0; r < R; ++r) mean += teacher_logits[r * K + k];
    mean /= static_cast<double>(R);
    out[k] = momentum * center[k] + (1.0 - momentum) * mean;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining

struct DinoHyper {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double base_lr = 5e-4;  // scaled by batch_size / 256
  double min_lr = 1e-6;
  double weight_decay = 0.04;
  std::size_t warmup_epochs = 1;
  double ema_start = 0.996;
  double ema_end = 1.0;
  double tau_student = 0.1;
  double tau_teacher = 0.04;
  double center_momentum = 0.9;
  HeadConfig head;
  AugmentationPolicy augmentation;
  Architecture arch = Architecture::CDNet;
  std::optional<double> lr_override;   // constant learning rate
  std::optional<double> ema_override;  // constant teacher momentum

  double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double ema_momentum = 0.0;
  double lr = 0.0;
};

inline void write_loss_record(std::ostream& out, const LossRecord& r) {
  out << r.step << '\t' << r.loss << '\t' << r.ema_momentum << '\t' << r.lr << '\n';
}

/// Student/teacher pair with EMA teacher and output centering.
class DinoTrainer {
 public:
  DinoTrainer(const CDNetConfig& cfg, DinoHyper hyper, std::uint64_t seed)
      : cfg_(cfg), hyper_(std::move(hyper)), seed_(seed) {
    cfg_.validate();
    student_ = init_params(cfg_, seed);
    student_head_ = init_head(cfg_.dim1, hyper_.head, seed + 1);
    teacher_ = student_.clone();
    teacher_head_ = student_head_.clone();
    center_ = Tensor({hyper_.head.prototypes});
    std::vector<Var> trainable;
    if (hyper_.arch == Architecture::CDNet) {
      trainable = student_.all();
    } else {
      student_.visit_context([&](const std::string&, Var& v) { trainable.push_back(v); });
    }
    for (auto& v : student_head_.all()) trainable.push_back(v);
    optimizer_ = std::make_unique<AdamW>(std::move(trainable));
  }

  /// One optimizer step on `batch`; returns the symmetric loss. `step`/`total_steps` drive
  /// the learning-rate and momentum schedules.
  double train_step(std::span<const PatchPair> batch, std::size_t step, std::size_t total_steps,
                    std::size_t steps_per_epoch, std::uint64_t batch_id) {
    const std::size_t B = batch.size();
    std::vector<PatchPair> views;
    views.reserve(2 * B);
    std::vector<PatchPair> second;
    second.reserve(B);
    for (std::size_t i = 0; i < B; ++i) {
      auto [a, b] = augment_pair(batch[i], hyper_.augmentation, mix(seed_, batch_id, i));
      views.push_back(std::move(a));
      second.push_back(std::move(b));
    }
    for (auto& v : second) views.push_back(std::move(v));

    // Teacher on both views without recording a graph.
    Tensor teacher_logits;
    {
      NoGradGuard guard;
      auto t = head_forward(encode(hyper_.arch, views, teacher_, cfg_).embedding, teacher_head_);
      teacher_logits = t.logits.value();
    }
    auto split = [&](const Tensor& t, std::size_t half) {
      const std::size_t K = t.cols();
      return Tensor({B, K}, std::vector<double>(t.data().begin() + half * B * K, t.data().begin() + (half + 1) * B * K));
    };
    const Tensor t1 = split(teacher_logits, 0), t2 = split(teacher_logits, 1);

    auto s = head_forward(encode(hyper_.arch, views, student_, cfg_).embedding, student_head_);
    const std::size_t K = hyper_.head.prototypes;
    std::vector<std::size_t> first_rows(B), second_rows(B);
    for (std::size_t i = 0; i < B; ++i) {
      first_rows[i] = i;
      second_rows[i] = B + i;
    }
    Var s1 = gather_rows(s.logits, first_rows);
    Var s2 = gather_rows(s.logits, second_rows);
    Var loss = scale(add(dino_loss(s1, t2, hyper_.tau_student, hyper_.tau_teacher, center_),
                         dino_loss(s2, t1, hyper_.tau_student, hyper_.tau_teacher, center_)),
                     0.5);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw TrainingError("non-finite DINO loss at step " + std::to_string(step) + " (batch id " +
                          std::to_string(batch_id) + ", " + std::to_string(B) + " pairs, first origin " +
                          std::to_string(batch[0].row) + "," + std::to_string(batch[0].col) + ")");
    }
    optimizer_->zero_grad();
    backward(loss);

    const double lr = learning_rate(step, total_steps, steps_per_epoch);
    optimizer_->step(lr, hyper_.weight_decay);
    const double m = momentum(step, total_steps);
    ema_update(teacher_, student_, m);
    ema_update(teacher_head_, student_head_, m);
    center_ = center_update(center_, teacher_logits.reshaped({2 * B, K}), hyper_.center_momentum);
    last_ = {step, value, m, lr};
    return value;
  }

  /// Full training run over `pairs`; one record per step is appended to `log` (if given).
  std::vector<LossRecord> fit(std::span<const PatchPair> pairs, std::ostream* log = nullptr,
                              const std::function<void(std::size_t epoch)>& on_epoch = {}) {
    if (pairs.empty()) throw ConfigError("pretrain: no training pairs");
    const std::size_t B = std::min(hyper_.batch_size, pairs.size());
    const std::size_t steps_per_epoch = (pairs.size() + B - 1) / B;
    const std::size_t total = steps_per_epoch * hyper_.epochs;
    std::vector<std::size_t> order(pairs.size());
    std::mt19937_64 rng(mix(seed_, 0xD1A0, 0));
    std::vector<LossRecord> records;
    std::vector<PatchPair> batch;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hyper_.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
        batch.clear();
        for (std::size_t i = b * B; i < std::min(pairs.size(), (b + 1) * B); ++i) batch.push_back(pairs[order[i]]);
        train_step(batch, step, total, steps_per_epoch, step);
        records.push_back(last_);
        if (log) write_loss_record(*log, last_);
      }
      if (on_epoch) on_epoch(epoch + 1);
    }
    return records;
  }

  double learning_rate(std::size_t step, std::size_t total_steps, std::size_t steps_per_epoch) const {
    if (hyper_.lr_override) return *hyper_.lr_override;
    return warmup_cosine(hyper_.peak_lr(), hyper_.min_lr, hyper_.warmup_epochs * steps_per_epoch, total_steps, step);
  }

  double momentum(std::size_t step, std::size_t total_steps) const {
    if (hyper_.ema_override) return *hyper_.ema_override;
    return cosine_ramp(hyper_.ema_start, hyper_.ema_end, total_steps, step);
  }

  /// Embeddings of the teacher backbone (the network used for downstream features).
  Tensor embed(std::span<const PatchPair> pairs, std::size_t chunk = 64) {
    return embed_batches(hyper_.arch, pairs, teacher_, cfg_, chunk);
  }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.config = cfg_;
    ck.meta["arch"] = to_string(hyper_.arch);
    ck.meta["prototypes"] = std::to_string(hyper_.head.prototypes);
    store_params(ck, "student/", student_);
    store_params(ck, "teacher/", teacher_);
    student_head_.visit_all([&](const std::string& n, Var& v) { ck.put("student_head/" + n, v.value()); });
    teacher_head_.visit_all([&](const std::string& n, Var& v) { ck.put("teacher_head/" + n, v.value()); });
    ck.put("dino/center", center_);
    return ck;
  }

  static Tensor embed_batches(Architecture arch, std::span<const PatchPair> pairs, const CDNetParams& params,
                              const CDNetConfig& cfg, std::size_t chunk = 64) {
    NoGradGuard guard;
    std::vector<double> flat;
    for (std::size_t i = 0; i < pairs.size(); i += chunk) {
      auto part = pairs.subspan(i, std::min(chunk, pairs.size() - i));
      const auto emb = encode(arch, part, params, cfg).embedding.value();
      flat.insert(flat.end(), emb.data().begin(), emb.data().end());
    }
    return Tensor({pairs.size(), cfg.dim1}, std::move(flat));
  }

  CDNetParams& student() { return student_; }
  CDNetParams& teacher() { return teacher_; }
  HeadParams& student_head() { return student_head_; }
  HeadParams& teacher_head() { return teacher_head_; }
  const Tensor& center() const { return center_; }
  const CDNetConfig& config() const { return cfg_; }
  const DinoHyper& hyper() const { return hyper_; }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t h = a * 0x9E3779B97F4A7C15ULL;
    h ^= b + 0x7F4A7C159E3779B9ULL + (h << 6) + (h >> 2);
    h ^= c + 0x94D049BB133111EBULL + (h << 6) + (h >> 2);
    return h;
  }

 private:
  CDNetConfig cfg_;
  DinoHyper hyper_;
  std::uint64_t seed_;
  CDNetParams student_;
  CDNetParams teacher_;
  HeadParams student_head_;
  HeadParams teacher_head_;
  Tensor center_;
  std::unique_ptr<AdamW> optimizer_;
  LossRecord last_;
};

}  // namespace cdnet
