#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cdnet/autograd.hpp"
#include "cdnet/checkpoint.hpp"
#include "cdnet/errors.hpp"
#include "cdnet/nn.hpp"
#include "cdnet/optim.hpp"

namespace cdnet {

struct Bag {
  Tensor features;  // [N, d]
  int label = 0;
  std::string slide_id;

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
};

/// Dual-stream head: instance classifier plus attention aggregation keyed on the critical
/// (max-scoring) instance.
struct MilParams {
  LinearParams instance;  // d -> 1
  LinearParams query;     // d -> d_q
  LinearParams value;     // d -> d_v
  LinearParams bag;       // d_v -> 1

  template <class F>
  void visit_all(F&& f) {
    visit(instance, "instance", f);
    visit(query, "query", f);
    visit(value, "value", f);
    visit(bag, "bag", f);
  }

  std::vector<Var> all() {
    std::vector<Var> out;
    visit_all([&](const std::string&, Var& v) { out.push_back(v); });
    return out;
  }

  std::vector<Tensor> snapshot() {
    std::vector<Tensor> out;
    visit_all([&](const std::string&, Var& v) { out.push_back(v.value()); });
    return out;
  }

  void restore(const std::vector<Tensor>& values) {
    std::size_t i = 0;
    visit_all([&](const std::string&, Var& v) { v.value() = values.at(i++); });
  }

  std::size_t input_dim() const { return instance.weight.shape()[0]; }
};

inline MilParams init_mil(std::size_t d, std::uint64_t seed, std::size_t d_q = 128, std::size_t d_v = 128) {
  Initializer init(seed);
  return {make_linear(d, 1, init), make_linear(d, d_q, init), make_linear(d, d_v, init), make_linear(d_v, 1, init)};
}

namespace detail {

inline void check_bag(const Bag& bag, const MilParams& p) {
  if (bag.features.rank() != 2) throw DimensionError("bag '" + bag.slide_id + "': features must be [N, d]");
  if (bag.dim() != p.input_dim()) {
    throw ConfigError("bag '" + bag.slide_id + "': feature width " + std::to_string(bag.dim()) +
                      " does not match MIL input width " + std::to_string(p.input_dim()));
  }
}

}  // namespace detail

/// Per-instance logits, shape [N].
inline Var instance_scores(const Bag& bag, const MilParams& p) {
  detail::check_bag(bag, p);
  return reshape(apply(p.instance, constant(bag.features)), {bag.size()});
}

struct BagOutput {
  Var bag_logit;           // scalar
  Var instance_max_logit;  // scalar
  Var score;               // 0.5 * (sigmoid(bag) + sigmoid(instance max))
  Tensor attention;        // [N]
  std::size_t critical = 0;
};

inline BagOutput bag_forward(const Bag& bag, const MilParams& p) {
  detail::check_bag(bag, p);
  const std::size_t N = bag.size(), d = bag.dim();
  // Rows are processed in lexicographic order so every floating-point reduction, and with
  // it the slide score, is bit-identical under any permutation of the bag.
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double* f = bag.features.data().data();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(f + a * d, f + (a + 1) * d, f + b * d, f + (b + 1) * d);
  });
  Tensor sorted({N, d});
  for (std::size_t r = 0; r < N; ++r) std::copy_n(f + order[r] * d, d, sorted.data().begin() + r * d);

  Var h = constant(std::move(sorted));
  Var inst = apply(p.instance, h);  // [N, 1]
  // Critical instance: highest score, lowest original index on ties.
  std::size_t crit = 0;
  for (std::size_t r = 1; r < N; ++r) {
    const double a = inst.value()[r], b = inst.value()[crit];
    if (a > b || (a == b && order[r] < order[crit])) crit = r;
  }

  Var q = apply(p.query, h);                               // [N, d_q]
  Var sim = matmul(q, transpose(gather_rows(q, {crit})));  // [N, 1]
  Var attn = softmax(reshape(sim, {1, N}), 1);             // [1, N]
  Var embedding = matmul(attn, apply(p.value, h));         // [1, d_v]
  BagOutput out;
  out.bag_logit = reshape(apply(p.bag, embedding), {1});
  out.instance_max_logit = reshape(gather_rows(inst, {crit}), {1});
  out.score = scale(add(sigmoid(out.bag_logit), sigmoid(out.instance_max_logit)), 0.5);
  out.attention = Tensor({N});
  for (std::size_t r = 0; r < N; ++r) out.attention[order[r]] = attn.value()[r];
  out.critical = order[crit];
  return out;
}

inline double predict(const Bag& bag, const MilParams& p) {
  NoGradGuard guard;
  return bag_forward(bag, p).score.item();
}

/// Rank-statistic AUC with ties counted as one half. Undefined for a single class.
inline std::optional<double> auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) {
        rank_sum += mid_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

struct Metrics {
  double accuracy = 0.0;
  std::optional<double> auc;
  double loss = 0.0;  // mean binary cross-entropy of the slide scores
  std::vector<double> scores;
};

inline Metrics evaluate(const std::vector<Bag>& bags, const MilParams& p) {
  if (bags.empty()) throw UsageError("evaluate: no bags");
  Metrics m;
  std::vector<int> labels;
  std::size_t correct = 0;
  for (const auto& b : bags) {
    const double s = predict(b, p);
    m.scores.push_back(s);
    labels.push_back(b.label);
    correct += static_cast<int>(s >= 0.5) == b.label;
    m.loss -= (b.label == 1 ? std::log(s) : std::log1p(-s)) / static_cast<double>(bags.size());
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(bags.size());
  m.auc = auc(m.scores, labels);
  return m;
}

struct MilHyper {
  std::size_t epochs = 40;
  double lr = 2e-4;
  double weight_decay = 0.05;
  std::uint64_t seed = 17;
};

struct MilTrainResult {
  MilParams params;
  std::vector<double> epoch_loss;  // mean BCE per epoch
  std::vector<std::optional<double>> val_auc;
  std::size_t best_epoch = 0;  // 1-based
};

/// Trains on one bag per step and keeps the parameters from the epoch with the best
/// validation AUC, ties going to the lower validation loss (a small validation split
/// saturates at AUC 1 within a few epochs). Falls back to the last epoch if AUC is never
/// defined.
inline MilTrainResult train_mil(const std::vector<Bag>& train, const std::vector<Bag>& val_bags, MilParams params,
                                const MilHyper& hyper) {
  if (train.empty() || val_bags.empty()) throw UsageError("train_mil: training and validation splits must be non-empty");
  std::size_t positives = 0;
  for (const auto& b : train) {
    detail::check_bag(b, params);
    if (b.label != 0 && b.label != 1) throw ConfigError("train_mil: bag '" + b.slide_id + "' has a non-binary label");
    positives += b.label == 1;
  }
  if (positives == 0 || positives == train.size()) {
    throw TrainingError("train_mil: training split contains a single class (" + std::to_string(positives) + " of " +
                        std::to_string(train.size()) + " bags positive)");
  }

  AdamW opt(params.all());
  std::mt19937_64 rng(hyper.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  MilTrainResult result;
  std::optional<double> best;
  double best_loss = 0.0;
  std::vector<Tensor> best_values = params.snapshot();
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t i : order) {
      const Bag& b = train[i];
      auto out = bag_forward(b, params);
      Var loss = binary_cross_entropy(out.score, Tensor({1}, {static_cast<double>(b.label)}));
      total += loss.item();
      opt.zero_grad();
      backward(loss);
      opt.step(hyper.lr, hyper.weight_decay);
    }
    result.epoch_loss.push_back(total / static_cast<double>(train.size()));
    const auto val = evaluate(val_bags, params);
    const auto val_auc = val.auc;
    result.val_auc.push_back(val_auc);
    if (val_auc && (!best || *val_auc > *best || (*val_auc == *best && val.loss < best_loss))) {
      best = val_auc;
      best_loss = val.loss;
      best_values = params.snapshot();
      result.best_epoch = epoch;
    }
  }
  if (best) {
    params.restore(best_values);
  } else {
    result.best_epoch = hyper.epochs;
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Splits and files

/// Stratified split: per class, the first round(fraction * count) bags of a seeded shuffle
/// go to the second part.
inline std::pair<std::vector<Bag>, std::vector<Bag>> stratified_split(const std::vector<Bag>& bags, double fraction,
                                                                      std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) throw RangeError("stratified_split: fraction must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  std::pair<std::vector<Bag>, std::vector<Bag>> out;
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < bags.size(); ++i)
      if (bags[i].label == label) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < take ? out.second : out.first).push_back(bags[idx[k]]);
  }
  auto by_id = [](const Bag& a, const Bag& b) { return a.slide_id < b.slide_id; };
  std::sort(out.first.begin(), out.first.end(), by_id);
  std::sort(out.second.begin(), out.second.end(), by_id);
  return out;
}

inline constexpr char kFeatureMagic[4] = {'F', 'E', 'A', '1'};

/// FEA1: magic, u32 N, u32 d, N*d little-endian float32, row-major.
inline void write_features(const std::string& path, const Tensor& features) {
  if (features.rank() != 2) throw DimensionError("write_features: expected [N, d]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature file " + path);
  out.write(kFeatureMagic, 4);
  io::put_u32(out, static_cast<std::uint32_t>(features.rows()));
  io::put_u32(out, static_cast<std::uint32_t>(features.cols()));
  std::vector<float> f(features.data().begin(), features.data().end());
  out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!out) throw IoError("write failed for feature file " + path);
}

inline Tensor read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw IntegrityError(path + ": not a FEA1 feature file");
  }
  const auto n = io::get<std::uint32_t>(in, "instance count");
  const auto d = io::get<std::uint32_t>(in, "feature width");
  if (n == 0 || d == 0) throw IntegrityError(path + ": empty feature matrix");
  std::vector<float> f(static_cast<std::size_t>(n) * d);
  in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(f.size() * sizeof(float))) {
    throw IntegrityError(path + ": truncated feature data");
  }
  return Tensor({n, d}, std::vector<double>(f.begin(), f.end()));
}

inline void write_predictions(const std::string& path, const std::vector<Bag>& bags, const std::vector<double>& scores) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write predictions " + path);
  out.precision(17);
  for (std::size_t i = 0; i < bags.size(); ++i) out << bags[i].slide_id << '\t' << scores[i] << '\t' << bags[i].label << '\n';
}

}  // namespace cdnet
