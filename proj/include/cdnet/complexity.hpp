#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cdnet/config.hpp"
#include "cdnet/errors.hpp"

namespace cdnet {

/// Token and attention-score counts for one self-attention layer of each kind.
/// `sa_pairs` counts query-key pairs over patch tokens; `sa_pairs_with_cls` also counts
/// the CLS token on the context sequence.
struct CostReport {
  std::string model;
  std::uint64_t context_tokens = 0;
  std::uint64_t detail_tokens = 0;
  std::uint64_t sa_pairs = 0;
  std::uint64_t sa_pairs_with_cls = 0;

  std::uint64_t tokens() const { return context_tokens + detail_tokens; }
};

inline CostReport vit_cost(std::uint64_t image_px, std::uint64_t patch) {
  if (patch == 0 || image_px == 0 || image_px % patch) {
    throw ConfigError("vit_cost: image side " + std::to_string(image_px) + " is not a multiple of patch " +
                      std::to_string(patch));
  }
  const std::uint64_t t = (image_px / patch) * (image_px / patch);
  return {"ViT-" + std::to_string(image_px), t, 0, t * t, (t + 1) * (t + 1)};
}

/// Context attention over n tokens plus n independent detail attentions over m sub-tokens.
inline CostReport cdnet_cost(const CDNetConfig& cfg) {
  cfg.validate();
  const std::uint64_t n = cfg.n, m = cfg.m;
  return {"CD-Net", n, n * m, n * n + n * m * m, (n + 1) * (n + 1) + n * m * m};
}

struct Ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

/// baseline.sa_pairs / target.sa_pairs as a reduced fraction.
inline Ratio speedup(const CostReport& baseline, const CostReport& target) {
  if (target.sa_pairs == 0) throw RangeError("speedup: target has zero attention cost");
  const std::uint64_t g = std::gcd(baseline.sa_pairs, target.sa_pairs);
  return {baseline.sa_pairs / g, target.sa_pairs / g};
}

/// The standard comparison: ViT at the context resolution, ViT at the detail resolution,
/// and CD-Net, all for `cfg`.
inline std::vector<CostReport> standard_reports(const CDNetConfig& cfg) {
  cfg.validate();
  return {vit_cost(cfg.patch_px(), cfg.p), vit_cost(cfg.detail_px(), cfg.p), cdnet_cost(cfg)};
}

namespace detail {

inline std::string group_digits(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

}  // namespace detail

/// Aligned table; the ratio row compares every column against `reports[baseline]`.
inline std::string format_table(const std::vector<CostReport>& reports, std::size_t baseline) {
  if (baseline >= reports.size()) throw RangeError("format_table: baseline index out of range");
  std::vector<std::vector<std::string>> rows = {{""}, {"Number of tokens"}, {"Self-attention pairs"},
                                                {reports[baseline].model + " cost / model cost"}};
  for (const auto& r : reports) {
    rows[0].push_back(r.model);
    rows[1].push_back(detail::group_digits(r.tokens()));
    rows[2].push_back(detail::group_digits(r.sa_pairs));
    std::ostringstream ratio;
    ratio << std::fixed << std::setprecision(2) << speedup(reports[baseline], r).value() << "x";
    rows[3].push_back(ratio.str());
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == 0) {
        out << std::left << std::setw(static_cast<int>(width[c])) << row[c];
      } else {
        out << "  " << std::right << std::setw(static_cast<int>(width[c])) << row[c];
      }
    }
    out << '\n';
  }
  return out.str();
}

/// One tab-separated record per model, with a header line:
/// model, context_tokens, detail_tokens, tokens, sa_pairs, sa_pairs_with_cls, ratio_num, ratio_den.
inline std::string format_records(const std::vector<CostReport>& reports, std::size_t baseline) {
  if (baseline >= reports.size()) throw RangeError("format_records: baseline index out of range");
  std::ostringstream out;
  out << "model\tcontext_tokens\tdetail_tokens\ttokens\tsa_pairs\tsa_pairs_with_cls\tratio_num\tratio_den\n";
  for (const auto& r : reports) {
    const Ratio q = speedup(reports[baseline], r);
    out << r.model << '\t' << r.context_tokens << '\t' << r.detail_tokens << '\t' << r.tokens() << '\t' << r.sa_pairs
        << '\t' << r.sa_pairs_with_cls << '\t' << q.num << '\t' << q.den << '\n';
  }
  return out.str();
}

}  // namespace cdnet
