#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cdnet/errors.hpp"
#include "cdnet/image.hpp"

namespace cdnet {

/// Two-level slide pyramid: `high` has exactly `mag_ratio` times the resolution of `low`.
struct ImagePyramid {
  Image low;
  Image high;
  std::size_t mag_ratio = 4;

  void validate() const {
    if (mag_ratio < 2) throw IntegrityError("pyramid magnification ratio must be >= 2");
    if (high.height() != low.height() * mag_ratio || high.width() != low.width() * mag_ratio) {
      throw IntegrityError("pyramid levels disagree with ratio " + std::to_string(mag_ratio) + ": low " +
                           std::to_string(low.height()) + "x" + std::to_string(low.width()) + ", high " +
                           std::to_string(high.height()) + "x" + std::to_string(high.width()));
    }
  }
};

/// A context patch and the co-located region of the magnified level.
///
/// Pixel (r, c) of `context` corresponds to block [R*r, R*(r+1)) x [R*c, R*(c+1)) of
/// `detail`, R = mag_ratio.
struct PatchPair {
  Image context;
  Image detail;
  std::size_t row = 0;  // origin in low-level coordinates
  std::size_t col = 0;
  std::size_t mag_ratio = 4;
};

/// Non-overlapping grid tiling; the low level is padded with white to a multiple of
/// `patch_px` (and the high level correspondingly).
inline std::vector<PatchPair> tile(const ImagePyramid& pyramid, std::size_t patch_px) {
  pyramid.validate();
  if (patch_px == 0) throw ConfigError("tile: patch size must be positive");
  const std::size_t R = pyramid.mag_ratio;
  const Image low = pad_to_multiple(pyramid.low, patch_px);
  const Image high = pad_to_multiple(pyramid.high, patch_px * R);
  std::vector<PatchPair> pairs;
  for (std::size_t r = 0; r < low.height(); r += patch_px) {
    for (std::size_t c = 0; c < low.width(); c += patch_px) {
      PatchPair pair;
      pair.context = crop(low, r, c, patch_px, patch_px);
      pair.detail = crop(high, r * R, c * R, patch_px * R, patch_px * R);
      pair.row = r;
      pair.col = c;
      pair.mag_ratio = R;
      pairs.push_back(std::move(pair));
    }
  }
  return pairs;
}

/// Non-background fraction of the context image: a pixel is tissue when its distance from
/// white, (255 - min(R, G, B)) / 255, exceeds `threshold`. Tissue iff the fraction >= 0.1.
inline bool tissue_filter(const PatchPair& pair, double threshold) {
  const Image& img = pair.context;
  const std::size_t total = img.height() * img.width();
  std::size_t tissue = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const auto* px = img.pixels().data() + i * 3;
    const double ink = (255.0 - std::min({px[0], px[1], px[2]})) / 255.0;
    if (ink > threshold) ++tissue;
  }
  return static_cast<double>(tissue) >= 0.1 * static_cast<double>(total);
}

inline constexpr double kDefaultTissueThreshold = 0.2;

// ---------------------------------------------------------------------------
// Synthetic slides

/// Knobs of the procedural slide renderer. Class 1 differs from class 0 at two scales:
/// a fraction of its cells is gathered into clumps (visible at the low level), and its
/// cells carry one-pixel row stripes and mild elongation (the stripes average out
/// exactly under the box filter, so they exist only at the high level).
struct SyntheticStyle {
  double cells_per_px = 1.0 / 90.0;  // per low-level tissue pixel
  double radius_min = 6.0;           // high-level pixels
  double radius_max = 9.0;
  double elongation = 1.25;          // class 1 axis ratio sqrt
  double cluster_fraction = 0.5;     // class 1 share of cells placed in clumps
  std::size_t cells_per_cluster = 6;
  double cluster_sigma = 6.0;        // low-level pixels
  int texture_amplitude = 90;
  int noise = 6;
  double tissue_coverage = 1.6;      // ellipse area over slide area; above 1 it overflows the slide
};

namespace detail {

inline std::uint8_t clamp_u8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

struct Cell {
  double y, x, a, b, theta;
  int shade;
};

}  // namespace detail

/// Renders a labelled two-level pyramid. The high level is drawn first; the low level is its
/// exact box-filtered downsample.
inline ImagePyramid gen_synthetic(std::uint64_t seed, int label, std::size_t size_low, std::size_t mag_ratio,
                                  const SyntheticStyle& style = {}) {
  if (label != 0 && label != 1) throw ConfigError("gen_synthetic: class must be 0 or 1");
  if (mag_ratio < 2 || size_low == 0) throw ConfigError("gen_synthetic: need mag_ratio >= 2 and size > 0");
  std::mt19937_64 rng(seed * 2654435761ULL + static_cast<std::uint64_t>(label) + 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double R = static_cast<double>(mag_ratio);
  const std::size_t H = size_low * mag_ratio;
  const double extent = static_cast<double>(H);

  // Tissue region: an ellipse with a random tilt around the slide centre.
  const double area_scale = std::sqrt(style.tissue_coverage / std::numbers::pi);
  const double ty = extent * (0.5 + 0.05 * (unit(rng) - 0.5));
  const double tx = extent * (0.5 + 0.05 * (unit(rng) - 0.5));
  const double aspect = 0.8 + 0.4 * unit(rng);
  const double tra = extent * area_scale * std::sqrt(aspect) * 1.0;
  const double trb = extent * area_scale / std::sqrt(aspect);
  const double tth = unit(rng) * std::numbers::pi;
  auto in_tissue = [&](double y, double x) {
    const double dy = y - ty, dx = x - tx;
    const double u = (dx * std::cos(tth) + dy * std::sin(tth)) / tra;
    const double v = (-dx * std::sin(tth) + dy * std::cos(tth)) / trb;
    return u * u + v * v <= 1.0;
  };

  const double tissue_px_low = style.tissue_coverage * static_cast<double>(size_low * size_low);
  const auto count = static_cast<std::size_t>(
      std::llround(tissue_px_low * style.cells_per_px * (0.85 + 0.3 * unit(rng))));
  const double ecc = label == 1 ? style.elongation : 1.0;
  const double min_dist = 2.0 * style.radius_max * style.elongation + 2.0;

  constexpr int kMaxShade = 12;
  std::vector<detail::Cell> cells;
  auto try_place = [&](double y, double x) {
    if (y < 0 || x < 0 || y >= extent || x >= extent || !in_tissue(y, x)) return false;
    for (const auto& c : cells) {
      if ((c.y - y) * (c.y - y) + (c.x - x) * (c.x - x) < min_dist * min_dist) return false;
    }
    const double r = style.radius_min + (style.radius_max - style.radius_min) * unit(rng);
    const int shade = static_cast<int>(std::lround(2.0 * kMaxShade * unit(rng))) - kMaxShade;
    cells.push_back({y, x, r * ecc, r / ecc, unit(rng) * std::numbers::pi, shade});
    return true;
  };

  std::size_t clustered = label == 1 ? static_cast<std::size_t>(std::llround(style.cluster_fraction * count)) : 0;
  std::normal_distribution<double> jitter(0.0, style.cluster_sigma * R);
  constexpr int kAttempts = 2000;
  while (clustered > 0) {
    double cy = 0, cx = 0;
    for (int a = 0; a < kAttempts; ++a) {
      cy = unit(rng) * extent;
      cx = unit(rng) * extent;
      if (in_tissue(cy, cx)) break;
    }
    const std::size_t want = std::min(clustered, style.cells_per_cluster);
    std::size_t placed = 0;
    for (int a = 0; a < kAttempts && placed < want; ++a) {
      if (try_place(cy + jitter(rng), cx + jitter(rng))) ++placed;
    }
    clustered -= want;
  }
  for (int a = 0; a < kAttempts * 20 && cells.size() < count; ++a) try_place(unit(rng) * extent, unit(rng) * extent);

  Image high(H, H);
  std::uniform_int_distribution<int> noise(-style.noise, style.noise);
  constexpr int kBackground[3] = {246, 244, 246};
  constexpr int kStroma[3] = {228, 172, 204};
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < H; ++x) {
      const bool tissue = in_tissue(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        high.at(y, x, ch) = detail::clamp_u8((tissue ? kStroma[ch] : kBackground[ch]) + noise(rng));
      }
    }
  }
  constexpr int kNucleus[3] = {92, 44, 128};
  // Stripe amplitude per channel, capped so no nucleus pixel clips: clipping one side of
  // the stripe would shift the mean and leak the texture into the low level.
  int amp[3];
  for (std::size_t ch = 0; ch < 3; ++ch)
    amp[ch] = std::min({style.texture_amplitude, kNucleus[ch] - kMaxShade, 255 - kNucleus[ch] - kMaxShade});
  for (const auto& c : cells) {
    const double reach = std::max(c.a, c.b) + 1.0;
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(c.y - reach)));
    const auto y1 = static_cast<std::size_t>(std::min(extent - 1, std::ceil(c.y + reach)));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(c.x - reach)));
    const auto x1 = static_cast<std::size_t>(std::min(extent - 1, std::ceil(c.x + reach)));
    const double ct = std::cos(c.theta), st = std::sin(c.theta);
    for (std::size_t y = y0; y <= y1; ++y) {
      for (std::size_t x = x0; x <= x1; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - c.y, dx = static_cast<double>(x) + 0.5 - c.x;
        const double u = (dx * ct + dy * st) / c.a, v = (-dx * st + dy * ct) / c.b;
        if (u * u + v * v > 1.0) continue;
        const int sign = label == 1 ? ((y & 1) ? -1 : 1) : 0;
        for (std::size_t ch = 0; ch < 3; ++ch)
          high.at(y, x, ch) = detail::clamp_u8(kNucleus[ch] + c.shade + sign * amp[ch]);
      }
    }
  }

  ImagePyramid pyr;
  pyr.low = box_downsample(high, mag_ratio);
  pyr.high = std::move(high);
  pyr.mag_ratio = mag_ratio;
  return pyr;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRecord {
  std::string pair_id;
  std::string context_path;
  std::string detail_path;
  std::size_t row = 0;
  std::size_t col = 0;
  std::string slide_id;
  int label = 0;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path);
  for (const auto& r : records) {
    out << r.pair_id << '\t' << r.context_path << '\t' << r.detail_path << '\t' << r.row << '\t' << r.col << '\t'
        << r.slide_id << '\t' << r.label << '\n';
  }
  if (!out) throw IoError("write failed for manifest " + path);
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path);
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) f.push_back(field);
    if (f.size() != 7) {
      throw IntegrityError(path + ":" + std::to_string(lineno) + ": expected 7 tab-separated fields, got " +
                           std::to_string(f.size()));
    }
    try {
      records.push_back({f[0], f[1], f[2], std::stoul(f[3]), std::stoul(f[4]), f[5], std::stoi(f[6])});
    } catch (const std::logic_error&) {
      throw IntegrityError(path + ":" + std::to_string(lineno) + ": malformed numeric field");
    }
    if (records.back().label != 0 && records.back().label != 1) {
      throw IntegrityError(path + ":" + std::to_string(lineno) + ": label must be 0 or 1");
    }
  }
  return records;
}

/// Relative paths in a manifest resolve against the manifest's directory.
inline std::string resolve_path(const std::string& manifest_path, const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

/// Loads the images for one record and checks their geometry.
inline PatchPair load_pair(const std::string& manifest_path, const ManifestRecord& rec) {
  PatchPair pair;
  pair.context = read_ppm(resolve_path(manifest_path, rec.context_path));
  pair.detail = read_ppm(resolve_path(manifest_path, rec.detail_path));
  pair.row = rec.row;
  pair.col = rec.col;
  if (pair.context.height() == 0 || pair.detail.height() % pair.context.height() != 0 ||
      pair.context.height() != pair.context.width() || pair.detail.height() != pair.detail.width()) {
    throw IntegrityError("pair " + rec.pair_id + ": context/detail dimensions are not an aligned square pair");
  }
  pair.mag_ratio = pair.detail.height() / pair.context.height();
  if (pair.mag_ratio < 2) throw IntegrityError("pair " + rec.pair_id + ": magnification ratio below 2");
  return pair;
}

}  // namespace cdnet
