#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdnet/checkpoint.hpp"
#include "cdnet/complexity.hpp"
#include "cdnet/config.hpp"
#include "cdnet/dino.hpp"
#include "cdnet/image.hpp"
#include "cdnet/mil.hpp"
#include "cdnet/model.hpp"
#include "cdnet/pyramid.hpp"

namespace cdnet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Synthetic slides

struct SyntheticSlide {
  std::string slide_id;
  int label = 0;
  std::vector<PatchPair> pairs;  // tiling order, unfiltered
};

inline std::string slide_name(int label, std::size_t index) {
  std::ostringstream os;
  os << "slide_" << label << '_' << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

inline std::string pair_name(const std::string& slide_id, std::size_t row, std::size_t col) {
  return slide_id + "_r" + std::to_string(row) + "_c" + std::to_string(col);
}

/// `count` slides per class, interleaved by index (class 0 first). The low level of each
/// slide is `slides_side` patches on a side.
inline std::vector<SyntheticSlide> synth_slides(std::size_t count, std::uint64_t seed, const CDNetConfig& cfg,
                                                std::size_t slides_side = 4, const SyntheticStyle& style = {}) {
  cfg.validate();
  std::vector<SyntheticSlide> out;
  for (std::size_t i = 0; i < count; ++i) {
    for (int label : {0, 1}) {
      const auto pyr = gen_synthetic(DinoTrainer::mix(seed, static_cast<std::uint64_t>(label), i), label,
                                     slides_side * cfg.patch_px(), cfg.mag_ratio(), style);
      out.push_back({slide_name(label, i), label, tile(pyr, cfg.patch_px())});
    }
  }
  return out;
}

/// Pairs that pass the tissue filter, in slide then tiling order.
inline std::vector<PatchPair> tissue_pairs(const std::vector<SyntheticSlide>& slides,
                                           double threshold = kDefaultTissueThreshold) {
  std::vector<PatchPair> out;
  for (const auto& s : slides)
    for (const auto& p : s.pairs)
      if (tissue_filter(p, threshold)) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Model loading

struct LoadedModel {
  CDNetConfig config;
  Architecture arch = Architecture::CDNet;
  CDNetParams params;
};

/// Backbone weights from a checkpoint: the teacher when present, else the student, else
/// unprefixed blobs.
inline LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = read_checkpoint(path);
  ck.config.validate();
  LoadedModel m;
  m.config = ck.config;
  if (auto it = ck.meta.find("arch"); it != ck.meta.end()) m.arch = parse_architecture(it->second);
  m.params = init_params(m.config, 0);
  const std::string prefix = ck.has_prefix("teacher/") ? "teacher/" : ck.has_prefix("student/") ? "student/" : "";
  load_params(ck, prefix, m.params);
  return m;
}

inline void check_geometry(const PatchPair& pair, const CDNetConfig& cfg, const std::string& what) {
  if (pair.context.height() != cfg.patch_px() || pair.mag_ratio != cfg.mag_ratio()) {
    throw ConfigError(what + ": context " + std::to_string(pair.context.height()) + " px at ratio " +
                      std::to_string(pair.mag_ratio) + " does not match config patch_px " +
                      std::to_string(cfg.patch_px()) + " and mag_ratio " + std::to_string(cfg.mag_ratio()));
  }
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenDataOptions {
  std::size_t count = 2;  // slides per class
  std::uint64_t seed = 7;
  std::string out_dir;
  CDNetConfig config = CDNetConfig::toy();
  std::size_t slide_patches = 4;  // patches per side of the low level
};

/// Writes images/<pair>_ctx.ppm, images/<pair>_det.ppm and manifest.tsv; returns the manifest path.
inline std::string cmd_gen_data(const GenDataOptions& opt) {
  if (opt.count == 0) throw UsageError("gen-data: count must be positive");
  fs::create_directories(fs::path(opt.out_dir) / "images");
  std::vector<ManifestRecord> records;
  for (const auto& slide : synth_slides(opt.count, opt.seed, opt.config, opt.slide_patches)) {
    for (const auto& pr : slide.pairs) {
      const std::string id = pair_name(slide.slide_id, pr.row, pr.col);
      const std::string ctx = "images/" + id + "_ctx.ppm", det = "images/" + id + "_det.ppm";
      write_ppm((fs::path(opt.out_dir) / ctx).string(), pr.context);
      write_ppm((fs::path(opt.out_dir) / det).string(), pr.detail);
      records.push_back({id, ctx, det, pr.row, pr.col, slide.slide_id, slide.label});
    }
  }
  const std::string manifest = (fs::path(opt.out_dir) / "manifest.tsv").string();
  write_manifest(manifest, records);
  return manifest;
}

struct PretrainOptions {
  std::string manifest;
  std::string out_dir;
  CDNetConfig config = CDNetConfig::toy();
  std::uint64_t seed = 7;
  DinoHyper hyper;
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  double tissue_threshold = kDefaultTissueThreshold;
};

struct PretrainOutcome {
  std::string checkpoint;
  std::string loss_log;
  std::size_t pairs = 0;
};

inline PretrainOutcome cmd_pretrain(const PretrainOptions& opt) {
  if (!fs::exists(opt.manifest)) throw IoError("pretrain: manifest " + opt.manifest + " does not exist");
  opt.config.validate();
  std::vector<PatchPair> pairs;
  for (const auto& rec : read_manifest(opt.manifest)) {
    PatchPair p = load_pair(opt.manifest, rec);
    check_geometry(p, opt.config, "pretrain pair " + rec.pair_id);
    if (tissue_filter(p, opt.tissue_threshold)) pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw UsageError("pretrain: no pairs pass the tissue filter");
  fs::create_directories(opt.out_dir);
  PretrainOutcome res;
  res.pairs = pairs.size();
  res.loss_log = (fs::path(opt.out_dir) / "loss.tsv").string();
  res.checkpoint = (fs::path(opt.out_dir) / "checkpoint.cdn").string();
  std::ofstream log(res.loss_log);
  if (!log) throw IoError("cannot write loss log " + res.loss_log);
  log.precision(17);
  DinoTrainer trainer(opt.config, opt.hyper, opt.seed);
  trainer.fit(pairs, &log, [&](std::size_t epoch) {
    if (opt.checkpoint_every && epoch % opt.checkpoint_every == 0 && epoch < opt.hyper.epochs) {
      write_checkpoint((fs::path(opt.out_dir) / ("checkpoint_epoch" + std::to_string(epoch) + ".cdn")).string(),
                       trainer.to_checkpoint());
    }
  });
  write_checkpoint(res.checkpoint, trainer.to_checkpoint());
  return res;
}

struct ExtractOptions {
  std::string manifest;
  std::string checkpoint;
  std::string out_dir;
  double tissue_threshold = kDefaultTissueThreshold;
};

struct ExtractOutcome {
  std::vector<std::string> written;  // slide ids
  std::vector<std::string> skipped;
  std::size_t dim = 0;
};

/// One <slide_id>.fea per slide (instances in manifest order), labels.tsv, and skipped.tsv
/// for slides with no tissue pairs.
inline ExtractOutcome cmd_extract(const ExtractOptions& opt) {
  if (!fs::exists(opt.manifest)) throw IoError("extract: manifest " + opt.manifest + " does not exist");
  LoadedModel model = load_model(opt.checkpoint);
  const auto records = read_manifest(opt.manifest);
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ManifestRecord*>> by_slide;
  for (const auto& r : records) {
    if (!by_slide.count(r.slide_id)) order.push_back(r.slide_id);
    by_slide[r.slide_id].push_back(&r);
  }
  fs::create_directories(opt.out_dir);
  ExtractOutcome res;
  res.dim = model.config.dim1;
  std::ofstream labels((fs::path(opt.out_dir) / "labels.tsv").string());
  std::ofstream skipped((fs::path(opt.out_dir) / "skipped.tsv").string());
  if (!labels || !skipped) throw IoError("extract: cannot write into " + opt.out_dir);
  for (const auto& slide : order) {
    std::vector<PatchPair> pairs;
    for (const ManifestRecord* r : by_slide[slide]) {
      PatchPair p = load_pair(opt.manifest, *r);
      check_geometry(p, model.config, "extract pair " + r->pair_id);
      if (tissue_filter(p, opt.tissue_threshold)) pairs.push_back(std::move(p));
    }
    if (pairs.empty()) {
      skipped << slide << "\tno tissue pairs\n";
      res.skipped.push_back(slide);
      continue;
    }
    const Tensor feats = DinoTrainer::embed_batches(model.arch, pairs, model.params, model.config);
    write_features((fs::path(opt.out_dir) / (slide + ".fea")).string(), feats);
    labels << slide << '\t' << by_slide[slide].front()->label << '\n';
    res.written.push_back(slide);
  }
  return res;
}

inline std::map<std::string, int> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open labels file " + path);
  std::map<std::string, int> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IntegrityError(path + ": expected slide_id<TAB>label");
    const std::string label = line.substr(tab + 1);
    if (label != "0" && label != "1") throw IntegrityError(path + ": label must be 0 or 1 for " + line.substr(0, tab));
    out[line.substr(0, tab)] = label == "1";
  }
  return out;
}

/// Bags for every labelled slide, in slide-id order.
inline std::vector<Bag> load_bags(const std::string& feature_dir, const std::map<std::string, int>& labels) {
  std::vector<Bag> bags;
  for (const auto& [id, label] : labels) {
    const fs::path path = fs::path(feature_dir) / (id + ".fea");
    if (!fs::exists(path)) throw IntegrityError("no feature file for labelled slide " + id);
    bags.push_back({read_features(path.string()), label, id});
  }
  return bags;
}

struct MilSplit {
  std::vector<Bag> train, val, test;
};

/// Stratified train/val/test split by slide; validation is carved from the training part.
inline MilSplit split_bags(const std::vector<Bag>& bags, std::uint64_t seed, double test_fraction = 0.3,
                           double val_fraction = 0.15) {
  auto [trainval, test] = stratified_split(bags, test_fraction, seed);
  auto [train, val] = stratified_split(trainval, val_fraction, seed + 1);
  return {std::move(train), std::move(val), std::move(test)};
}

struct MilOptions {
  std::string feature_dir;
  std::string labels;  // default: <feature_dir>/labels.tsv
  std::string out_dir;
  std::uint64_t split_seed = 7;
  double test_fraction = 0.3;
  double val_fraction = 0.15;
  MilHyper hyper;
};

struct MilOutcome {
  Metrics test;
  std::size_t best_epoch = 0;
  std::string predictions;
};

inline MilOutcome run_mil(const MilSplit& split, const MilHyper& hyper) {
  if (split.train.empty() || split.val.empty() || split.test.empty()) {
    throw UsageError("mil: every split needs at least one slide (train " + std::to_string(split.train.size()) +
                     ", val " + std::to_string(split.val.size()) + ", test " + std::to_string(split.test.size()) + ")");
  }
  auto trained = train_mil(split.train, split.val, init_mil(split.train.front().dim(), hyper.seed), hyper);
  MilOutcome out;
  out.test = evaluate(split.test, trained.params);
  out.best_epoch = trained.best_epoch;
  return out;
}

inline MilOutcome cmd_mil(const MilOptions& opt) {
  const std::string labels_path =
      opt.labels.empty() ? (fs::path(opt.feature_dir) / "labels.tsv").string() : opt.labels;
  const auto bags = load_bags(opt.feature_dir, read_labels(labels_path));
  const MilSplit split = split_bags(bags, opt.split_seed, opt.test_fraction, opt.val_fraction);
  MilOutcome out = run_mil(split, opt.hyper);
  fs::create_directories(opt.out_dir);
  out.predictions = (fs::path(opt.out_dir) / "predictions.tsv").string();
  write_predictions(out.predictions, split.test, out.test.scores);
  return out;
}

struct AttentionOptions {
  std::string manifest;
  std::string pair_id;
  std::string checkpoint;  // empty: freshly initialized weights for `config`
  CDNetConfig config = CDNetConfig::toy();
  Architecture arch = Architecture::CDNet;
  std::uint64_t seed = 7;
  std::size_t layer = 1;
  std::string out_path;
};

/// Writes the CLS attention map, upsampled to the context patch size, as 8-bit PGM.
/// Returns the normalized map at grid resolution.
inline Tensor cmd_attention(const AttentionOptions& opt) {
  const auto records = read_manifest(opt.manifest);
  const ManifestRecord* rec = nullptr;
  for (const auto& r : records)
    if (r.pair_id == opt.pair_id) rec = &r;
  if (!rec) throw LookupError("attention: pair '" + opt.pair_id + "' not found in " + opt.manifest);
  LoadedModel model;
  if (opt.checkpoint.empty()) {
    model = {opt.config, opt.arch, init_params(opt.config, opt.seed)};
  } else {
    model = load_model(opt.checkpoint);
  }
  const PatchPair pair = load_pair(opt.manifest, *rec);
  check_geometry(pair, model.config, "attention pair " + rec->pair_id);
  NoGradGuard guard;
  const auto fwd = encode(model.arch, std::span<const PatchPair>(&pair, 1), model.params, model.config);
  Tensor map = attention_map(fwd.context_attn, opt.layer);
  const std::size_t g = model.config.grid(), p = model.config.p, side = g * p;
  std::vector<std::uint8_t> px(side * side);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      px[r * side + c] = static_cast<std::uint8_t>(std::lround(255.0 * map[(r / p) * g + c / p]));
  write_pgm(opt.out_path, side, side, px);
  return map;
}

/// Text table (or records) of ViT at context and detail resolution against CD-Net.
inline std::string cmd_complexity(const CDNetConfig& cfg, bool records) {
  const auto reports = standard_reports(cfg);
  return records ? format_records(reports, 1) : format_table(reports, 1);
}

}  // namespace cdnet
