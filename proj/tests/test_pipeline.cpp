#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cdnet/pipeline.hpp"
#include "helpers.hpp"

using namespace cdnet;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "cdnet_test_pipeline";

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(const std::string& args) {
  fs::create_directories(kRoot);
  const fs::path out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = std::string(CDNET_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  CliRun r;
  const int status = std::system(cmd.c_str());
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

fs::path fresh(const std::string& name) {
  const fs::path dir = kRoot / name;
  fs::remove_all(dir);
  return dir;
}

// gen-data -> pretrain (1 epoch) -> extract into `dir`.
void run_pipeline(const fs::path& dir, std::uint64_t seed) {
  ASSERT_EQ(cli("gen-data --count 2 --seed " + std::to_string(seed) + " --out " + (dir / "data").string()).code, 0);
  const std::string manifest = (dir / "data" / "manifest.tsv").string();
  const CliRun pre = cli("pretrain --manifest " + manifest + " --epochs 1 --batch-size 16 --seed " +
                      std::to_string(seed) + " --out " + (dir / "model").string());
  ASSERT_EQ(pre.code, 0) << pre.err;
  const CliRun ext = cli("extract --manifest " + manifest + " --checkpoint " + (dir / "model" / "checkpoint.cdn").string() +
                      " --out " + (dir / "features").string());
  ASSERT_EQ(ext.code, 0) << ext.err;
}

}  // namespace

TEST(GenData, WritesPairsAndManifestDeterministically) {
  const fs::path a = fresh("gen_a"), b = fresh("gen_b"), c = fresh("gen_c");
  ASSERT_EQ(cli("gen-data --count 2 --seed 3 --out " + a.string()).code, 0);
  ASSERT_EQ(cli("gen-data --count 2 --seed 3 --out " + b.string()).code, 0);
  ASSERT_EQ(cli("gen-data --count 2 --seed 4 --out " + c.string()).code, 0);
  const auto records = read_manifest((a / "manifest.tsv").string());
  ASSERT_EQ(records.size(), 4u * 16u);
  std::size_t positives = 0;
  for (const auto& r : records) {
    EXPECT_TRUE(fs::exists(a / r.context_path));
    EXPECT_TRUE(fs::exists(a / r.detail_path));
    positives += r.label;
  }
  EXPECT_EQ(positives, 32u);
  const PatchPair pr = load_pair((a / "manifest.tsv").string(), records[5]);
  EXPECT_EQ(pr.context.height(), 64u);
  EXPECT_EQ(pr.detail.height(), 256u);
  EXPECT_EQ(bytes(a / "manifest.tsv"), bytes(b / "manifest.tsv"));
  EXPECT_EQ(bytes(a / records[5].detail_path), bytes(b / records[5].detail_path));
  EXPECT_NE(bytes(a / records[5].detail_path), bytes(c / records[5].detail_path));
}

TEST(Pipeline, FeaturesAreByteIdenticalAcrossRuns) {
  const fs::path a = fresh("run_a"), b = fresh("run_b");
  run_pipeline(a, 11);
  run_pipeline(b, 11);
  const std::size_t steps = line_count(a / "model" / "loss.tsv");
  EXPECT_GE(steps, 1u);
  EXPECT_LE(steps, 4u);  // at most 64 pairs in batches of 16
  EXPECT_EQ(bytes(a / "model" / "loss.tsv"), bytes(b / "model" / "loss.tsv"));
  const auto labels = read_labels((a / "features" / "labels.tsv").string());
  ASSERT_EQ(labels.size(), 4u);
  for (const auto& [slide, label] : labels) {
    const fs::path fa = a / "features" / (slide + ".fea"), fb = b / "features" / (slide + ".fea");
    const Tensor f = read_features(fa.string());
    EXPECT_EQ(f.shape()[1], 32u);
    EXPECT_LE(f.shape()[0], 16u);
    EXPECT_EQ(bytes(fa), bytes(fb)) << slide;
    EXPECT_EQ(label, slide.rfind("slide_1", 0) == 0 ? 1 : 0);
  }
  EXPECT_EQ(bytes(a / "model" / "checkpoint.cdn"), bytes(b / "model" / "checkpoint.cdn"));
}

TEST(Extract, SlidesWithoutTissueAreLogged) {
  const fs::path dir = fresh("skip");
  fs::create_directories(dir / "images");
  const auto cfg = CDNetConfig::toy();
  std::vector<ManifestRecord> recs;
  const auto tissue = testing_util::random_pair(cfg.patch_px(), cfg.mag_ratio(), 1);
  PatchPair blank;
  blank.context = Image(64, 64, 250);
  blank.detail = Image(256, 256, 250);
  for (const auto& [id, pr, slide] : {std::tuple{"t0", tissue, "s_tissue"}, std::tuple{"w0", blank, "s_white"}}) {
    write_ppm((dir / "images" / (std::string(id) + "_c.ppm")).string(), pr.context);
    write_ppm((dir / "images" / (std::string(id) + "_d.ppm")).string(), pr.detail);
    recs.push_back({id, std::string("images/") + id + "_c.ppm", std::string("images/") + id + "_d.ppm", 0, 0, slide, 0});
  }
  write_manifest((dir / "manifest.tsv").string(), recs);
  Checkpoint ck;
  ck.config = cfg;
  auto P = init_params(cfg, 2);
  store_params(ck, "", P);
  write_checkpoint((dir / "init.cdn").string(), ck);

  const CliRun r = cli("extract --manifest " + (dir / "manifest.tsv").string() + " --checkpoint " +
                    (dir / "init.cdn").string() + " --out " + (dir / "features").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "features" / "s_tissue.fea"));
  EXPECT_FALSE(fs::exists(dir / "features" / "s_white.fea"));
  EXPECT_EQ(bytes(dir / "features" / "skipped.tsv"), "s_white\tno tissue pairs\n");
  EXPECT_EQ(bytes(dir / "features" / "labels.tsv"), "s_tissue\t0\n");
}

TEST(Attention, ToyMapIsUpsampledToPatchSize) {
  const fs::path dir = fresh("attn_toy");
  ASSERT_EQ(cli("gen-data --count 1 --out " + (dir / "data").string()).code, 0);
  const std::string manifest = (dir / "data" / "manifest.tsv").string();
  const std::string pair = read_manifest(manifest)[5].pair_id;
  const CliRun r = cli("attention --manifest " + manifest + " --pair " + pair + " --layer 2 --out " +
                    (dir / "map.pgm").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const GrayImage g = read_pgm((dir / "map.pgm").string());
  ASSERT_EQ(g.height, 64u);
  ASSERT_EQ(g.width, 64u);
  // Constant over each 16 x 16 cell, and the normalized grid spans 0..255.
  for (std::size_t r2 = 0; r2 < 64; ++r2)
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(g.pixels[r2 * 64 + c], g.pixels[(r2 / 16 * 16) * 64 + c / 16 * 16]);
  const auto [lo, hi] = std::minmax_element(g.pixels.begin(), g.pixels.end());
  EXPECT_EQ(*lo, 0);
  EXPECT_EQ(*hi, 255);

  const CliRun missing = cli("attention --manifest " + manifest + " --pair nope --out " + (dir / "x.pgm").string());
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("error: attention: pair 'nope' not found"), std::string::npos);
  EXPECT_EQ(cli("attention --manifest " + manifest + " --pair " + pair + " --layer 3 --out " + (dir / "y.pgm").string())
                .code,
            1);
}

TEST(Attention, ZeroQueryKeyWeightsGiveConstantMap) {
  const fs::path dir = fresh("attn_zero");
  ASSERT_EQ(cli("gen-data --count 1 --out " + (dir / "data").string()).code, 0);
  const auto cfg = CDNetConfig::toy();
  auto P = init_params(cfg, 3);
  for (auto& b : P.blocks)
    for (auto* lin : {&b.context.attn.query, &b.context.attn.key}) {
      lin->weight.value().fill(0.0);
      lin->bias.value().fill(0.0);
    }
  Checkpoint ck;
  ck.config = cfg;
  ck.meta["arch"] = "cdnet";
  store_params(ck, "student/", P);
  write_checkpoint((dir / "zero.cdn").string(), ck);
  const std::string manifest = (dir / "data" / "manifest.tsv").string();
  const CliRun r = cli("attention --manifest " + manifest + " --pair " + read_manifest(manifest)[0].pair_id +
                    " --checkpoint " + (dir / "zero.cdn").string() + " --out " + (dir / "map.pgm").string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (auto v : read_pgm((dir / "map.pgm").string()).pixels) EXPECT_EQ(v, 0);
}

TEST(Attention, ReferenceGridIs14By14) {
  const fs::path dir = fresh("attn_ref");
  fs::create_directories(dir);
  const auto cfg = CDNetConfig::reference();
  const auto pr = testing_util::random_pair(cfg.patch_px(), cfg.mag_ratio(), 4);
  write_ppm((dir / "c.ppm").string(), pr.context);
  write_ppm((dir / "d.ppm").string(), pr.detail);
  write_manifest((dir / "m.tsv").string(), {{"ref", "c.ppm", "d.ppm", 0, 0, "s", 0}});
  AttentionOptions opt;
  opt.manifest = (dir / "m.tsv").string();
  opt.pair_id = "ref";
  opt.config = cfg;
  opt.layer = 12;
  opt.out_path = (dir / "map.pgm").string();
  const Tensor map = cmd_attention(opt);
  EXPECT_EQ(map.shape(), (Shape{14, 14}));
  const GrayImage g = read_pgm(opt.out_path);
  EXPECT_EQ(g.height, 224u);
  EXPECT_EQ(g.width, 224u);
}

TEST(Mil, CommandTrainsOnFeatureDirectory) {
  const fs::path dir = fresh("mil");
  fs::create_directories(dir / "features");
  std::ofstream labels(dir / "features" / "labels.tsv");
  for (const auto& bag : testing_util::synthetic_bags(40, 8, 5)) {
    write_features((dir / "features" / (bag.slide_id + ".fea")).string(), bag.features);
    labels << bag.slide_id << '\t' << bag.label << '\n';
  }
  labels.close();
  const CliRun r = cli("mil --features " + (dir / "features").string() + " --out " + (dir / "out").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("auc\t"), std::string::npos);
  EXPECT_EQ(line_count(dir / "out" / "predictions.tsv"), 12u);  // 30% of 40, stratified

  std::ofstream(dir / "features" / "labels.tsv") << "bag1000\t1\nbag1001\t1\nbag1003\t1\n";
  const CliRun single = cli("mil --features " + (dir / "features").string() + " --out " + (dir / "out2").string());
  EXPECT_EQ(single.code, 1);
  EXPECT_NE(single.err.find("error:"), std::string::npos);
}

TEST(Complexity, ReferenceTableFromCli) {
  const CliRun r = cli("complexity --preset reference");
  ASSERT_EQ(r.code, 0);
  for (const char* s : {"ViT-224", "ViT-896", "CD-Net", "38,416", "9,834,496", "88,592", "3,332", "111.01x"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  EXPECT_EQ(cli("complexity --preset huge").code, 1);
}
