// Command-line front end: data generation, pretraining, feature extraction, MIL, attention
// maps and cost reports.

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cdnet/pipeline.hpp"

namespace {

struct Common {
  std::uint64_t seed = 7;
  std::string preset = "toy";
  std::string config_file;
  std::string out;

  cdnet::CDNetConfig config() const {
    cdnet::CDNetConfig cfg = config_file.empty() ? cdnet::config_preset(preset) : cdnet::config_from_file(config_file);
    cfg.validate();
    return cfg;
  }
};

void add_common(CLI::App* app, Common& c, bool out_required) {
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--preset", c.preset, "Config preset (reference | toy)")->capture_default_str();
  app->add_option("--config", c.config_file, "key=value config file (overrides --preset)")->check(CLI::ExistingFile);
  auto* out = app->add_option("--out", c.out, "Output path");
  if (out_required) out->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-detail transformer toolkit"};
  app.require_subcommand(1);

  Common gen_c, pre_c, ext_c, mil_c, att_c, cx_c;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic pyramids, tile them, write images and a manifest");
  add_common(gen, gen_c, true);
  cdnet::GenDataOptions gen_o;
  gen->add_option("--count", gen_o.count, "Slides per class")->capture_default_str();
  gen->add_option("--slide-patches", gen_o.slide_patches, "Patches per side of each slide")->capture_default_str();

  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining; writes checkpoint.cdn and loss.tsv");
  add_common(pre, pre_c, true);
  cdnet::PretrainOptions pre_o;
  std::string pre_arch = "cdnet";
  double pre_lr = -1.0, pre_ema = -1.0;
  pre->add_option("--manifest", pre_o.manifest, "Pair manifest")->required();
  pre->add_option("--epochs", pre_o.hyper.epochs)->capture_default_str();
  pre->add_option("--batch-size", pre_o.hyper.batch_size)->capture_default_str();
  pre->add_option("--base-lr", pre_o.hyper.base_lr, "Base learning rate before batch/256 scaling")->capture_default_str();
  pre->add_option("--lr", pre_lr, "Constant learning rate (disables the schedule)");
  pre->add_option("--ema", pre_ema, "Constant teacher momentum (disables the schedule)");
  pre->add_option("--arch", pre_arch, "cdnet | vit")->capture_default_str();
  pre->add_option("--prototypes", pre_o.hyper.head.prototypes)->capture_default_str();
  pre->add_option("--checkpoint-every", pre_o.checkpoint_every, "Epochs between intermediate checkpoints")
      ->capture_default_str();

  auto* ext = app.add_subcommand("extract", "Per-slide FEA1 feature files from a checkpoint");
  add_common(ext, ext_c, true);
  cdnet::ExtractOptions ext_o;
  ext->add_option("--manifest", ext_o.manifest)->required();
  ext->add_option("--checkpoint", ext_o.checkpoint)->required()->check(CLI::ExistingFile);
  ext->add_option("--tissue-threshold", ext_o.tissue_threshold)->capture_default_str();

  auto* mil = app.add_subcommand("mil", "Train and evaluate the MIL head on extracted features");
  add_common(mil, mil_c, true);
  cdnet::MilOptions mil_o;
  mil->add_option("--features", mil_o.feature_dir, "Feature directory")->required()->check(CLI::ExistingDirectory);
  mil->add_option("--labels", mil_o.labels, "slide_id<TAB>label file (default: <features>/labels.tsv)");
  mil->add_option("--epochs", mil_o.hyper.epochs)->capture_default_str();
  mil->add_option("--test-fraction", mil_o.test_fraction)->capture_default_str();

  auto* att = app.add_subcommand("attention", "Export a CLS attention map as PGM");
  add_common(att, att_c, true);
  cdnet::AttentionOptions att_o;
  std::string att_arch = "cdnet";
  att->add_option("--manifest", att_o.manifest)->required();
  att->add_option("--pair", att_o.pair_id)->required();
  att->add_option("--checkpoint", att_o.checkpoint, "Checkpoint (default: fresh weights for --preset)");
  att->add_option("--layer", att_o.layer, "Context block, 1-based")->capture_default_str();
  att->add_option("--arch", att_arch, "cdnet | vit (without --checkpoint)")->capture_default_str();

  auto* cx = app.add_subcommand("complexity", "Token and attention-cost comparison");
  add_common(cx, cx_c, false);
  bool cx_records = false;
  cx->add_flag("--records", cx_records, "Tab-separated records instead of a table");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      gen_o.seed = gen_c.seed;
      gen_o.config = gen_c.config();
      gen_o.out_dir = gen_c.out;
      std::cout << cdnet::cmd_gen_data(gen_o) << '\n';
    } else if (*pre) {
      pre_o.seed = pre_c.seed;
      pre_o.config = pre_c.config();
      pre_o.out_dir = pre_c.out;
      pre_o.hyper.arch = cdnet::parse_architecture(pre_arch);
      if (pre_lr >= 0) pre_o.hyper.lr_override = pre_lr;
      if (pre_ema >= 0) pre_o.hyper.ema_override = pre_ema;
      const auto res = cdnet::cmd_pretrain(pre_o);
      std::cout << "pairs\t" << res.pairs << "\ncheckpoint\t" << res.checkpoint << "\nloss_log\t" << res.loss_log
                << '\n';
    } else if (*ext) {
      ext_o.out_dir = ext_c.out;
      const auto res = cdnet::cmd_extract(ext_o);
      std::cout << "slides\t" << res.written.size() << "\nskipped\t" << res.skipped.size() << "\ndim\t" << res.dim
                << '\n';
    } else if (*mil) {
      mil_o.split_seed = mil_c.seed;
      mil_o.hyper.seed = mil_c.seed;
      mil_o.out_dir = mil_c.out;
      const auto res = cdnet::cmd_mil(mil_o);
      std::cout << "accuracy\t" << res.test.accuracy << "\nauc\t"
                << (res.test.auc ? std::to_string(*res.test.auc) : std::string("undefined")) << "\nbest_epoch\t"
                << res.best_epoch << "\npredictions\t" << res.predictions << '\n';
    } else if (*att) {
      att_o.config = att_c.config();
      att_o.seed = att_c.seed;
      att_o.out_path = att_c.out;
      att_o.arch = cdnet::parse_architecture(att_arch);
      cdnet::cmd_attention(att_o);
      std::cout << att_o.out_path << '\n';
    } else if (*cx) {
      std::cout << cdnet::cmd_complexity(cx_c.config(), cx_records);
    }
  } catch (const cdnet::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
