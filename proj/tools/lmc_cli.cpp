/*=========================================================================
 *
 *  Copyright The LMC Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/

// lmc: command-line workflows for stain-manifold contrastive training.
//
//   lmc synth OUT_DIR           synthetic labelled H&E-like patches
//   lmc augment IN OUT          fixed or random stain augmentation
//   lmc macenko IN OUT          classical Macenko normalization
//   lmc train DATA OUT_CKPT     train the encoder
//   lmc embed CKPT DATA OUT     export embeddings as CSV
//   lmc eval-separation CSV...  Gaussian W2 between two batches
//   lmc probe TRAIN TEST OUT    linear probe accuracy
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lmc/lmc.hpp"

namespace fs = std::filesystem;
using namespace lmc;

namespace {

void print_kv(const std::string &key, const std::string &value) { std::cout << key << " = " << value << '\n'; }
void print_kv(const std::string &key, double value) { print_kv(key, csv::format_double(value)); }

std::string vec3_string(const Eigen::Vector3d &v) {
  return csv::format_double(v(0)) + "," + csv::format_double(v(1)) + "," + csv::format_double(v(2));
}

struct SynthArgs {
  fs::path out_dir;
  int n = 64;
  int classes = 2;
  std::uint64_t seed = 0;
  int patch_size = 256;
  std::string format = "png";
};

int cmd_synth(const SynthArgs &a) {
  print_kv("command", "synth");
  print_kv("out_dir", a.out_dir.string());
  print_kv("n", std::to_string(a.n));
  print_kv("classes", std::to_string(a.classes));
  print_kv("patch_size", std::to_string(a.patch_size));
  print_kv("format", a.format);
  print_kv("seed", std::to_string(a.seed));
  require(a.n > 0 && a.classes >= 1 && a.patch_size >= 8, ErrorCode::Config,
          "synth needs n > 0, classes >= 1, patch-size >= 8");
  const PatchDataset ds =
      generate_synthetic_dataset(a.seed, a.n, a.patch_size, StainBasis::conventional(), a.classes);
  write_patch_dataset(a.out_dir, ds, "." + a.format);
  std::cout << "wrote " << ds.size() << " patches to " << a.out_dir.string() << '\n';
  return exit_code::kSuccess;
}

struct AugmentArgs {
  fs::path in_dir;
  fs::path out_dir;
  double alpha_h = 1.0;
  double alpha_e = 1.0;
  bool random = false;
  bool pair = false;
  std::uint64_t seed = 0;
  double range_min = 0.5;
  double range_max = 2.0;
  int patch_size = 256;
};

int cmd_augment(const AugmentArgs &a) {
  const AugmentationRange range{a.range_min, a.range_max};
  print_kv("command", "augment");
  print_kv("in_dir", a.in_dir.string());
  print_kv("out_dir", a.out_dir.string());
  print_kv("mode", a.random ? "random" : "fixed");
  if (!a.random) {
    print_kv("alpha_h", a.alpha_h);
    print_kv("alpha_e", a.alpha_e);
  }
  print_kv("range", "[" + csv::format_double(range.alpha_min) + ", " + csv::format_double(range.alpha_max) + "]");
  print_kv("pair", a.pair ? "true" : "false");
  print_kv("patch_size", std::to_string(a.patch_size));
  print_kv("seed", std::to_string(a.seed));
  try {
    range.validate();
  } catch (const Error &e) {
    throw Error(ErrorCode::Config, e.what());
  }
  require(a.random || (a.alpha_h > 0.0 && a.alpha_e > 0.0), ErrorCode::Config, "alphas must be positive");
  require(!a.pair || a.random, ErrorCode::Config, "--pair requires --random");

  const PatchDataset ds = load_patch_dataset(a.in_dir, a.patch_size, &std::cerr);
  fs::create_directories(a.out_dir);
  std::vector<ManifestRow> manifest;
  PatchDataset written;
  written.patch_size = a.patch_size;
  for (const auto &item : ds.items) {
    StainBasis basis;
    try {
      basis = estimate_stain_basis(rgb_to_od(item.patch));
    } catch (const Error &e) {
      std::cerr << "warning: " << item.id << ": " << e.what() << '\n';
      continue;
    }
    if (a.pair) {
      Rng rng(derive_seed(a.seed, fnv1a(item.id)));
      ViewPair vp = make_view_pair(item.patch, basis, rng, range, item.id);
      written.items.push_back({item.id + "_v1", std::move(vp.x1), item.label});
      written.items.push_back({item.id + "_v2", std::move(vp.x2), item.label});
      manifest.push_back({item.id, vp.alphas1, vp.alphas2});
      continue;
    }
    StainAlphas alphas{a.alpha_h, a.alpha_e};
    if (a.random) {
      Rng rng(derive_seed(a.seed, fnv1a(item.id)));
      alphas = sample_alphas(rng, range);
    }
    written.items.push_back({item.id, augment(item.patch, basis, alphas.h, alphas.e), item.label});
    manifest.push_back({item.id, alphas, std::nullopt});
  }
  require(!written.empty(), ErrorCode::EmptyDataset, "no patch could be augmented");
  write_patch_dataset(a.out_dir, written);
  write_manifest(a.out_dir / "manifest.csv", manifest);
  std::cout << "augmented " << manifest.size() << " of " << ds.size() << " patches\n";
  return exit_code::kSuccess;
}

struct MacenkoArgs {
  fs::path in_dir;
  fs::path out_dir;
  std::string target_image;
  std::vector<double> target_h;
  std::vector<double> target_e;
  double target_max_h = 0.0;
  double target_max_e = 0.0;
  int patch_size = 256;
};

int cmd_macenko(const MacenkoArgs &a) {
  StainTarget target = StainTarget::reference();
  std::string source = "reference";
  if (!a.target_image.empty()) {
    target = estimate_stain_target(io::read_image(a.target_image));
    source = a.target_image;
  }
  if (!a.target_h.empty()) target.basis.h = Eigen::Vector3d(a.target_h[0], a.target_h[1], a.target_h[2]).normalized();
  if (!a.target_e.empty()) target.basis.e = Eigen::Vector3d(a.target_e[0], a.target_e[1], a.target_e[2]).normalized();
  if (a.target_max_h > 0.0) target.max_h = a.target_max_h;
  if (a.target_max_e > 0.0) target.max_e = a.target_max_e;

  print_kv("command", "macenko");
  print_kv("in_dir", a.in_dir.string());
  print_kv("out_dir", a.out_dir.string());
  print_kv("target_source", source);
  print_kv("target_h", vec3_string(target.basis.h));
  print_kv("target_e", vec3_string(target.basis.e));
  print_kv("target_max_h", target.max_h);
  print_kv("target_max_e", target.max_e);
  print_kv("patch_size", std::to_string(a.patch_size));
  print_kv("seed", "none (deterministic)");
  try {
    validate_basis(target.basis);
  } catch (const Error &e) {
    throw Error(ErrorCode::Config, std::string("target: ") + e.what());
  }

  const PatchDataset ds = load_patch_dataset(a.in_dir, a.patch_size, &std::cerr);
  PatchDataset out;
  out.patch_size = a.patch_size;
  for (const auto &item : ds.items) {
    try {
      out.items.push_back(
          {item.id, macenko_normalize_to_target(item.patch, target.basis, {target.max_h, target.max_e}), item.label});
    } catch (const Error &e) {
      std::cerr << "warning: " << item.id << ": " << e.what() << '\n';
    }
  }
  require(!out.empty(), ErrorCode::EmptyDataset, "no patch could be normalized");
  write_patch_dataset(a.out_dir, out);
  std::cout << "normalized " << out.size() << " of " << ds.size() << " patches\n";
  return exit_code::kSuccess;
}

struct TrainArgs {
  fs::path data_dir;
  fs::path out_checkpoint;
  std::string config;
  std::vector<std::string> overrides;
  std::string resume;
  std::string loss_log;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
};

int cmd_train(const TrainArgs &a) {
  RunConfig cfg;
  std::optional<Checkpoint> resumed;
  if (!a.resume.empty()) {
    resumed = load_checkpoint(a.resume);
    cfg.encoder = resumed->encoder_config;
    cfg.train = resumed->train_config;
  } else {
    KeyValues kv;
    if (!a.config.empty()) kv = read_key_values(a.config);
    for (const auto &o : a.overrides) {
      const auto eq = o.find('=');
      require(eq != std::string::npos, ErrorCode::Config, "--set expects key=value, got '" + o + "'");
      kv[std::string(csv::trim(o.substr(0, eq)))] = std::string(csv::trim(o.substr(eq + 1)));
    }
    if (a.seed) kv["seed"] = std::to_string(*a.seed);
    if (a.steps) kv["total_steps"] = std::to_string(*a.steps);
    if (a.batch_size) kv["batch_size"] = std::to_string(*a.batch_size);
    if (a.lr) kv["base_lr"] = csv::format_double(*a.lr);
    apply_key_values(cfg, kv);
  }
  validate_run_config(cfg);

  print_kv("command", "train");
  print_kv("data_dir", a.data_dir.string());
  print_kv("out_checkpoint", a.out_checkpoint.string());
  if (resumed) print_kv("resume", a.resume);
  print_run_config(std::cout, cfg);

  const PatchDataset ds = load_patch_dataset(a.data_dir, cfg.encoder.input_side, &std::cerr);
  std::cout << "loaded " << ds.size() << " patches\n";
  std::optional<Trainer> trainer;
  if (resumed) trainer.emplace(ds, std::move(*resumed), &std::cout);
  else trainer.emplace(ds, cfg.encoder, cfg.train, &std::cout);
  trainer->run();

  save_checkpoint(a.out_checkpoint, trainer->checkpoint());
  const fs::path log_path = a.loss_log.empty() ? fs::path(a.out_checkpoint.string() + ".loss.csv") : fs::path(a.loss_log);
  write_loss_log(log_path, trainer->log());
  std::cout << "wrote " << a.out_checkpoint.string() << " and " << log_path.string() << '\n';
  return exit_code::kSuccess;
}

struct EmbedArgs {
  fs::path checkpoint;
  fs::path data_dir;
  fs::path out_csv;
  std::string batch_id = "A";
};

int cmd_embed(const EmbedArgs &a) {
  const ckpt::EncoderCheckpoint enc = ckpt::load_encoder(a.checkpoint);
  print_kv("command", "embed");
  print_kv("checkpoint", a.checkpoint.string());
  print_kv("data_dir", a.data_dir.string());
  print_kv("out_csv", a.out_csv.string());
  print_kv("batch_id", a.batch_id);
  print_kv("input_side", std::to_string(enc.config.input_side));
  print_kv("embedding_dim", std::to_string(enc.config.output_dim()));
  print_kv("seed", "none (deterministic)");
  require(a.batch_id.find(',') == std::string::npos, ErrorCode::Config, "batch id must not contain ','");
  const PatchDataset ds = load_patch_dataset(a.data_dir, enc.config.input_side, &std::cerr);
  export_embeddings(enc.config, enc.params, ds, a.batch_id, a.out_csv);
  std::cout << "embedded " << ds.size() << " patches\n";
  return exit_code::kSuccess;
}

struct SeparationArgs {
  std::vector<fs::path> inputs;
  fs::path out_csv;
};

int cmd_eval_separation(const SeparationArgs &a) {
  print_kv("command", "eval-separation");
  for (const auto &p : a.inputs) print_kv("input", p.string());
  print_kv("out_csv", a.out_csv.string());
  print_kv("covariance_regularization", kCovarianceRegularization);
  print_kv("seed", "none (deterministic)");
  EmbeddingSet all;
  for (const auto &p : a.inputs) {
    EmbeddingSet s = read_embeddings(p);
    require(all.rows.empty() || s.rows.empty() || s.dim() == all.dim(), ErrorCode::ShapeMismatch,
            "embedding dimension of " + p.string() + " differs from earlier inputs");
    for (auto &r : s.rows) all.rows.push_back(std::move(r));
  }
  const SeparationReport rep = batch_separation_report(all);
  write_separation_report(a.out_csv, rep);
  for (const auto &r : rep.rows) std::cout << "w2[" << r.group << "] = " << r.w2 << '\n';
  return exit_code::kSuccess;
}

struct ProbeArgs {
  fs::path train_csv;
  fs::path test_csv;
  fs::path out_csv;
  ProbeOptions options;
};

std::pair<Eigen::MatrixXd, std::vector<int>> labelled_rows(const EmbeddingSet &s, const fs::path &path) {
  std::vector<int> labels;
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto &r : s.rows) {
    if (!r.label) continue;
    labels.push_back(*r.label);
    rows.push_back(r.values);
  }
  require(!rows.empty(), ErrorCode::EmptyDataset, "no labelled rows in " + path.string());
  if (rows.size() < s.rows.size())
    std::cerr << "warning: ignoring " << s.rows.size() - rows.size() << " unlabelled rows in " << path.string() << '\n';
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), s.dim());
  for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = rows[i];
  return {std::move(x), std::move(labels)};
}

int cmd_probe(const ProbeArgs &a) {
  print_kv("command", "probe");
  print_kv("train_csv", a.train_csv.string());
  print_kv("test_csv", a.test_csv.string());
  print_kv("out_csv", a.out_csv.string());
  print_kv("epochs", std::to_string(a.options.epochs));
  print_kv("lr", a.options.lr);
  print_kv("l2", a.options.l2);
  print_kv("seed", std::to_string(a.options.seed));
  require(a.options.epochs > 0 && a.options.lr > 0.0 && a.options.l2 >= 0.0, ErrorCode::Config,
          "probe needs epochs > 0, lr > 0, l2 >= 0");
  const auto [xtr, ytr] = labelled_rows(read_embeddings(a.train_csv), a.train_csv);
  const auto [xte, yte] = labelled_rows(read_embeddings(a.test_csv), a.test_csv);
  require(xtr.cols() == xte.cols(), ErrorCode::ShapeMismatch, "train and test embedding dimensions differ");
  const LinearProbe probe = linear_probe_train(xtr, ytr, a.options);
  const ProbeReport rep = linear_probe_eval(probe, xte, yte);
  write_probe_report(a.out_csv, rep);
  std::cout << "accuracy = " << rep.accuracy << " (" << rep.count << " rows)\n";
  return exit_code::kSuccess;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Stain-manifold contrastive learning for H&E patches"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  SynthArgs synth;
  auto *s = app.add_subcommand("synth", "Generate synthetic labelled H&E-like patches");
  s->add_option("out_dir", synth.out_dir, "Output directory")->required();
  s->add_option("--n", synth.n, "Number of patches");
  s->add_option("--classes", synth.classes, "Number of classes");
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--patch-size", synth.patch_size, "Patch side in pixels");
  s->add_option("--format", synth.format, "Output format")->check(CLI::IsMember({"png", "ppm"}));

  AugmentArgs aug;
  auto *g = app.add_subcommand("augment", "Apply stain augmentation to every patch");
  g->add_option("in_dir", aug.in_dir, "Input patch directory")->required();
  g->add_option("out_dir", aug.out_dir, "Output directory")->required();
  auto *ah = g->add_option("--alpha-h", aug.alpha_h, "Fixed hematoxylin scale");
  auto *ae = g->add_option("--alpha-e", aug.alpha_e, "Fixed eosin scale");
  auto *rnd = g->add_flag("--random", aug.random, "Sample alphas uniformly from the range");
  rnd->excludes(ah)->excludes(ae);
  g->add_flag("--pair", aug.pair, "Write two random views per patch (<id>_v1, <id>_v2)");
  g->add_option("--seed", aug.seed, "Random seed");
  g->add_option("--range-min", aug.range_min, "Lower bound of the alpha range");
  g->add_option("--range-max", aug.range_max, "Upper bound of the alpha range");
  g->add_option("--patch-size", aug.patch_size, "Expected patch side in pixels");

  MacenkoArgs mac;
  auto *m = app.add_subcommand("macenko", "Macenko-normalize patches onto a target appearance");
  m->add_option("in_dir", mac.in_dir, "Input patch directory")->required();
  m->add_option("out_dir", mac.out_dir, "Output directory")->required();
  m->add_option("--target-image", mac.target_image, "Estimate the target from this image");
  m->add_option("--target-h", mac.target_h, "Target hematoxylin OD vector (3 values)")->expected(3)->delimiter(',');
  m->add_option("--target-e", mac.target_e, "Target eosin OD vector (3 values)")->expected(3)->delimiter(',');
  m->add_option("--target-max-h", mac.target_max_h, "Target robust max H concentration (0 keeps target)");
  m->add_option("--target-max-e", mac.target_max_e, "Target robust max E concentration (0 keeps target)");
  m->add_option("--patch-size", mac.patch_size, "Expected patch side in pixels");

  TrainArgs tr;
  auto *t = app.add_subcommand("train", "Train the encoder with the stain-manifold contrastive loss");
  t->add_option("data_dir", tr.data_dir, "Training patch directory")->required();
  t->add_option("out_checkpoint", tr.out_checkpoint, "Checkpoint to write")->required();
  t->add_option("--config", tr.config, "key = value config file");
  t->add_option("--set", tr.overrides, "Override one config key (key=value), repeatable");
  t->add_option("--resume", tr.resume, "Continue from a training checkpoint");
  t->add_option("--loss-log", tr.loss_log, "Loss log CSV (default: <out_checkpoint>.loss.csv)");
  t->add_option("--seed", tr.seed, "Seed (default 0)");
  t->add_option("--steps", tr.steps, "Total optimization steps (default 200)");
  t->add_option("--batch-size", tr.batch_size, "Batch size (default 32)");
  t->add_option("--lr", tr.lr, "Base learning rate (default 1e-4; final 1e-7, weight decay 0.01, lambda 0.005)");
  t->footer("Precedence: flags > --set > config file > built-in defaults. Defaults: tiny encoder, alpha range "
            "[0.5, 2.0], 5% warmup, cosine anneal over the last 30% of steps.");

  EmbedArgs emb;
  auto *e = app.add_subcommand("embed", "Export embeddings of a patch directory");
  e->add_option("checkpoint", emb.checkpoint, "Encoder or training checkpoint")->required();
  e->add_option("data_dir", emb.data_dir, "Patch directory")->required();
  e->add_option("out_csv", emb.out_csv, "Output CSV")->required();
  e->add_option("--batch-id", emb.batch_id, "Batch identifier written to every row");

  SeparationArgs sep;
  auto *w = app.add_subcommand("eval-separation", "Gaussian W2 between two embedding batches");
  w->add_option("embeddings", sep.inputs, "Embedding CSVs (two batch ids in total)")->required();
  w->add_option("-o,--out", sep.out_csv, "Report CSV")->required();

  ProbeArgs pr;
  auto *p = app.add_subcommand("probe", "Train a linear probe and report test accuracy");
  p->add_option("train_csv", pr.train_csv, "Labelled training embeddings")->required();
  p->add_option("test_csv", pr.test_csv, "Labelled test embeddings")->required();
  p->add_option("out_csv", pr.out_csv, "Report CSV")->required();
  p->add_option("--epochs", pr.options.epochs, "Gradient descent epochs");
  p->add_option("--lr", pr.options.lr, "Learning rate");
  p->add_option("--l2", pr.options.l2, "L2 penalty");
  p->add_option("--seed", pr.options.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success &ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError &err) {
    app.exit(err);
    return exit_code::kConfig;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (g->parsed()) return cmd_augment(aug);
    if (m->parsed()) return cmd_macenko(mac);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_embed(emb);
    if (w->parsed()) return cmd_eval_separation(sep);
    if (p->parsed()) return cmd_probe(pr);
  } catch (const Error &err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code_for(err.code());
  } catch (const std::exception &err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code::kData;
  }
  return exit_code::kConfig;
}
