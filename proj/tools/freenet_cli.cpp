#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "freenet/checkpoint.hpp"
#include "freenet/data.hpp"
#include "freenet/freenet.hpp"
#include "freenet/metrics.hpp"
#include "freenet/render.hpp"
#include "freenet/trainer.hpp"

namespace {

using freenet::FreeNetConfig;
using Model = freenet::FreeNetModel<float>;

std::vector<std::uint8_t> mask_equals(const std::vector<std::uint8_t>& mask, std::uint8_t wanted) {
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] == wanted ? 1 : 0;
  return out;
}

struct GenArgs {
  std::string out;
  freenet::SyntheticConfig cfg;
};

int run_gen(const GenArgs& a) {
  freenet::HsiScene scene = freenet::generate_synthetic_scene(a.cfg);
  freenet::save_scene(a.out, scene);
  std::vector<std::int64_t> counts(scene.num_classes + 1, 0);
  for (auto l : scene.labels) ++counts[l];
  std::cout << "wrote " << a.out << ".hdr/.cube/.labels (" << scene.bands() << " bands, " << scene.height() << "x"
            << scene.width() << ", " << scene.num_classes << " classes)\n";
  for (int k = 1; k <= scene.num_classes; ++k) std::cout << "class " << k << ": " << counts[k] << " pixels\n";
  if (counts[0]) std::cout << "unlabeled: " << counts[0] << " pixels\n";
  return 0;
}

struct TrainArgs {
  std::string scene;
  std::string out;
  std::string log_path;
  std::string masks_out;
  std::string schedule_out;
  int iters = 1000;
  int alpha = 20;
  double beta = 1.0;
  int reduction_ratio = 16;
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int train_per_class = 200;
  std::uint64_t seed = 1;
  bool no_normalize = false;
  int threads = 1;
};

int run_train(const TrainArgs& a) {
  freenet::set_num_threads(a.threads);
  freenet::HsiScene scene = freenet::load_scene(a.scene);
  if (!a.no_normalize) freenet::normalize_bands(scene.cube);
  if (!scene.cube.all_finite()) throw freenet::NumericError("scene cube contains non-finite values");

  freenet::Split split = freenet::random_split(scene.labels, scene.height(), scene.width(), scene.num_classes,
                                               a.train_per_class, a.seed);
  for (const auto& w : split.warnings) std::cerr << "warning: " << w << '\n';
  const std::string masks_path = a.masks_out.empty() ? a.out + ".masks" : a.masks_out;
  freenet::save_masks(masks_path, split.mask);

  const auto train_mask = mask_equals(split.mask, freenet::kMaskTrain);
  freenet::LabeledPositions positions = freenet::LabeledPositions::from_raster(
      scene.labels, scene.height(), scene.width(), scene.num_classes, &train_mask);

  FreeNetConfig cfg;
  cfg.in_bands = scene.bands();
  cfg.num_classes = scene.num_classes;
  cfg.beta = a.beta;
  cfg.reduction_ratio = a.reduction_ratio;
  Model model = Model::build(cfg, a.seed);
  std::cout << "model: " << model.count_params() << " parameters, beta " << a.beta << "\n";

  freenet::TrainOptions opts;
  opts.alpha = a.alpha;
  opts.seed = a.seed;
  opts.optimizer.base_lr = a.lr;
  opts.optimizer.momentum = a.momentum;
  opts.optimizer.weight_decay = a.weight_decay;
  opts.optimizer.max_iter = a.iters;

  freenet::TrainReport report;
  if (a.iters > 0) report = freenet::train(model, scene.cube, scene.labels, positions, opts, &std::cout);
  if (!a.log_path.empty()) {
    std::ofstream log(a.log_path);
    if (!log) throw freenet::FormatError("cannot open log file '" + a.log_path + "'");
    for (const auto& r : report.iterations) log << r.iter << ' ' << r.loss << ' ' << r.lr << ' ' << r.seconds << '\n';
  }
  if (!a.schedule_out.empty()) {
    std::ofstream sched(a.schedule_out);
    if (!sched) throw freenet::FormatError("cannot open schedule file '" + a.schedule_out + "'");
    freenet::build_schedule(positions, a.alpha, a.seed).dump(sched);
  }

  freenet::save_checkpoint(a.out, model.parameters());
  double total_secs = 0;
  for (const auto& r : report.iterations) total_secs += r.seconds;
  std::cout << "wrote checkpoint " << a.out << " and masks " << masks_path << "\n";
  std::cout << "trained " << report.iterations.size() << " iterations (" << report.epochs + 1 << " epoch(s), "
            << std::fixed << std::setprecision(1) << total_secs << " s), final loss "
            << std::setprecision(6) << report.final_loss() << "\n";
  return 0;
}

struct PredictArgs {
  std::string scene;
  std::string checkpoint;
  std::string out;
  std::string map_path;
  double beta = 1.0;
  int reduction_ratio = 16;
  bool no_normalize = false;
  int threads = 1;
};

int run_predict(const PredictArgs& a) {
  freenet::set_num_threads(a.threads);
  freenet::HsiScene scene = freenet::load_scene(a.scene);
  if (!a.no_normalize) freenet::normalize_bands(scene.cube);
  if (!scene.cube.all_finite()) throw freenet::NumericError("scene cube contains non-finite values");

  FreeNetConfig cfg;
  cfg.in_bands = scene.bands();
  cfg.num_classes = scene.num_classes;
  cfg.beta = a.beta;
  cfg.reduction_ratio = a.reduction_ratio;
  Model model = Model::build(cfg, 0);
  freenet::load_checkpoint(a.checkpoint, model.parameters());

  const auto t0 = std::chrono::steady_clock::now();
  freenet::TensorData<float> logits = model.predict_padded(scene.cube);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto pred = freenet::argmax_map(logits);
  freenet::save_label_raster(a.out, pred);
  std::cout << "wrote prediction raster " << a.out << " (" << scene.height() << "x" << scene.width() << ", "
            << std::fixed << std::setprecision(2) << secs << " s forward)\n";
  if (!a.map_path.empty()) {
    freenet::write_ppm(a.map_path, pred, scene.height(), scene.width());
    std::cout << "wrote classification map " << a.map_path << "\n";
  }
  return 0;
}

struct EvalArgs {
  std::string scene;
  std::string pred;
  std::string masks;
  std::string report_path;
  std::string csv_path;
};

int run_evaluate(const EvalArgs& a) {
  freenet::HsiScene scene = freenet::load_scene(a.scene);
  const std::size_t px = std::size_t(scene.height()) * scene.width();
  const auto pred = freenet::load_label_raster(a.pred, px);
  freenet::ConfusionMatrix cm(scene.num_classes);
  if (!a.masks.empty()) {
    const auto mask = freenet::load_masks(a.masks, px);
    std::size_t n_test = 0;
    for (auto m : mask) n_test += m == freenet::kMaskTest;
    if (n_test == 0) throw freenet::DomainError("test mask selects no pixels; nothing to evaluate");
    cm.accumulate(scene.labels, pred, &mask, freenet::kMaskTest);
  } else {
    cm.accumulate(scene.labels, pred);  // every labeled pixel
  }
  freenet::write_report(std::cout, cm, scene.class_names);
  if (!a.report_path.empty()) {
    std::ofstream os(a.report_path);
    if (!os) throw freenet::FormatError("cannot open report file '" + a.report_path + "'");
    freenet::write_report(os, cm, scene.class_names);
  }
  if (!a.csv_path.empty()) {
    std::ofstream os(a.csv_path);
    if (!os) throw freenet::FormatError("cannot open csv file '" + a.csv_path + "'");
    freenet::write_csv(os, cm, scene.class_names);
  }
  return 0;
}

struct InspectArgs {
  int bands = 144;
  int classes = 15;
  double beta = 1.0;
  int reduction_ratio = 16;
  int height = 352;
  int width = 1912;
  int patch = 27;
};

int run_inspect(const InspectArgs& a) {
  FreeNetConfig cfg;
  cfg.in_bands = a.bands;
  cfg.num_classes = a.classes;
  cfg.beta = a.beta;
  cfg.reduction_ratio = a.reduction_ratio;
  cfg.validate();
  const freenet::CostReport cost = freenet::model_cost(cfg, a.height, a.width);
  std::cout << std::left << std::setw(16) << "layer" << std::setw(16) << "output" << std::setw(12) << "params"
            << "flops\n";
  for (const auto& row : cost.rows)
    std::cout << std::left << std::setw(16) << row.name << std::setw(16) << freenet::shape_str(row.out)
              << std::setw(12) << row.params << row.flops << '\n';
  const std::int64_t patch_flops =
      freenet::count_flops_patch_based(cfg, a.patch, std::int64_t(a.height) * a.width);
  std::cout << "total_params " << cost.params << '\n';
  std::cout << std::fixed << std::setprecision(2);
  std::cout << "total_flops " << cost.flops << " (" << cost.flops / 1e9 << " GFLOPs at " << a.height << "x" << a.width
            << ")\n";
  std::cout << "patch_based_flops " << patch_flops << " (" << patch_flops / 1e9 << " GFLOPs, " << a.patch << "x"
            << a.patch << " patch per pixel)\n";
  std::cout << "patch_to_patchfree_ratio " << double(patch_flops) / double(cost.flops) << '\n';
  std::cout << "convention: 1 MAC = 2 FLOPs, conv/dense weights only; norm/activation/upsample/add = 1 FLOP per "
               "output element\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patch-free hyperspectral image classifier (encoder-decoder FCN, "
               "global stochastic stratified sampling)"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* cmd_gen = app.add_subcommand("gen-synthetic", "generate a synthetic labeled scene");
  cmd_gen->add_option("--out", gen.out, "output path stem")->required();
  cmd_gen->add_option("--height", gen.cfg.height, "scene height")->capture_default_str();
  cmd_gen->add_option("--width", gen.cfg.width, "scene width")->capture_default_str();
  cmd_gen->add_option("--bands", gen.cfg.bands, "spectral bands")->capture_default_str();
  cmd_gen->add_option("--classes", gen.cfg.classes, "number of classes (>= 2)")->capture_default_str();
  cmd_gen->add_option("--noise-sigma", gen.cfg.noise_sigma, "per-band Gaussian noise sigma")->capture_default_str();
  cmd_gen->add_option("--seed", gen.cfg.seed, "random seed")->capture_default_str();

  TrainArgs tr;
  auto* cmd_train = app.add_subcommand("train", "train on a scene's labeled pixels");
  cmd_train->add_option("--scene", tr.scene, "scene path stem")->required();
  cmd_train->add_option("--out", tr.out, "checkpoint output path")->required();
  cmd_train->add_option("--iters", tr.iters, "training iterations")->capture_default_str();
  cmd_train->add_option("--alpha", tr.alpha, "per-class samples per batch")->capture_default_str();
  cmd_train->add_option("--beta", tr.beta, "width multiplier")->capture_default_str();
  cmd_train->add_option("--reduction-ratio", tr.reduction_ratio, "attention bottleneck divisor")
      ->capture_default_str();
  cmd_train->add_option("--lr", tr.lr, "base learning rate")->capture_default_str();
  cmd_train->add_option("--momentum", tr.momentum, "SGD momentum")->capture_default_str();
  cmd_train->add_option("--weight-decay", tr.weight_decay, "L2 penalty on conv/dense weights")
      ->capture_default_str();
  cmd_train->add_option("--train-per-class", tr.train_per_class, "training pixels per class")->capture_default_str();
  cmd_train->add_option("--seed", tr.seed, "random seed (init, split, sampling)")->capture_default_str();
  cmd_train->add_flag("--no-normalize", tr.no_normalize, "skip per-band z-score normalization");
  cmd_train->add_option("--threads", tr.threads, "worker threads")->capture_default_str();
  cmd_train->add_option("--log", tr.log_path, "also write the iteration log to this file");
  cmd_train->add_option("--masks-out", tr.masks_out, "split mask output path (default <out>.masks)");
  cmd_train->add_option("--schedule-out", tr.schedule_out, "dump the epoch-0 sampling schedule to this file");

  PredictArgs pr;
  auto* cmd_predict = app.add_subcommand("predict", "classify every pixel of a scene");
  cmd_predict->add_option("--scene", pr.scene, "scene path stem")->required();
  cmd_predict->add_option("--checkpoint", pr.checkpoint, "trained checkpoint")->required();
  cmd_predict->add_option("--out", pr.out, "prediction raster output path")->required();
  cmd_predict->add_option("--map", pr.map_path, "also write a P6 PPM classification map");
  cmd_predict->add_option("--beta", pr.beta, "width multiplier (must match training)")->capture_default_str();
  cmd_predict->add_option("--reduction-ratio", pr.reduction_ratio, "attention bottleneck divisor")
      ->capture_default_str();
  cmd_predict->add_flag("--no-normalize", pr.no_normalize, "skip per-band z-score normalization");
  cmd_predict->add_option("--threads", pr.threads, "worker threads")->capture_default_str();

  EvalArgs ev;
  auto* cmd_eval = app.add_subcommand("evaluate", "score a prediction raster against ground truth");
  cmd_eval->add_option("--scene", ev.scene, "scene path stem")->required();
  cmd_eval->add_option("--pred", ev.pred, "prediction raster")->required();
  cmd_eval->add_option("--masks", ev.masks, "split mask file; scores mask==2 (test) pixels");
  cmd_eval->add_option("--report", ev.report_path, "write the text report here too");
  cmd_eval->add_option("--csv", ev.csv_path, "write machine-readable CSV metrics here");

  InspectArgs in;
  auto* cmd_inspect = app.add_subcommand("inspect", "print per-layer shapes, parameters and FLOPs");
  cmd_inspect->add_option("--bands", in.bands, "input bands")->capture_default_str();
  cmd_inspect->add_option("--classes", in.classes, "number of classes")->capture_default_str();
  cmd_inspect->add_option("--beta", in.beta, "width multiplier")->capture_default_str();
  cmd_inspect->add_option("--reduction-ratio", in.reduction_ratio, "attention bottleneck divisor")
      ->capture_default_str();
  cmd_inspect->add_option("--height", in.height, "scene height for the FLOP count")->capture_default_str();
  cmd_inspect->add_option("--width", in.width, "scene width for the FLOP count")->capture_default_str();
  cmd_inspect->add_option("--patch", in.patch, "patch size for the patch-based comparison")->capture_default_str();

  try {
    app.parse(argc, argv);
    if (cmd_gen->parsed()) return run_gen(gen);
    if (cmd_train->parsed()) return run_train(tr);
    if (cmd_predict->parsed()) return run_predict(pr);
    if (cmd_eval->parsed()) return run_evaluate(ev);
    if (cmd_inspect->parsed()) return run_inspect(in);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const freenet::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
