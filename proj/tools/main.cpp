#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "aerialformer/checkpoint.hpp"
#include "aerialformer/dataset.hpp"
#include "aerialformer/inference.hpp"
#include "aerialformer/metrics.hpp"
#include "aerialformer/model.hpp"
#include "aerialformer/tiling.hpp"
#include "aerialformer/train.hpp"

namespace fs = std::filesystem;
namespace af = aerialformer;
using nlohmann::json;

namespace {

struct TrainArgs {
  fs::path config, data, out;
  std::optional<af::Index> iterations, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  af::train::RunConfig rc = af::train::load_run_config(a.config);
  if (a.iterations) rc.train.iterations = *a.iterations;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.lr) rc.train.lr = *a.lr;
  if (a.seed) rc.train.seed = *a.seed;
  rc.train.validate();

  const auto data = af::ingest_dataset(a.data, rc.model.num_classes);
  af::AerialFormer model(rc.model);
  fs::create_directories(a.out);
  {
    std::ofstream os(a.out / "config.json");
    os << json{{"model", rc.model}, {"train", rc.train}}.dump(2) << '\n';
  }
  std::ofstream trace(a.out / "trace.jsonl");
  std::cout << "training " << rc.model.variant << " on " << data.size() << " samples for "
            << rc.train.iterations << " iterations\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = af::train::train_loop(model, data, rc.train, {a.out, &trace});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!result.trace.empty()) {
    const auto& last = result.trace.back();
    std::cout << "iteration " << last.iteration << " loss " << last.loss << " batch pixel accuracy "
              << last.pixel_accuracy << '\n';
  }
  std::cout << "eval pixel accuracy " << af::train::evaluate_accuracy(model, data, rc.train.ignore_index) << '\n'
            << "wrote " << (a.out / "model.afckpt").string() << " in " << std::fixed << std::setprecision(1) << secs
            << " s\n";
  return 0;
}

struct InferArgs {
  fs::path checkpoint, config, image, out, palette;
  af::Index tile = 512, step = 256;
};

int cmd_infer(const InferArgs& a) {
  const fs::path config = a.config.empty() ? a.checkpoint.parent_path() / "config.json" : a.config;
  const af::ModelConfig cfg = af::load_model_config(config);
  af::AerialFormer model(cfg);
  af::restore(af::load_archive(a.checkpoint), model.named_tensors());
  const af::RgbImage image = af::read_png_rgb(a.image);
  const af::Prediction pred = af::infer_image(af::tile_model(model), image, a.tile, a.step);
  const af::Palette palette = a.palette.empty() ? af::Palette::generate(cfg.num_classes) : af::Palette::load(a.palette);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  af::write_png_gray(a.out, pred.mask);
  fs::path overlay_path = a.out;
  overlay_path.replace_filename(a.out.stem().string() + "_overlay.png");
  af::write_png_rgb(overlay_path, af::overlay(image, pred.mask, palette));
  std::cout << "wrote " << a.out.string() << " and " << overlay_path.string() << '\n';
  return 0;
}

struct EvalArgs {
  fs::path pred_dir, gt_dir, palette, json_out;
  af::Index classes = 0;
  bool pixel_accuracy = false;
};

af::LabelMap read_ids(const fs::path& path, const std::optional<af::Palette>& palette) {
  af::MaskPixels m = af::read_png_mask(path);
  if (!m.rgb) return std::move(m.gray);
  if (!palette) throw af::DataError(path.string() + ": colour mask needs --palette");
  return palette->decode(*m.rgb, path.string());
}

int cmd_eval(const EvalArgs& a) {
  std::optional<af::Palette> palette;
  if (!a.palette.empty()) palette = af::Palette::load(a.palette);
  std::set<fs::path> names;
  for (const auto& e : fs::directory_iterator(a.gt_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename());
  }
  if (names.empty()) throw af::DataError("no PNG masks in " + a.gt_dir.string());
  af::metrics::Confusion conf(a.classes);
  for (const auto& name : names) {
    const fs::path pred_path = a.pred_dir / name;
    if (!fs::exists(pred_path)) throw af::DataError("missing prediction " + pred_path.string());
    conf.add(read_ids(pred_path, palette), read_ids(a.gt_dir / name, palette), pred_path.string());
  }
  const auto report = af::metrics::compute_metrics(conf);
  std::vector<std::string> class_names;
  if (palette) {
    for (const auto& e : palette->classes) class_names.push_back(e.name);
  }
  const json j = af::metrics::to_json(report, class_names, a.pixel_accuracy);
  std::cout << af::metrics::format_table(report, class_names, a.pixel_accuracy);
  if (a.json_out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    std::ofstream os(a.json_out);
    if (!os) throw af::DataError("cannot write " + a.json_out.string());
    os << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_tile(const fs::path& image_path, af::Index tile, af::Index step, const fs::path& out_dir) {
  const af::RgbImage image = af::read_png_rgb(image_path);
  const auto grid = af::tiling::make_grid(image.height, image.width, tile, step);
  fs::create_directories(out_dir);
  for (af::Index r = 0; r < grid.rows; ++r) {
    for (af::Index c = 0; c < grid.cols; ++c) {
      const auto& o = grid.origins[static_cast<std::size_t>(r * grid.cols + c)];
      const fs::path p = out_dir / ("tile_r" + std::to_string(r) + "_c" + std::to_string(c) + "_y" +
                                    std::to_string(o.y) + "_x" + std::to_string(o.x) + ".png");
      af::write_png_rgb(p, af::tiling::extract_tile(image, o, grid.tile_h, grid.tile_w));
    }
  }
  std::cout << "wrote " << grid.origins.size() << " tiles (" << grid.rows << " x " << grid.cols << ") to "
            << out_dir.string() << '\n';
  return 0;
}

int cmd_params(const fs::path& config) {
  const af::ModelConfig cfg = af::load_model_config(config);
  const af::ParamReport r = af::param_count(cfg);
  auto millions = [](af::Index n) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << static_cast<double>(n) / 1e6 << "M";
    return os.str();
  };
  std::cout << "AerialFormer-" << cfg.variant << '\n';
  for (const auto& it : r.items) {
    std::cout << "  " << std::left << std::setw(24) << it.module << std::right << std::setw(12) << it.count << '\n';
  }
  std::cout << "encoder " << r.encoder << " (" << millions(r.encoder) << ")\n"
            << "stem    " << r.stem << " (" << millions(r.stem) << ")\n"
            << "decoder " << r.decoder << " (" << millions(r.decoder) << ")\n"
            << "total   " << r.total << " (" << millions(r.total) << ")\n";
  return 0;
}

int cmd_make_synthetic(af::Index n, af::Index size, af::Index classes, std::uint64_t seed, const fs::path& out) {
  const auto samples = af::make_synthetic(n, size, classes, seed);
  af::write_dataset(out, samples, af::Palette::generate(classes));
  std::cout << "wrote " << samples.size() << " samples to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AerialFormer segmentation: training, tiled inference, evaluation"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model on a manifest dataset");
  t->add_option("--config", train.config, "Run config JSON ({\"model\": ..., \"train\": ...})")->required()->check(CLI::ExistingFile);
  t->add_option("--data", train.data, "Dataset directory or manifest file")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--iterations", train.iterations, "Override iteration count");
  t->add_option("--batch-size", train.batch_size, "Override batch size");
  t->add_option("--lr", train.lr, "Override learning rate");
  t->add_option("--seed", train.seed, "Override seed");

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Tiled inference on one image");
  i->add_option("--checkpoint", infer.checkpoint, "Checkpoint archive")->required()->check(CLI::ExistingFile);
  i->add_option("--config", infer.config, "Model config (default: config.json beside the checkpoint)");
  i->add_option("--image", infer.image, "Input RGB PNG")->required();
  i->add_option("--tile", infer.tile, "Tile size")->capture_default_str()->check(CLI::PositiveNumber);
  i->add_option("--step", infer.step, "Tile step")->capture_default_str()->check(CLI::PositiveNumber);
  i->add_option("--out", infer.out, "Output id-mask PNG; the overlay goes beside it")->required();
  i->add_option("--palette", infer.palette, "Palette JSON for the overlay");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Score predicted masks against ground truth");
  e->add_option("--pred-dir", eval.pred_dir, "Predicted masks")->required()->check(CLI::ExistingDirectory);
  e->add_option("--gt-dir", eval.gt_dir, "Ground-truth masks (same file names)")->required()->check(CLI::ExistingDirectory);
  e->add_option("--classes", eval.classes, "Class count")->required()->check(CLI::Range(1, 255));
  e->add_option("--palette", eval.palette, "Palette JSON for colour masks and class names");
  e->add_option("--json", eval.json_out, "Write the JSON report here instead of stdout");
  e->add_flag("--pixel-accuracy", eval.pixel_accuracy, "Also report overall pixel accuracy");

  fs::path tile_image, tile_out;
  af::Index tile_size = 512, tile_step = 256;
  auto* tl = app.add_subcommand("tile", "Cut an image into overlapping tiles");
  tl->add_option("--image", tile_image, "Input RGB PNG")->required();
  tl->add_option("--tile", tile_size, "Tile size")->capture_default_str()->check(CLI::PositiveNumber);
  tl->add_option("--step", tile_step, "Tile step")->capture_default_str()->check(CLI::PositiveNumber);
  tl->add_option("--out-dir", tile_out, "Output directory")->required();

  fs::path params_config;
  auto* p = app.add_subcommand("params", "Itemised parameter count of a model config");
  p->add_option("--config", params_config, "Model config JSON")->required()->check(CLI::ExistingFile);

  af::Index syn_n = 8, syn_size = 64, syn_classes = 4;
  std::uint64_t syn_seed = 0;
  fs::path syn_out;
  auto* s = app.add_subcommand("make-synthetic", "Generate a synthetic-shapes dataset");
  s->add_option("--n", syn_n, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--size", syn_size, "Image side")->capture_default_str()->check(CLI::Range(8, 1 << 14));
  s->add_option("--classes", syn_classes, "Class count")->capture_default_str()->check(CLI::Range(2, 255));
  s->add_option("--seed", syn_seed, "Random seed")->capture_default_str();
  s->add_option("--out", syn_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    if (code != 0) std::cerr << app.help();
    return code;
  }

  try {
    if (*t) return cmd_train(train);
    if (*i) return cmd_infer(infer);
    if (*e) return cmd_eval(eval);
    if (*tl) return cmd_tile(tile_image, tile_size, tile_step, tile_out);
    if (*p) return cmd_params(params_config);
    if (*s) return cmd_make_synthetic(syn_n, syn_size, syn_classes, syn_seed, syn_out);
  } catch (const af::DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 1;
}
