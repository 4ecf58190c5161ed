// marscf: train / eval / sample / interpolate / analyze for the multi-scale
// autoregressive-prior flow library.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <marscf/checkpoint.hpp>
#include <marscf/config.hpp>
#include <marscf/data.hpp>
#include <marscf/interp.hpp>
#include <marscf/model.hpp>
#include <marscf/train.hpp>

namespace {

using namespace marscf;

const std::vector<std::string> kConfigKeys = {
    "channels",     "size",          "levels",     "flow_steps",   "coupling",
    "width",        "mix_components", "prior_hidden", "prior_cond", "prior_layers",
    "epochs",       "batch_size",    "lr",         "clip_norm",    "checkpoint_every",
    "init_batch",   "seed",          "data_path",  "data_format",  "bits",
    "val_fraction", "interp_steps",  "lambda1",    "lambda2",      "interp_lr",
    "interp_iterations", "temperature", "sample_count", "out_dir"};

struct Cli {
  std::string config_file;
  std::map<std::string, std::string> overrides;
  std::string checkpoint;
  std::string image_a, image_b;
};

void add_common(CLI::App* cmd, Cli& cli) {
  cmd->add_option("--config", cli.config_file, "key=value config file");
  for (const auto& key : kConfigKeys)
    cmd->add_option_function<std::string>(
        "--" + key, [&cli, key](const std::string& v) { cli.overrides[key] = v; },
        "config key '" + key + "'");
}

RunConfig resolve(const Cli& cli) {
  RunConfig cfg;
  if (const char* env = std::getenv("MARSCF_OUT_DIR")) cfg.train.out_dir = env;
  if (!cli.config_file.empty()) load_config_file(cfg, cli.config_file);
  for (const auto& key : kConfigKeys) {  // deterministic application order
    auto it = cli.overrides.find(key);
    if (it != cli.overrides.end()) apply_config_key(cfg, key, it->second);
  }
  if (cfg.train.out_dir.empty()) cfg.train.out_dir = ".";
  std::filesystem::create_directories(cfg.train.out_dir);
  return cfg;
}

std::pair<Dataset, Dataset> load_split(const RunConfig& cfg) {
  Dataset all = cfg.data.path.empty()
                    ? make_synthetic(2048 + 512, cfg.flow.size, cfg.train.seed + 100)
                    : load_dataset(cfg.data);
  check(cfg.data.val_fraction > 0.0 && cfg.data.val_fraction < 1.0,
        "config: val_fraction must be in (0,1)");
  const size_t val_count = std::max<size_t>(
      1, static_cast<size_t>(all.images.size() * cfg.data.val_fraction));
  check(all.images.size() > val_count, "data: too few images for the requested split");
  Dataset train_ds = all, val_ds = all;
  train_ds.images.assign(all.images.begin(), all.images.end() - val_count);
  val_ds.images.assign(all.images.end() - val_count, all.images.end());
  return {train_ds, val_ds};
}

Tensor load_image(const std::string& path, const RunConfig& cfg, Rng& deq) {
  int c, h, w;
  std::vector<double> img;
  load_pnm_file(path, c, h, w, img);
  check(c == cfg.flow.channels && h == cfg.flow.size && w == cfg.flow.size,
        "data: " + path + " does not match the model geometry");
  return dequantize(Tensor::from({1, c, h, w}, img), cfg.data.bits, deq);
}

/// Tiles [B,C,N,N] into one [C, gh*N, gw*N] image, row-major.
Tensor tile_grid(const Tensor& batch, int cols) {
  const int B = batch.dim(0), C = batch.dim(1), N = batch.dim(2);
  const int rows = (B + cols - 1) / cols;
  Tensor grid({C, rows * N, cols * N});
  for (int b = 0; b < B; ++b) {
    const int gy = b / cols, gx = b % cols;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x)
          grid.data()[(static_cast<std::int64_t>(c) * rows * N + gy * N + y) * cols * N +
                      gx * N + x] =
              batch.data()[((static_cast<std::int64_t>(b) * C + c) * N + y) * N + x];
  }
  return grid;
}

int cmd_train(const Cli& cli) {
  RunConfig cfg = resolve(cli);
  auto [train_ds, val_ds] = load_split(cfg);
  Rng rng(cfg.train.seed);
  Model model(cfg.flow, rng);
  TrainResult res = train(model, train_ds, val_ds, cfg.train);
  std::cout << "post_init_val_bpd=" << res.post_init_val_bpd
            << " final_val_bpd=" << res.final_val_bpd
            << " nonfinite_skipped=" << res.nonfinite_skipped << "\n";
  std::cout << "wrote " << cfg.train.out_dir << "/model.mscf and metrics.jsonl\n";
  return 0;
}

int cmd_eval(const Cli& cli) {
  RunConfig cfg = resolve(cli);
  check(!cli.checkpoint.empty(), "config: --checkpoint is required for eval");
  Model model = load_checkpoint(cli.checkpoint);
  RunConfig geom = cfg;
  geom.data.channels = model.config().channels;
  geom.data.size = model.config().size;
  geom.flow = model.config();
  auto [train_ds, val_ds] = load_split(geom);
  (void)train_ds;
  const double bpd = evaluate(model, val_ds, cfg.train.seed + 2);
  std::cout.precision(17);
  std::cout << "val_bpd=" << bpd << "\n";
  return 0;
}

int cmd_sample(const Cli& cli) {
  RunConfig cfg = resolve(cli);
  check(!cli.checkpoint.empty(), "config: --checkpoint is required for sample");
  Model model = load_checkpoint(cli.checkpoint);
  check(model.initialized(), "config: checkpoint is not trained/initialized");
  Rng rng(cfg.train.seed);
  Tensor x = model.marps_sample(cfg.sample_count, cfg.temperature, rng);
  int cols = 1;
  while (cols * cols < cfg.sample_count) ++cols;
  Tensor grid = tile_grid(x, cols);
  const std::string path = cfg.train.out_dir +
                           (model.config().channels == 3 ? "/samples.ppm" : "/samples.pgm");
  write_pnm(path, grid.data(), grid.dim(0), grid.dim(1), grid.dim(2));
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_interpolate(const Cli& cli) {
  RunConfig cfg = resolve(cli);
  check(!cli.checkpoint.empty(), "config: --checkpoint is required for interpolate");
  check(!cli.image_a.empty() && !cli.image_b.empty(),
        "config: --image-a and --image-b are required for interpolate");
  Model model = load_checkpoint(cli.checkpoint);
  cfg.flow = model.config();
  Rng deq(cfg.train.seed + 7);
  Tensor xA = load_image(cli.image_a, cfg, deq);
  Tensor xB = load_image(cli.image_b, cfg, deq);
  InterpResult res = interpolate_path(xA, xB, model, cfg.interp);

  // endpoints plus waypoints as one horizontal strip
  const int C = cfg.flow.channels, N = cfg.flow.size;
  const int count = static_cast<int>(res.images.size()) + 2;
  Tensor strip({count, C, N, N});
  auto put = [&](int slot, const Tensor& img) {
    std::copy(img.data(), img.data() + img.size(),
              strip.data() + static_cast<std::int64_t>(slot) * C * N * N);
  };
  put(0, xA);
  for (size_t i = 0; i < res.images.size(); ++i) put(static_cast<int>(i) + 1, res.images[i]);
  put(count - 1, xB);
  Tensor grid = tile_grid(strip, count);
  const std::string path = cfg.train.out_dir + (C == 3 ? "/interp.ppm" : "/interp.pgm");
  write_pnm(path, grid.data(), grid.dim(0), grid.dim(1), grid.dim(2));

  const std::string log = cfg.train.out_dir + "/interp_objectives.jsonl";
  std::ofstream out(log, std::ios::trunc);
  out.precision(17);
  for (size_t i = 0; i < res.images.size(); ++i)
    out << "{\"waypoint\":" << i + 1 << ",\"objective_linear\":" << res.objective_init[i]
        << ",\"objective_projected\":" << res.objective_final[i] << "}\n";
  std::cout << "wrote " << path << " and " << log << "\n";
  return 0;
}

int cmd_analyze(const Cli& cli) {
  RunConfig cfg = resolve(cli);
  const auto dims = channel_dims(cfg.flow);
  const std::int64_t T = critical_path_steps(cfg.flow);
  std::cout << "config: C=" << cfg.flow.channels << " N=" << cfg.flow.size
            << " n=" << cfg.flow.levels << "\n";
  for (size_t i = 0; i < dims.size(); ++i) {
    const bool top = i + 1 == dims.size();
    std::cout << (top ? "h_" : "l_") << (top ? cfg.flow.levels : static_cast<int>(i) + 1)
              << ": [" << dims[i].channels << "," << dims[i].height << "," << dims[i].width
              << "] elements=" << dims[i].elements() << "\n";
  }
  std::cout << "critical_path_steps T=" << T << " bound 3CN="
            << 3LL * cfg.flow.channels * cfg.flow.size << " (T<=3CN holds)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-scale autoregressive-prior normalizing flow"};
  app.require_subcommand(1);
  Cli cli;

  CLI::App* train_cmd = app.add_subcommand("train", "maximum-likelihood training");
  CLI::App* eval_cmd = app.add_subcommand("eval", "mean bits/dim of a checkpoint");
  CLI::App* sample_cmd = app.add_subcommand("sample", "write a grid of samples");
  CLI::App* interp_cmd = app.add_subcommand("interpolate", "latent-space interpolation strip");
  CLI::App* analyze_cmd = app.add_subcommand("analyze", "latent shapes and critical path");
  for (CLI::App* c : {train_cmd, eval_cmd, sample_cmd, interp_cmd, analyze_cmd})
    add_common(c, cli);
  for (CLI::App* c : {eval_cmd, sample_cmd, interp_cmd})
    c->add_option("--checkpoint", cli.checkpoint, "model checkpoint path");
  interp_cmd->add_option("--image-a", cli.image_a, "first endpoint (PGM/PPM)");
  interp_cmd->add_option("--image-b", cli.image_b, "second endpoint (PGM/PPM)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(cli);
    if (eval_cmd->parsed()) return cmd_eval(cli);
    if (sample_cmd->parsed()) return cmd_sample(cli);
    if (interp_cmd->parsed()) return cmd_interpolate(cli);
    if (analyze_cmd->parsed()) return cmd_analyze(cli);
  } catch (const marscf::numerical_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    std::cerr << "error: " << msg << "\n";
    return msg.rfind("data:", 0) == 0 ? 3 : 2;
  }
  return 2;
}
