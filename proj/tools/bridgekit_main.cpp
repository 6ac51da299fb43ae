#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "bridgekit/errors.hpp"
#include "bridgekit/pipeline.hpp"

namespace {

// Exit codes: 0 success, 2 config error, 3 ordering error, 4 I/O error.
constexpr int kExitConfig = 2;
constexpr int kExitOrdering = 3;
constexpr int kExitIo = 4;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run config JSON")->required();
  cmd->add_option("--set", opts.overrides, "override a config key, dot-path syntax (e.g. bridge.T=100)");
  cmd->add_flag("--force", opts.force, "skip config fingerprint checks");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bridgekit: latent diffusion-bridge shape completion pipeline"};
  app.require_subcommand(1);

  CommonOpts gen_opts, vq_opts, bridge_opts, complete_opts, eval_opts;

  auto* init_cmd = app.add_subcommand("init", "write a default desk-profile config");
  std::string init_path = "bridgekit.json";
  init_cmd->add_option("--output", init_path, "where to write the config");

  auto* gen_cmd = app.add_subcommand("gen", "generate the synthetic shape-pair corpus");
  add_common(gen_cmd, gen_opts);

  auto* vq_cmd = app.add_subcommand("train-vqvae", "train the depth-enhanced VQ-VAE (two stages)");
  int stage = 0;
  vq_cmd->add_option("--stage", stage, "1 = base autoencoder, 2 = with depth fusion")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  add_common(vq_cmd, vq_opts);

  auto* bridge_cmd = app.add_subcommand("train-bridge", "train the latent bridge denoiser and E_p");
  add_common(bridge_cmd, bridge_opts);

  auto* complete_cmd = app.add_subcommand("complete", "complete a partial scan");
  std::string complete_in, complete_out;
  bool complete_det = false;
  std::uint64_t complete_seed = 0;
  complete_cmd->add_option("--input", complete_in, "partial TSDF grid (VGRD)")->required();
  complete_cmd->add_option("--output", complete_out, "output TUDF grid (VGRD)")->required();
  complete_cmd->add_flag("--deterministic", complete_det, "suppress sampler noise");
  complete_cmd->add_option("--seed", complete_seed, "sampling seed");
  add_common(complete_cmd, complete_opts);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate completions over the corpus");
  std::string report_path = "report.json";
  eval_cmd->add_option("--output", report_path, "evaluation report JSON");
  add_common(eval_cmd, eval_opts);

  auto* mesh_cmd = app.add_subcommand("mesh", "extract a mesh from a grid (marching cubes)");
  std::string mesh_in, mesh_out;
  double mesh_iso = -1e9;
  mesh_cmd->add_option("--input", mesh_in, "grid file (VGRD)")->required();
  mesh_cmd->add_option("--output", mesh_out, "OBJ path")->required();
  mesh_cmd->add_option("--iso", mesh_iso, "iso level (default: 0 for SDF, 1 voxel for UDF)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (init_cmd->parsed()) {
      std::ofstream os(init_path, std::ios::trunc);
      if (!os) throw bridgekit::IoError("cannot write " + init_path);
      os << bridgekit::default_config_json();
      std::cout << "wrote " << init_path << "\n";
      return 0;
    }
    if (gen_cmd->parsed()) {
      const auto cfg = bridgekit::load_config(gen_opts.config_path, gen_opts.overrides);
      const std::string manifest = bridgekit::run_gen(cfg);
      std::cout << "corpus manifest: " << manifest << "\n";
      return 0;
    }
    if (vq_cmd->parsed()) {
      const auto cfg = bridgekit::load_config(vq_opts.config_path, vq_opts.overrides);
      bridgekit::run_train_vqvae(cfg, stage, vq_opts.force);
      std::cout << "train-vqvae stage " << stage << " done\n";
      return 0;
    }
    if (bridge_cmd->parsed()) {
      const auto cfg = bridgekit::load_config(bridge_opts.config_path, bridge_opts.overrides);
      bridgekit::run_train_bridge(cfg, bridge_opts.force);
      std::cout << "train-bridge done\n";
      return 0;
    }
    if (complete_cmd->parsed()) {
      const auto cfg = bridgekit::load_config(complete_opts.config_path, complete_opts.overrides);
      const bool det = complete_det || cfg.bridge.deterministic;
      bridgekit::run_complete(cfg, complete_in, complete_out, det, complete_seed, complete_opts.force);
      std::cout << "wrote " << complete_out << "\n";
      return 0;
    }
    if (eval_cmd->parsed()) {
      const auto cfg = bridgekit::load_config(eval_opts.config_path, eval_opts.overrides);
      const auto report = bridgekit::run_eval(cfg, report_path, eval_opts.force);
      std::printf("eval: l1=%.4f cd=%.4f iou=%.4f f1=%.4f (baseline l1=%.4f iou=%.4f) -> %s\n",
                  report.means.l1, report.means.cd, report.means.iou, report.means.f1,
                  report.baseline_means.l1, report.baseline_means.iou, report_path.c_str());
      return 0;
    }
    if (mesh_cmd->parsed()) {
      bridgekit::run_mesh(mesh_in, mesh_out, mesh_iso);
      std::cout << "wrote " << mesh_out << "\n";
      return 0;
    }
  } catch (const bridgekit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const bridgekit::OrderingError& e) {
    std::cerr << "ordering error: " << e.what() << "\n";
    return kExitOrdering;
  } catch (const bridgekit::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
