#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bridgekit/denoiser.hpp"
#include "bridgekit/vqvae.hpp"

namespace bridgekit {

// One canonical, hashable source of truth for a run. Parsed from a single
// JSON file; CLI flags override individual keys by dot path; unknown keys are
// rejected anywhere in the tree. The fingerprint of the canonicalized JSON is
// embedded in every artifact this run produces.
struct RunConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "runs/desk";

  struct Grid {
    int dim = 16;
    double truncation = 3.0;
    double voxel_size = 1.0;
    int corpus_n = 32;
  } grid;

  struct Views {
    int patch_size = 4;
  } views;

  struct Vq {
    int D = 16, d = 4, C = 2, K = 64;
    double beta_c = 0.25;
    bool fusion_enabled = true;
    std::vector<std::string> view_names = {"front", "top", "left"};
    int base_width = 16;
    int attn_dim = 16;
    double lr = 2e-3;
    int batch_size = 8;
    int stage1_steps = 1200;
    int stage2_steps = 600;
    std::int64_t dead_reseed_steps = 2000;
  } vqvae;

  struct Bridge {
    int T = 50;
    double beta_max = 0.04;
    double noise_scale = 1.0;
    int infer_steps = 3;
    bool deterministic = false;
  } bridge;

  struct Den {
    int base_width = 32;
    std::vector<int> channel_mult = {1, 2};
    int time_dim = 64;
    bool mid_attention = true;
    double lr = 1e-3;
    double weight_decay = 0.01;
    int batch_size = 8;
    int steps = 2000;
  } denoiser;

  struct Metrics {
    double tau_occ = 1.0;
    double tau_mc = 1.0;
    int cd_points = 10000;
    double f1_frac = 0.01;
    std::uint64_t eval_seed = 1234;
  } metrics;

  int checkpoint_every = 100;
  int log_every = 25;

  // filled by the loader
  std::string canonical_json;
  std::string fingerprint;

  VqVaeConfig vqvae_config() const;
  DenoiserConfig denoiser_config() const;
};

// Loads and validates a config, applying dot-path overrides ("a.b.c=value")
// first and then the BRIDGEKIT_SEED environment variable if present.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
RunConfig parse_config_json(const std::string& json_text, const std::vector<std::string>& overrides = {});

// FNV-1a over the canonical (sorted-key) JSON dump; 16 hex chars.
std::string fingerprint_json(const std::string& canonical_json);

// Default desk-profile config as JSON text (what `init` would write).
std::string default_config_json();

}  // namespace bridgekit
