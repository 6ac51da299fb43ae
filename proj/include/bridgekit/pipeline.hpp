#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bridgekit/config.hpp"
#include "bridgekit/metrics.hpp"

namespace bridgekit {

struct RunPaths {
  std::string out_dir, corpus_dir, manifest, ckpt_dir, log_dir;
  std::string vq1, vq2, bridge;
  static RunPaths from(const RunConfig& cfg);
};

// One stage process at a time per run directory. Created exclusively;
// removed on destruction.
class RunLock {
 public:
  explicit RunLock(const std::string& out_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

struct ModelBundle {
  VqVae<float> vq;
  Denoiser<float> den;
  BridgeSchedule sched;
};

// Stage entry points used by both the CLI and the test suites.
std::string run_gen(const RunConfig& cfg);
void run_train_vqvae(const RunConfig& cfg, int stage, bool force = false);
void run_train_bridge(const RunConfig& cfg, bool force = false);
void run_complete(const RunConfig& cfg, const std::string& input_grid, const std::string& output_grid,
                  bool deterministic, std::uint64_t sample_seed, bool force = false);
EvalReport run_eval(const RunConfig& cfg, const std::string& report_path, bool force = false);
void run_mesh(const std::string& input_grid, const std::string& output_obj, double iso);  // iso<=-1e8: by kind

// Lower-level pieces shared with the acceptance suite.
ViewFeatures features_for(const VoxelGrid& complete, const RunConfig& cfg);
ModelBundle load_models(const RunConfig& cfg, bool force = false);
VoxelGrid complete_grid(const ModelBundle& models, const RunConfig& cfg, const VoxelGrid& partial,
                        bool deterministic, std::uint64_t seed);
double corpus_recon_l1(const VqVae<float>& vq, const RunConfig& cfg, const std::vector<CorpusEntry>& entries,
                       bool fusion_active);
EvalReport evaluate_corpus(const ModelBundle& models, const RunConfig& cfg,
                           const std::vector<CorpusEntry>& entries);

}  // namespace bridgekit
