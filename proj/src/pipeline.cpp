#include "bridgekit/pipeline.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>

#include "bridgekit/checkpoint.hpp"
#include "bridgekit/errors.hpp"
#include "bridgekit/geometry.hpp"

namespace bridgekit {

namespace fs = std::filesystem;
using nlohmann::json;

RunPaths RunPaths::from(const RunConfig& cfg) {
  RunPaths p;
  p.out_dir = cfg.out_dir;
  p.corpus_dir = (fs::path(cfg.out_dir) / "corpus").string();
  p.manifest = (fs::path(p.corpus_dir) / "manifest.json").string();
  p.ckpt_dir = (fs::path(cfg.out_dir) / "ckpt").string();
  p.log_dir = (fs::path(cfg.out_dir) / "logs").string();
  p.vq1 = (fs::path(p.ckpt_dir) / "vqvae_stage1.ckpt").string();
  p.vq2 = (fs::path(p.ckpt_dir) / "vqvae_stage2.ckpt").string();
  p.bridge = (fs::path(p.ckpt_dir) / "bridge.ckpt").string();
  return p;
}

RunLock::RunLock(const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  path_ = (fs::path(out_dir) / ".lock").string();
  if (fs::exists(path_))
    throw OrderingError("run directory is locked by another stage process: " + path_);
  std::ofstream os(path_);
  if (!os) throw IoError("cannot create lock file " + path_);
  os << "locked\n";
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

constexpr std::int64_t kStageTagVq1 = 101;
constexpr std::int64_t kStageTagVq2 = 102;
constexpr std::int64_t kStageTagBridge = 103;

Rng step_rng(std::uint64_t seed, std::int64_t stage_tag, std::int64_t step) {
  return Rng(Rng::mix(seed, Rng::mix(static_cast<std::uint64_t>(stage_tag), static_cast<std::uint64_t>(step))));
}

ad::CkptEntry fingerprint_entry(const std::string& fingerprint) {
  ad::CkptEntry e;
  e.shape = {static_cast<int>(fingerprint.size())};
  for (char c : fingerprint) e.data.push_back(static_cast<float>(static_cast<unsigned char>(c)));
  return e;
}

std::string fingerprint_from_entry(const ad::CkptEntry& e) {
  std::string s;
  for (float f : e.data) s.push_back(static_cast<char>(static_cast<int>(f)));
  return s;
}

ad::CkptEntry scalar_entry(std::int64_t v) {
  ad::CkptEntry e;
  e.shape = {1};
  e.data = {static_cast<float>(v)};
  return e;
}

struct CkptMeta {
  std::string fingerprint;
  std::int64_t step = 0;
};

ad::CkptItems pack_ckpt(const std::string& fingerprint, std::int64_t step, const NamedParams<float>& params,
                        const ad::Optimizer<float>* opt) {
  ad::CkptItems items;
  items.emplace_back("meta/config_fingerprint", fingerprint_entry(fingerprint));
  items.emplace_back("meta/step", scalar_entry(step));
  for (const auto& [name, p] : params) items.emplace_back(name, ad::to_ckpt_entry(p));
  if (opt != nullptr) {
    items.emplace_back("meta/opt_step", scalar_entry(opt->step_count()));
    for (auto& [name, data] : opt->export_state()) {
      ad::CkptEntry e;
      e.shape = {static_cast<int>(data.size())};
      e.data = std::move(data);
      items.emplace_back(name, std::move(e));
    }
  }
  return items;
}

CkptMeta read_meta(const ad::CkptItems& items, const std::string& path) {
  CkptMeta meta;
  for (const auto& [name, e] : items) {
    if (name == "meta/config_fingerprint") meta.fingerprint = fingerprint_from_entry(e);
    if (name == "meta/step") meta.step = static_cast<std::int64_t>(e.data.at(0));
  }
  if (meta.fingerprint.empty()) throw IoError("checkpoint missing fingerprint: " + path);
  return meta;
}

void check_fingerprint(const CkptMeta& meta, const RunConfig& cfg, const std::string& path, bool force) {
  if (!force && meta.fingerprint != cfg.fingerprint)
    throw ConfigError("checkpoint/config fingerprint mismatch for " + path + " (" + meta.fingerprint + " vs " +
                      cfg.fingerprint + "); use --force to override");
}

void load_named(const ad::CkptItems& items, const NamedParams<float>& params, const std::string& path) {
  std::map<std::string, const ad::CkptEntry*> by_name;
  for (const auto& [name, e] : items) by_name[name] = &e;
  for (const auto& [name, p] : params) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint " + path + " is missing tensor '" + name + "'");
    ad::Tensor<float> t = p;
    ad::load_into(*it->second, t);
  }
}

void load_opt_state(const ad::CkptItems& items, ad::Optimizer<float>& opt) {
  for (const auto& [name, e] : items) {
    if (name == "meta/opt_step") opt.set_step_count(static_cast<std::int64_t>(e.data.at(0)));
    if (name.rfind("opt/", 0) == 0) opt.import_state_entry(name, e.data);
  }
}

class JsonlLog {
 public:
  JsonlLog(const std::string& dir, const std::string& name) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    path_ = (fs::path(dir) / name).string();
    os_.open(path_, std::ios::app);
    if (!os_) throw IoError("cannot open run log " + path_);
  }

  void write(const json& j) {
    os_ << j.dump() << "\n";
    os_.flush();
  }

 private:
  std::string path_;
  std::ofstream os_;
};

double now_ms() {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

struct Corpus {
  std::vector<CorpusEntry> entries;
  std::vector<VoxelGrid> partials;
  std::vector<VoxelGrid> completes;
};

Corpus load_corpus(const RunConfig& cfg, const RunPaths& paths, bool force) {
  if (!fs::exists(paths.manifest))
    throw OrderingError("corpus manifest not found at " + paths.manifest + "; run `gen` first");
  Corpus c;
  c.entries = load_manifest(paths.manifest, cfg.fingerprint, force);
  for (const auto& e : c.entries) {
    c.partials.push_back(load_grid(e.partial_path));
    c.completes.push_back(load_grid(e.complete_path));
  }
  return c;
}

}  // namespace

ViewFeatures features_for(const VoxelGrid& complete, const RunConfig& cfg) {
  FeatureConfig fcfg;
  fcfg.patch_size = cfg.views.patch_size;
  PatchDescriptorExtractor extractor(fcfg);
  std::vector<View> views;
  for (const auto& name : cfg.vqvae.view_names) views.push_back(view_from_name(name));
  return render_and_aggregate(complete, views, extractor);
}

std::string run_gen(const RunConfig& cfg) {
  RunLock lock(cfg.out_dir);
  const RunPaths paths = RunPaths::from(cfg);
  GridDims dims{cfg.grid.dim, cfg.grid.dim, cfg.grid.dim};
  const std::string manifest =
      make_corpus(cfg.seed, cfg.grid.corpus_n, dims, static_cast<float>(cfg.grid.truncation), paths.corpus_dir,
                  cfg.fingerprint);
  JsonlLog log(paths.log_dir, "gen.jsonl");
  log.write({{"event", "gen"}, {"n", cfg.grid.corpus_n}, {"manifest", manifest}, {"fingerprint", cfg.fingerprint}});
  return manifest;
}

void run_train_vqvae(const RunConfig& cfg, int stage, bool force) {
  if (stage != 1 && stage != 2) throw ConfigError("train-vqvae: stage must be 1 or 2");
  RunLock lock(cfg.out_dir);
  const RunPaths paths = RunPaths::from(cfg);
  Corpus corpus = load_corpus(cfg, paths, force);

  VqVae<float> model = VqVae<float>::init(cfg.vqvae_config(), cfg.seed);
  const std::string ckpt_path = (stage == 1) ? paths.vq1 : paths.vq2;
  const int total_steps = (stage == 1) ? cfg.vqvae.stage1_steps : cfg.vqvae.stage2_steps;
  const std::int64_t stage_tag = (stage == 1) ? kStageTagVq1 : kStageTagVq2;

  ad::Optimizer<float>::Hyper hyper;
  hyper.kind = ad::OptKind::Adam;
  hyper.lr = cfg.vqvae.lr;
  ad::Optimizer<float> opt(hyper);
  opt.add_params(model.params_stage(stage));

  std::int64_t start_step = 0;
  if (fs::exists(ckpt_path)) {
    const ad::CkptItems items = ad::load_checkpoint(ckpt_path);
    const CkptMeta meta = read_meta(items, ckpt_path);
    check_fingerprint(meta, cfg, ckpt_path, force);
    load_named(items, model.params_stage(stage), ckpt_path);
    load_opt_state(items, opt);
    start_step = meta.step;
  } else if (stage == 2) {
    if (!fs::exists(paths.vq1))
      throw OrderingError("train-vqvae --stage 2 requires the stage-1 checkpoint; run --stage 1 first");
    const ad::CkptItems items = ad::load_checkpoint(paths.vq1);
    const CkptMeta meta = read_meta(items, paths.vq1);
    check_fingerprint(meta, cfg, paths.vq1, force);
    load_named(items, model.params_stage(1), paths.vq1);  // fusion stays freshly initialized
  }

  // per-shape aggregated view features, only needed with active fusion
  std::vector<ViewFeatures> feats;
  const bool fusion_active = (stage == 2) && cfg.vqvae.fusion_enabled;
  if (fusion_active)
    for (const auto& g : corpus.completes) feats.push_back(features_for(g, cfg));

  JsonlLog log(paths.log_dir, "vqvae_stage" + std::to_string(stage) + ".jsonl");
  log.write({{"event", "start"},
             {"stage", stage},
             {"fingerprint", cfg.fingerprint},
             {"seed", cfg.seed},
             {"resume_step", start_step},
             {"total_steps", total_steps}});

  const double t0 = now_ms();
  const int n = static_cast<int>(corpus.completes.size());
  for (std::int64_t step = start_step; step < total_steps; ++step) {
    Rng rng = step_rng(cfg.seed, stage_tag, step);
    std::vector<const VoxelGrid*> batch;
    std::vector<const ViewFeatures*> batch_feats;
    for (int b = 0; b < cfg.vqvae.batch_size; ++b) {
      const int i = rng.uniform_int(0, n - 1);
      batch.push_back(&corpus.completes[static_cast<std::size_t>(i)]);
      batch_feats.push_back(fusion_active ? &feats[static_cast<std::size_t>(i)] : nullptr);
    }
    const VqLossRecord rec = vq_training_step(model, opt, batch, batch_feats, stage, step, rng);
    if ((step + 1) % cfg.log_every == 0 || step + 1 == total_steps) {
      log.write({{"step", step + 1},
                 {"loss", rec.total},
                 {"reconstruction", rec.reconstruction},
                 {"codebook", rec.codebook},
                 {"commitment", rec.commitment},
                 {"wall_ms", now_ms() - t0}});
    }
    if ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == total_steps) {
      std::error_code ec;
      fs::create_directories(paths.ckpt_dir, ec);
      ad::save_checkpoint(ckpt_path, pack_ckpt(cfg.fingerprint, step + 1, model.params_stage(stage), &opt));
    }
  }
}

void run_train_bridge(const RunConfig& cfg, bool force) {
  RunLock lock(cfg.out_dir);
  const RunPaths paths = RunPaths::from(cfg);
  Corpus corpus = load_corpus(cfg, paths, force);

  if (!fs::exists(paths.vq2))
    throw OrderingError("train-bridge requires the stage-2 VQ-VAE checkpoint; run train-vqvae first");

  VqVae<float> vq = VqVae<float>::init(cfg.vqvae_config(), cfg.seed);
  {
    const ad::CkptItems items = ad::load_checkpoint(paths.vq2);
    const CkptMeta meta = read_meta(items, paths.vq2);
    check_fingerprint(meta, cfg, paths.vq2, force);
    load_named(items, vq.params_stage(2), paths.vq2);
  }
  // freeze the pretrained pieces; only E_p and the denoiser receive gradients
  set_requires_grad(vq.params_enc_c(), false);
  set_requires_grad(vq.params_dec(), false);
  set_requires_grad(vq.params_codebook(), false);
  set_requires_grad(vq.params_fusion(), false);
  set_requires_grad(vq.params_enc_p(), true);

  Denoiser<float> den = Denoiser<float>::init(cfg.denoiser_config(), cfg.vqvae.d, cfg.seed);
  const BridgeSchedule sched = make_schedule(cfg.bridge.T, cfg.bridge.beta_max);

  ad::Optimizer<float>::Hyper hyper;
  hyper.kind = ad::OptKind::AdamW;
  hyper.lr = cfg.denoiser.lr;
  hyper.weight_decay = cfg.denoiser.weight_decay;
  ad::Optimizer<float> opt(hyper);
  opt.add_params(den.named_params());
  opt.add_params(vq.params_enc_p());

  std::int64_t start_step = 0;
  if (fs::exists(paths.bridge)) {
    const ad::CkptItems items = ad::load_checkpoint(paths.bridge);
    const CkptMeta meta = read_meta(items, paths.bridge);
    check_fingerprint(meta, cfg, paths.bridge, force);
    load_named(items, den.named_params(), paths.bridge);
    load_named(items, vq.params_enc_p(), paths.bridge);
    load_opt_state(items, opt);
    start_step = meta.step;
  }

  std::vector<ViewFeatures> feats;
  std::vector<const ViewFeatures*> feat_ptrs;
  if (cfg.vqvae.fusion_enabled) {
    for (const auto& g : corpus.completes) feats.push_back(features_for(g, cfg));
    for (const auto& f : feats) feat_ptrs.push_back(&f);
  }

  // The VQ-VAE side is frozen, so the complete-shape latents are constants:
  // compute them once per shape instead of per step.
  std::vector<ad::Tensor<float>> z0s;
  for (std::size_t i = 0; i < corpus.completes.size(); ++i)
    z0s.push_back(vq.encode_complete(corpus.completes[i], cfg.vqvae.fusion_enabled ? &feats[i] : nullptr, true));

  JsonlLog log(paths.log_dir, "bridge.jsonl");
  log.write({{"event", "start"},
             {"fingerprint", cfg.fingerprint},
             {"seed", cfg.seed},
             {"resume_step", start_step},
             {"total_steps", cfg.denoiser.steps}});

  const double t0 = now_ms();
  const int n = static_cast<int>(corpus.partials.size());
  for (std::int64_t step = start_step; step < cfg.denoiser.steps; ++step) {
    Rng rng = step_rng(cfg.seed, kStageTagBridge, step);
    ad::Tensor<float> total;
    for (int b = 0; b < cfg.denoiser.batch_size; ++b) {
      const int i = rng.uniform_int(0, n - 1);
      ad::Tensor<float> zT = inject_stochasticity(vq.encode_partial(corpus.partials[static_cast<std::size_t>(i)]),
                                                  cfg.bridge.noise_scale, rng);
      const int t = rng.uniform_int(1, sched.T - 1);
      ad::Tensor<float> z_t = sample_zt(z0s[static_cast<std::size_t>(i)], zT, t, sched, rng);
      ad::Tensor<float> target = eps_target(z_t, z0s[static_cast<std::size_t>(i)], t, sched);
      ad::Tensor<float> item = ad::mse(den.forward(z_t, t), target);
      total = total.defined() ? ad::add(total, item) : item;
    }
    total = ad::scale(total, 1.0 / cfg.denoiser.batch_size);
    opt.zero_grad();
    total.backward();
    opt.step();

    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.denoiser.steps) {
      log.write({{"step", step + 1}, {"loss", total.item()}, {"wall_ms", now_ms() - t0}});
    }
    if ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.denoiser.steps) {
      std::error_code ec;
      fs::create_directories(paths.ckpt_dir, ec);
      NamedParams<float> params = den.named_params();
      for (auto& p : vq.params_enc_p()) params.push_back(p);
      ad::save_checkpoint(paths.bridge, pack_ckpt(cfg.fingerprint, step + 1, params, &opt));
    }
  }
}

ModelBundle load_models(const RunConfig& cfg, bool force) {
  const RunPaths paths = RunPaths::from(cfg);
  if (!fs::exists(paths.vq2) || !fs::exists(paths.bridge))
    throw OrderingError("completion requires trained vqvae_stage2 and bridge checkpoints; run the training stages");

  ModelBundle m{VqVae<float>::init(cfg.vqvae_config(), cfg.seed),
                Denoiser<float>::init(cfg.denoiser_config(), cfg.vqvae.d, cfg.seed),
                make_schedule(cfg.bridge.T, cfg.bridge.beta_max)};
  {
    const ad::CkptItems items = ad::load_checkpoint(paths.vq2);
    check_fingerprint(read_meta(items, paths.vq2), cfg, paths.vq2, force);
    load_named(items, m.vq.params_stage(2), paths.vq2);
  }
  {
    const ad::CkptItems items = ad::load_checkpoint(paths.bridge);
    check_fingerprint(read_meta(items, paths.bridge), cfg, paths.bridge, force);
    load_named(items, m.den.named_params(), paths.bridge);
    load_named(items, m.vq.params_enc_p(), paths.bridge);
  }
  return m;
}

VoxelGrid complete_grid(const ModelBundle& models, const RunConfig& cfg, const VoxelGrid& partial,
                        bool deterministic, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x636f6d706c657465ULL));
  ad::Tensor<float> zT =
      inject_stochasticity(models.vq.encode_partial(partial), cfg.bridge.noise_scale, rng);
  DenoiseFn<float> fn = [&models](const ad::Tensor<float>& z, int t) { return models.den.forward(z, t); };
  ad::Tensor<float> z0_hat = sample_completion(fn, zT, cfg.bridge.infer_steps, models.sched, rng, deterministic);
  VqResult<float> vqr = quantize(ad::channels_to_tokens(z0_hat), models.vq.codebook);
  const int d = cfg.vqvae.d;
  ad::Tensor<float> zq = ad::tokens_to_channels(vqr.quantized, {d, d, d});
  return models.vq.decode(zq, partial.truncation(), partial.voxel_size());
}

void run_complete(const RunConfig& cfg, const std::string& input_grid, const std::string& output_grid,
                  bool deterministic, std::uint64_t sample_seed, bool force) {
  const ModelBundle models = load_models(cfg, force);
  const VoxelGrid partial = load_grid(input_grid);
  const VoxelGrid pred = complete_grid(models, cfg, partial, deterministic, sample_seed);
  save_grid(pred, output_grid);
  json meta = {{"config_fingerprint", cfg.fingerprint},
               {"input", input_grid},
               {"seed", sample_seed},
               {"deterministic", deterministic}};
  std::ofstream os(output_grid + ".meta.json", std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot write sidecar for " + output_grid);
  os << meta.dump(2) << "\n";
}

double corpus_recon_l1(const VqVae<float>& vq, const RunConfig& cfg, const std::vector<CorpusEntry>& entries,
                       bool fusion_active) {
  double acc = 0.0;
  for (const auto& e : entries) {
    const VoxelGrid gt = load_grid(e.complete_path);
    ViewFeatures feats;
    const ViewFeatures* fp = nullptr;
    if (fusion_active && cfg.vqvae.fusion_enabled) {
      feats = features_for(gt, cfg);
      fp = &feats;
    }
    const VoxelGrid rec = vq.reconstruct(gt, fp, fusion_active && cfg.vqvae.fusion_enabled);
    acc += l1_error(rec, gt);
  }
  return acc / static_cast<double>(entries.size());
}

EvalReport evaluate_corpus(const ModelBundle& models, const RunConfig& cfg,
                           const std::vector<CorpusEntry>& entries) {
  EvalReport report;
  report.config_fingerprint = cfg.fingerprint;
  json echo = {{"tau_occ", cfg.metrics.tau_occ},
               {"tau_mc", cfg.metrics.tau_mc},
               {"cd_points", cfg.metrics.cd_points},
               {"f1_frac", cfg.metrics.f1_frac},
               {"eval_seed", cfg.metrics.eval_seed},
               {"infer_steps", cfg.bridge.infer_steps},
               {"noise_scale", cfg.bridge.noise_scale},
               {"cd_convention", "0.5*(mean_P min d + mean_Q min d), euclidean pairs"}};
  report.config_echo_json = echo.dump();

  const float tau_mc = static_cast<float>(cfg.metrics.tau_mc);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const VoxelGrid partial = load_grid(entries[i].partial_path);
    const VoxelGrid gt = load_grid(entries[i].complete_path);
    const std::uint64_t shape_seed = Rng::mix(cfg.metrics.eval_seed, static_cast<std::uint64_t>(i));

    const TriMesh gt_mesh = marching_cubes(gt, tau_mc);
    if (gt_mesh.empty()) throw std::invalid_argument("evaluate_corpus: ground-truth mesh is empty for " + entries[i].id);
    Rng gt_rng(Rng::mix(shape_seed, 1));
    const auto gt_pts = sample_surface(gt_mesh, cfg.metrics.cd_points, gt_rng);

    const auto score = [&](const VoxelGrid& pred, const std::string& what) {
      ShapeMetrics m;
      m.id = entries[i].id;
      m.l1 = l1_error(pred, gt);
      m.iou = iou(pred, gt, cfg.metrics.tau_occ);
      const TriMesh mesh = marching_cubes(pred, tau_mc);
      if (mesh.empty())
        throw std::invalid_argument("evaluate_corpus: " + what + " mesh is empty for " + entries[i].id);
      Rng rng(Rng::mix(shape_seed, 2));
      const auto pts = sample_surface(mesh, cfg.metrics.cd_points, rng);
      m.cd = chamfer_l1(pts, gt_pts);
      m.f1 = f1_at(pts, gt_pts, cfg.metrics.f1_frac);
      return m;
    };

    const VoxelGrid pred = complete_grid(models, cfg, partial, /*deterministic=*/true, shape_seed);
    report.shapes.push_back(score(pred, "prediction"));
    report.baseline_shapes.push_back(score(to_tudf(partial), "copy-partial baseline"));
  }
  report.means = mean_of(report.shapes);
  report.baseline_means = mean_of(report.baseline_shapes);
  return report;
}

EvalReport run_eval(const RunConfig& cfg, const std::string& report_path, bool force) {
  const RunPaths paths = RunPaths::from(cfg);
  const ModelBundle models = load_models(cfg, force);
  Corpus corpus = load_corpus(cfg, paths, force);
  const EvalReport report = evaluate_corpus(models, cfg, corpus.entries);
  save_report(report, report_path);
  return report;
}

void run_mesh(const std::string& input_grid, const std::string& output_obj, double iso) {
  const VoxelGrid g = load_grid(input_grid);
  float level = static_cast<float>(iso);
  if (iso <= -1e8) level = (g.kind() == FieldKind::UDF) ? kUdfMeshIso : 0.0f;
  const TriMesh mesh = marching_cubes(g, level);
  save_obj(mesh, output_obj);
}

}  // namespace bridgekit
