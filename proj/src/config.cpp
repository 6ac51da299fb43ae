#include "bridgekit/config.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <set>

#include "bridgekit/errors.hpp"

namespace bridgekit {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("config: unknown key '" + where + key + "'");
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value type for '" + key + "'");
  }
}

json apply_overrides(json j, const std::vector<std::string>& overrides) {
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("config override must look like key.path=value: " + ov);
    std::string path = ov.substr(0, eq);
    const std::string raw = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;  // unquoted strings are taken verbatim
    }
    json* cur = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("config override has an empty path segment: " + ov);
      if (dot == std::string::npos) {
        (*cur)[part] = value;
        break;
      }
      cur = &((*cur)[part]);
      start = dot + 1;
    }
  }
  return j;
}

}  // namespace

VqVaeConfig RunConfig::vqvae_config() const {
  VqVaeConfig c;
  c.grid_dim = vqvae.D;
  c.latent_dim = vqvae.d;
  c.latent_channels = vqvae.C;
  c.codebook_size = vqvae.K;
  c.beta_c = vqvae.beta_c;
  c.fusion_enabled = vqvae.fusion_enabled;
  c.views.clear();
  for (const auto& name : vqvae.view_names) c.views.push_back(view_from_name(name));
  c.base_width = vqvae.base_width;
  c.attn_dim = vqvae.attn_dim;
  c.feature_channels = 5;
  const int map_dim = vqvae.D / views.patch_size;
  c.feature_tokens = map_dim * map_dim;
  c.dead_reseed_steps = vqvae.dead_reseed_steps;
  return c;
}

DenoiserConfig RunConfig::denoiser_config() const {
  DenoiserConfig c;
  c.in_channels = vqvae.C;
  c.base_width = denoiser.base_width;
  c.channel_mult = denoiser.channel_mult;
  c.time_dim = denoiser.time_dim;
  c.mid_attention = denoiser.mid_attention;
  return c;
}

std::string fingerprint_json(const std::string& canonical_json) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_json) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

RunConfig parse_config_json(const std::string& json_text, const std::vector<std::string>& overrides) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: JSON parse error: ") + e.what());
  }
  j = apply_overrides(j, overrides);
  if (const char* env = std::getenv("BRIDGEKIT_SEED")) {
    try {
      j["seed"] = static_cast<std::uint64_t>(std::stoull(env));
    } catch (const std::exception&) {
      throw ConfigError("config: BRIDGEKIT_SEED is not an unsigned integer");
    }
  }

  reject_unknown(j, {"seed", "out_dir", "grid", "views", "vqvae", "bridge", "denoiser", "metrics",
                     "checkpoint_every", "log_every"},
                 "");

  RunConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
  cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir);
  cfg.checkpoint_every = get_or<int>(j, "checkpoint_every", cfg.checkpoint_every);
  cfg.log_every = get_or<int>(j, "log_every", cfg.log_every);

  if (j.contains("grid")) {
    const json& g = j["grid"];
    reject_unknown(g, {"dim", "truncation", "voxel_size", "corpus_n"}, "grid.");
    cfg.grid.dim = get_or<int>(g, "dim", cfg.grid.dim);
    cfg.grid.truncation = get_or<double>(g, "truncation", cfg.grid.truncation);
    cfg.grid.voxel_size = get_or<double>(g, "voxel_size", cfg.grid.voxel_size);
    cfg.grid.corpus_n = get_or<int>(g, "corpus_n", cfg.grid.corpus_n);
  }
  if (j.contains("views")) {
    const json& v = j["views"];
    reject_unknown(v, {"patch_size"}, "views.");
    cfg.views.patch_size = get_or<int>(v, "patch_size", cfg.views.patch_size);
  }
  if (j.contains("vqvae")) {
    const json& v = j["vqvae"];
    reject_unknown(v,
                   {"D", "d", "C", "K", "beta_c", "fusion", "views", "base_width", "attn_dim", "lr", "batch_size",
                    "stage1_steps", "stage2_steps", "dead_reseed_steps"},
                   "vqvae.");
    cfg.vqvae.D = get_or<int>(v, "D", cfg.vqvae.D);
    cfg.vqvae.d = get_or<int>(v, "d", cfg.vqvae.d);
    cfg.vqvae.C = get_or<int>(v, "C", cfg.vqvae.C);
    cfg.vqvae.K = get_or<int>(v, "K", cfg.vqvae.K);
    cfg.vqvae.beta_c = get_or<double>(v, "beta_c", cfg.vqvae.beta_c);
    if (v.contains("fusion")) {
      reject_unknown(v["fusion"], {"enabled"}, "vqvae.fusion.");
      cfg.vqvae.fusion_enabled = get_or<bool>(v["fusion"], "enabled", cfg.vqvae.fusion_enabled);
    }
    cfg.vqvae.view_names = get_or<std::vector<std::string>>(v, "views", cfg.vqvae.view_names);
    cfg.vqvae.base_width = get_or<int>(v, "base_width", cfg.vqvae.base_width);
    cfg.vqvae.attn_dim = get_or<int>(v, "attn_dim", cfg.vqvae.attn_dim);
    cfg.vqvae.lr = get_or<double>(v, "lr", cfg.vqvae.lr);
    cfg.vqvae.batch_size = get_or<int>(v, "batch_size", cfg.vqvae.batch_size);
    cfg.vqvae.stage1_steps = get_or<int>(v, "stage1_steps", cfg.vqvae.stage1_steps);
    cfg.vqvae.stage2_steps = get_or<int>(v, "stage2_steps", cfg.vqvae.stage2_steps);
    cfg.vqvae.dead_reseed_steps = get_or<std::int64_t>(v, "dead_reseed_steps", cfg.vqvae.dead_reseed_steps);
  }
  if (j.contains("bridge")) {
    const json& b = j["bridge"];
    reject_unknown(b, {"T", "beta_max", "noise_scale", "infer_steps", "deterministic"}, "bridge.");
    cfg.bridge.T = get_or<int>(b, "T", cfg.bridge.T);
    cfg.bridge.beta_max = get_or<double>(b, "beta_max", cfg.bridge.beta_max);
    cfg.bridge.noise_scale = get_or<double>(b, "noise_scale", cfg.bridge.noise_scale);
    cfg.bridge.infer_steps = get_or<int>(b, "infer_steps", cfg.bridge.infer_steps);
    cfg.bridge.deterministic = get_or<bool>(b, "deterministic", cfg.bridge.deterministic);
  }
  if (j.contains("denoiser")) {
    const json& d = j["denoiser"];
    reject_unknown(d, {"base_width", "channel_mult", "time_dim", "mid_attention", "lr", "weight_decay",
                       "batch_size", "steps"},
                   "denoiser.");
    cfg.denoiser.base_width = get_or<int>(d, "base_width", cfg.denoiser.base_width);
    cfg.denoiser.channel_mult = get_or<std::vector<int>>(d, "channel_mult", cfg.denoiser.channel_mult);
    cfg.denoiser.time_dim = get_or<int>(d, "time_dim", cfg.denoiser.time_dim);
    cfg.denoiser.mid_attention = get_or<bool>(d, "mid_attention", cfg.denoiser.mid_attention);
    cfg.denoiser.lr = get_or<double>(d, "lr", cfg.denoiser.lr);
    cfg.denoiser.weight_decay = get_or<double>(d, "weight_decay", cfg.denoiser.weight_decay);
    cfg.denoiser.batch_size = get_or<int>(d, "batch_size", cfg.denoiser.batch_size);
    cfg.denoiser.steps = get_or<int>(d, "steps", cfg.denoiser.steps);
  }
  if (j.contains("metrics")) {
    const json& m = j["metrics"];
    reject_unknown(m, {"tau_occ", "tau_mc", "cd_points", "f1_frac", "eval_seed"}, "metrics.");
    cfg.metrics.tau_occ = get_or<double>(m, "tau_occ", cfg.metrics.tau_occ);
    cfg.metrics.tau_mc = get_or<double>(m, "tau_mc", cfg.metrics.tau_mc);
    cfg.metrics.cd_points = get_or<int>(m, "cd_points", cfg.metrics.cd_points);
    cfg.metrics.f1_frac = get_or<double>(m, "f1_frac", cfg.metrics.f1_frac);
    cfg.metrics.eval_seed = get_or<std::uint64_t>(m, "eval_seed", cfg.metrics.eval_seed);
  }

  // cross-field sanity; throws ConfigError with the offending key
  if (cfg.grid.dim < 2) throw ConfigError("config: grid.dim must be >= 2");
  if (cfg.grid.truncation <= 0) throw ConfigError("config: grid.truncation must be positive");
  if (cfg.grid.corpus_n < 1) throw ConfigError("config: grid.corpus_n must be >= 1");
  if (cfg.vqvae.D != cfg.grid.dim) throw ConfigError("config: vqvae.D must equal grid.dim");
  if (cfg.vqvae.K < 2) throw ConfigError("config: vqvae.K must be >= 2");
  if (cfg.views.patch_size < 1 || cfg.vqvae.D % cfg.views.patch_size != 0)
    throw ConfigError("config: views.patch_size must divide vqvae.D");
  if (cfg.bridge.T < 2) throw ConfigError("config: bridge.T must be >= 2");
  if (cfg.bridge.beta_max <= 0) throw ConfigError("config: bridge.beta_max must be positive");
  if (cfg.bridge.infer_steps < 1 || cfg.bridge.infer_steps > cfg.bridge.T)
    throw ConfigError("config: bridge.infer_steps must be in [1, T]");
  if (cfg.bridge.noise_scale < 0) throw ConfigError("config: bridge.noise_scale must be >= 0");
  if (cfg.metrics.cd_points < 1) throw ConfigError("config: metrics.cd_points must be >= 1");
  if (cfg.checkpoint_every < 1) throw ConfigError("config: checkpoint_every must be >= 1");
  if (cfg.log_every < 1) throw ConfigError("config: log_every must be >= 1");
  try {
    cfg.vqvae_config().n_down();
    cfg.denoiser_config().validate(cfg.vqvae.d);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  cfg.canonical_json = j.dump();
  cfg.fingerprint = fingerprint_json(cfg.canonical_json);
  return cfg;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_config_json(text, overrides);
}

std::string default_config_json() {
  json j = {
      {"seed", 7},
      {"out_dir", "runs/desk"},
      {"grid", {{"dim", 16}, {"truncation", 3.0}, {"voxel_size", 1.0}, {"corpus_n", 32}}},
      {"views", {{"patch_size", 4}}},
      {"vqvae",
       {{"D", 16},
        {"d", 4},
        {"C", 2},
        {"K", 64},
        {"beta_c", 0.25},
        {"fusion", {{"enabled", true}}},
        {"views", {"front", "top", "left"}},
        {"base_width", 16},
        {"attn_dim", 16},
        {"lr", 2e-3},
        {"batch_size", 8},
        {"stage1_steps", 1200},
        {"stage2_steps", 600},
        {"dead_reseed_steps", 2000}}},
      {"bridge",
       {{"T", 50}, {"beta_max", 0.04}, {"noise_scale", 1.0}, {"infer_steps", 3}, {"deterministic", false}}},
      {"denoiser",
       {{"base_width", 32},
        {"channel_mult", {1, 2}},
        {"time_dim", 64},
        {"mid_attention", true},
        {"lr", 1e-3},
        {"weight_decay", 0.01},
        {"batch_size", 8},
        {"steps", 2000}}},
      {"metrics",
       {{"tau_occ", 1.0}, {"tau_mc", 1.0}, {"cd_points", 10000}, {"f1_frac", 0.01}, {"eval_seed", 1234}}},
      {"checkpoint_every", 100},
      {"log_every", 25},
  };
  return j.dump(2) + "\n";
}

}  // namespace bridgekit
