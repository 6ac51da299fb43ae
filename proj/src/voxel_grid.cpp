#include "bridgekit/voxel_grid.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "bridgekit/errors.hpp"

namespace bridgekit {

namespace fs = std::filesystem;
using nlohmann::json;

VoxelGrid::VoxelGrid(GridDims dims, float voxel_size, float truncation, FieldKind kind, std::vector<float> values)
    : dims_(dims), voxel_size_(voxel_size), truncation_(truncation), kind_(kind), values_(std::move(values)) {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw std::invalid_argument("VoxelGrid: dims must be positive");
  if (static_cast<std::int64_t>(values_.size()) != dims.count())
    throw std::invalid_argument("VoxelGrid: value count does not match dims");
  if (truncation_ <= 0.0f) throw std::invalid_argument("VoxelGrid: truncation must be positive");
  for (float v : values_) {
    if (std::isnan(v)) throw std::invalid_argument("VoxelGrid: NaN value");
    if (std::fabs(v) > truncation_ * (1.0f + 1e-5f)) throw std::invalid_argument("VoxelGrid: value exceeds truncation");
    if (kind_ == FieldKind::UDF && v < 0.0f) throw std::invalid_argument("VoxelGrid: negative value in UDF");
  }
}

float signed_distance(const Primitive& prim, const Eigen::Vector3f& p) {
  if (const auto* s = std::get_if<Sphere>(&prim)) {
    return (p - s->center).norm() - s->radius;
  }
  if (const auto* b = std::get_if<Box>(&prim)) {
    const Eigen::Vector3f q = (p - b->center).cwiseAbs() - b->half_extents;
    const Eigen::Vector3f outside = q.cwiseMax(0.0f);
    const float inside = std::min(q.maxCoeff(), 0.0f);
    return outside.norm() + inside;
  }
  const auto& c = std::get<Cylinder>(prim);
  const Eigen::Vector3f rel = p - c.center;
  float axial = 0.0f, r2 = 0.0f;
  for (int i = 0; i < 3; ++i) {
    if (i == c.axis)
      axial = rel[i];
    else
      r2 += rel[i] * rel[i];
  }
  const float dr = std::sqrt(r2) - c.radius;
  const float dz = std::fabs(axial) - c.half_height;
  const float outside = std::hypot(std::max(dr, 0.0f), std::max(dz, 0.0f));
  return std::min(std::max(dr, dz), 0.0f) + outside;
}

namespace {

// Conservative bounds used for the interior-margin check.
void primitive_bounds(const Primitive& prim, Eigen::Vector3f& lo, Eigen::Vector3f& hi) {
  if (const auto* s = std::get_if<Sphere>(&prim)) {
    lo = s->center.array() - s->radius;
    hi = s->center.array() + s->radius;
    return;
  }
  if (const auto* b = std::get_if<Box>(&prim)) {
    lo = b->center - b->half_extents;
    hi = b->center + b->half_extents;
    return;
  }
  const auto& c = std::get<Cylinder>(prim);
  Eigen::Vector3f ext(c.radius, c.radius, c.radius);
  ext[c.axis] = c.half_height;
  lo = c.center - ext;
  hi = c.center + ext;
}

void check_margin(const ShapeSpec& spec, GridDims dims) {
  if (spec.primitives.empty()) throw std::invalid_argument("sdf_from_spec: spec has no primitives");
  for (const auto& prim : spec.primitives) {
    Eigen::Vector3f lo, hi;
    primitive_bounds(prim, lo, hi);
    const Eigen::Vector3f max(static_cast<float>(dims.nx - 1), static_cast<float>(dims.ny - 1),
                              static_cast<float>(dims.nz - 1));
    for (int i = 0; i < 3; ++i) {
      if (lo[i] < 1.0f || hi[i] > max[i] - 1.0f)
        throw std::invalid_argument("sdf_from_spec: primitive violates the one-voxel interior margin");
    }
  }
}

}  // namespace

VoxelGrid sdf_from_spec(const ShapeSpec& spec, GridDims dims, float truncation, float voxel_size) {
  check_margin(spec, dims);
  std::vector<float> values(static_cast<std::size_t>(dims.count()));
  std::int64_t i = 0;
  for (int z = 0; z < dims.nz; ++z) {
    for (int y = 0; y < dims.ny; ++y) {
      for (int x = 0; x < dims.nx; ++x, ++i) {
        const Eigen::Vector3f p(static_cast<float>(x), static_cast<float>(y), static_cast<float>(z));
        float d = std::numeric_limits<float>::infinity();
        for (const auto& prim : spec.primitives) d = std::min(d, signed_distance(prim, p));
        values[static_cast<std::size_t>(i)] = std::clamp(d, -truncation, truncation);
      }
    }
  }
  return VoxelGrid(dims, voxel_size, truncation, FieldKind::SDF, std::move(values));
}

VoxelGrid to_tudf(const VoxelGrid& g) {
  std::vector<float> values(g.values().size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::fabs(g.values()[i]);
  return VoxelGrid(g.dims(), g.voxel_size(), g.truncation(), FieldKind::UDF, std::move(values));
}

namespace {

struct RayFrame {
  int axis;      // ray marches along this axis
  bool forward;  // from low coordinate to high
};

RayFrame frame_for(CameraDir dir) {
  switch (dir) {
    case CameraDir::PosX: return {0, true};
    case CameraDir::NegX: return {0, false};
    case CameraDir::PosY: return {1, true};
    case CameraDir::NegY: return {1, false};
    case CameraDir::PosZ: return {2, true};
    case CameraDir::NegZ: return {2, false};
  }
  throw std::invalid_argument("unknown camera direction");
}

}  // namespace

VoxelGrid simulate_partial_scan(const VoxelGrid& sdf, const std::vector<CameraDir>& cameras,
                                float keep_fraction_bound) {
  if (sdf.kind() != FieldKind::SDF) throw std::invalid_argument("simulate_partial_scan: input must be SDF");
  if (cameras.empty()) throw std::invalid_argument("simulate_partial_scan: need at least one camera");
  const bool has_surface = std::any_of(sdf.values().begin(), sdf.values().end(), [](float v) { return v <= 0.0f; });
  if (!has_surface) throw std::invalid_argument("simulate_partial_scan: shape has no surface");

  const GridDims d = sdf.dims();
  std::vector<std::uint8_t> observed(static_cast<std::size_t>(d.count()), 0);
  const int ext[3] = {d.nx, d.ny, d.nz};

  for (CameraDir dir : cameras) {
    const RayFrame f = frame_for(dir);
    const int u_axis = (f.axis + 1) % 3, v_axis = (f.axis + 2) % 3;
    for (int u = 0; u < ext[u_axis]; ++u) {
      for (int v = 0; v < ext[v_axis]; ++v) {
        int coord[3];
        coord[u_axis] = u;
        coord[v_axis] = v;
        for (int s = 0; s < ext[f.axis]; ++s) {
          coord[f.axis] = f.forward ? s : ext[f.axis] - 1 - s;
          const std::int64_t idx = sdf.index(coord[0], coord[1], coord[2]);
          observed[static_cast<std::size_t>(idx)] = 1;
          if (sdf.values()[static_cast<std::size_t>(idx)] <= 0.0f) break;  // hit: stop past the crossing
        }
      }
    }
  }

  std::int64_t n_obs = 0;
  std::vector<float> values(sdf.values());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (observed[i])
      ++n_obs;
    else
      values[i] = sdf.truncation();
  }
  const float frac = static_cast<float>(n_obs) / static_cast<float>(d.count());
  if (frac < keep_fraction_bound)
    throw std::invalid_argument("simulate_partial_scan: observed fraction below bound");
  return VoxelGrid(d, sdf.voxel_size(), sdf.truncation(), FieldKind::SDF, std::move(values));
}

// --------------------------------------------------------------------------
// VGRD I/O
// --------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("VGRD: unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

float get_f32(std::istream& is) {
  const std::uint32_t v = get_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

void save_grid(const VoxelGrid& g, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("VGRD: cannot open for write: " + path);
  os.write("VGRD", 4);
  put_u32(os, 1);
  const unsigned char kind = static_cast<unsigned char>(g.kind());
  const unsigned char pad[3] = {0, 0, 0};
  os.write(reinterpret_cast<const char*>(&kind), 1);
  os.write(reinterpret_cast<const char*>(pad), 3);
  put_u32(os, static_cast<std::uint32_t>(g.dims().nx));
  put_u32(os, static_cast<std::uint32_t>(g.dims().ny));
  put_u32(os, static_cast<std::uint32_t>(g.dims().nz));
  put_f32(os, g.voxel_size());
  put_f32(os, g.truncation());
  for (float v : g.values()) put_f32(os, v);
  if (!os) throw IoError("VGRD: write failed: " + path);
}

VoxelGrid load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("VGRD: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VGRD", 4) != 0) throw IoError("VGRD: bad magic in " + path);
  const std::uint32_t version = get_u32(is);
  if (version != 1) throw IoError("VGRD: unsupported version " + std::to_string(version));
  unsigned char kind_byte;
  unsigned char pad[3];
  is.read(reinterpret_cast<char*>(&kind_byte), 1);
  is.read(reinterpret_cast<char*>(pad), 3);
  if (!is) throw IoError("VGRD: truncated header in " + path);
  if (kind_byte > 1) throw IoError("VGRD: unknown kind byte in " + path);
  GridDims dims;
  dims.nx = static_cast<int>(get_u32(is));
  dims.ny = static_cast<int>(get_u32(is));
  dims.nz = static_cast<int>(get_u32(is));
  const float voxel_size = get_f32(is);
  const float truncation = get_f32(is);
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw IoError("VGRD: invalid dims in " + path);

  std::vector<float> values(static_cast<std::size_t>(dims.count()));
  for (auto& v : values) {
    v = get_f32(is);
    if (std::isnan(v)) throw IoError("VGRD: NaN in payload of " + path);
  }
  // payload must end exactly at dims product
  is.peek();
  if (!is.eof()) throw IoError("VGRD: payload size does not match dims in " + path);
  return VoxelGrid(dims, voxel_size, truncation, static_cast<FieldKind>(kind_byte), std::move(values));
}

// --------------------------------------------------------------------------
// Corpus generation
// --------------------------------------------------------------------------

ShapeSpec random_shape_spec(GridDims dims, Rng& rng) {
  const float lo = 2.0f;
  const float hix = static_cast<float>(dims.nx - 3);
  const float hiy = static_cast<float>(dims.ny - 3);
  const float hiz = static_cast<float>(dims.nz - 3);
  const float min_ext = std::min({hix - lo, hiy - lo, hiz - lo});

  ShapeSpec spec;
  const int count = rng.uniform_int(1, 3);
  for (int i = 0; i < count; ++i) {
    const int kind = rng.uniform_int(0, 2);
    // keep features >= ~2 voxels so surfaces are resolvable at 16^3
    const float max_r = std::max(2.5f, min_ext * 0.25f);
    if (kind == 0) {
      Sphere s;
      s.radius = static_cast<float>(rng.uniform(2.0, max_r));
      s.center = Eigen::Vector3f(static_cast<float>(rng.uniform(lo + s.radius, hix - s.radius)),
                                 static_cast<float>(rng.uniform(lo + s.radius, hiy - s.radius)),
                                 static_cast<float>(rng.uniform(lo + s.radius, hiz - s.radius)));
      spec.primitives.push_back(s);
    } else if (kind == 1) {
      Box b;
      b.half_extents = Eigen::Vector3f(static_cast<float>(rng.uniform(1.5, max_r)),
                                       static_cast<float>(rng.uniform(1.5, max_r)),
                                       static_cast<float>(rng.uniform(1.5, max_r)));
      b.center = Eigen::Vector3f(static_cast<float>(rng.uniform(lo + b.half_extents.x(), hix - b.half_extents.x())),
                                 static_cast<float>(rng.uniform(lo + b.half_extents.y(), hiy - b.half_extents.y())),
                                 static_cast<float>(rng.uniform(lo + b.half_extents.z(), hiz - b.half_extents.z())));
      spec.primitives.push_back(b);
    } else {
      Cylinder c;
      c.axis = rng.uniform_int(0, 2);
      c.radius = static_cast<float>(rng.uniform(1.5, max_r));
      c.half_height = static_cast<float>(rng.uniform(2.0, max_r * 1.5));
      Eigen::Vector3f ext(c.radius, c.radius, c.radius);
      ext[c.axis] = c.half_height;
      c.center = Eigen::Vector3f(static_cast<float>(rng.uniform(lo + ext.x(), hix - ext.x())),
                                 static_cast<float>(rng.uniform(lo + ext.y(), hiy - ext.y())),
                                 static_cast<float>(rng.uniform(lo + ext.z(), hiz - ext.z())));
      spec.primitives.push_back(c);
    }
  }
  return spec;
}

namespace {

json primitive_to_json(const Primitive& prim) {
  json j;
  if (const auto* s = std::get_if<Sphere>(&prim)) {
    j["type"] = "sphere";
    j["center"] = {s->center.x(), s->center.y(), s->center.z()};
    j["radius"] = s->radius;
  } else if (const auto* b = std::get_if<Box>(&prim)) {
    j["type"] = "box";
    j["center"] = {b->center.x(), b->center.y(), b->center.z()};
    j["half_extents"] = {b->half_extents.x(), b->half_extents.y(), b->half_extents.z()};
  } else {
    const auto& c = std::get<Cylinder>(prim);
    j["type"] = "cylinder";
    j["center"] = {c.center.x(), c.center.y(), c.center.z()};
    j["radius"] = c.radius;
    j["half_height"] = c.half_height;
    j["axis"] = c.axis;
  }
  return j;
}

Primitive primitive_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  const auto vec3 = [](const json& a) {
    return Eigen::Vector3f(a.at(0).get<float>(), a.at(1).get<float>(), a.at(2).get<float>());
  };
  if (type == "sphere") return Sphere{vec3(j.at("center")), j.at("radius").get<float>()};
  if (type == "box") return Box{vec3(j.at("center")), vec3(j.at("half_extents"))};
  if (type == "cylinder")
    return Cylinder{vec3(j.at("center")), j.at("radius").get<float>(), j.at("half_height").get<float>(),
                    j.at("axis").get<int>()};
  throw IoError("manifest: unknown primitive type '" + type + "'");
}

json spec_to_json(const ShapeSpec& spec) {
  json j;
  j["seed"] = spec.seed;
  j["primitives"] = json::array();
  for (const auto& p : spec.primitives) j["primitives"].push_back(primitive_to_json(p));
  return j;
}

ShapeSpec spec_from_json(const json& j) {
  ShapeSpec spec;
  spec.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& p : j.at("primitives")) spec.primitives.push_back(primitive_from_json(p));
  return spec;
}

}  // namespace

std::string make_corpus(std::uint64_t seed, int n, GridDims dims, float truncation, const std::string& out_dir,
                        const std::string& fingerprint) {
  if (n < 1) throw std::invalid_argument("make_corpus: n must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("make_corpus: cannot create directory " + out_dir);

  json entries = json::array();
  for (int i = 0; i < n; ++i) {
    const std::uint64_t shape_seed = Rng::mix(seed, static_cast<std::uint64_t>(i));
    Rng rng(shape_seed);

    // retry draws that happen to miss the margin requirements
    ShapeSpec spec;
    VoxelGrid sdf({1, 1, 1}, 1.0f, 1.0f, FieldKind::SDF, {0.0f});
    for (int attempt = 0;; ++attempt) {
      spec = random_shape_spec(dims, rng);
      spec.seed = shape_seed;
      try {
        sdf = sdf_from_spec(spec, dims, truncation);
        break;
      } catch (const std::invalid_argument&) {
        if (attempt > 32) throw;
      }
    }

    // 1-2 cameras so part of the shape stays hidden
    const int n_cams = rng.uniform_int(1, 2);
    std::vector<CameraDir> cams;
    while (static_cast<int>(cams.size()) < n_cams) {
      const auto cam = static_cast<CameraDir>(rng.uniform_int(0, 5));
      if (std::find(cams.begin(), cams.end(), cam) == cams.end()) cams.push_back(cam);
    }
    const VoxelGrid partial = simulate_partial_scan(sdf, cams);
    const VoxelGrid complete = to_tudf(sdf);

    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "shape_%04d", i);
    const std::string id(idbuf);
    const std::string partial_path = (fs::path(out_dir) / (id + "_partial.vgrd")).string();
    const std::string complete_path = (fs::path(out_dir) / (id + "_complete.vgrd")).string();
    save_grid(partial, partial_path);
    save_grid(complete, complete_path);

    json e;
    e["id"] = id;
    e["partial_path"] = partial_path;
    e["complete_path"] = complete_path;
    e["spec"] = spec_to_json(spec);
    e["seed"] = shape_seed;
    entries.push_back(e);
  }

  json manifest;
  manifest["entries"] = entries;
  if (!fingerprint.empty()) manifest["config_fingerprint"] = fingerprint;
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  std::ofstream os(manifest_path, std::ios::trunc);
  if (!os) throw IoError("make_corpus: cannot write manifest " + manifest_path);
  os << manifest.dump(2) << "\n";
  return manifest_path;
}

std::vector<CorpusEntry> load_manifest(const std::string& manifest_path, const std::string& expect_fingerprint,
                                       bool force) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("manifest: cannot open " + manifest_path);
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw IoError("manifest: parse error in " + manifest_path + ": " + e.what());
  }
  if (!expect_fingerprint.empty() && !force) {
    const std::string got = manifest.value("config_fingerprint", "");
    if (got != expect_fingerprint)
      throw ConfigError("manifest: config fingerprint mismatch (" + got + " vs " + expect_fingerprint +
                        "); use --force to override");
  }
  std::vector<CorpusEntry> out;
  for (const auto& e : manifest.at("entries")) {
    CorpusEntry entry;
    entry.id = e.at("id").get<std::string>();
    entry.partial_path = e.at("partial_path").get<std::string>();
    entry.complete_path = e.at("complete_path").get<std::string>();
    entry.spec = spec_from_json(e.at("spec"));
    entry.seed = e.at("seed").get<std::uint64_t>();
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace bridgekit
