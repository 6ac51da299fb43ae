#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "bridgekit/rng.hpp"

namespace bridgekit {

enum class FieldKind : std::uint8_t { SDF = 0, UDF = 1 };

struct GridDims {
  int nx = 0, ny = 0, nz = 0;
  std::int64_t count() const { return static_cast<std::int64_t>(nx) * ny * nz; }
  bool operator==(const GridDims&) const = default;
};

// Dense truncated distance field sampled at lattice points (x,y,z) in voxel
// units, flattened z-major (z slowest, x fastest). Immutable after
// construction, so instances can be shared freely across threads.
class VoxelGrid {
 public:
  VoxelGrid(GridDims dims, float voxel_size, float truncation, FieldKind kind, std::vector<float> values);

  const GridDims& dims() const { return dims_; }
  float voxel_size() const { return voxel_size_; }
  float truncation() const { return truncation_; }
  FieldKind kind() const { return kind_; }
  const std::vector<float>& values() const { return values_; }

  std::int64_t index(int x, int y, int z) const {
    return (static_cast<std::int64_t>(z) * dims_.ny + y) * dims_.nx + x;
  }
  float at(int x, int y, int z) const { return values_[static_cast<std::size_t>(index(x, y, z))]; }

 private:
  GridDims dims_;
  float voxel_size_;
  float truncation_;
  FieldKind kind_;
  std::vector<float> values_;
};

// --------------------------------------------------------------------------
// Procedural shape specs (params in voxel units)
// --------------------------------------------------------------------------

struct Sphere {
  Eigen::Vector3f center;
  float radius;
};

struct Box {
  Eigen::Vector3f center;
  Eigen::Vector3f half_extents;
};

// Capped cylinder aligned with one grid axis (0=x, 1=y, 2=z).
struct Cylinder {
  Eigen::Vector3f center;
  float radius;
  float half_height;
  int axis;
};

using Primitive = std::variant<Sphere, Box, Cylinder>;

struct ShapeSpec {
  std::vector<Primitive> primitives;
  std::uint64_t seed = 0;
};

// Exact signed distance (voxel units) from point p to the primitive surface.
float signed_distance(const Primitive& prim, const Eigen::Vector3f& p);

// Draws a random spec whose primitives fit inside `dims` with at least one
// voxel of margin. Unions of up to three primitives.
ShapeSpec random_shape_spec(GridDims dims, Rng& rng);

struct DepthMap;  // views module

struct ShapePair {
  std::string id;
  VoxelGrid partial;   // SDF
  VoxelGrid complete;  // UDF
  std::vector<DepthMap> views;  // optional, filled lazily
};

// --------------------------------------------------------------------------
// Operations
// --------------------------------------------------------------------------

// Analytic TSDF of the primitive union: min over primitives, clamped to
// +-truncation. Rejects specs that violate the one-voxel interior margin.
VoxelGrid sdf_from_spec(const ShapeSpec& spec, GridDims dims, float truncation, float voxel_size = 1.0f);

// |values|, kind becomes UDF. Idempotent on UDF input.
VoxelGrid to_tudf(const VoxelGrid& g);

enum class CameraDir { PosX, NegX, PosY, NegY, PosZ, NegZ };

// Emulates axis-aligned depth scans: per camera, rays march along the axis
// and everything beyond the first surface crossing becomes unobserved
// (+truncation). Observed voxels keep their TSDF values verbatim. A voxel is
// observed if any camera sees it. `keep_fraction_bound` rejects degenerate
// scans that observe less than that fraction of the grid.
VoxelGrid simulate_partial_scan(const VoxelGrid& sdf, const std::vector<CameraDir>& cameras,
                                float keep_fraction_bound = 0.0f);

// VGRD binary format, little-endian, bit-exact round trip.
void save_grid(const VoxelGrid& g, const std::string& path);
VoxelGrid load_grid(const std::string& path);

// Writes n shape pairs plus a JSON manifest ([{id, partial_path,
// complete_path, spec, seed}]) into out_dir; fully deterministic in `seed`.
// Returns the manifest path. `fingerprint` is embedded in the manifest when
// non-empty.
std::string make_corpus(std::uint64_t seed, int n, GridDims dims, float truncation, const std::string& out_dir,
                        const std::string& fingerprint = "");

struct CorpusEntry {
  std::string id;
  std::string partial_path;
  std::string complete_path;
  ShapeSpec spec;
  std::uint64_t seed = 0;
};

std::vector<CorpusEntry> load_manifest(const std::string& manifest_path,
                                       const std::string& expect_fingerprint = "", bool force = false);

}  // namespace bridgekit
