#pragma once

#include <Eigen/Core>

#include <array>
#include <string>
#include <vector>

#include "bridgekit/rng.hpp"
#include "bridgekit/voxel_grid.hpp"

namespace bridgekit {

// Indexed triangle mesh in voxel coordinates. Duplicate vertices across cube
// cells are permitted; positions on shared cell edges are bit-identical by
// construction. Degenerate (zero-area) triangles are never emitted.
struct TriMesh {
  std::vector<Eigen::Vector3f> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<float> areas;  // per-triangle cache, filled by finalize()

  void finalize();
  double total_area() const;
  bool empty() const { return triangles.empty(); }
};

// Classic 256-case marching cubes over the level set {value == iso} with
// linear interpolation along crossing edges. A grid with no crossings yields
// an empty mesh.
TriMesh marching_cubes(const VoxelGrid& g, float iso);

// Default meshing level for UDF grids (no zero crossing to extract).
constexpr float kUdfMeshIso = 1.0f;

// n points drawn area-uniformly: triangle index proportional to area,
// uniform barycentric coordinates within each triangle.
std::vector<Eigen::Vector3f> sample_surface(const TriMesh& m, int n, Rng& rng);

// Wavefront OBJ: "v x y z" and 1-based "f i j k" lines, LF endings.
void save_obj(const TriMesh& m, const std::string& path);

}  // namespace bridgekit
