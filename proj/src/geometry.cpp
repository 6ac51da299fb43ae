#include "bridgekit/geometry.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "bridgekit/errors.hpp"
#include "mc_tables.hpp"

namespace bridgekit {

void TriMesh::finalize() {
  areas.resize(triangles.size());
  for (std::size_t i = 0; i < triangles.size(); ++i) {
    const auto& t = triangles[i];
    const Eigen::Vector3f a = vertices[static_cast<std::size_t>(t[0])];
    const Eigen::Vector3f b = vertices[static_cast<std::size_t>(t[1])];
    const Eigen::Vector3f c = vertices[static_cast<std::size_t>(t[2])];
    areas[i] = 0.5f * (b - a).cross(c - a).norm();
  }
}

double TriMesh::total_area() const {
  double sum = 0.0;
  for (float a : areas) sum += a;
  return sum;
}

namespace {

// Corner layout matching the lookup tables: ring 0-1-2-3 in the z plane
// ((x+1,y+1), (x+1,y), (x,y), (x,y+1)), ring 4-5-6-7 directly above at z+1.
constexpr int kCornerOffset[8][3] = {
    {1, 1, 0}, {1, 0, 0}, {0, 0, 0}, {0, 1, 0}, {1, 1, 1}, {1, 0, 1}, {0, 0, 1}, {0, 1, 1},
};

constexpr int kEdgeCorners[12][2] = {
    {0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7},
};

// Interpolates the iso crossing on a lattice edge. Endpoints are put in a
// canonical order first so the two cells sharing the edge produce
// bit-identical vertex positions.
Eigen::Vector3f interp_edge(Eigen::Vector3f pa, float va, Eigen::Vector3f pb, float vb, float iso) {
  const bool swap = (pa.z() > pb.z()) || (pa.z() == pb.z() && (pa.y() > pb.y() || (pa.y() == pb.y() && pa.x() > pb.x())));
  if (swap) {
    std::swap(pa, pb);
    std::swap(va, vb);
  }
  if (std::fabs(va - vb) < 1e-12f) return pa;
  float mu = (iso - va) / (vb - va);
  mu = std::clamp(mu, 0.0f, 1.0f);
  return pa + mu * (pb - pa);
}

}  // namespace

TriMesh marching_cubes(const VoxelGrid& g, float iso) {
  const GridDims d = g.dims();
  if (d.nx < 2 || d.ny < 2 || d.nz < 2) throw std::invalid_argument("marching_cubes: grid dims must be >= 2");
  if (g.kind() == FieldKind::UDF && iso <= 0.0f)
    throw std::invalid_argument("marching_cubes: UDF iso level must be positive");

  TriMesh mesh;
  Eigen::Vector3f edge_points[12];
  for (int z = 0; z + 1 < d.nz; ++z) {
    for (int y = 0; y + 1 < d.ny; ++y) {
      for (int x = 0; x + 1 < d.nx; ++x) {
        float corner_val[8];
        Eigen::Vector3f corner_pos[8];
        int cube_index = 0;
        for (int c = 0; c < 8; ++c) {
          const int cx = x + kCornerOffset[c][0];
          const int cy = y + kCornerOffset[c][1];
          const int cz = z + kCornerOffset[c][2];
          corner_val[c] = g.at(cx, cy, cz);
          // lattice values exactly on the level set collapse edge
          // interpolations onto shared corners and break edge parity; nudge
          // them off the surface (shifts vertices by ~1e-5 voxel)
          if (corner_val[c] == iso) corner_val[c] = iso + 1e-5f;
          corner_pos[c] = Eigen::Vector3f(static_cast<float>(cx), static_cast<float>(cy), static_cast<float>(cz));
          if (corner_val[c] > iso) cube_index |= (1 << c);
        }
        if (cube_index == 0 || cube_index == 255) continue;

        const int edges = mc::kEdgeTable[cube_index];
        for (int e = 0; e < 12; ++e) {
          if (edges & (1 << e)) {
            const int a = kEdgeCorners[e][0], b = kEdgeCorners[e][1];
            edge_points[e] = interp_edge(corner_pos[a], corner_val[a], corner_pos[b], corner_val[b], iso);
          }
        }

        for (int i = 0; mc::kTriTable[cube_index][i] != -1; i += 3) {
          const Eigen::Vector3f& p0 = edge_points[mc::kTriTable[cube_index][i]];
          const Eigen::Vector3f& p1 = edge_points[mc::kTriTable[cube_index][i + 1]];
          const Eigen::Vector3f& p2 = edge_points[mc::kTriTable[cube_index][i + 2]];
          if (0.5f * (p1 - p0).cross(p2 - p0).norm() < 1e-12f) continue;  // degenerate
          const int base = static_cast<int>(mesh.vertices.size());
          mesh.vertices.push_back(p0);
          mesh.vertices.push_back(p1);
          mesh.vertices.push_back(p2);
          mesh.triangles.push_back({base, base + 1, base + 2});
        }
      }
    }
  }
  mesh.finalize();
  return mesh;
}

std::vector<Eigen::Vector3f> sample_surface(const TriMesh& m, int n, Rng& rng) {
  if (m.empty()) throw std::invalid_argument("sample_surface: mesh is empty");
  if (n < 1) throw std::invalid_argument("sample_surface: n must be >= 1");
  std::vector<double> cumulative(m.triangles.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < m.triangles.size(); ++i) {
    acc += m.areas[i];
    cumulative[i] = acc;
  }
  if (acc <= 0.0) throw std::invalid_argument("sample_surface: mesh has zero total area");

  std::vector<Eigen::Vector3f> points;
  points.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double r = rng.uniform() * acc;
    const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), r);
    const std::size_t tri = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
        it - cumulative.begin(), static_cast<std::ptrdiff_t>(m.triangles.size()) - 1));
    const auto& t = m.triangles[tri];
    const Eigen::Vector3f a = m.vertices[static_cast<std::size_t>(t[0])];
    const Eigen::Vector3f b = m.vertices[static_cast<std::size_t>(t[1])];
    const Eigen::Vector3f c = m.vertices[static_cast<std::size_t>(t[2])];
    float u = static_cast<float>(rng.uniform());
    float v = static_cast<float>(rng.uniform());
    if (u + v > 1.0f) {
      u = 1.0f - u;
      v = 1.0f - v;
    }
    points.push_back(a + u * (b - a) + v * (c - a));
  }
  return points;
}

void save_obj(const TriMesh& m, const std::string& path) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);  // binary: LF endings everywhere
  if (!os) throw IoError("OBJ: cannot open for write: " + path);
  char buf[128];
  for (const auto& v : m.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.6f %.6f %.6f\n", v.x(), v.y(), v.z());
    os << buf;
  }
  for (const auto& t : m.triangles) {
    std::snprintf(buf, sizeof(buf), "f %d %d %d\n", t[0] + 1, t[1] + 1, t[2] + 1);
    os << buf;
  }
  if (!os) throw IoError("OBJ: write failed: " + path);
}

}  // namespace bridgekit
