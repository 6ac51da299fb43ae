#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "bridgekit/voxel_grid.hpp"

namespace bridgekit {

// Mean |pred - gt| over all voxels, in the stored distance units.
double l1_error(const VoxelGrid& pred, const VoxelGrid& gt);

// Exact nearest-neighbor queries via a uniform spatial grid with ring
// expansion; falls back to brute force for tiny sets. Results are exact, not
// approximate, and are regression-tested against brute force.
class PointGridIndex {
 public:
  explicit PointGridIndex(const std::vector<Eigen::Vector3f>& pts);
  double nearest_dist(const Eigen::Vector3f& q) const;

 private:
  const std::vector<Eigen::Vector3f>& pts_;
  Eigen::Vector3f lo_;
  double cell_ = 1.0;
  int ncx_ = 1, ncy_ = 1, ncz_ = 1;
  std::vector<std::vector<int>> cells_;

  int cell_index(int cx, int cy, int cz) const { return (cz * ncy_ + cy) * ncx_ + cx; }
};

// l1 Chamfer distance: 0.5 * [mean_P min_q ||p-q||_2 + mean_Q min_p ||q-p||_2].
// Euclidean per-pair distances, unsquared aggregation.
double chamfer_l1(const std::vector<Eigen::Vector3f>& p, const std::vector<Eigen::Vector3f>& q);

// Occupancy IoU with occupancy := value <= tau_occ. Empty union counts as 1.
double iou(const VoxelGrid& pred, const VoxelGrid& gt, double tau_occ);

// F1 with tau = threshold_frac * bounding-box diagonal of the ground-truth
// set q. precision over p, recall over q.
double f1_at(const std::vector<Eigen::Vector3f>& p, const std::vector<Eigen::Vector3f>& q, double threshold_frac);

struct ShapeMetrics {
  std::string id;
  double l1 = 0.0;
  double cd = 0.0;
  double iou = 0.0;
  double f1 = 0.0;
};

struct EvalReport {
  std::vector<ShapeMetrics> shapes;
  ShapeMetrics means;                 // id "mean"
  std::vector<ShapeMetrics> baseline_shapes;  // copy-partial baseline
  ShapeMetrics baseline_means;
  std::string config_fingerprint;
  std::string config_echo_json;  // canonicalized metric/sampler settings
};

ShapeMetrics mean_of(const std::vector<ShapeMetrics>& shapes);

void save_report(const EvalReport& report, const std::string& path);

}  // namespace bridgekit
