#include "bridgekit/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "bridgekit/errors.hpp"

namespace bridgekit {

using nlohmann::json;

double l1_error(const VoxelGrid& pred, const VoxelGrid& gt) {
  if (!(pred.dims() == gt.dims())) throw std::invalid_argument("l1_error: dim mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.values().size(); ++i)
    sum += std::fabs(static_cast<double>(pred.values()[i]) - gt.values()[i]);
  return sum / static_cast<double>(pred.values().size());
}

PointGridIndex::PointGridIndex(const std::vector<Eigen::Vector3f>& pts) : pts_(pts) {
  if (pts.empty()) throw std::invalid_argument("PointGridIndex: empty point set");
  Eigen::Vector3f hi = pts[0];
  lo_ = pts[0];
  for (const auto& p : pts) {
    lo_ = lo_.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double diag = (hi - lo_).cast<double>().norm();
  const double target = diag / std::max(1.0, std::cbrt(static_cast<double>(pts.size())));
  cell_ = std::max(target, 1e-9);
  ncx_ = std::max(1, static_cast<int>(std::floor((hi.x() - lo_.x()) / cell_)) + 1);
  ncy_ = std::max(1, static_cast<int>(std::floor((hi.y() - lo_.y()) / cell_)) + 1);
  ncz_ = std::max(1, static_cast<int>(std::floor((hi.z() - lo_.z()) / cell_)) + 1);
  cells_.assign(static_cast<std::size_t>(ncx_) * ncy_ * ncz_, {});
  for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
    const Eigen::Vector3f& p = pts[static_cast<std::size_t>(i)];
    const int cx = std::min(ncx_ - 1, static_cast<int>((p.x() - lo_.x()) / cell_));
    const int cy = std::min(ncy_ - 1, static_cast<int>((p.y() - lo_.y()) / cell_));
    const int cz = std::min(ncz_ - 1, static_cast<int>((p.z() - lo_.z()) / cell_));
    cells_[static_cast<std::size_t>(cell_index(cx, cy, cz))].push_back(i);
  }
}

double PointGridIndex::nearest_dist(const Eigen::Vector3f& q) const {
  const int qx = std::clamp(static_cast<int>(std::floor((q.x() - lo_.x()) / cell_)), 0, ncx_ - 1);
  const int qy = std::clamp(static_cast<int>(std::floor((q.y() - lo_.y()) / cell_)), 0, ncy_ - 1);
  const int qz = std::clamp(static_cast<int>(std::floor((q.z() - lo_.z()) / cell_)), 0, ncz_ - 1);
  const int max_ring = std::max({ncx_, ncy_, ncz_});

  double best_sq = std::numeric_limits<double>::infinity();
  for (int r = 0; r <= max_ring; ++r) {
    // A point in a cell at Chebyshev cell-distance r can be as close as
    // (r-1)*cell, so ring r must still be searched unless the best distance
    // found already undercuts that bound.
    if (r >= 1 && best_sq < std::numeric_limits<double>::infinity()) {
      const double safe = static_cast<double>(r - 1) * cell_;
      if (std::sqrt(best_sq) <= safe) break;
    }
    const int x0 = std::max(0, qx - r), x1 = std::min(ncx_ - 1, qx + r);
    const int y0 = std::max(0, qy - r), y1 = std::min(ncy_ - 1, qy + r);
    const int z0 = std::max(0, qz - r), z1 = std::min(ncz_ - 1, qz + r);
    for (int cz = z0; cz <= z1; ++cz) {
      for (int cy = y0; cy <= y1; ++cy) {
        for (int cx = x0; cx <= x1; ++cx) {
          const int cheb = std::max({std::abs(cx - qx), std::abs(cy - qy), std::abs(cz - qz)});
          if (cheb != r) continue;  // only the new shell
          for (int i : cells_[static_cast<std::size_t>(cell_index(cx, cy, cz))]) {
            const double d2 = (pts_[static_cast<std::size_t>(i)] - q).cast<double>().squaredNorm();
            best_sq = std::min(best_sq, d2);
          }
        }
      }
    }
  }
  return std::sqrt(best_sq);
}

double chamfer_l1(const std::vector<Eigen::Vector3f>& p, const std::vector<Eigen::Vector3f>& q) {
  if (p.empty() || q.empty()) throw std::invalid_argument("chamfer_l1: point sets must be non-empty");
  const PointGridIndex qi(q), pi(p);
  double sum_p = 0.0, sum_q = 0.0;
  for (const auto& x : p) sum_p += qi.nearest_dist(x);
  for (const auto& x : q) sum_q += pi.nearest_dist(x);
  return 0.5 * (sum_p / static_cast<double>(p.size()) + sum_q / static_cast<double>(q.size()));
}

double iou(const VoxelGrid& pred, const VoxelGrid& gt, double tau_occ) {
  if (!(pred.dims() == gt.dims())) throw std::invalid_argument("iou: dim mismatch");
  if (tau_occ <= 0.0) throw std::invalid_argument("iou: tau_occ must be positive");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.values().size(); ++i) {
    const bool a = pred.values()[i] <= tau_occ;
    const bool b = gt.values()[i] <= tau_occ;
    inter += (a && b);
    uni += (a || b);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double f1_at(const std::vector<Eigen::Vector3f>& p, const std::vector<Eigen::Vector3f>& q, double threshold_frac) {
  if (p.empty() || q.empty()) throw std::invalid_argument("f1_at: point sets must be non-empty");
  if (threshold_frac <= 0.0) throw std::invalid_argument("f1_at: threshold_frac must be positive");
  Eigen::Vector3f lo = q[0], hi = q[0];
  for (const auto& x : q) {
    lo = lo.cwiseMin(x);
    hi = hi.cwiseMax(x);
  }
  const double tau = threshold_frac * (hi - lo).cast<double>().norm();
  const PointGridIndex qi(q), pi(p);
  std::int64_t p_hit = 0, q_hit = 0;
  for (const auto& x : p) p_hit += (qi.nearest_dist(x) <= tau);
  for (const auto& x : q) q_hit += (pi.nearest_dist(x) <= tau);
  const double precision = static_cast<double>(p_hit) / static_cast<double>(p.size());
  const double recall = static_cast<double>(q_hit) / static_cast<double>(q.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

ShapeMetrics mean_of(const std::vector<ShapeMetrics>& shapes) {
  ShapeMetrics m;
  m.id = "mean";
  if (shapes.empty()) return m;
  for (const auto& s : shapes) {
    m.l1 += s.l1;
    m.cd += s.cd;
    m.iou += s.iou;
    m.f1 += s.f1;
  }
  const double n = static_cast<double>(shapes.size());
  m.l1 /= n;
  m.cd /= n;
  m.iou /= n;
  m.f1 /= n;
  return m;
}

namespace {

json metrics_to_json(const ShapeMetrics& m, bool with_id) {
  json j;
  if (with_id) j["id"] = m.id;
  j["l1"] = m.l1;
  j["cd"] = m.cd;
  j["iou"] = m.iou;
  j["f1"] = m.f1;
  return j;
}

}  // namespace

void save_report(const EvalReport& report, const std::string& path) {
  json j;
  j["config"] = json::parse(report.config_echo_json.empty() ? "{}" : report.config_echo_json);
  j["config_fingerprint"] = report.config_fingerprint;
  j["shapes"] = json::array();
  for (const auto& s : report.shapes) j["shapes"].push_back(metrics_to_json(s, true));
  j["means"] = metrics_to_json(report.means, false);
  j["baseline"] = json::object();
  j["baseline"]["shapes"] = json::array();
  for (const auto& s : report.baseline_shapes) j["baseline"]["shapes"].push_back(metrics_to_json(s, true));
  j["baseline"]["means"] = metrics_to_json(report.baseline_means, false);
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("report: cannot open for write: " + path);
  os << j.dump(2) << "\n";
  if (!os) throw IoError("report: write failed: " + path);
}

}  // namespace bridgekit
