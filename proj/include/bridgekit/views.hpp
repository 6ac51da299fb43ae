#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

#include "bridgekit/voxel_grid.hpp"

namespace bridgekit {

enum class View { Front, Top, Left };

std::string view_name(View v);
View view_from_name(const std::string& name);

// Orthographic depth image: per-pixel distance (voxel units) from the entry
// face to the first crossing of the iso level. Misses are +infinity.
struct DepthMap {
  View view = View::Front;
  int width = 0;
  int height = 0;
  std::vector<float> depths;
  float axis_extent = 0.0f;  // max representable depth along the view axis

  float at(int u, int v) const { return depths[static_cast<std::size_t>(v) * width + u]; }
  static bool is_miss(float d) { return !(d < std::numeric_limits<float>::infinity()); }
};

// Dense per-patch descriptor map, channels-major (C_f, h, w).
struct ViewFeatures {
  int channels = 0;
  int h = 0;
  int w = 0;
  std::vector<float> values;

  float at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * h + y) * w + x];
  }
};

// Default iso level: 0 for SDF (zero crossing), 1 voxel for UDF, which has no
// zero crossing to march to.
constexpr float kUdfIsoLevel = 1.0f;

// Rays march along the view axis; the first downward crossing of `iso` is
// linearly interpolated. Pass iso=NaN to use the kind-specific default.
DepthMap render_depth(const VoxelGrid& g, View view,
                      float iso = std::numeric_limits<float>::quiet_NaN());

struct FeatureConfig {
  int patch_size = 4;
};

// Deterministic 5-channel stand-in for a pretrained 2D backbone: per patch
// {mean depth, depth variance, x gradient, y gradient, hit fraction}.
// Misses are mapped to the full axis extent first.
ViewFeatures extract_features(const DepthMap& d, const FeatureConfig& cfg = {});

// Eq.-style element-wise mean over views; all inputs must agree in shape.
ViewFeatures aggregate_views(const std::vector<ViewFeatures>& fs);

// VFEA binary format: "VFEA", version u32=1, C_f,h,w u32, f32 payload.
void save_features(const ViewFeatures& f, const std::string& path);
ViewFeatures load_features(const std::string& path);

// Pluggable extractor so precomputed feature maps can replace the built-in
// descriptor without touching the fusion plumbing.
class ViewFeatureExtractor {
 public:
  virtual ~ViewFeatureExtractor() = default;
  virtual ViewFeatures extract(const DepthMap& d) const = 0;
};

class PatchDescriptorExtractor final : public ViewFeatureExtractor {
 public:
  explicit PatchDescriptorExtractor(FeatureConfig cfg = {}) : cfg_(cfg) {}
  ViewFeatures extract(const DepthMap& d) const override { return extract_features(d, cfg_); }

 private:
  FeatureConfig cfg_;
};

class FileFeatureExtractor final : public ViewFeatureExtractor {
 public:
  explicit FileFeatureExtractor(std::map<View, std::string> paths) : paths_(std::move(paths)) {}
  ViewFeatures extract(const DepthMap& d) const override;

 private:
  std::map<View, std::string> paths_;
};

// Convenience: renders the requested views of a grid and returns the
// aggregated feature map produced by `extractor`.
ViewFeatures render_and_aggregate(const VoxelGrid& g, const std::vector<View>& views,
                                  const ViewFeatureExtractor& extractor);

}  // namespace bridgekit
