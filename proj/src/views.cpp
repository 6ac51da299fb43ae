#include "bridgekit/views.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "bridgekit/errors.hpp"

namespace bridgekit {

std::string view_name(View v) {
  switch (v) {
    case View::Front: return "front";
    case View::Top: return "top";
    case View::Left: return "left";
  }
  return "?";
}

View view_from_name(const std::string& name) {
  if (name == "front") return View::Front;
  if (name == "top") return View::Top;
  if (name == "left") return View::Left;
  throw std::invalid_argument("unknown view '" + name + "'");
}

namespace {

struct ViewFrame {
  int ray_axis;   // axis the rays march along
  bool forward;   // low-to-high coordinate
  int u_axis;     // image x
  int v_axis;     // image y
};

// front: rays along +z, image (x,y); top: rays along -y, image (x,z);
// left: rays along +x, image (z,y).
ViewFrame frame_for(View v) {
  switch (v) {
    case View::Front: return {2, true, 0, 1};
    case View::Top: return {1, false, 0, 2};
    case View::Left: return {0, true, 2, 1};
  }
  throw std::invalid_argument("unknown view");
}

}  // namespace

DepthMap render_depth(const VoxelGrid& g, View view, float iso) {
  if (std::isnan(iso)) iso = (g.kind() == FieldKind::UDF) ? kUdfIsoLevel : 0.0f;
  const ViewFrame f = frame_for(view);
  const int ext[3] = {g.dims().nx, g.dims().ny, g.dims().nz};
  DepthMap map;
  map.view = view;
  map.width = ext[f.u_axis];
  map.height = ext[f.v_axis];
  map.axis_extent = static_cast<float>(ext[f.ray_axis] - 1);
  map.depths.assign(static_cast<std::size_t>(map.width) * map.height,
                    std::numeric_limits<float>::infinity());

  const int steps = ext[f.ray_axis];
  for (int v = 0; v < map.height; ++v) {
    for (int u = 0; u < map.width; ++u) {
      int coord[3];
      coord[f.u_axis] = u;
      coord[f.v_axis] = v;
      float prev = 0.0f;
      for (int s = 0; s < steps; ++s) {
        coord[f.ray_axis] = f.forward ? s : ext[f.ray_axis] - 1 - s;
        const float cur = g.at(coord[0], coord[1], coord[2]);
        if (s == 0) {
          if (cur <= iso) {
            map.depths[static_cast<std::size_t>(v) * map.width + u] = 0.0f;
            break;
          }
        } else if (prev > iso && cur <= iso) {
          const float t = (prev - iso) / (prev - cur);
          map.depths[static_cast<std::size_t>(v) * map.width + u] = static_cast<float>(s - 1) + t;
          break;
        }
        prev = cur;
      }
    }
  }
  return map;
}

ViewFeatures extract_features(const DepthMap& d, const FeatureConfig& cfg) {
  const int p = cfg.patch_size;
  if (p < 1 || d.width % p != 0 || d.height % p != 0)
    throw std::invalid_argument("extract_features: patch size must divide the map dimensions");
  ViewFeatures f;
  f.channels = 5;
  f.w = d.width / p;
  f.h = d.height / p;
  f.values.assign(static_cast<std::size_t>(f.channels) * f.h * f.w, 0.0f);

  const auto depth_at = [&](int x, int y) {
    const float v = d.at(x, y);
    return DepthMap::is_miss(v) ? d.axis_extent : v;
  };

  for (int py = 0; py < f.h; ++py) {
    for (int px = 0; px < f.w; ++px) {
      double sum = 0.0, sum_sq = 0.0;
      int hits = 0;
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          const float v = depth_at(px * p + x, py * p + y);
          sum += v;
          sum_sq += static_cast<double>(v) * v;
          if (!DepthMap::is_miss(d.at(px * p + x, py * p + y))) ++hits;
        }
      }
      const double n = static_cast<double>(p) * p;
      const double mean = sum / n;
      const double var = std::max(0.0, sum_sq / n - mean * mean);

      // mean slope per pixel across the patch, row-wise for x and column-wise for y
      double gx = 0.0, gy = 0.0;
      if (p > 1) {
        for (int y = 0; y < p; ++y)
          gx += (depth_at(px * p + p - 1, py * p + y) - depth_at(px * p, py * p + y)) / (p - 1);
        for (int x = 0; x < p; ++x)
          gy += (depth_at(px * p + x, py * p + p - 1) - depth_at(px * p + x, py * p)) / (p - 1);
        gx /= p;
        gy /= p;
      }

      const std::size_t plane = static_cast<std::size_t>(f.h) * f.w;
      const std::size_t at = static_cast<std::size_t>(py) * f.w + px;
      f.values[0 * plane + at] = static_cast<float>(mean);
      f.values[1 * plane + at] = static_cast<float>(var);
      f.values[2 * plane + at] = static_cast<float>(gx);
      f.values[3 * plane + at] = static_cast<float>(gy);
      f.values[4 * plane + at] = static_cast<float>(hits / n);
    }
  }
  return f;
}

ViewFeatures aggregate_views(const std::vector<ViewFeatures>& fs) {
  if (fs.empty()) throw std::invalid_argument("aggregate_views: need at least one view");
  const ViewFeatures& first = fs[0];
  for (const auto& f : fs) {
    if (f.channels != first.channels || f.h != first.h || f.w != first.w)
      throw std::invalid_argument("aggregate_views: feature shape mismatch");
  }
  ViewFeatures out = first;
  for (std::size_t i = 1; i < fs.size(); ++i)
    for (std::size_t j = 0; j < out.values.size(); ++j) out.values[j] += fs[i].values[j];
  const float inv = 1.0f / static_cast<float>(fs.size());
  for (auto& v : out.values) v *= inv;
  return out;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("VFEA: unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_features(const ViewFeatures& f, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("VFEA: cannot open for write: " + path);
  os.write("VFEA", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(f.channels));
  put_u32(os, static_cast<std::uint32_t>(f.h));
  put_u32(os, static_cast<std::uint32_t>(f.w));
  for (float v : f.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
  }
  if (!os) throw IoError("VFEA: write failed: " + path);
}

ViewFeatures load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("VFEA: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VFEA", 4) != 0) throw IoError("VFEA: bad magic in " + path);
  if (get_u32(is) != 1) throw IoError("VFEA: unsupported version in " + path);
  ViewFeatures f;
  f.channels = static_cast<int>(get_u32(is));
  f.h = static_cast<int>(get_u32(is));
  f.w = static_cast<int>(get_u32(is));
  const std::int64_t n = static_cast<std::int64_t>(f.channels) * f.h * f.w;
  f.values.resize(static_cast<std::size_t>(n));
  for (auto& v : f.values) {
    const std::uint32_t bits = get_u32(is);
    std::memcpy(&v, &bits, 4);
    if (std::isnan(v)) throw IoError("VFEA: NaN in payload of " + path);
  }
  return f;
}

ViewFeatures FileFeatureExtractor::extract(const DepthMap& d) const {
  const auto it = paths_.find(d.view);
  if (it == paths_.end()) throw IoError("FileFeatureExtractor: no feature file for view " + view_name(d.view));
  return load_features(it->second);
}

ViewFeatures render_and_aggregate(const VoxelGrid& g, const std::vector<View>& views,
                                  const ViewFeatureExtractor& extractor) {
  std::vector<ViewFeatures> fs;
  fs.reserve(views.size());
  for (View v : views) fs.push_back(extractor.extract(render_depth(g, v)));
  return aggregate_views(fs);
}

}  // namespace bridgekit
