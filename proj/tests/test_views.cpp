#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "bridgekit/errors.hpp"
#include "bridgekit/views.hpp"

using namespace bridgekit;

namespace {

VoxelGrid centered_sphere_sdf(int dim, float radius, float trunc = 3.0f) {
  ShapeSpec spec;
  const float c = static_cast<float>(dim) / 2.0f;
  spec.primitives.push_back(Sphere{{c, c, c}, radius});
  return sdf_from_spec(spec, {dim, dim, dim}, trunc);
}

}  // namespace

TEST_CASE("depth of a centered sphere matches the analytic ray-sphere intersection") {
  const VoxelGrid g = centered_sphere_sdf(16, 4.0f);
  const DepthMap d = render_depth(g, View::Front);
  CHECK(d.width == 16);
  CHECK(d.height == 16);
  // center pixel: the ray enters at z=0 and hits the sphere at z = 8 - 4 = 4
  CHECK(std::fabs(d.at(8, 8) - 4.0f) <= 0.5f);
  // a pixel far outside the silhouette misses
  CHECK(DepthMap::is_miss(d.at(0, 0)));
  // hits are bounded by the axis extent
  for (int v = 0; v < 16; ++v)
    for (int u = 0; u < 16; ++u)
      if (!DepthMap::is_miss(d.at(u, v))) {
        CHECK(d.at(u, v) >= 0.0f);
        CHECK(d.at(u, v) <= d.axis_extent);
      }
}

TEST_CASE("empty grid renders an all-miss map") {
  std::vector<float> free_space(16 * 16 * 16, 3.0f);
  const VoxelGrid g({16, 16, 16}, 1.0f, 3.0f, FieldKind::SDF, free_space);
  const DepthMap d = render_depth(g, View::Top);
  for (float v : d.depths) CHECK(DepthMap::is_miss(v));
}

TEST_CASE("front and left views of a centered sphere agree by symmetry") {
  const VoxelGrid g = centered_sphere_sdf(16, 4.5f);
  const DepthMap front = render_depth(g, View::Front);  // image (x,y), rays +z
  const DepthMap left = render_depth(g, View::Left);    // image (z,y), rays +x
  REQUIRE(front.width == left.width);
  REQUIRE(front.height == left.height);
  for (std::size_t i = 0; i < front.depths.size(); ++i) {
    if (DepthMap::is_miss(front.depths[i]))
      CHECK(DepthMap::is_miss(left.depths[i]));
    else
      CHECK(front.depths[i] == doctest::Approx(left.depths[i]).epsilon(1e-6));
  }
}

TEST_CASE("SDF and its TUDF image render identically when iso levels match") {
  const VoxelGrid sdf = centered_sphere_sdf(16, 4.0f);
  const VoxelGrid udf = to_tudf(sdf);
  const DepthMap a = render_depth(sdf, View::Front, 1.0f);
  const DepthMap b = render_depth(udf, View::Front, 1.0f);
  for (std::size_t i = 0; i < a.depths.size(); ++i) {
    if (DepthMap::is_miss(a.depths[i]))
      CHECK(DepthMap::is_miss(b.depths[i]));
    else
      CHECK(a.depths[i] == b.depths[i]);
  }
}

TEST_CASE("feature extraction: constant map, determinism, per-patch mean oracle") {
  DepthMap d;
  d.view = View::Front;
  d.width = 8;
  d.height = 8;
  d.axis_extent = 15.0f;
  d.depths.assign(64, 5.0f);

  SUBCASE("constant depth has zero gradients and unit hit fraction") {
    const ViewFeatures f = extract_features(d, {4});
    REQUIRE(f.channels == 5);
    REQUIRE(f.h == 2);
    REQUIRE(f.w == 2);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        CHECK(f.at(0, y, x) == 5.0f);   // mean
        CHECK(f.at(1, y, x) == 0.0f);   // variance
        CHECK(f.at(2, y, x) == 0.0f);   // x gradient
        CHECK(f.at(3, y, x) == 0.0f);   // y gradient
        CHECK(f.at(4, y, x) == 1.0f);   // hit fraction
      }
  }

  SUBCASE("identical inputs give identical outputs") {
    Rng rng(5);
    for (auto& v : d.depths) v = static_cast<float>(rng.uniform(0.0, 15.0));
    d.depths[3] = std::numeric_limits<float>::infinity();
    const ViewFeatures f1 = extract_features(d, {4});
    const ViewFeatures f2 = extract_features(d, {4});
    CHECK(f1.values == f2.values);
  }

  SUBCASE("mean channel equals a brute-force per-patch average") {
    Rng rng(6);
    for (auto& v : d.depths) v = static_cast<float>(rng.uniform(0.0, 15.0));
    d.depths[10] = std::numeric_limits<float>::infinity();  // one miss
    const ViewFeatures f = extract_features(d, {4});
    for (int py = 0; py < 2; ++py)
      for (int px = 0; px < 2; ++px) {
        double sum = 0.0;
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 4; ++x) {
            const float v = d.at(px * 4 + x, py * 4 + y);
            sum += DepthMap::is_miss(v) ? d.axis_extent : v;
          }
        CHECK(f.at(0, py, px) == doctest::Approx(sum / 16.0));
      }
  }

  SUBCASE("misses are finite after replacement, never NaN") {
    d.depths.assign(64, std::numeric_limits<float>::infinity());
    const ViewFeatures f = extract_features(d, {4});
    for (float v : f.values) CHECK(std::isfinite(v));
    CHECK(f.at(0, 0, 0) == d.axis_extent);
    CHECK(f.at(4, 0, 0) == 0.0f);  // hit fraction
  }

  SUBCASE("patch size must divide the map") {
    CHECK_THROWS_AS(extract_features(d, {3}), std::invalid_argument);
  }
}

TEST_CASE("view aggregation is the element-wise mean and permutation invariant") {
  ViewFeatures a, b, c;
  for (auto* f : {&a, &b, &c}) {
    f->channels = 2;
    f->h = 2;
    f->w = 2;
    f->values.assign(8, 0.0f);
  }
  Rng rng(8);
  for (auto* f : {&a, &b, &c})
    for (auto& v : f->values) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  SUBCASE("identical maps aggregate to themselves") {
    const ViewFeatures out = aggregate_views({a, a, a});
    for (std::size_t i = 0; i < 8; ++i) CHECK(out.values[i] == doctest::Approx(a.values[i]));
  }
  SUBCASE("two maps give (a+b)/2") {
    const ViewFeatures out = aggregate_views({a, b});
    for (std::size_t i = 0; i < 8; ++i) CHECK(out.values[i] == doctest::Approx((a.values[i] + b.values[i]) / 2));
  }
  SUBCASE("three canonical views vs an explicit sum/3 oracle") {
    const ViewFeatures out = aggregate_views({a, b, c});
    for (std::size_t i = 0; i < 8; ++i)
      CHECK(out.values[i] == doctest::Approx((a.values[i] + b.values[i] + c.values[i]) / 3.0));
  }
  SUBCASE("permutation invariance") {
    const ViewFeatures o1 = aggregate_views({a, b, c});
    const ViewFeatures o2 = aggregate_views({c, a, b});
    for (std::size_t i = 0; i < 8; ++i) CHECK(o1.values[i] == doctest::Approx(o2.values[i]));
  }
  SUBCASE("shape mismatch is an error") {
    ViewFeatures bad = a;
    bad.w = 1;
    bad.values.resize(4);
    CHECK_THROWS_AS(aggregate_views({a, bad}), std::invalid_argument);
  }
  SUBCASE("empty list is an error") {
    CHECK_THROWS_AS(aggregate_views({}), std::invalid_argument);
  }
}

TEST_CASE("VFEA round-trip and the file-backed extractor") {
  ViewFeatures f;
  f.channels = 3;
  f.h = 2;
  f.w = 4;
  Rng rng(9);
  f.values.resize(24);
  for (auto& v : f.values) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  save_features(f, "test_views.vfea");
  const ViewFeatures g = load_features("test_views.vfea");
  CHECK(g.channels == 3);
  CHECK(g.h == 2);
  CHECK(g.w == 4);
  CHECK(g.values == f.values);

  FileFeatureExtractor extractor({{View::Front, "test_views.vfea"}});
  DepthMap d;
  d.view = View::Front;
  const ViewFeatures h = extractor.extract(d);
  CHECK(h.values == f.values);
  DepthMap top;
  top.view = View::Top;
  CHECK_THROWS_AS(extractor.extract(top), IoError);
  CHECK_THROWS_AS(load_features("missing.vfea"), IoError);
  std::remove("test_views.vfea");
}

TEST_CASE("the built-in extractor plugs into render_and_aggregate") {
  const VoxelGrid g = to_tudf(centered_sphere_sdf(16, 4.0f));
  PatchDescriptorExtractor extractor({4});
  const ViewFeatures f = render_and_aggregate(g, {View::Front, View::Top, View::Left}, extractor);
  CHECK(f.channels == 5);
  CHECK(f.h == 4);
  CHECK(f.w == 4);
  for (float v : f.values) CHECK(std::isfinite(v));
}
