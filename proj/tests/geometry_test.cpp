#include "pktrack/geometry.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace pktrack {
namespace {

constexpr double kPi = std::numbers::pi;

// f = 1 camera at the origin looking down +z whose image is a 1x1 square of
// image-plane units sampled at `pixels` per side.
CameraModel unit_camera(int pixels) {
  return CameraModel(Mat3::Identity(), Vec3::Zero(), 1.0, pixels, pixels, pixels);
}

// Half extents of a centered ellipse A u^2 + B uv + C v^2 = 1.
std::vector<CameraModel> four_cameras() {
  std::vector<CameraModel> cams;
  for (int k = 0; k < 4; ++k) {
    const double a = kPi / 4.0 + k * kPi / 2.0;
    cams.push_back(CameraModel::look_at(Vec3(11.0 * std::cos(a), 11.0 * std::sin(a), 4.0),
                                        Vec3(0.0, 0.0, 1.0), 500.0, 640, 480));
  }
  return cams;
}

std::vector<AreaObservation> exact_areas(const std::vector<CameraModel>& cams, const Vec3& p,
                                         double r) {
  std::vector<AreaObservation> obs;
  for (std::size_t i = 0; i < cams.size(); ++i)
    obs.push_back({i, projected_area_analytic(SphereTarget(p, r), cams[i])});
  return obs;
}

TEST(WorldToCamera, IdentityAndTranslation) {
  const CameraModel id(Mat3::Identity(), Vec3::Zero(), 1.0, 10, 10);
  EXPECT_TRUE(world_to_camera(Vec3(1, 2, 3), id).isApprox(Vec3(1, 2, 3)));
  const CameraModel shifted(Mat3::Identity(), Vec3(1, 0, 0), 1.0, 10, 10);
  EXPECT_TRUE(world_to_camera(Vec3(1, 0, 5), shifted).isApprox(Vec3(0, 0, 5)));
}

TEST(WorldToCamera, RotationMatchesExplicitProduct) {
  Mat3 rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const CameraModel cam(rz, Vec3::Zero(), 1.0, 10, 10);
  const double p[3] = {1.0, 0.0, 0.0};
  double expect[3] = {0, 0, 0};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) expect[i] += rz(j, i) * p[j];  // R^T p
  const Vec3 got = world_to_camera(Vec3(1, 0, 0), cam);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(got[i], expect[i]);
  EXPECT_NEAR(got.y(), -1.0, 1e-15);
}

TEST(CameraModel, RejectsNonOrthonormalRotation) {
  Mat3 bad = Mat3::Identity();
  bad(0, 1) = 1e-6;
  EXPECT_THROW(CameraModel(bad, Vec3::Zero(), 1.0, 10, 10), InvalidConfig);
  Mat3 mirror = Mat3::Identity();
  mirror(2, 2) = -1.0;
  EXPECT_THROW(CameraModel(mirror, Vec3::Zero(), 1.0, 10, 10), InvalidConfig);
  EXPECT_THROW(CameraModel(Mat3::Identity(), Vec3::Zero(), 0.0, 10, 10), InvalidConfig);
}

TEST(CameraModel, YawPitchRollIsOrthonormalAndPointsForward) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ang(-80.0, 80.0);
  for (int i = 0; i < 200; ++i) {
    const auto cam = CameraModel::from_ypr(Vec3(1, 2, 3), ang(rng) * 2, ang(rng), ang(rng), 400, 640, 480);
    const Mat3& r = cam.rotation();
    EXPECT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  }
  // Facing +x from the origin, a point ahead projects onto the optical axis and
  // a point to the left (+y) lands at negative u.
  const auto cam = CameraModel::from_ypr(Vec3::Zero(), 0, 0, 0, 1, 10, 10);
  EXPECT_TRUE(world_to_camera(Vec3(5, 0, 0), cam).isApprox(Vec3(0, 0, 5)));
  EXPECT_LT(world_to_camera(Vec3(5, 1, 0), cam).x(), 0.0);
  EXPECT_LT(world_to_camera(Vec3(5, 0, 1), cam).y(), 0.0);  // up is -v
}

TEST(SilhouetteEllipse, OnAxisCenter) {
  const auto e = silhouette_ellipse(Vec3(0, 0, 3), 1.0, 1.0);
  EXPECT_NEAR(e.center_u, 0.0, 1e-15);
  EXPECT_NEAR(e.center_v, 0.0, 1e-15);
}

TEST(SilhouetteEllipse, OffAxisCenterMatchesDirectFormula) {
  const auto e = silhouette_ellipse(Vec3(2, 0, 3), 1.0, 1.0);
  EXPECT_NEAR(e.center_u, 0.75, 1e-12);
  EXPECT_NEAR(e.center_v, 0.0, 1e-12);
}

TEST(SilhouetteEllipse, CenterMatchesRasterCentroid) {
  const auto cam = unit_camera(512);
  const SphereTarget s(Vec3(1, 1, 5), 0.5);
  const auto e = silhouette_ellipse(Vec3(1, 1, 5), 0.5, 1.0);
  const auto stats = rasterize_silhouette(s, cam, 512);
  const double px = 1.0 / 512.0;
  EXPECT_NEAR(stats.centroid_u, e.center_u, 0.5 * px);
  EXPECT_NEAR(stats.centroid_v, e.center_v, 0.5 * px);
}

TEST(SilhouetteEllipse, AreaAgreesWithClosedFormOnRandomConfigs) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const double z = 2.0 + 10.0 * std::abs(u(rng));
    const Vec3 p(u(rng) * z, u(rng) * z, z);
    const double r = 0.1 + 0.8 * std::abs(u(rng));
    const double f = 0.5 + std::abs(u(rng));
    const auto e = silhouette_ellipse(p, r, f);
    const double closed = projected_area_camera(p, r, f);
    EXPECT_NEAR(e.area, closed, 1e-9 * closed);
    EXPECT_GT(4 * e.quad_A * e.quad_C - e.quad_B * e.quad_B, 0.0);
  }
}

TEST(SilhouetteEllipse, DegenerateWhenTooClose) {
  EXPECT_THROW(silhouette_ellipse(Vec3(0, 0, 1), 1.0, 1.0), DegenerateView);
  EXPECT_THROW(silhouette_ellipse(Vec3(0, 0, -4), 1.0, 1.0), DegenerateView);
  const auto cam = unit_camera(16);
  EXPECT_THROW(projected_area_analytic(SphereTarget(Vec3(0, 0, 0.5), 1.0), cam), DegenerateView);
}

TEST(ProjectedArea, OnAxisClosedForm) {
  EXPECT_NEAR(projected_area_camera(Vec3(0, 0, 3), 1.0, 1.0), kPi / 8.0, 1e-15);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  for (int i = 0; i < 200; ++i) {
    const double r = u(rng), f = u(rng), z = r * (1.01 + u(rng));
    const double expect = kPi * r * r * f * f / (z * z - r * r);
    EXPECT_NEAR(projected_area_camera(Vec3(0, 0, z), r, f), expect, 1e-12 * expect);
  }
}

TEST(ProjectedArea, FarFieldDecay) {
  const double a = projected_area_camera(Vec3(0, 0, 1000), 1.0, 1.0);
  EXPECT_LT(a, 1e-5);
  EXPECT_NEAR(a, kPi * 1e-6, 1e-9);
}

TEST(ProjectedArea, StrictlyDecreasingBeyondRootTwoRadius) {
  const double r = 0.7;
  double prev = projected_area_camera(Vec3(0, 0, r * std::sqrt(2.0) + 1e-6), r, 2.0);
  for (double z = r * std::sqrt(2.0) + 0.01; z < 200.0; z *= 1.05) {
    const double a = projected_area_camera(Vec3(0, 0, z), r, 2.0);
    EXPECT_LT(a, prev);
    prev = a;
  }
}

TEST(ProjectedArea, GradientMatchesFiniteDifferences) {
  const Vec3 p(0.7, -0.4, 4.0);
  const Vec3 g = projected_area_gradient_camera(p, 0.8, 1.3);
  for (int k = 0; k < 3; ++k) {
    Vec3 hp = p, hm = p;
    hp[k] += 1e-6;
    hm[k] -= 1e-6;
    const double fd =
        (projected_area_camera(hp, 0.8, 1.3) - projected_area_camera(hm, 0.8, 1.3)) / 2e-6;
    EXPECT_NEAR(g[k], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Rasterizer, OffAxisAgreesWithAnalyticAt512) {
  const auto cam = unit_camera(512);
  const SphereTarget s(Vec3(1, 1, 5), 0.5);
  const double analytic = projected_area_analytic(s, cam);
  const double raster = projected_area_rasterized(s, cam, 512);
  EXPECT_NEAR(raster, analytic, 0.01 * analytic);
}

TEST(Rasterizer, OnAxisConvergesAt1024) {
  const auto cam = unit_camera(1024);
  const double raster = projected_area_rasterized(SphereTarget(Vec3(0, 0, 3), 1.0), cam, 1024);
  EXPECT_NEAR(raster, kPi / 8.0, 0.005 * kPi / 8.0);
}

TEST(Rasterizer, OutOfFrameIsEmptyAndClippingShrinksArea) {
  const auto cam = unit_camera(256);
  EXPECT_EQ(projected_area_rasterized(SphereTarget(Vec3(20, 0, 5), 0.5), cam, 256), 0.0);
  // Ellipse center right on the image edge: roughly half the silhouette survives.
  const Vec3 p(2.5, 0.0, 5.0);  // u_o ~= 0.5
  const SphereTarget s(p, 0.5);
  const double analytic = projected_area_analytic(s, cam);
  const double raster = projected_area_rasterized(s, cam, 256);
  EXPECT_LT(raster, analytic);
  EXPECT_GT(raster, 0.3 * analytic);
}

TEST(Rasterizer, SpansMatchBruteForceMask) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto cam = CameraModel::look_at(Vec3(0, -10, 3), Vec3(0, 0, 1), 300, 160, 120);
  for (int i = 0; i < 200; ++i) {
    const SphereTarget s(Vec3(6 * u(rng), 6 * u(rng), 1.0), 0.5 + 0.5 * std::abs(u(rng)));
    if (!(world_to_camera(s.center, cam).z() > s.radius)) continue;
    const auto brute = rasterize_silhouette(s, cam, 160);
    const auto spans = silhouette_spans(s, cam, 160);
    EXPECT_LE(std::llabs(brute.count - spans.count()), 2) << "config " << i;
    if (brute.count > 50) {
      const auto c = span_centroid(spans, cam, 160);
      ASSERT_TRUE(c.has_value());
      EXPECT_NEAR(c->x(), brute.centroid_u, 0.05);
      EXPECT_NEAR(c->y(), brute.centroid_v, 0.05);
    }
  }
}

TEST(Rasterizer, XorAreaOfIdenticalMasksIsZero) {
  const auto cam = unit_camera(128);
  const auto a = silhouette_spans(SphereTarget(Vec3(0.2, 0.1, 4), 0.6), cam, 128);
  EXPECT_EQ(span_xor_area(a, a), 0.0);
  const auto b = silhouette_spans(SphereTarget(Vec3(0.3, 0.1, 4), 0.6), cam, 128);
  EXPECT_GT(span_xor_area(a, b), 0.0);
  EXPECT_LE(span_xor_area(a, b), a.area() + b.area());
}

TEST(Visibility, BehindAndInFront) {
  const auto cam = unit_camera(64);
  EXPECT_FALSE(is_visible(SphereTarget(Vec3(0, 0, -5), 1.0), cam));
  EXPECT_TRUE(is_visible(SphereTarget(Vec3(0, 0, 5), 1.0), cam));
}

TEST(Visibility, PartialSilhouetteWithCenterOutsideIsNotVisible) {
  const auto cam = unit_camera(256);
  const SphereTarget s(Vec3(2.8, 0.0, 5.0), 0.5);  // u_o ~= 0.56 > 0.5
  EXPECT_FALSE(is_visible(s, cam));
  EXPECT_GT(projected_area_rasterized(s, cam, 256), 0.0);
}

TEST(Visibility, DiscrepancyRateAgainstRasterizerIsSmall) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto cam = CameraModel::look_at(Vec3(0, -10, 4), Vec3(0, 0, 1), 400, 320, 240);
  int disagree = 0, total = 0;
  for (int i = 0; i < 2000; ++i) {
    const SphereTarget s(Vec3(10 * u(rng), 10 * u(rng), 1.0), 1.0);
    if (!(world_to_camera(s.center, cam).z() > s.radius)) continue;
    const bool center = is_visible(s, cam);
    const bool any_pixel = rasterize_silhouette(s, cam, 320).count > 0;
    disagree += center != any_pixel;
    ++total;
  }
  const double rate = static_cast<double>(disagree) / total;
  RecordProperty("visibility_discrepancy_rate", std::to_string(rate));
  std::printf("center-vs-raster visibility discrepancy: %.4f over %d scenes\n", rate, total);
  EXPECT_LT(rate, 0.15);
}

TEST(Localize, ExactAreasRecoverPoint) {
  const auto cams = four_cameras();
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    const Vec3 truth(u(rng), u(rng), 1.0);
    const auto obs = exact_areas(cams, truth, 1.0);
    LocalizeOptions opt;
    opt.restart_region = Rect{-3, 3, -3, 3};
    const auto res = localize_from_areas(obs, cams, 1.0, 1.0, Vec3(0, 0, 1), opt);
    EXPECT_LT((res.position - truth).norm(), 1e-3);
  }
}

TEST(Localize, FixedPointWithExactInit) {
  const auto cams = four_cameras();
  const Vec3 truth(1.3, -0.7, 1.0);
  const auto obs = exact_areas(cams, truth, 1.0);
  const auto res = localize_from_areas(obs, cams, 1.0, 1.0, truth);
  EXPECT_LT(res.residual_norm, 1e-10);
  EXPECT_LT((res.position - truth).norm(), 1e-12);
}

TEST(Localize, RestartInvariance) {
  const auto cams = four_cameras();
  const std::vector<CameraModel> three(cams.begin(), cams.begin() + 3);
  const Vec3 truth(-1.1, 2.0, 1.0);
  for (const auto* set : {&cams, &three}) {
    const auto obs = exact_areas(*set, truth, 1.0);
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int i = 0; i < 30; ++i) {
      LocalizeOptions opt;
      opt.restart_region = Rect{-3, 3, -3, 3};
      const auto res = localize_from_areas(obs, *set, 1.0, 1.0, Vec3(u(rng), u(rng), 1.0), opt);
      EXPECT_LT((res.position - truth).norm(), 1e-3);
    }
  }
}

TEST(Localize, IdenticalCamerasAreDegenerate) {
  const auto cams = four_cameras();
  const std::vector<CameraModel> twins{cams[0], cams[0]};
  const auto obs = exact_areas(twins, Vec3(0.5, 0.5, 1.0), 1.0);
  LocalizeOptions opt;
  opt.restart_region = Rect{-3, 3, -3, 3};
  EXPECT_THROW(localize_from_areas(obs, twins, 1.0, 1.0, Vec3(0, 0, 1), opt), DegenerateGeometry);
}

TEST(Localize, NoisyAreasStayNearTruth) {
  const auto cams = four_cameras();
  std::mt19937_64 rng(37);
  std::normal_distribution<double> noise(0.0, 0.03);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::vector<double> errs;
  for (int i = 0; i < 100; ++i) {
    const Vec3 truth(u(rng), u(rng), 1.0);
    auto obs = exact_areas(cams, truth, 1.0);
    for (auto& o : obs) o.area *= 1.0 + noise(rng);
    LocalizeOptions opt;
    opt.restart_region = Rect{-3, 3, -3, 3};
    errs.push_back((localize_from_areas(obs, cams, 1.0, 1.0, Vec3(0, 0, 1), opt).position - truth).norm());
  }
  std::sort(errs.begin(), errs.end());
  EXPECT_LT(errs[errs.size() / 2], 0.5);
}

}  // namespace
}  // namespace pktrack
