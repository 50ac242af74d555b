// Pinhole cameras, sphere silhouettes and localization from projected areas.
//
// Conventions: world frame is z-up. A camera's rotation matrix holds the
// camera axes (x right, y down, z forward) as columns expressed in world
// coordinates, so a world point maps to the camera frame as R^T (p - c).
// The image plane sits at z = focal with the principal point at the image
// center; image-plane units convert to pixels through pixels_per_unit.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pktrack/error.hpp"

namespace pktrack {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

/// Axis-aligned rectangle in the horizontal plane.
struct Rect {
  double x_min = 0.0;
  double x_max = 0.0;
  double y_min = 0.0;
  double y_max = 0.0;

  bool empty() const { return !(x_max > x_min && y_max > y_min); }
  bool contains(double x, double y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
  Vec2 center() const { return {0.5 * (x_min + x_max), 0.5 * (y_min + y_max)}; }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
};

class CameraModel {
 public:
  CameraModel(const Mat3& rotation, const Vec3& center, double focal,
              int image_width, int image_height, double pixels_per_unit = 1.0)
      : rotation_(rotation),
        center_(center),
        focal_(focal),
        width_(image_width),
        height_(image_height),
        pixels_per_unit_(pixels_per_unit) {
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity())
                             .cwiseAbs()
                             .maxCoeff();
    if (!(ortho < 1e-9)) throw InvalidConfig("camera rotation is not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > 1e-9)
      throw InvalidConfig("camera rotation must have determinant +1");
    if (!(focal > 0.0)) throw InvalidConfig("camera focal length must be positive");
    if (image_width <= 0 || image_height <= 0)
      throw InvalidConfig("camera image size must be positive");
    if (!(pixels_per_unit > 0.0))
      throw InvalidConfig("camera pixels_per_unit must be positive");
    if (!center.allFinite()) throw InvalidConfig("camera center must be finite");
  }

  /// Builds a camera from yaw/pitch/roll in degrees. Yaw is the heading of the
  /// optical axis measured from world +x towards +y, pitch tilts the axis up
  /// (negative looks down), roll spins the image about the optical axis.
  static CameraModel from_ypr(const Vec3& position, double yaw_deg,
                              double pitch_deg, double roll_deg, double focal_px,
                              int width, int height) {
    constexpr double kDeg = std::numbers::pi / 180.0;
    const double yaw = yaw_deg * kDeg;
    const double pitch = pitch_deg * kDeg;
    const double roll = roll_deg * kDeg;
    const Vec3 forward(std::cos(pitch) * std::cos(yaw),
                       std::cos(pitch) * std::sin(yaw), std::sin(pitch));
    Vec3 right = forward.cross(Vec3::UnitZ());
    if (right.norm() < 1e-12) throw InvalidConfig("camera pitch of +-90 deg is not supported");
    right.normalize();
    Vec3 down = forward.cross(right);
    const Vec3 x_axis = std::cos(roll) * right + std::sin(roll) * down;
    const Vec3 y_axis = -std::sin(roll) * right + std::cos(roll) * down;
    Mat3 rot;
    rot.col(0) = x_axis;
    rot.col(1) = y_axis;
    rot.col(2) = forward;
    return CameraModel(rot, position, focal_px, width, height, 1.0);
  }

  /// Camera at `position` whose optical axis passes through `target`.
  static CameraModel look_at(const Vec3& position, const Vec3& target,
                             double focal_px, int width, int height) {
    const Vec3 d = target - position;
    const double yaw = std::atan2(d.y(), d.x()) * 180.0 / std::numbers::pi;
    const double pitch =
        std::atan2(d.z(), std::hypot(d.x(), d.y())) * 180.0 / std::numbers::pi;
    return from_ypr(position, yaw, pitch, 0.0, focal_px, width, height);
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& center() const { return center_; }
  double focal() const { return focal_; }
  int image_width() const { return width_; }
  int image_height() const { return height_; }
  double pixels_per_unit() const { return pixels_per_unit_; }

  /// Half extents of the image rectangle in image-plane units.
  double half_width() const { return 0.5 * width_ / pixels_per_unit_; }
  double half_height() const { return 0.5 * height_ / pixels_per_unit_; }
  double image_area() const { return 4.0 * half_width() * half_height(); }

 private:
  Mat3 rotation_;
  Vec3 center_;
  double focal_;
  int width_;
  int height_;
  double pixels_per_unit_;
};

struct SphereTarget {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;

  SphereTarget() = default;
  SphereTarget(const Vec3& c, double r) : center(c), radius(r) {
    if (!(r > 0.0)) throw InvalidConfig("sphere radius must be positive");
  }
};

/// Silhouette conic in centered form A u'^2 + B u'v' + C v'^2 = 1 around
/// (center_u, center_v).
struct EllipseSilhouette {
  double center_u = 0.0;
  double center_v = 0.0;
  double quad_A = 0.0;
  double quad_B = 0.0;
  double quad_C = 0.0;
  double area = 0.0;
};

inline Vec3 world_to_camera(const Vec3& p, const CameraModel& cam) {
  return cam.rotation().transpose() * (p - cam.center());
}

/// Derives the silhouette conic from the tangent-ray quadratic
///   (x u + y v + z f)^2 - (u^2 + v^2 + f^2)(|p|^2 - r^2) = 0
/// by completing the square around its stationary point.
inline EllipseSilhouette silhouette_ellipse(const Vec3& p_cam, double r, double f) {
  const double x = p_cam.x(), y = p_cam.y(), z = p_cam.z();
  if (!(z > r)) throw DegenerateView("sphere is not strictly in front of the camera");
  const double k = x * x + y * y + z * z - r * r;
  // a u^2 + b uv + c v^2 + d u + e v + g = 0
  const double a = x * x - k;
  const double b = 2.0 * x * y;
  const double c = y * y - k;
  const double d = 2.0 * x * z * f;
  const double e = 2.0 * y * z * f;
  const double g = (z * z - k) * f * f;

  Eigen::Matrix2d h;
  h << 2.0 * a, b, b, 2.0 * c;
  const Vec2 center = h.fullPivLu().solve(Vec2(-d, -e));
  const double g_centered = g + 0.5 * (d * center.x() + e * center.y());

  EllipseSilhouette out;
  out.center_u = center.x();
  out.center_v = center.y();
  out.quad_A = -a / g_centered;
  out.quad_B = -b / g_centered;
  out.quad_C = -c / g_centered;
  const double disc = 4.0 * out.quad_A * out.quad_C - out.quad_B * out.quad_B;
  if (!(disc > 0.0)) throw DegenerateView("silhouette conic is not a real ellipse");
  out.area = 2.0 * std::numbers::pi / std::sqrt(disc);
  return out;
}

/// Closed-form projected area of a sphere given in camera coordinates.
inline double projected_area_camera(const Vec3& p_cam, double r, double f) {
  const double x = p_cam.x(), y = p_cam.y(), z = p_cam.z();
  if (!(z > r)) throw DegenerateView("sphere is not strictly in front of the camera");
  const double zz = z * z - r * r;
  return std::numbers::pi * r * r * f * f * std::sqrt(x * x + y * y + zz) /
         (zz * std::sqrt(zz));
}

inline double projected_area_analytic(const SphereTarget& target, const CameraModel& cam) {
  return projected_area_camera(world_to_camera(target.center, cam), target.radius,
                               cam.focal());
}

/// Gradient of the closed-form area with respect to the camera-frame center.
inline Vec3 projected_area_gradient_camera(const Vec3& p_cam, double r, double f) {
  const double area = projected_area_camera(p_cam, r, f);
  const double k = p_cam.squaredNorm() - r * r;
  const double zz = p_cam.z() * p_cam.z() - r * r;
  Vec3 g = p_cam / k;
  g.z() -= 3.0 * p_cam.z() / zz;
  return area * g;
}

/// Sampling grid over a camera's image rectangle. `resolution` is the number
/// of columns; rows follow the image aspect ratio so cells stay square for
/// square pixels.
struct RasterGrid {
  int cols = 0;
  int rows = 0;
  double du = 0.0;
  double dv = 0.0;
  double half_w = 0.0;
  double half_h = 0.0;

  RasterGrid(const CameraModel& cam, int resolution) {
    if (resolution <= 0) throw InvalidConfig("raster resolution must be positive");
    cols = resolution;
    rows = std::max(1, static_cast<int>(std::lround(
                           static_cast<double>(resolution) * cam.image_height() /
                           cam.image_width())));
    half_w = cam.half_width();
    half_h = cam.half_height();
    du = 2.0 * half_w / cols;
    dv = 2.0 * half_h / rows;
  }
  double u(int col) const { return -half_w + (col + 0.5) * du; }
  double v(int row) const { return -half_h + (row + 0.5) * dv; }
  double cell_area() const { return du * dv; }
};

struct RasterStats {
  std::int64_t count = 0;
  double area = 0.0;  // image-plane units^2
  double centroid_u = 0.0;
  double centroid_v = 0.0;
};

/// Brute-force silhouette rasterization: every sample whose center ray passes
/// within r of the sphere center is counted, via the point-to-line distance
/// |p x m| / |m|. Samples outside the image rectangle do not exist, so the
/// result is clipped by construction.
inline RasterStats rasterize_silhouette(const SphereTarget& target, const CameraModel& cam,
                                        int resolution) {
  const Vec3 p = world_to_camera(target.center, cam);
  if (!(p.z() > target.radius))
    throw DegenerateView("sphere is not strictly in front of the camera");
  const RasterGrid grid(cam, resolution);
  const double r2 = target.radius * target.radius;
  const double f = cam.focal();
  RasterStats stats;
  double su = 0.0, sv = 0.0;
  for (int row = 0; row < grid.rows; ++row) {
    const double v = grid.v(row);
    for (int col = 0; col < grid.cols; ++col) {
      const Vec3 m(grid.u(col), v, f);
      if (p.cross(m).squaredNorm() <= r2 * m.squaredNorm()) {
        ++stats.count;
        su += m.x();
        sv += v;
      }
    }
  }
  stats.area = static_cast<double>(stats.count) * grid.cell_area();
  if (stats.count > 0) {
    stats.centroid_u = su / static_cast<double>(stats.count);
    stats.centroid_v = sv / static_cast<double>(stats.count);
  }
  return stats;
}

inline double projected_area_rasterized(const SphereTarget& target, const CameraModel& cam,
                                        int resolution) {
  return rasterize_silhouette(target, cam, resolution).area;
}

/// Per-row inclusive column ranges of a silhouette mask. A row with
/// first > last is empty.
struct SilhouetteSpans {
  struct Span {
    int first = 0;
    int last = -1;
    int size() const { return last >= first ? last - first + 1 : 0; }
  };
  std::vector<Span> rows;
  double cell_area = 0.0;

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& s : rows) n += s.size();
    return n;
  }
  double area() const { return static_cast<double>(count()) * cell_area; }
};

/// Fast row-wise rasterizer used by the codec surrogate. Each row's interval
/// comes from solving the tangency quadratic in u. A sphere that is not
/// strictly in front of the camera yields an empty mask instead of an error.
inline SilhouetteSpans silhouette_spans(const SphereTarget& target, const CameraModel& cam,
                                        int resolution) {
  const RasterGrid grid(cam, resolution);
  SilhouetteSpans out;
  out.rows.assign(static_cast<std::size_t>(grid.rows), {});
  out.cell_area = grid.cell_area();
  const Vec3 p = world_to_camera(target.center, cam);
  const double r = target.radius;
  if (!(p.z() > r)) return out;
  const double f = cam.focal();
  const double k = p.squaredNorm() - r * r;
  const double a = p.x() * p.x() - k;  // < 0 in front of the camera
  for (int row = 0; row < grid.rows; ++row) {
    const double v = grid.v(row);
    const double w = p.y() * v + p.z() * f;
    const double b = 2.0 * p.x() * w;
    const double c = w * w - (v * v + f * f) * k;
    const double disc = b * b - 4.0 * a * c;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    const double u1 = (-b + sq) / (2.0 * a);
    const double u2 = (-b - sq) / (2.0 * a);
    const double lo = std::min(u1, u2), hi = std::max(u1, u2);
    const double first = std::ceil((lo + grid.half_w) / grid.du - 0.5);
    const double last = std::floor((hi + grid.half_w) / grid.du - 0.5);
    if (last < 0.0 || first > grid.cols - 1) continue;
    auto& span = out.rows[static_cast<std::size_t>(row)];
    span.first = static_cast<int>(std::max(first, 0.0));
    span.last = static_cast<int>(std::min(last, static_cast<double>(grid.cols - 1)));
  }
  return out;
}

/// Area of the symmetric difference of two masks on the same grid.
inline double span_xor_area(const SilhouetteSpans& a, const SilhouetteSpans& b) {
  if (a.rows.size() != b.rows.size()) throw ShapeError("span masks differ in row count");
  std::int64_t n = 0;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto& sa = a.rows[i];
    const auto& sb = b.rows[i];
    const int lo = std::max(sa.first, sb.first);
    const int hi = std::min(sa.last, sb.last);
    const int inter = (sa.size() > 0 && sb.size() > 0 && hi >= lo) ? hi - lo + 1 : 0;
    n += sa.size() + sb.size() - 2 * inter;
  }
  return static_cast<double>(n) * a.cell_area;
}

/// Centroid of a span mask in image-plane units; nullopt when empty.
inline std::optional<Vec2> span_centroid(const SilhouetteSpans& s, const CameraModel& cam,
                                         int resolution) {
  const RasterGrid grid(cam, resolution);
  double su = 0.0, sv = 0.0;
  std::int64_t n = 0;
  for (int row = 0; row < grid.rows; ++row) {
    const auto& sp = s.rows[static_cast<std::size_t>(row)];
    const int cnt = sp.size();
    if (cnt == 0) continue;
    // Sum of u over consecutive columns first..last.
    su += cnt * (grid.u(sp.first) + grid.u(sp.last)) * 0.5;
    sv += cnt * grid.v(row);
    n += cnt;
  }
  if (n == 0) return std::nullopt;
  return Vec2(su / static_cast<double>(n), sv / static_cast<double>(n));
}

/// Center-based visibility: the sphere is in front of the camera and the
/// silhouette ellipse center lies inside the image rectangle.
inline bool is_visible(const SphereTarget& target, const CameraModel& cam) {
  const Vec3 p = world_to_camera(target.center, cam);
  if (!(p.z() > target.radius)) return false;
  const EllipseSilhouette e = silhouette_ellipse(p, target.radius, cam.focal());
  return std::abs(e.center_u) <= cam.half_width() && std::abs(e.center_v) <= cam.half_height();
}

// ---------------------------------------------------------------------------
// Localization

struct AreaObservation {
  std::size_t camera_index = 0;
  double area = 0.0;
};

struct LocalizeOptions {
  int max_iterations = 100;
  double initial_damping = 1e-3;
  double step_tolerance = 1e-9;   // meters
  double cost_tolerance = 1e-12;  // change in sum of squared residuals
  int max_restarts = 8;
  std::optional<Rect> restart_region;
  std::uint64_t seed = 0x5eed;
};

struct LocalizationResult {
  Vec3 position = Vec3::Zero();
  double residual_norm = 0.0;
  int iterations = 0;
  int restarts = 0;
};

namespace detail {

struct AreaProblem {
  std::span<const AreaObservation> obs;
  std::span<const CameraModel> cams;
  double radius;
  double z_known;

  // Residuals and Jacobian at (x, y). Returns false outside the domain where
  // every observing camera sees the sphere strictly in front of it.
  bool evaluate(const Vec2& xy, Eigen::VectorXd& res, Eigen::MatrixXd& jac) const {
    const Vec3 p(xy.x(), xy.y(), z_known);
    res.resize(static_cast<Eigen::Index>(obs.size()));
    jac.resize(static_cast<Eigen::Index>(obs.size()), 2);
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const CameraModel& cam = cams[obs[i].camera_index];
      const Vec3 pc = world_to_camera(p, cam);
      if (!(pc.z() > radius)) return false;
      const auto row = static_cast<Eigen::Index>(i);
      res(row) = projected_area_camera(pc, radius, cam.focal()) - obs[i].area;
      const Vec3 g = projected_area_gradient_camera(pc, radius, cam.focal());
      // d p_cam / d(x, y) are the first two columns of R^T.
      const Vec3 dx = cam.rotation().transpose().col(0);
      const Vec3 dy = cam.rotation().transpose().col(1);
      jac(row, 0) = g.dot(dx);
      jac(row, 1) = g.dot(dy);
    }
    return true;
  }

  double cost(const Vec2& xy) const {
    Eigen::VectorXd r;
    Eigen::MatrixXd j;
    if (!evaluate(xy, r, j)) return std::numeric_limits<double>::infinity();
    return r.squaredNorm();
  }
};

inline bool rank_deficient(const Eigen::MatrixXd& jac) {
  if (jac.rows() < 2) return true;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac);
  const auto& s = svd.singularValues();
  return !(s(0) > 0.0) || s(1) <= 1e-10 * s(0);
}

enum class LmOutcome { kConverged, kNoConvergence, kDegenerate };

inline LmOutcome levenberg_marquardt(const AreaProblem& prob, Vec2& xy, const LocalizeOptions& opt,
                                     int& iterations) {
  Eigen::VectorXd res;
  Eigen::MatrixXd jac;
  if (!prob.evaluate(xy, res, jac)) return LmOutcome::kDegenerate;
  if (rank_deficient(jac)) return LmOutcome::kDegenerate;
  double cost = res.squaredNorm();
  double lambda = opt.initial_damping;
  for (iterations = 0; iterations < opt.max_iterations; ++iterations) {
    if (cost == 0.0) return LmOutcome::kConverged;
    const Eigen::Matrix2d jtj = jac.transpose() * jac;
    const Vec2 jtr = jac.transpose() * res;
    Eigen::Matrix2d damped = jtj;
    damped.diagonal() += lambda * jtj.diagonal();
    const Vec2 step = damped.ldlt().solve(-jtr);
    if (!step.allFinite()) return LmOutcome::kDegenerate;
    const Vec2 trial = xy + step;
    const double trial_cost = prob.cost(trial);
    if (trial_cost < cost) {
      xy = trial;
      const double change = cost - trial_cost;
      cost = trial_cost;
      prob.evaluate(xy, res, jac);
      lambda = std::max(lambda / 10.0, 1e-15);
      if (step.norm() < opt.step_tolerance || change < opt.cost_tolerance)
        return LmOutcome::kConverged;
    } else {
      if (step.norm() < opt.step_tolerance) return LmOutcome::kConverged;
      lambda *= 10.0;
      if (lambda > 1e16) return LmOutcome::kConverged;
    }
  }
  return LmOutcome::kNoConvergence;
}

}  // namespace detail

/// Recovers (x, y) on the plane z = z_known from per-camera projected areas by
/// Levenberg-Marquardt on the squared area residuals. On NoConvergence, or a
/// start point with a rank-deficient Jacobian, up to max_restarts starts are
/// drawn uniformly from the restart region.
inline LocalizationResult localize_from_areas(std::span<const AreaObservation> areas,
                                              std::span<const CameraModel> cams, double r,
                                              double z_known, const Vec3& init,
                                              const LocalizeOptions& opt = {}) {
  for (const auto& o : areas)
    if (o.camera_index >= cams.size()) throw InvalidConfig("area observation camera index out of range");
  const detail::AreaProblem prob{areas, cams, r, z_known};
  std::mt19937_64 rng(opt.seed);
  Vec2 start(init.x(), init.y());
  bool any_nondegenerate = false;
  for (int attempt = 0; attempt <= opt.max_restarts; ++attempt) {
    if (attempt > 0) {
      if (!opt.restart_region) break;
      std::uniform_real_distribution<double> ux(opt.restart_region->x_min, opt.restart_region->x_max);
      std::uniform_real_distribution<double> uy(opt.restart_region->y_min, opt.restart_region->y_max);
      start = Vec2(ux(rng), uy(rng));
    }
    Vec2 xy = start;
    int iters = 0;
    const auto outcome = detail::levenberg_marquardt(prob, xy, opt, iters);
    if (outcome == detail::LmOutcome::kDegenerate) continue;
    any_nondegenerate = true;
    if (outcome == detail::LmOutcome::kConverged) {
      LocalizationResult out;
      out.position = Vec3(xy.x(), xy.y(), z_known);
      out.residual_norm = std::sqrt(prob.cost(xy));
      out.iterations = iters;
      out.restarts = attempt;
      return out;
    }
  }
  if (!any_nondegenerate)
    throw DegenerateGeometry("area Jacobian is rank-deficient at every start point");
  throw NoConvergence("localization did not converge within the iteration budget");
}

}  // namespace pktrack
