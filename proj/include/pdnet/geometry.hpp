#pragma once

#include "pdnet/image.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include <json.hpp>

namespace pdnet {

struct Point2D {
   double x = 0.0; ///< column
   double y = 0.0; ///< row

   friend Point2D operator+(Point2D a, Point2D b) { return {a.x + b.x, a.y + b.y}; }
   friend Point2D operator-(Point2D a, Point2D b) { return {a.x - b.x, a.y - b.y}; }
   friend Point2D operator*(double s, Point2D p) { return {s * p.x, s * p.y}; }
   friend bool operator==(const Point2D&, const Point2D&) = default;
};

inline double distance(Point2D a, Point2D b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// True when the point lies within the pixel grid of an image of the given shape.
inline bool point_in_image(Point2D p, int height, int width)
{
   return std::isfinite(p.x) && std::isfinite(p.y) && p.x >= 0.0 && p.y >= 0.0 && p.x < width && p.y < height;
}

/// Four RECIST endpoints, long pair first, plus isotropic in-plane spacing.
struct RecistAnnotation {
   Point2D long_a;
   Point2D long_b;
   Point2D short_a;
   Point2D short_b;
   double spacing_mm = 1.0;

   double long_px() const { return distance(long_a, long_b); }
   double short_px() const { return distance(short_a, short_b); }
   double long_mm() const { return long_px() * spacing_mm; }
   double short_mm() const { return short_px() * spacing_mm; }

   std::array<Point2D, 4> endpoints() const { return {long_a, long_b, short_a, short_b}; }
   static RecistAnnotation from_endpoints(const std::array<Point2D, 4>& pts, double spacing_mm)
   {
      return {pts[0], pts[1], pts[2], pts[3], spacing_mm};
   }

   /// Throws std::invalid_argument on non-finite points, non-positive spacing,
   /// or a short axis longer than the long axis.
   void validate() const;
};

struct EllipseParams {
   Point2D center;
   double semi_major = 1.0;
   double semi_minor = 1.0;
   double theta = 0.0; ///< major-axis orientation, radians
};

struct HeatmapConfig {
   double sigma = 3.0;
};

/// Endpoint heatmaps in the fixed order (long_a, long_b, short_a, short_b).
struct HeatmapSet {
   std::array<RealImage, 4> maps;
};

/// 2x3 affine map on pixel-center coordinates: p' = A p + t.
struct Affine2D {
   double a = 1, b = 0, tx = 0;
   double c = 0, d = 1, ty = 0;

   Point2D apply(Point2D p) const { return {a * p.x + b * p.y + tx, c * p.x + d * p.y + ty}; }
   Affine2D inverse() const;
   /// (*this) after (first): x -> this(first(x)).
   Affine2D compose(const Affine2D& first) const;

   static Affine2D translation(double dx, double dy) { return {1, 0, dx, 0, 1, dy}; }
   static Affine2D scaling(double s) { return {s, 0, 0, 0, s, 0}; }
   /// Counter-clockwise rotation in the image plane (x right, y down) about `center`.
   static Affine2D rotation(double radians, Point2D center);
};

EllipseParams ellipse_from_recist(const RecistAnnotation& recist);

BinaryMask rasterize_ellipse(const EllipseParams& params, int height, int width);

/// True when `p` satisfies the canonical ellipse inequality (<= 1).
bool ellipse_contains(const EllipseParams& params, Point2D p);

struct DiameterOptions {
   double perpendicular_tolerance_deg = 5.0;
};

/// Long axis: farthest pair of boundary pixels. Short axis: longest boundary chord
/// within the tolerance of perpendicular to the long axis. Uses the largest
/// 8-connected component. Ties resolve to the first pair in row-major boundary order.
RecistAnnotation diameters_from_mask(const BinaryMask& mask, double spacing_mm, DiameterOptions opts = {});

/// Foreground pixels of `mask` with a 4-neighbour outside the foreground (or the border),
/// in row-major order.
std::vector<std::array<int, 2>> boundary_pixels(const BinaryMask& mask);

/// Largest 8-connected component (first in row-major order on ties).
BinaryMask largest_component(const BinaryMask& mask);

/// 8-connected component containing the pixel nearest to `p`; empty mask when
/// `mask` has no foreground.
BinaryMask component_nearest(const BinaryMask& mask, Point2D p);

struct ClickImageOptions {
   double radius = 3.0;
};

RealImage make_click_image(Point2D click, int height, int width, ClickImageOptions opts = {});
RealImage make_distance_image(Point2D click, int height, int width);

HeatmapSet make_heatmaps(const RecistAnnotation& recist, int height, int width, HeatmapConfig cfg);

/// Same Gaussian as make_heatmaps without the endpoint-in-image check; used for
/// lower-resolution targets whose rescaled endpoints may fall just outside.
RealImage gaussian_map(Point2D center, int height, int width, double sigma);

RecistAnnotation decode_endpoints(const HeatmapSet& heatmaps, double spacing_mm);

/// Uniform point inside the ellipse with both semi-axes halved.
Point2D sample_click(const EllipseParams& ellipse, std::uint64_t rng_seed);

nlohmann::json to_json(const RecistAnnotation& recist);
RecistAnnotation recist_from_json(const nlohmann::json& j);

} // namespace pdnet
