#include "pdnet/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numbers>
#include <queue>
#include <random>
#include <stdexcept>

namespace pdnet {

void RecistAnnotation::validate() const
{
   for (const auto& p : endpoints()) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
         throw std::invalid_argument("RECIST: non-finite endpoint");
      }
   }
   if (!(spacing_mm > 0.0) || !std::isfinite(spacing_mm)) {
      throw std::invalid_argument("RECIST: spacing must be positive");
   }
   if (short_px() > long_px() + 1e-9) {
      throw std::invalid_argument("RECIST: short axis longer than long axis");
   }
}

Affine2D Affine2D::inverse() const
{
   const double det = a * d - b * c;
   if (std::abs(det) < 1e-300) {
      throw std::invalid_argument("Affine2D: singular map");
   }
   Affine2D inv;
   inv.a = d / det;
   inv.b = -b / det;
   inv.c = -c / det;
   inv.d = a / det;
   inv.tx = -(inv.a * tx + inv.b * ty);
   inv.ty = -(inv.c * tx + inv.d * ty);
   return inv;
}

Affine2D Affine2D::compose(const Affine2D& f) const
{
   Affine2D r;
   r.a = a * f.a + b * f.c;
   r.b = a * f.b + b * f.d;
   r.c = c * f.a + d * f.c;
   r.d = c * f.b + d * f.d;
   r.tx = a * f.tx + b * f.ty + tx;
   r.ty = c * f.tx + d * f.ty + ty;
   return r;
}

Affine2D Affine2D::rotation(double radians, Point2D center)
{
   // y points down, so a visually counter-clockwise turn has the sign flipped on sin.
   const double cs = std::cos(radians);
   const double sn = std::sin(radians);
   Affine2D r{cs, sn, 0, -sn, cs, 0};
   return translation(center.x, center.y).compose(r).compose(translation(-center.x, -center.y));
}

EllipseParams ellipse_from_recist(const RecistAnnotation& recist)
{
   const double long_len = recist.long_px();
   const double short_len = recist.short_px();
   if (!(long_len > 0.0) || !(short_len > 0.0)) {
      throw std::invalid_argument("degenerate RECIST");
   }
   EllipseParams e;
   e.center = 0.25 * (recist.long_a + recist.long_b + recist.short_a + recist.short_b);
   const Point2D dir = recist.long_b - recist.long_a;
   e.theta = std::atan2(dir.y, dir.x);
   e.semi_major = long_len / 2.0;
   e.semi_minor = short_len / 2.0;
   if (e.semi_minor > e.semi_major) {
      std::swap(e.semi_minor, e.semi_major);
      e.theta += std::numbers::pi / 2.0;
   }
   return e;
}

bool ellipse_contains(const EllipseParams& e, Point2D p)
{
   const double cs = std::cos(e.theta);
   const double sn = std::sin(e.theta);
   const double dx = p.x - e.center.x;
   const double dy = p.y - e.center.y;
   const double u = cs * dx + sn * dy;
   const double v = -sn * dx + cs * dy;
   return (u * u) / (e.semi_major * e.semi_major) + (v * v) / (e.semi_minor * e.semi_minor) <= 1.0;
}

BinaryMask rasterize_ellipse(const EllipseParams& params, int height, int width)
{
   if (height <= 0 || width <= 0) {
      throw std::invalid_argument("rasterize_ellipse: non-positive shape");
   }
   BinaryMask mask(height, width, 0);
   for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
         mask(x, y) = ellipse_contains(params, {double(x), double(y)}) ? 1 : 0;
      }
   }
   return mask;
}

namespace {

constexpr int kDx8[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
constexpr int kDy8[8] = {-1, -1, -1, 0, 0, 1, 1, 1};

/// Labels 8-connected components, numbered 1.. in row-major order of their first pixel.
Image<int> label_components(const BinaryMask& mask, int& count)
{
   Image<int> labels(mask.height(), mask.width(), 0);
   count = 0;
   std::queue<std::array<int, 2>> frontier;
   for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
         if (mask(x, y) == 0 || labels(x, y) != 0) {
            continue;
         }
         ++count;
         labels(x, y) = count;
         frontier.push({x, y});
         while (!frontier.empty()) {
            auto [cx, cy] = frontier.front();
            frontier.pop();
            for (int k = 0; k < 8; ++k) {
               const int nx = cx + kDx8[k];
               const int ny = cy + kDy8[k];
               if (mask.contains(nx, ny) && mask(nx, ny) != 0 && labels(nx, ny) == 0) {
                  labels(nx, ny) = count;
                  frontier.push({nx, ny});
               }
            }
         }
      }
   }
   return labels;
}

BinaryMask select_label(const Image<int>& labels, int label)
{
   BinaryMask out(labels.height(), labels.width(), 0);
   for (std::size_t i = 0; i < labels.size(); ++i) {
      out[i] = labels[i] == label ? 1 : 0;
   }
   return out;
}

std::int64_t sq_dist(const std::array<int, 2>& p, const std::array<int, 2>& q)
{
   const std::int64_t dx = p[0] - q[0];
   const std::int64_t dy = p[1] - q[1];
   return dx * dx + dy * dy;
}

std::int64_t cross(const std::array<int, 2>& o, const std::array<int, 2>& a, const std::array<int, 2>& b)
{
   return std::int64_t(a[0] - o[0]) * (b[1] - o[1]) - std::int64_t(a[1] - o[1]) * (b[0] - o[0]);
}

/// Indices into `pts` of the strict convex hull vertices (collinear points dropped).
std::vector<std::size_t> hull_indices(const std::vector<std::array<int, 2>>& pts)
{
   std::vector<std::size_t> order(pts.size());
   for (std::size_t i = 0; i < order.size(); ++i) {
      order[i] = i;
   }
   std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return pts[i] < pts[j]; });
   if (order.size() < 3) {
      std::sort(order.begin(), order.end());
      return order;
   }
   std::vector<std::size_t> hull(2 * order.size());
   std::size_t k = 0;
   for (std::size_t i = 0; i < order.size(); ++i) {
      while (k >= 2 && cross(pts[hull[k - 2]], pts[hull[k - 1]], pts[order[i]]) <= 0) {
         --k;
      }
      hull[k++] = order[i];
   }
   for (std::size_t i = order.size() - 1, t = k + 1; i > 0; --i) {
      while (k >= t && cross(pts[hull[k - 2]], pts[hull[k - 1]], pts[order[i - 1]]) <= 0) {
         --k;
      }
      hull[k++] = order[i - 1];
   }
   hull.resize(k - 1);
   std::sort(hull.begin(), hull.end());
   return hull;
}

Point2D to_point(const std::array<int, 2>& p) { return {double(p[0]), double(p[1])}; }

} // namespace

std::vector<std::array<int, 2>> boundary_pixels(const BinaryMask& mask)
{
   std::vector<std::array<int, 2>> pts;
   for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
         if (mask(x, y) == 0) {
            continue;
         }
         const bool edge = !mask.contains(x - 1, y) || !mask.contains(x + 1, y) || !mask.contains(x, y - 1) ||
                           !mask.contains(x, y + 1) || mask(x - 1, y) == 0 || mask(x + 1, y) == 0 ||
                           mask(x, y - 1) == 0 || mask(x, y + 1) == 0;
         if (edge) {
            pts.push_back({x, y});
         }
      }
   }
   return pts;
}

BinaryMask largest_component(const BinaryMask& mask)
{
   int count = 0;
   const auto labels = label_components(mask, count);
   if (count <= 1) {
      return count == 0 ? mask : select_label(labels, 1);
   }
   std::vector<std::size_t> sizes(count + 1, 0);
   for (auto l : labels.pixels()) {
      ++sizes[l];
   }
   int best = 1;
   for (int l = 2; l <= count; ++l) {
      if (sizes[l] > sizes[best]) {
         best = l;
      }
   }
   return select_label(labels, best);
}

BinaryMask component_nearest(const BinaryMask& mask, Point2D p)
{
   int count = 0;
   const auto labels = label_components(mask, count);
   if (count == 0) {
      return BinaryMask(mask.height(), mask.width(), 0);
   }
   int best = 0;
   double best_d = std::numeric_limits<double>::infinity();
   for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
         if (labels(x, y) == 0) {
            continue;
         }
         const double d = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
         if (d < best_d) {
            best_d = d;
            best = labels(x, y);
         }
      }
   }
   return select_label(labels, best);
}

RecistAnnotation diameters_from_mask(const BinaryMask& mask, double spacing_mm, DiameterOptions opts)
{
   if (count_foreground(mask) == 0) {
      throw std::invalid_argument("empty mask");
   }
   const auto pts = boundary_pixels(largest_component(mask));

   // The farthest pair is always a pair of strict hull vertices; scanning those in
   // boundary order reproduces the first-maximum rule of the full pairwise search.
   const auto hull = hull_indices(pts);
   std::size_t li = hull.front();
   std::size_t lj = hull.front();
   std::int64_t best = -1;
   for (std::size_t a = 0; a < hull.size(); ++a) {
      for (std::size_t b = a + 1; b < hull.size(); ++b) {
         const auto d = sq_dist(pts[hull[a]], pts[hull[b]]);
         if (d > best) {
            best = d;
            li = hull[a];
            lj = hull[b];
         }
      }
   }
   if (best < 0) {
      best = 0;
   }

   RecistAnnotation r;
   r.spacing_mm = spacing_mm;
   r.long_a = to_point(pts[li]);
   r.long_b = to_point(pts[lj]);

   const double lx = r.long_b.x - r.long_a.x;
   const double ly = r.long_b.y - r.long_a.y;
   const double long_sq = lx * lx + ly * ly;
   const double sin_tol = std::sin(opts.perpendicular_tolerance_deg * std::numbers::pi / 180.0);
   const double sin_tol_sq = sin_tol * sin_tol;

   std::int64_t best_short = -1;
   std::size_t si = 0;
   std::size_t sj = 0;
   if (long_sq > 0.0) {
      for (std::size_t i = 0; i < pts.size(); ++i) {
         for (std::size_t j = i + 1; j < pts.size(); ++j) {
            const auto d = sq_dist(pts[i], pts[j]);
            if (d <= best_short) {
               continue;
            }
            const double dot = lx * (pts[j][0] - pts[i][0]) + ly * (pts[j][1] - pts[i][1]);
            if (dot * dot <= sin_tol_sq * double(d) * long_sq) {
               best_short = d;
               si = i;
               sj = j;
            }
         }
      }
   }
   if (best_short > 0) {
      r.short_a = to_point(pts[si]);
      r.short_b = to_point(pts[sj]);
   } else {
      const Point2D mid = 0.5 * (r.long_a + r.long_b);
      r.short_a = mid;
      r.short_b = mid;
   }
   return r;
}

RealImage make_click_image(Point2D click, int height, int width, ClickImageOptions opts)
{
   if (!point_in_image(click, height, width)) {
      throw std::invalid_argument("make_click_image: click outside image");
   }
   RealImage img(height, width, 0.0f);
   const double r2 = opts.radius * opts.radius;
   for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
         const double dx = x - click.x;
         const double dy = y - click.y;
         img(x, y) = dx * dx + dy * dy <= r2 ? 1.0f : 0.0f;
      }
   }
   return img;
}

RealImage make_distance_image(Point2D click, int height, int width)
{
   if (!point_in_image(click, height, width)) {
      throw std::invalid_argument("make_distance_image: click outside image");
   }
   const double diag = std::hypot(double(height), double(width));
   RealImage img(height, width, 0.0f);
   for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
         img(x, y) = static_cast<float>(1.0 - std::hypot(x - click.x, y - click.y) / diag);
      }
   }
   return img;
}

RealImage gaussian_map(Point2D center, int height, int width, double sigma)
{
   if (!(sigma > 0.0)) {
      throw std::invalid_argument("heatmap sigma must be positive");
   }
   RealImage map(height, width, 0.0f);
   const double inv = 1.0 / (2.0 * sigma * sigma);
   std::vector<double> gx(width);
   for (int x = 0; x < width; ++x) {
      gx[x] = (x - center.x) * (x - center.x);
   }
   for (int y = 0; y < height; ++y) {
      const double dy2 = (y - center.y) * (y - center.y);
      for (int x = 0; x < width; ++x) {
         map(x, y) = static_cast<float>(std::exp(-(gx[x] + dy2) * inv));
      }
   }
   return map;
}

HeatmapSet make_heatmaps(const RecistAnnotation& recist, int height, int width, HeatmapConfig cfg)
{
   HeatmapSet set;
   const auto pts = recist.endpoints();
   for (std::size_t k = 0; k < 4; ++k) {
      if (!point_in_image(pts[k], height, width)) {
         throw std::invalid_argument("make_heatmaps: endpoint outside image");
      }
      set.maps[k] = gaussian_map(pts[k], height, width, cfg.sigma);
   }
   return set;
}

RecistAnnotation decode_endpoints(const HeatmapSet& heatmaps, double spacing_mm)
{
   std::array<Point2D, 4> pts;
   const auto& first = heatmaps.maps[0];
   for (std::size_t k = 0; k < 4; ++k) {
      const auto& map = heatmaps.maps[k];
      if (!map.same_shape(first) || map.empty()) {
         throw std::invalid_argument("decode_endpoints: heatmaps must share a non-empty shape");
      }
      std::size_t arg = 0;
      float lo = map[0];
      for (std::size_t i = 1; i < map.size(); ++i) {
         if (map[i] > map[arg]) {
            arg = i;
         }
         lo = std::min(lo, map[i]);
      }
      if (!(map[arg] > lo)) {
         throw std::invalid_argument("no peak");
      }
      pts[k] = {double(arg % std::size_t(map.width())), double(arg / std::size_t(map.width()))};
   }
   return RecistAnnotation::from_endpoints(pts, spacing_mm);
}

Point2D sample_click(const EllipseParams& e, std::uint64_t rng_seed)
{
   std::mt19937_64 rng(rng_seed);
   // Explicit conversion keeps the stream identical across standard libraries.
   auto uniform = [&rng] { return double(rng() >> 11) * 0x1.0p-53; };
   const double r = std::sqrt(uniform());
   const double phi = 2.0 * std::numbers::pi * uniform();
   const double u = 0.5 * e.semi_major * r * std::cos(phi);
   const double v = 0.5 * e.semi_minor * r * std::sin(phi);
   const double cs = std::cos(e.theta);
   const double sn = std::sin(e.theta);
   return {e.center.x + cs * u - sn * v, e.center.y + sn * u + cs * v};
}

nlohmann::json to_json(const RecistAnnotation& r)
{
   return {
      {"long", {{r.long_a.x, r.long_a.y}, {r.long_b.x, r.long_b.y}}},
      {"short", {{r.short_a.x, r.short_a.y}, {r.short_b.x, r.short_b.y}}},
      {"spacing_mm", r.spacing_mm},
   };
}

RecistAnnotation recist_from_json(const nlohmann::json& j)
{
   auto pt = [](const nlohmann::json& p) { return Point2D{p.at(0).get<double>(), p.at(1).get<double>()}; };
   RecistAnnotation r;
   r.long_a = pt(j.at("long").at(0));
   r.long_b = pt(j.at("long").at(1));
   r.short_a = pt(j.at("short").at(0));
   r.short_b = pt(j.at("short").at(1));
   r.spacing_mm = j.at("spacing_mm").get<double>();
   return r;
}

} // namespace pdnet
