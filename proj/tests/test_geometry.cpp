#include "pdnet/geometry.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oracles.hpp"

using namespace pdnet;

namespace {

constexpr double kPi = std::numbers::pi;

RecistAnnotation axis_aligned(Point2D c, double a, double b, double spacing = 1.0)
{
   return {{c.x - a, c.y}, {c.x + a, c.y}, {c.x, c.y - b}, {c.x, c.y + b}, spacing};
}

Point2D rotate(Point2D p, Point2D c, double t)
{
   return Affine2D::rotation(t, c).apply(p);
}

bool same(Point2D p, std::array<int, 2> q)
{
   return p.x == q[0] && p.y == q[1];
}

} // namespace

TEST_SUITE("geometry")
{
   TEST_CASE("ellipse from an axis-aligned annotation")
   {
      const RecistAnnotation r{{0, -10}, {0, 10}, {-4, 0}, {4, 0}, 1.0};
      const auto e = ellipse_from_recist(r);
      CHECK(e.center.x == doctest::Approx(0.0));
      CHECK(e.center.y == doctest::Approx(0.0));
      CHECK(e.semi_major == doctest::Approx(10.0));
      CHECK(e.semi_minor == doctest::Approx(4.0));
      CHECK(std::abs(std::abs(e.theta) - kPi / 2) < 1e-12);
   }

   TEST_CASE("ellipse round-trip on axis-aligned cases is exact to 1e-6")
   {
      std::mt19937_64 rng(3);
      std::uniform_real_distribution<double> u(1.0, 50.0);
      for (int i = 0; i < 100; ++i) {
         const Point2D c{u(rng), u(rng)};
         double a = u(rng);
         double b = u(rng);
         if (b > a) {
            std::swap(a, b);
         }
         const auto e = ellipse_from_recist(axis_aligned(c, a, b));
         CHECK(std::abs(e.center.x - c.x) <= 1e-6);
         CHECK(std::abs(e.center.y - c.y) <= 1e-6);
         CHECK(std::abs(e.semi_major - a) <= 1e-6);
         CHECK(std::abs(e.semi_minor - b) <= 1e-6);
      }
   }

   TEST_CASE("rotating the endpoints rotates theta and keeps the semi-axes")
   {
      const Point2D c{40, 30};
      const auto r = axis_aligned(c, 12, 5);
      const double t = 30.0 * kPi / 180.0;
      const RecistAnnotation rr{rotate(r.long_a, c, t), rotate(r.long_b, c, t), rotate(r.short_a, c, t),
                                rotate(r.short_b, c, t), 1.0};
      const auto e0 = ellipse_from_recist(r);
      const auto e1 = ellipse_from_recist(rr);
      CHECK(e1.semi_major == doctest::Approx(e0.semi_major));
      CHECK(e1.semi_minor == doctest::Approx(e0.semi_minor));
      const double dtheta = std::remainder(e1.theta - e0.theta, 2 * kPi);
      CHECK(std::abs(std::abs(dtheta) - t) < 1e-9);
   }

   TEST_CASE("annotation endpoints lie within 1 px of the rasterized ellipse boundary")
   {
      // Manual-style annotation: the short axis is offset from the long-axis midpoint.
      const RecistAnnotation r{{10.2, 40.3}, {70.0, 40.5}, {40.3, 25.1}, {39.9, 55.6}, 0.7};
      const auto m = rasterize_ellipse(ellipse_from_recist(r), 96, 96);
      std::vector<Point2D> boundary;
      for (int y = 0; y < 96; ++y) {
         for (int x = 0; x < 96; ++x) {
            if (m(x, y) && (!m(x - 1, y) || !m(x + 1, y) || !m(x, y - 1) || !m(x, y + 1))) {
               boundary.push_back({double(x), double(y)});
            }
         }
      }
      // distance to the nearest boundary pixel, each pixel covering [x - 0.5, x + 0.5]
      for (const auto& p : r.endpoints()) {
         double best = 1e9;
         for (const auto& b : boundary) {
            const double dx = std::max(std::abs(p.x - b.x) - 0.5, 0.0);
            const double dy = std::max(std::abs(p.y - b.y) - 0.5, 0.0);
            best = std::min(best, std::hypot(dx, dy));
         }
         CHECK(best <= 1.0);
      }
   }

   TEST_CASE("degenerate annotation is rejected")
   {
      const RecistAnnotation r{{5, 5}, {5, 5}, {4, 5}, {6, 5}, 1.0};
      CHECK_THROWS_WITH_AS(ellipse_from_recist(r), "degenerate RECIST", std::invalid_argument);
   }

   TEST_CASE("rasterized disk and ellipse areas")
   {
      const auto disk = rasterize_ellipse({{32, 32}, 10, 10, 0}, 64, 64);
      CHECK(std::abs(double(count_foreground(disk)) - kPi * 100) <= 0.04 * kPi * 100);

      std::mt19937_64 rng(5);
      std::uniform_real_distribution<double> ax(5.0, 30.0);
      std::uniform_real_distribution<double> th(-kPi, kPi);
      for (int i = 0; i < 50; ++i) {
         double a = ax(rng);
         double b = ax(rng);
         if (b > a) {
            std::swap(a, b);
         }
         const auto m = rasterize_ellipse({{64.3, 63.7}, a, b, th(rng)}, 128, 128);
         CHECK(std::abs(double(count_foreground(m)) - kPi * a * b) <= 0.05 * kPi * a * b);
      }
   }

   TEST_CASE("thin ellipse rasterizes to a one-pixel strip")
   {
      const auto m = rasterize_ellipse({{20, 10}, 8, 0.5, 0}, 21, 41);
      for (int y = 0; y < 21; ++y) {
         for (int x = 0; x < 41; ++x) {
            CHECK(bool(m(x, y)) == (y == 10 && std::abs(x - 20) <= 8));
         }
      }
   }

   TEST_CASE("diameters of a disk")
   {
      const auto disk = rasterize_ellipse({{30, 30}, 10, 10, 0}, 61, 61);
      const auto r = diameters_from_mask(disk, 0.8);
      CHECK(std::abs(r.long_px() - 20.0) <= 1.0);
      CHECK(std::abs(r.short_px() - 20.0) <= 1.0);
      CHECK(r.long_px() >= r.short_px());
   }

   TEST_CASE("single-pixel mask has zero diameters")
   {
      BinaryMask m(9, 9, 0);
      m(4, 6) = 1;
      const auto r = diameters_from_mask(m, 1.0);
      CHECK(r.long_px() == 0.0);
      CHECK(r.short_px() == 0.0);
      for (const auto& p : r.endpoints()) {
         CHECK(p.x == 4.0);
         CHECK(p.y == 6.0);
      }
   }

   TEST_CASE("empty mask is rejected")
   {
      CHECK_THROWS_WITH_AS(diameters_from_mask(BinaryMask(5, 5, 0), 1.0), "empty mask", std::invalid_argument);
   }

   TEST_CASE("diameters equal the exhaustive boundary-pair search on random blobs")
   {
      std::mt19937_64 rng(17);
      for (int i = 0; i < 50; ++i) {
         const auto blob = oracle::random_blob(rng, 48);
         const auto [lng, sht] = oracle::exhaustive_diameters(blob, 5.0);
         const auto r = diameters_from_mask(blob, 1.0);
         CHECK(same(r.long_a, lng.a));
         CHECK(same(r.long_b, lng.b));
         CHECK(same(r.short_a, sht.a));
         CHECK(same(r.short_b, sht.b));
      }
   }

   TEST_CASE("the largest component is measured")
   {
      auto m = rasterize_ellipse({{20, 20}, 8, 5, 0.3}, 64, 64);
      m(60, 60) = 1;
      m(61, 60) = 1;
      const auto r0 = diameters_from_mask(rasterize_ellipse({{20, 20}, 8, 5, 0.3}, 64, 64), 1.0);
      const auto r1 = diameters_from_mask(m, 1.0);
      CHECK(r1.long_px() == r0.long_px());
      CHECK(r1.short_px() == r0.short_px());
   }

   TEST_CASE("diameters are covariant under 90 degree rotation")
   {
      std::mt19937_64 rng(23);
      for (int i = 0; i < 20; ++i) {
         const auto m = oracle::random_blob(rng, 40);
         BinaryMask rot(40, 40, 0);
         for (int y = 0; y < 40; ++y) {
            for (int x = 0; x < 40; ++x) {
               rot(39 - y, x) = m(x, y);
            }
         }
         const auto a = diameters_from_mask(m, 1.0);
         const auto b = diameters_from_mask(rot, 1.0);
         CHECK(std::abs(a.long_px() - b.long_px()) <= 1e-9);
         CHECK(std::abs(a.short_px() - b.short_px()) <= 1.0);
      }
   }

   TEST_CASE("click image is a radius-3 disk")
   {
      const Point2D c{20, 17};
      const auto img = make_click_image(c, 40, 50);
      CHECK(img(20, 17) == 1.0f);
      CHECK(img(30, 17) == 0.0f);
      double sum = 0;
      for (auto v : img.pixels()) {
         CHECK((v == 0.0f || v == 1.0f));
         sum += v;
      }
      // 29 lattice points lie in a closed radius-3 disk centered on a pixel.
      CHECK(sum == 29.0);
      CHECK(std::abs(sum - kPi * 9) <= 2.0);
      CHECK_THROWS_AS(make_click_image({-1, 3}, 40, 50), std::invalid_argument);
      CHECK_THROWS_AS(make_click_image({50, 3}, 40, 50), std::invalid_argument);
   }

   TEST_CASE("distance image")
   {
      const Point2D c{5, 7};
      const int h = 30;
      const int w = 40;
      const auto d = make_distance_image(c, h, w);
      CHECK(d(5, 7) == doctest::Approx(1.0));
      const double diag = std::hypot(double(h), double(w));
      for (int y = 0; y < h; ++y) {
         for (int x = 0; x < w; ++x) {
            CHECK(d(x, y) > 0.0f);
            CHECK(d(x, y) <= 1.0f);
         }
      }
      CHECK(d(39, 29) == doctest::Approx(1.0 - std::hypot(34.0, 22.0) / diag).epsilon(1e-6));
      CHECK_THROWS_AS(make_distance_image({5, 30}, h, w), std::invalid_argument);
   }

   TEST_CASE("heatmaps peak at the endpoints")
   {
      const RecistAnnotation r{{10, 12}, {40, 30}, {20, 31}, {28, 9}, 1.0};
      const auto hm = make_heatmaps(r, 48, 64, {3.0});
      const auto pts = r.endpoints();
      for (int k = 0; k < 4; ++k) {
         const auto& m = hm.maps[k];
         CHECK(m(int(pts[k].x), int(pts[k].y)) == doctest::Approx(1.0));
         CHECK(m(int(pts[k].x) + 3, int(pts[k].y)) == doctest::Approx(std::exp(-0.5)).epsilon(1e-6));
         for (auto v : m.pixels()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
         }
      }
      CHECK_THROWS_AS(make_heatmaps({{-3, 12}, {40, 30}, {20, 31}, {28, 9}, 1.0}, 48, 64, {3.0}),
                      std::invalid_argument);
   }

   TEST_CASE("heatmap argmax is the nearest pixel")
   {
      const RecistAnnotation r{{10.3, 12.6}, {40.7, 30.2}, {20.4, 31.4}, {28.1, 9.9}, 1.0};
      const auto hm = make_heatmaps(r, 48, 64, {7.0});
      const auto dec = decode_endpoints(hm, 1.0);
      const auto want = r.endpoints();
      const auto got = dec.endpoints();
      for (int k = 0; k < 4; ++k) {
         CHECK(got[k].x == std::round(want[k].x));
         CHECK(got[k].y == std::round(want[k].y));
      }
   }

   TEST_CASE("decode a single peak")
   {
      HeatmapSet hm;
      for (auto& m : hm.maps) {
         m = RealImage(100, 100, 0.0f);
         m(81, 37) = 1.0f;
      }
      const auto r = decode_endpoints(hm, 1.0);
      CHECK(r.long_a.x == 81.0);
      CHECK(r.long_a.y == 37.0);
   }

   TEST_CASE("decode breaks ties by row then column")
   {
      HeatmapSet hm;
      for (auto& m : hm.maps) {
         m = RealImage(10, 10, 0.0f);
         m(7, 2) = 1.0f;
         m(3, 5) = 1.0f;
         m(1, 5) = 1.0f;
      }
      const auto r = decode_endpoints(hm, 1.0);
      CHECK(r.long_a.x == 7.0);
      CHECK(r.long_a.y == 2.0);
   }

   TEST_CASE("constant heatmap has no peak")
   {
      HeatmapSet hm;
      for (auto& m : hm.maps) {
         m = RealImage(8, 8, 0.25f);
      }
      CHECK_THROWS_WITH_AS(decode_endpoints(hm, 1.0), "no peak", std::invalid_argument);
   }

   TEST_CASE("heatmap round-trip over random endpoints")
   {
      std::mt19937_64 rng(29);
      std::uniform_real_distribution<double> u(0.0, 63.0);
      for (double sigma : {3.0, 7.0}) {
         double worst = 0.0;
         for (int i = 0; i < 100; ++i) {
            RecistAnnotation r{{u(rng), u(rng)}, {u(rng), u(rng)}, {u(rng), u(rng)}, {u(rng), u(rng)}, 0.8};
            const auto dec = decode_endpoints(make_heatmaps(r, 64, 64, {sigma}), 0.8);
            const auto a = r.endpoints();
            const auto b = dec.endpoints();
            for (int k = 0; k < 4; ++k) {
               worst = std::max({worst, std::abs(a[k].x - b[k].x), std::abs(a[k].y - b[k].y)});
            }
            // each endpoint moves at most sqrt(2)/2 px
            CHECK(std::abs(dec.long_px() - r.long_px()) <= std::sqrt(2.0) + 1e-9);
            CHECK(std::abs(dec.short_px() - r.short_px()) <= std::sqrt(2.0) + 1e-9);
         }
         CHECK(worst <= 0.5);
      }
   }

   TEST_CASE("heatmap round-trip preserves lengths of integer endpoints")
   {
      std::mt19937_64 rng(31);
      std::uniform_int_distribution<int> u(0, 63);
      for (double sigma : {3.0, 7.0}) {
         for (int i = 0; i < 100; ++i) {
            RecistAnnotation r{{double(u(rng)), double(u(rng))}, {double(u(rng)), double(u(rng))},
                               {double(u(rng)), double(u(rng))}, {double(u(rng)), double(u(rng))}, 0.8};
            const auto dec = decode_endpoints(make_heatmaps(r, 64, 64, {sigma}), 0.8);
            CHECK(std::abs(dec.long_px() - r.long_px()) <= 1.0);
            CHECK(std::abs(dec.short_px() - r.short_px()) <= 1.0);
         }
      }
   }

   TEST_CASE("heatmap channels are ordered")
   {
      const RecistAnnotation r{{10, 12}, {40, 30}, {20, 31}, {28, 9}, 1.0};
      const RecistAnnotation swapped{r.long_b, r.long_a, r.short_a, r.short_b, 1.0};
      const auto a = make_heatmaps(r, 48, 64, {3.0});
      const auto b = make_heatmaps(swapped, 48, 64, {3.0});
      CHECK_FALSE(a.maps[0] == b.maps[0]);
      CHECK(a.maps[0] == b.maps[1]);
      CHECK(a.maps[2] == b.maps[2]);
   }

   TEST_CASE("sampled clicks fall in the half-size ellipse")
   {
      const EllipseParams e{{30, 40}, 12, 6, 0.4};
      const EllipseParams half{e.center, 6, 3, e.theta};
      for (std::uint64_t s = 0; s < 500; ++s) {
         CHECK(ellipse_contains(half, sample_click(e, s)));
      }
      const EllipseParams disk{{20, 20}, 10, 10, 0};
      for (std::uint64_t s = 0; s < 500; ++s) {
         CHECK(distance(sample_click(disk, s), disk.center) <= 5.0);
      }
   }

   TEST_CASE("sampled clicks are centered and deterministic")
   {
      const EllipseParams e{{30, 40}, 12, 6, 0.4};
      double sx = 0;
      double sy = 0;
      for (std::uint64_t s = 0; s < 10000; ++s) {
         const auto p = sample_click(e, s);
         sx += p.x;
         sy += p.y;
      }
      CHECK(std::abs(sx / 10000 - 30) <= 0.5);
      CHECK(std::abs(sy / 10000 - 40) <= 0.5);
      const auto a = sample_click(e, 12345);
      const auto b = sample_click(e, 12345);
      CHECK(a.x == b.x);
      CHECK(a.y == b.y);
   }

   TEST_CASE("annotation JSON round trip")
   {
      const RecistAnnotation r{{1.5, 2}, {30, 4.25}, {10, -1}, {12, 9}, 0.7};
      const auto j = to_json(r);
      CHECK(j.at("long").size() == 2);
      CHECK(j.at("spacing_mm").get<double>() == 0.7);
      const auto back = recist_from_json(j);
      CHECK(back.long_b.x == 30.0);
      CHECK(back.short_a.y == -1.0);
      CHECK(back.spacing_mm == 0.7);
   }

   TEST_CASE("affine inverse and compose")
   {
      const auto m = Affine2D::rotation(0.3, {5, 7}).compose(Affine2D::translation(2, -1)).compose(Affine2D::scaling(1.7));
      const Point2D p{3.25, -8.5};
      const auto q = m.inverse().apply(m.apply(p));
      CHECK(q.x == doctest::Approx(p.x));
      CHECK(q.y == doctest::Approx(p.y));
   }
}
