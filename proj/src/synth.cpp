#include "pdnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace pdnet {

namespace {

constexpr double kBodyHu = 40.0;
constexpr double kAirHu = -1000.0;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt)
{
   // splitmix64 finalizer
   std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
   z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
   return z ^ (z >> 31);
}

class Rng {
public:
   explicit Rng(std::uint64_t seed) : engine_(seed) {}
   double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
   double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
   double normal()
   {
      const double u1 = std::max(uniform(), 1e-300);
      const double u2 = uniform();
      return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
   }

private:
   std::mt19937_64 engine_;
};

struct LesionShape {
   EllipseParams ellipse;
   std::vector<double> coeff;
   std::vector<double> phase;
   double amplitude = 0.0;

   bool contains(Point2D p) const
   {
      if (amplitude == 0.0) {
         return ellipse_contains(ellipse, p);
      }
      const double cs = std::cos(ellipse.theta);
      const double sn = std::sin(ellipse.theta);
      const double dx = p.x - ellipse.center.x;
      const double dy = p.y - ellipse.center.y;
      const double u = cs * dx + sn * dy;
      const double v = -sn * dx + cs * dy;
      const double rho2 = (u * u) / (ellipse.semi_major * ellipse.semi_major) +
                          (v * v) / (ellipse.semi_minor * ellipse.semi_minor);
      const double phi = std::atan2(v / ellipse.semi_minor, u / ellipse.semi_major);
      double f = 1.0;
      for (std::size_t k = 0; k < coeff.size(); ++k) {
         f += amplitude * coeff[k] * std::cos(double(k + 2) * phi + phase[k]);
      }
      return rho2 <= f * f;
   }
};

} // namespace

SyntheticSample synth_sample(int size, std::uint64_t seed, const SynthOptions& opts)
{
   if (size < 16) {
      throw std::invalid_argument("synth_sample: size must be at least 16");
   }
   Rng rng(seed);
   const double s = size;
   const Point2D body_center{(s - 1) / 2, (s - 1) / 2};
   const EllipseParams body{body_center, 0.47 * s, 0.41 * s, 0.0};

   LesionShape lesion;
   const double a = rng.uniform(opts.min_radius_frac, opts.max_radius_frac) * s;
   const double b = a * rng.uniform(opts.min_axis_ratio, 1.0);
   lesion.ellipse.semi_major = a;
   lesion.ellipse.semi_minor = b;
   lesion.ellipse.theta = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
   lesion.amplitude = opts.perturbation;
   const int n_terms = std::max(0, opts.harmonics - 1);
   double norm = 0.0;
   for (int k = 0; k < n_terms; ++k) {
      lesion.coeff.push_back(rng.uniform(-1.0, 1.0));
      lesion.phase.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
      norm += std::abs(lesion.coeff.back());
   }
   for (auto& c : lesion.coeff) {
      c /= std::max(norm, 1.0);
   }
   // Keep the whole lesion (with perturbation headroom) inside the body.
   const double reach = a * (1.0 + opts.perturbation) + 2.0;
   const double span_x = std::max(0.0, body.semi_major - reach);
   const double span_y = std::max(0.0, body.semi_minor - reach);
   for (;;) {
      const double ox = rng.uniform(-1.0, 1.0);
      const double oy = rng.uniform(-1.0, 1.0);
      if (ox * ox + oy * oy <= 1.0) {
         lesion.ellipse.center = {body_center.x + ox * span_x, body_center.y + oy * span_y};
         break;
      }
   }

   SyntheticSample out;
   out.shape = lesion.ellipse;
   out.mask = BinaryMask(size, size, 0);
   cv::Mat weight(size, size, CV_32F, cv::Scalar(0));
   for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
         const bool in = lesion.contains({double(x), double(y)});
         out.mask(x, y) = in ? 1 : 0;
         weight.at<float>(y, x) = in ? 1.0f : 0.0f;
      }
   }
   if (opts.blur_sigma > 0.0) {
      cv::GaussianBlur(weight, weight, cv::Size(0, 0), opts.blur_sigma, opts.blur_sigma, cv::BORDER_REPLICATE);
   }

   const HuWindow window;
   const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
   const double contrast = sign * rng.uniform(opts.contrast_min, opts.contrast_max) * (window.hi - window.lo);

   struct Wave {
      double fx, fy, phase, amp;
   };
   std::vector<Wave> waves;
   for (int k = 0; k < 3; ++k) {
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double cycles = rng.uniform(1.0, 4.0);
      waves.push_back({std::cos(angle) * cycles * 2 * std::numbers::pi / s,
                       std::sin(angle) * cycles * 2 * std::numbers::pi / s, rng.uniform(0.0, 2 * std::numbers::pi),
                       opts.texture_hu / 3.0});
   }

   out.slice.id = "synth";
   out.slice.spacing_mm = rng.uniform(opts.spacing_min_mm, opts.spacing_max_mm);
   out.slice.pixels = Image<std::int16_t>(size, size, 0);
   for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
         double hu = kAirHu;
         if (ellipse_contains(body, {double(x), double(y)})) {
            hu = kBodyHu;
            for (const auto& w : waves) {
               hu += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
            }
            hu += contrast * weight.at<float>(y, x);
         }
         hu += opts.noise_hu * rng.normal();
         out.slice.pixels(x, y) = static_cast<std::int16_t>(std::clamp(std::lround(hu), -32768L, 32767L));
      }
   }

   out.recist = diameters_from_mask(out.mask, out.slice.spacing_mm);
   return out;
}

DatasetIndex synth_dataset(int n, int size, std::uint64_t seed, const fs::path& out_dir, const SynthOptions& opts)
{
   if (n < 1) {
      throw std::invalid_argument("synth_dataset: n must be at least 1");
   }
   DatasetIndex index;
   index.root = out_dir;
   fs::create_directories(out_dir / "slices");
   fs::create_directories(out_dir / "masks");
   for (int i = 0; i < n; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "synth_%04d", i);
      char patient[32];
      std::snprintf(patient, sizeof patient, "P%04d", i / 2);

      auto sample = synth_sample(size, mix_seed(seed, std::uint64_t(i)), opts);
      sample.slice.id = id;
      DatasetRecord r;
      r.id = id;
      r.image_path = fs::path("slices") / (std::string(id) + ".png");
      r.mask_path = fs::path("masks") / (std::string(id) + ".png");
      r.spacing_mm = sample.slice.spacing_mm;
      r.recist = sample.recist;
      r.split = "train";
      r.patient_id = patient;
      save_slice(out_dir / r.image_path, sample.slice);
      save_mask(out_dir / *r.mask_path, sample.mask);
      index.records.push_back(std::move(r));
   }
   if (opts.test_fraction > 0.0) {
      split_by_patient(index, 1.0 - opts.test_fraction, mix_seed(seed, 0xC0FFEE));
   }
   write_index(index, out_dir / "index.csv");
   return index;
}

} // namespace pdnet
