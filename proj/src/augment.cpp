#include "pdnet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

namespace pdnet {

void AugmentConfig::validate() const
{
   if (rot_deg[0] > rot_deg[1] || stage1_crop[0] > stage1_crop[1] || stage2_crop_factor[0] > stage2_crop_factor[1]) {
      throw std::invalid_argument("AugmentConfig: empty range");
   }
   if (!(stage1_crop[0] > 0.0) || stage1_crop[1] > 512.0 || !(stage2_crop_factor[0] > 0.0)) {
      throw std::invalid_argument("AugmentConfig: crop range out of bounds");
   }
   if (!(infer_crop_factor > 1.0)) {
      throw std::invalid_argument("AugmentConfig: infer_crop_factor must exceed 1");
   }
}

nlohmann::json to_json(const AugmentConfig& c)
{
   return {{"rot_deg", c.rot_deg},
           {"stage1_crop", c.stage1_crop},
           {"stage2_crop_factor", c.stage2_crop_factor},
           {"infer_crop_factor", c.infer_crop_factor},
           {"max_resample", c.max_resample}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j)
{
   AugmentConfig c;
   c.rot_deg = j.value("rot_deg", c.rot_deg);
   c.stage1_crop = j.value("stage1_crop", c.stage1_crop);
   c.stage2_crop_factor = j.value("stage2_crop_factor", c.stage2_crop_factor);
   c.infer_crop_factor = j.value("infer_crop_factor", c.infer_crop_factor);
   c.max_resample = j.value("max_resample", c.max_resample);
   c.validate();
   return c;
}

Affine2D LoiCrop::input_to_slice() const
{
   const double s = scale();
   return {s, 0, origin.x + 0.5 * s, 0, s, origin.y + 0.5 * s};
}

LoiCrop LoiCrop::centered(Point2D center, double side, int input_size)
{
   return {{center.x - side / 2.0, center.y - side / 2.0}, side, input_size};
}

LoiCrop LoiCrop::full_slice(int height, int width, int input_size)
{
   const double side = std::max(height, width);
   return centered({(width - 1) / 2.0, (height - 1) / 2.0}, side, input_size);
}

nlohmann::json to_json(const LoiCrop& loi)
{
   return {{"origin", {loi.origin.x, loi.origin.y}},
           {"side", loi.side},
           {"scale", loi.scale()},
           {"input_size", loi.input_size}};
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b)
{
   auto mix = [](std::uint64_t z) {
      z += 0x9e3779b97f4a7c15ULL;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      return z ^ (z >> 31);
   };
   return mix(mix(mix(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

namespace {

cv::Mat affine_mat(const Affine2D& m)
{
   return (cv::Mat_<double>(2, 3) << m.a, m.b, m.tx, m.c, m.d, m.ty);
}

class Uniform {
public:
   explicit Uniform(std::uint64_t seed) : rng_(seed) {}
   double operator()(double lo, double hi) { return lo + (hi - lo) * (double(rng_() >> 11) * 0x1.0p-53); }

private:
   std::mt19937_64 rng_;
};

bool endpoints_inside(const RecistAnnotation& r, int size)
{
   for (const auto& p : r.endpoints()) {
      if (!point_in_image(p, size, size)) {
         return false;
      }
   }
   return true;
}

TrainingSample make_sample(const RealImage& image, const TriStateMask& mask, const RecistAnnotation& recist,
                           const Affine2D& input_to_slice, int size, float pad)
{
   TrainingSample s;
   s.image = warp_image(image, input_to_slice, size, pad);
   s.mask = warp_labels(mask, input_to_slice, size);
   const double scale = std::sqrt(std::abs(input_to_slice.a * input_to_slice.d - input_to_slice.b * input_to_slice.c));
   s.recist = map_recist(recist, input_to_slice.inverse(), recist.spacing_mm * scale);
   s.input_to_slice = input_to_slice;
   return s;
}

} // namespace

RealImage warp_image(const RealImage& src, const Affine2D& input_to_src, int size, float pad)
{
   cv::Mat in(src.height(), src.width(), CV_32F, const_cast<float*>(src.data()));
   RealImage out(size, size, pad);
   cv::Mat dst(size, size, CV_32F, out.data());
   cv::warpAffine(in, dst, affine_mat(input_to_src), dst.size(), cv::INTER_LINEAR | cv::WARP_INVERSE_MAP,
                  cv::BORDER_CONSTANT, cv::Scalar(pad));
   return out;
}

TriStateMask warp_labels(const TriStateMask& src, const Affine2D& input_to_src, int size)
{
   const auto& raw = src.raw();
   cv::Mat in(raw.height(), raw.width(), CV_8U, const_cast<std::uint8_t*>(raw.data()));
   cv::Mat dst(size, size, CV_8U, cv::Scalar(0));
   cv::warpAffine(in, dst, affine_mat(input_to_src), dst.size(), cv::INTER_NEAREST | cv::WARP_INVERSE_MAP,
                  cv::BORDER_CONSTANT, cv::Scalar(0));
   TriStateMask out(size, size);
   for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
         out.set(x, y, static_cast<Label>(dst.at<std::uint8_t>(y, x)));
      }
   }
   return out;
}

BinaryMask warp_mask(const BinaryMask& src, const Affine2D& input_to_src, int size)
{
   cv::Mat in(src.height(), src.width(), CV_8U, const_cast<std::uint8_t*>(src.data()));
   BinaryMask out(size, size, 0);
   cv::Mat dst(size, size, CV_8U, out.data());
   cv::warpAffine(in, dst, affine_mat(input_to_src), dst.size(), cv::INTER_NEAREST | cv::WARP_INVERSE_MAP,
                  cv::BORDER_CONSTANT, cv::Scalar(0));
   return out;
}

RealImage unwarp_probability(const RealImage& prob, const Affine2D& input_to_slice, int height, int width)
{
   cv::Mat in(prob.height(), prob.width(), CV_32F, const_cast<float*>(prob.data()));
   RealImage out(height, width, 0.0f);
   cv::Mat dst(height, width, CV_32F, out.data());
   cv::warpAffine(in, dst, affine_mat(input_to_slice.inverse()), dst.size(), cv::INTER_LINEAR | cv::WARP_INVERSE_MAP,
                  cv::BORDER_CONSTANT, cv::Scalar(0));
   return out;
}

RecistAnnotation map_recist(const RecistAnnotation& r, const Affine2D& map, double spacing_mm)
{
   return {map.apply(r.long_a), map.apply(r.long_b), map.apply(r.short_a), map.apply(r.short_b), spacing_mm};
}

std::vector<Point2D> lesion_pixels(const TriStateMask& mask)
{
   std::vector<Point2D> pts;
   for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
         if (mask(x, y) != Label::Background) {
            pts.push_back({double(x), double(y)});
         }
      }
   }
   return pts;
}

TrainingSample augment_stage1(const RealImage& image, const TriStateMask& mask, const RecistAnnotation& recist,
                              const AugmentConfig& cfg, std::uint64_t seed, int input_size, float pad)
{
   require_same_shape(image, mask.raw(), "augment_stage1");
   const double n = input_size;
   const auto resized_to_slice = LoiCrop::full_slice(image.height(), image.width(), input_size).input_to_slice();
   const Point2D frame_center{(n - 1) / 2.0, (n - 1) / 2.0};
   Uniform uniform(seed);

   for (int attempt = 0; attempt < cfg.max_resample; ++attempt) {
      const double theta = uniform(cfg.rot_deg[0], cfg.rot_deg[1]) * std::numbers::pi / 180.0;
      const double s = std::min(n, uniform(cfg.stage1_crop[0], cfg.stage1_crop[1]) * n / 512.0);
      const double ex = uniform(-0.5, n - 0.5 - s);
      const double ey = uniform(-0.5, n - 0.5 - s);
      const double k = s / n;
      const Affine2D crop{k, 0, ex + 0.5 * k, 0, k, ey + 0.5 * k};
      const auto map = resized_to_slice.compose(Affine2D::rotation(theta, frame_center)).compose(crop);
      auto sample = make_sample(image, mask, recist, map, input_size, pad);
      if (endpoints_inside(sample.recist, input_size) && sample.mask.count(Label::Foreground) > 0) {
         return sample;
      }
   }
   return make_sample(image, mask, recist, resized_to_slice, input_size, pad);
}

Affine2D stage2_transform(Point2D lesion_center, double side, double theta_rad, Point2D offset, int input_size)
{
   const double k = side / input_size;
   const double ex = lesion_center.x + offset.x - side / 2.0;
   const double ey = lesion_center.y + offset.y - side / 2.0;
   const Affine2D crop{k, 0, ex + 0.5 * k, 0, k, ey + 0.5 * k};
   return Affine2D::rotation(theta_rad, lesion_center).compose(crop);
}

TrainingSample augment_stage2(const RealImage& image, const TriStateMask& mask, const RecistAnnotation& recist,
                              const AugmentConfig& cfg, std::uint64_t seed, int input_size, float pad)
{
   require_same_shape(image, mask.raw(), "augment_stage2");
   auto pts = lesion_pixels(mask);
   for (const auto& p : recist.endpoints()) {
      pts.push_back(p);
   }
   double min_x = std::numeric_limits<double>::infinity();
   double min_y = min_x;
   double max_x = -min_x;
   double max_y = -min_x;
   for (const auto& p : pts) {
      min_x = std::min(min_x, p.x);
      max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
   }
   const Point2D center{(min_x + max_x) / 2.0, (min_y + max_y) / 2.0};

   Uniform uniform(seed);
   const double theta = uniform(cfg.rot_deg[0], cfg.rot_deg[1]) * std::numbers::pi / 180.0;
   const double factor = uniform(cfg.stage2_crop_factor[0], cfg.stage2_crop_factor[1]);

   // Lesion extent in the rotated crop frame.
   const auto to_frame = Affine2D::rotation(theta, center).inverse();
   double lo_x = std::numeric_limits<double>::infinity();
   double lo_y = lo_x;
   double hi_x = -lo_x;
   double hi_y = -lo_x;
   for (const auto& p : pts) {
      const auto r = to_frame.apply(p);
      lo_x = std::min(lo_x, r.x);
      hi_x = std::max(hi_x, r.x);
      lo_y = std::min(lo_y, r.y);
      hi_y = std::max(hi_y, r.y);
   }
   const double extent = std::max(hi_x - lo_x, hi_y - lo_y);
   double side = std::max(factor * recist.long_px(), 8.0);
   // Room for every lesion pixel center plus a half output pixel on each side.
   side = std::max(side, (extent + 1.0) * input_size / (input_size - 1.0));
   const double half_px = 0.5 * side / input_size;

   // Crop edge e must satisfy e + half_px <= lo and e + side - half_px >= hi.
   auto pick_edge = [&](double lo, double hi) {
      const double a = hi + half_px - side;
      const double b = lo - half_px;
      return a <= b ? uniform(a, b) : 0.5 * (a + b);
   };
   const double ex = pick_edge(lo_x, hi_x);
   const double ey = pick_edge(lo_y, hi_y);
   const Point2D offset{ex + side / 2.0 - center.x, ey + side / 2.0 - center.y};
   const auto map = stage2_transform(center, side, theta, offset, input_size);
   return make_sample(image, mask, recist, map, input_size, pad);
}

} // namespace pdnet
