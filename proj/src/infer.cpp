#include "pdnet/infer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <torch/torch.h>

namespace pdnet {

void InferConfig::validate() const
{
   if (!(crop_factor > 1.0)) {
      throw std::invalid_argument("InferConfig: crop_factor must exceed 1");
   }
   if (!(threshold > 0.0 && threshold < 1.0)) {
      throw std::invalid_argument("InferConfig: threshold must lie in (0, 1)");
   }
   if (click_gap < 0.0 || !(min_loi_side > 0.0)) {
      throw std::invalid_argument("InferConfig: negative click_gap or min_loi_side");
   }
}

nlohmann::json to_json(const InferConfig& c)
{
   return {{"crop_factor", c.crop_factor},
           {"threshold", c.threshold},
           {"click_gap", c.click_gap},
           {"min_loi_side", c.min_loi_side},
           {"window", {c.window.lo, c.window.hi}}};
}

InferConfig infer_config_from_json(const nlohmann::json& j)
{
   InferConfig c;
   c.crop_factor = j.value("crop_factor", c.crop_factor);
   c.threshold = j.value("threshold", c.threshold);
   c.click_gap = j.value("click_gap", c.click_gap);
   c.min_loi_side = j.value("min_loi_side", c.min_loi_side);
   if (j.contains("window")) {
      c.window.lo = j.at("window").at(0).get<double>();
      c.window.hi = j.at("window").at(1).get<double>();
   }
   c.validate();
   return c;
}

float normalized_pad(const CtSlice& slice, HuWindow window)
{
   return static_cast<float>(
       std::clamp((double(slice_minimum(slice)) - window.lo) / (window.hi - window.lo), 0.0, 1.0));
}

namespace {

Point2D clamp_to(Point2D p, int height, int width)
{
   return {std::clamp(p.x, 0.0, width - 1.0), std::clamp(p.y, 0.0, height - 1.0)};
}

double distance_to_mask(const BinaryMask& mask, Point2D p)
{
   double best = std::numeric_limits<double>::infinity();
   for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
         if (mask(x, y) != 0) {
            best = std::min(best, std::hypot(x - p.x, y - p.y));
         }
      }
   }
   return best;
}

struct Box {
   Point2D center;
   double extent = 0.0;
};

Box bounding_box(const BinaryMask& mask)
{
   int x0 = mask.width();
   int y0 = mask.height();
   int x1 = -1;
   int y1 = -1;
   for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
         if (mask(x, y) != 0) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
         }
      }
   }
   return {{(x0 + x1) / 2.0, (y0 + y1) / 2.0}, double(std::max(x1 - x0, y1 - y0) + 1)};
}

RecistAnnotation ordered(RecistAnnotation r)
{
   if (r.short_px() > r.long_px()) {
      std::swap(r.long_a, r.short_a);
      std::swap(r.long_b, r.short_b);
   }
   return r;
}

} // namespace

CropPrediction predict_crop(PdNet& model, const RealImage& image, float pad, const LoiCrop& crop, Point2D click_slice,
                            double threshold)
{
   const int n = crop.input_size;
   if (model->config().input_size != n) {
      throw std::invalid_argument("predict_crop: crop size differs from the model input");
   }
   torch::NoGradGuard no_grad;
   model->eval();
   CropPrediction p;
   const auto input = warp_image(image, crop.input_to_slice(), n, pad);
   p.click_input = clamp_to(crop.to_input(click_slice), n, n);
   const auto ct = to_tensor(input).unsqueeze(0);
   const auto prior = make_prior3(input, p.click_input).unsqueeze(0);
   const auto out = model->forward(ct, prior);
   p.prob = to_image(torch::sigmoid(out.mask_logits())[0]);
   const auto heat = out.heatmaps()[0];
   for (int c = 0; c < 4; ++c) {
      p.heatmaps.maps[c] = to_image(heat[c]);
   }
   BinaryMask bin(n, n, 0);
   for (std::size_t i = 0; i < bin.size(); ++i) {
      bin[i] = p.prob[i] > threshold ? 1 : 0;
   }
   p.component = component_nearest(bin, p.click_input);
   return p;
}

BinaryMask mask_to_slice(const BinaryMask& mask, const LoiCrop& crop, int height, int width)
{
   RealImage as_float(mask.height(), mask.width(), 0.0f);
   for (std::size_t i = 0; i < mask.size(); ++i) {
      as_float[i] = mask[i] != 0 ? 1.0f : 0.0f;
   }
   const auto back = unwarp_probability(as_float, crop.input_to_slice(), height, width);
   BinaryMask out(height, width, 0);
   for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = back[i] >= 0.5f ? 1 : 0;
   }
   return out;
}

MeasurementResult infer_stage2(const RealImage& image, float pad, double spacing_mm, Point2D click, Point2D center,
                               double long_px, PdNet& stage2, const InferConfig& cfg)
{
   const int h = image.height();
   const int w = image.width();
   MeasurementResult r;
   const double side = std::max(cfg.crop_factor * long_px, cfg.min_loi_side);
   r.loi = LoiCrop::centered(center, side, stage2->config().input_size);
   const auto p2 = predict_crop(stage2, image, pad, r.loi, click, cfg.threshold);
   if (count_foreground(p2.component) > 0) {
      r.mask = component_nearest(mask_to_slice(p2.component, r.loi, h, w), click);
   }
   auto recist = decode_endpoints(p2.heatmaps, spacing_mm);
   recist.long_a = clamp_to(r.loi.to_slice(recist.long_a), h, w);
   recist.long_b = clamp_to(r.loi.to_slice(recist.long_b), h, w);
   recist.short_a = clamp_to(r.loi.to_slice(recist.short_a), h, w);
   recist.short_b = clamp_to(r.loi.to_slice(recist.short_b), h, w);
   r.recist = ordered(recist);
   return r;
}

MeasurementResult infer_two_stage(const CtSlice& slice, Point2D click, PdNet& stage1, PdNet& stage2,
                                  const InferConfig& cfg)
{
   cfg.validate();
   const int h = slice.height();
   const int w = slice.width();
   if (!point_in_image(click, h, w)) {
      throw std::invalid_argument("click outside the slice");
   }
   const auto image = window_normalize(slice, cfg.window);
   const float pad = normalized_pad(slice, cfg.window);

   const auto crop1 = LoiCrop::full_slice(h, w, stage1->config().input_size);
   const auto p1 = predict_crop(stage1, image, pad, crop1, click, cfg.threshold);
   if (count_foreground(p1.component) == 0 ||
       distance_to_mask(p1.component, p1.click_input) > cfg.click_gap * crop1.input_size) {
      throw NoLesionAtClick();
   }
   auto stage1_mask = mask_to_slice(p1.component, crop1, h, w);
   if (count_foreground(stage1_mask) == 0) {
      // Sub-pixel component after resampling: keep the slice pixel under its center.
      const auto c = clamp_to(crop1.to_slice(bounding_box(p1.component).center), h, w);
      stage1_mask(int(std::lround(c.x)), int(std::lround(c.y))) = 1;
   }
   const auto box = bounding_box(stage1_mask);
   double long_px = box.extent;
   try {
      long_px = std::max(diameters_from_mask(stage1_mask, slice.spacing_mm).long_px(), 1.0);
   } catch (const std::invalid_argument&) {
   }

   auto r = infer_stage2(image, pad, slice.spacing_mm, click, box.center, long_px, stage2, cfg);
   if (count_foreground(r.mask) == 0) {
      r.mask = stage1_mask;
      r.stage2_fallback = true;
   }
   r.stage1_mask = std::move(stage1_mask);
   return r;
}

} // namespace pdnet
