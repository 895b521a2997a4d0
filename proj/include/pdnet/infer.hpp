#pragma once

#include "pdnet/augment.hpp"
#include "pdnet/checkpoint.hpp"
#include "pdnet/data.hpp"
#include "pdnet/geometry.hpp"
#include "pdnet/model.hpp"

#include <optional>
#include <stdexcept>

#include <json.hpp>

namespace pdnet {

struct InferConfig {
   double crop_factor = 2.5;
   double threshold = 0.5;
   double click_gap = 0.03;   ///< max click-to-component distance, fraction of the stage-1 input size
   double min_loi_side = 8.0; ///< slice pixels
   HuWindow window;

   void validate() const;
};

nlohmann::json to_json(const InferConfig& cfg);
InferConfig infer_config_from_json(const nlohmann::json& j);

class NoLesionAtClick : public std::runtime_error {
public:
   NoLesionAtClick() : std::runtime_error("no lesion at click") {}
};

/// Model output for one crop.
struct CropPrediction {
   RealImage prob;         ///< sigmoid of the full-resolution mask logits, input space
   HeatmapSet heatmaps;    ///< input space
   BinaryMask component;   ///< thresholded component nearest the click, input space
   Point2D click_input;
};

CropPrediction predict_crop(PdNet& model, const RealImage& image, float pad, const LoiCrop& crop, Point2D click_slice,
                            double threshold = 0.5);

/// Input-space mask resampled onto the slice grid.
BinaryMask mask_to_slice(const BinaryMask& mask, const LoiCrop& crop, int height, int width);

struct MeasurementResult {
   BinaryMask mask;        ///< slice space
   RecistAnnotation recist; ///< slice pixels, slice spacing
   LoiCrop loi;
   BinaryMask stage1_mask; ///< slice space
   bool stage2_fallback = false;
};

/// Stage 1 on the full slice, then stage 2 on the lesion-of-interest crop.
/// Throws NoLesionAtClick when stage 1 finds nothing near the click.
MeasurementResult infer_two_stage(const CtSlice& slice, Point2D click, PdNet& stage1, PdNet& stage2,
                                  const InferConfig& cfg = {});

/// Stage-2 measurement on a crop centered at `center` of side crop_factor x `long_px`.
MeasurementResult infer_stage2(const RealImage& image, float pad, double spacing_mm, Point2D click, Point2D center,
                               double long_px, PdNet& stage2, const InferConfig& cfg = {});

float normalized_pad(const CtSlice& slice, HuWindow window = {});

} // namespace pdnet
