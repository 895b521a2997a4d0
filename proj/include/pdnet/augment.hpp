#pragma once

#include "pdnet/geometry.hpp"
#include "pdnet/image.hpp"
#include "pdnet/pseudomask.hpp"

#include <array>
#include <cstdint>

#include <json.hpp>

namespace pdnet {

struct AugmentConfig {
   std::array<double, 2> rot_deg{-10.0, 10.0};
   std::array<double, 2> stage1_crop{480.0, 512.0}; ///< crop side in a 512-pixel frame; scaled to the input size
   std::array<double, 2> stage2_crop_factor{1.5, 3.5};
   double infer_crop_factor = 2.5;
   int max_resample = 16;

   void validate() const;
};

nlohmann::json to_json(const AugmentConfig& cfg);
AugmentConfig augment_config_from_json(const nlohmann::json& j);

/// Square crop of a slice resampled to the model input. `origin` is the top-left corner of
/// the crop in slice pixel coordinates (pixel i spans [i - 0.5, i + 0.5]).
struct LoiCrop {
   Point2D origin;
   double side = 0.0;
   int input_size = 0;

   double scale() const { return side / input_size; }
   Point2D to_slice(Point2D q) const { return {origin.x + (q.x + 0.5) * scale(), origin.y + (q.y + 0.5) * scale()}; }
   Point2D to_input(Point2D p) const { return {(p.x - origin.x) / scale() - 0.5, (p.y - origin.y) / scale() - 0.5}; }
   /// Input pixel -> slice pixel map.
   Affine2D input_to_slice() const;

   static LoiCrop centered(Point2D center, double side, int input_size);
   /// The whole slice, padded to a square.
   static LoiCrop full_slice(int height, int width, int input_size);
};

nlohmann::json to_json(const LoiCrop& loi);

/// Supervision for one training draw in model-input coordinates.
struct TrainingSample {
   RealImage image;          ///< normalized CT, input_size x input_size
   TriStateMask mask;
   RecistAnnotation recist;  ///< endpoints in input pixels
   Affine2D input_to_slice;  ///< maps input pixels back to the source slice
};

/// Bilinear resample of `src` at `input_to_src` for each output pixel; `pad` outside.
RealImage warp_image(const RealImage& src, const Affine2D& input_to_src, int size, float pad);
/// Nearest-neighbour resample; background outside.
TriStateMask warp_labels(const TriStateMask& src, const Affine2D& input_to_src, int size);
BinaryMask warp_mask(const BinaryMask& src, const Affine2D& input_to_src, int size);
/// Resamples an input-space probability map back onto the slice grid (bilinear, 0 outside).
RealImage unwarp_probability(const RealImage& prob, const Affine2D& input_to_slice, int height, int width);

RecistAnnotation map_recist(const RecistAnnotation& r, const Affine2D& map, double spacing_mm);

/// Stage-1 draw: resize the slice to the input size, rotate, crop a random square of side s,
/// resize back. `image` is the normalized slice; `pad` is its minimum.
TrainingSample augment_stage1(const RealImage& image, const TriStateMask& mask, const RecistAnnotation& recist,
                              const AugmentConfig& cfg, std::uint64_t seed, int input_size, float pad);

/// Stage-2 draw: square crop of side factor x long axis around the lesion with a random offset
/// that keeps every lesion pixel inside, rotated, resized to the input size.
TrainingSample augment_stage2(const RealImage& image, const TriStateMask& mask, const RecistAnnotation& recist,
                              const AugmentConfig& cfg, std::uint64_t seed, int input_size, float pad);

/// Explicit stage-2 crop (no randomness); used for evaluation and by tests.
Affine2D stage2_transform(Point2D lesion_center, double side, double theta_rad, Point2D offset, int input_size);

/// Lesion pixel centers (foreground and ignore) of a tri-state mask.
std::vector<Point2D> lesion_pixels(const TriStateMask& mask);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

} // namespace pdnet
