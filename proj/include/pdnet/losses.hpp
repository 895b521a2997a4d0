#pragma once

#include <optional>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace pdnet {

struct LossConfig {
   double lambda = 0.01;     ///< weight of the segmentation term
   bool honor_ignore = true; ///< exclude IGNORE pixels from the segmentation losses

   void validate() const;
};

nlohmann::json to_json(const LossConfig& cfg);
LossConfig loss_config_from_json(const nlohmann::json& j);

/// Mean of (pred - target)^2 over elements where `ignore` is zero. An empty valid set gives 0.
torch::Tensor mse_masked(const torch::Tensor& pred, const torch::Tensor& target,
                         const std::optional<torch::Tensor>& ignore = std::nullopt);

/// 1 - I/U with I = sum(p g), U = sum(p + g - p g) over non-ignored elements; 0 when U = 0.
/// Tensors of rank >= 3 are treated as batches along dim 0 and the per-sample losses averaged.
/// Throws std::invalid_argument when pred leaves [0, 1].
torch::Tensor iou_loss(const torch::Tensor& pred_prob, const torch::Tensor& target,
                       const std::optional<torch::Tensor>& ignore = std::nullopt);

/// Mask supervision at one side-output resolution.
struct MaskTarget {
   torch::Tensor soft;   ///< area-averaged foreground fraction, MSE target
   torch::Tensor binary; ///< soft >= 0.5, IoU target
   torch::Tensor ignore; ///< any IGNORE pixel in the cell
};

/// Downsamples full-resolution foreground / ignore maps ([B,1,S,S]) to each requested size.
std::vector<MaskTarget> make_mask_targets(const torch::Tensor& foreground, const torch::Tensor& ignore,
                                          const std::vector<std::int64_t>& sizes);

/// Sum over side outputs of mse_masked + iou_loss on sigmoid(logits).
torch::Tensor seg_loss(const std::vector<torch::Tensor>& side_logits, const std::vector<MaskTarget>& targets,
                       const LossConfig& cfg = {});

/// Sum over the three heatmap side outputs of the per-map mean squared error.
torch::Tensor diam_loss(const std::vector<torch::Tensor>& side_heatmaps, const std::vector<torch::Tensor>& targets);

/// lambda * l_seg + (1 - lambda) * l_dp. Throws on NaN input.
torch::Tensor total_loss(const torch::Tensor& l_seg, const torch::Tensor& l_dp, const LossConfig& cfg = {});
double total_loss(double l_seg, double l_dp, const LossConfig& cfg = {});

} // namespace pdnet
