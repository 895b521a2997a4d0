#include "pdnet/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace pdnet {

void LossConfig::validate() const
{
   if (!(lambda > 0.0 && lambda < 1.0)) {
      throw std::invalid_argument("LossConfig: lambda must lie in (0, 1)");
   }
}

nlohmann::json to_json(const LossConfig& cfg)
{
   return {{"lambda", cfg.lambda}, {"honor_ignore", cfg.honor_ignore}};
}

LossConfig loss_config_from_json(const nlohmann::json& j)
{
   LossConfig cfg;
   cfg.lambda = j.value("lambda", cfg.lambda);
   cfg.honor_ignore = j.value("honor_ignore", cfg.honor_ignore);
   cfg.validate();
   return cfg;
}

namespace {

torch::Tensor valid_weights(const torch::Tensor& like, const std::optional<torch::Tensor>& ignore)
{
   if (!ignore) {
      return torch::ones_like(like);
   }
   if (ignore->sizes() != like.sizes()) {
      throw std::invalid_argument("loss: ignore mask shape mismatch");
   }
   return 1.0 - (*ignore != 0).to(like.scalar_type());
}

} // namespace

torch::Tensor mse_masked(const torch::Tensor& pred, const torch::Tensor& target, const std::optional<torch::Tensor>& ignore)
{
   if (pred.sizes() != target.sizes()) {
      throw std::invalid_argument("mse_masked: shape mismatch");
   }
   const auto valid = valid_weights(pred, ignore);
   const auto n = valid.sum();
   const auto sq = (valid * (pred - target).pow(2)).sum();
   if (n.item<double>() == 0.0) {
      return sq * 0.0;
   }
   return sq / n;
}

torch::Tensor iou_loss(const torch::Tensor& pred_prob, const torch::Tensor& target, const std::optional<torch::Tensor>& ignore)
{
   if (pred_prob.sizes() != target.sizes()) {
      throw std::invalid_argument("iou_loss: shape mismatch");
   }
   if (pred_prob.numel() > 0 && (pred_prob.min().item<double>() < 0.0 || pred_prob.max().item<double>() > 1.0)) {
      throw std::invalid_argument("iou_loss: prediction outside [0, 1]");
   }
   const auto valid = valid_weights(pred_prob, ignore);
   const auto p = pred_prob * valid;
   const auto g = target.to(pred_prob.scalar_type()) * valid;
   if (pred_prob.dim() >= 3) {
      const std::vector<std::int64_t> dims = [&] {
         std::vector<std::int64_t> d;
         for (std::int64_t i = 1; i < pred_prob.dim(); ++i) {
            d.push_back(i);
         }
         return d;
      }();
      const auto inter = (p * g).sum(dims);
      const auto uni = (p + g - p * g).sum(dims);
      const auto safe = torch::where(uni > 0, uni, torch::ones_like(uni));
      return torch::where(uni > 0, 1.0 - inter / safe, torch::zeros_like(uni)).mean();
   }
   const auto inter = (p * g).sum();
   const auto uni = (p + g - p * g).sum();
   if (uni.item<double>() == 0.0) {
      return inter * 0.0;
   }
   return 1.0 - inter / uni;
}

std::vector<MaskTarget> make_mask_targets(const torch::Tensor& foreground, const torch::Tensor& ignore,
                                          const std::vector<std::int64_t>& sizes)
{
   if (foreground.dim() != 4 || foreground.sizes() != ignore.sizes()) {
      throw std::invalid_argument("make_mask_targets: expected matching [B,1,S,S] maps");
   }
   const auto full = foreground.size(2);
   std::vector<MaskTarget> out;
   for (auto s : sizes) {
      MaskTarget t;
      if (s == full) {
         t.soft = foreground;
         t.ignore = ignore;
      } else {
         if (full % s != 0) {
            throw std::invalid_argument("make_mask_targets: side size must divide the input size");
         }
         const auto f = full / s;
         t.soft = torch::avg_pool2d(foreground, {f, f}, {f, f});
         t.ignore = torch::max_pool2d(ignore, {f, f}, {f, f});
      }
      t.binary = (t.soft >= 0.5).to(foreground.scalar_type());
      out.push_back(std::move(t));
   }
   return out;
}

torch::Tensor seg_loss(const std::vector<torch::Tensor>& side_logits, const std::vector<MaskTarget>& targets,
                       const LossConfig& cfg)
{
   if (side_logits.size() != targets.size() || side_logits.empty()) {
      throw std::invalid_argument("seg_loss: side output count does not match targets");
   }
   torch::Tensor total;
   for (std::size_t i = 0; i < side_logits.size(); ++i) {
      const auto p = torch::sigmoid(side_logits[i]);
      const auto ignore = cfg.honor_ignore ? std::optional<torch::Tensor>(targets[i].ignore) : std::nullopt;
      auto term = mse_masked(p, targets[i].soft, ignore) + iou_loss(p, targets[i].binary, ignore);
      total = i == 0 ? term : total + term;
   }
   return total;
}

torch::Tensor diam_loss(const std::vector<torch::Tensor>& side_heatmaps, const std::vector<torch::Tensor>& targets)
{
   if (side_heatmaps.size() != 3 || targets.size() != 3) {
      throw std::invalid_argument("diam_loss: expected 3 side outputs and 3 targets");
   }
   auto total = mse_masked(side_heatmaps[0], targets[0]);
   for (std::size_t i = 1; i < 3; ++i) {
      total = total + mse_masked(side_heatmaps[i], targets[i]);
   }
   return total;
}

torch::Tensor total_loss(const torch::Tensor& l_seg, const torch::Tensor& l_dp, const LossConfig& cfg)
{
   if (std::isnan(l_seg.item<double>()) || std::isnan(l_dp.item<double>())) {
      throw std::invalid_argument("total_loss: NaN input");
   }
   return cfg.lambda * l_seg + (1.0 - cfg.lambda) * l_dp;
}

double total_loss(double l_seg, double l_dp, const LossConfig& cfg)
{
   if (std::isnan(l_seg) || std::isnan(l_dp)) {
      throw std::invalid_argument("total_loss: NaN input");
   }
   return cfg.lambda * l_seg + (1.0 - cfg.lambda) * l_dp;
}

} // namespace pdnet
