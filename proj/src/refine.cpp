#include "pdnet/refine.hpp"

#include "pdnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace fs = std::filesystem;

namespace pdnet {

void RefineConfig::validate() const
{
   if (rounds < 1) {
      throw std::invalid_argument("RefineConfig: rounds must be positive");
   }
   if (stages.empty()) {
      throw std::invalid_argument("RefineConfig: no stages to train");
   }
   if (!(window_factor > 1.0)) {
      throw std::invalid_argument("RefineConfig: window_factor must exceed 1");
   }
   infer.validate();
}

RefineInput make_refine_input(const CtSlice& slice, const RecistAnnotation& recist, std::optional<BinaryMask> gt,
                              HuWindow window)
{
   RefineInput in;
   in.id = slice.id;
   in.image = window_normalize(slice, window);
   in.pad = normalized_pad(slice, window);
   in.recist = recist;
   in.gt = std::move(gt);
   return in;
}

nlohmann::json to_json(const RoundStats& s)
{
   nlohmann::json j{{"round", s.round},
                    {"ignore_fraction", s.ignore_fraction},
                    {"diverged", s.diverged},
                    {"final_loss", s.final_loss}};
   if (s.dice) {
      j["dice"] = *s.dice;
   }
   return j;
}

BinaryMask snake_in_window(const RealImage& image, const BinaryMask& init, const RecistAnnotation& recist,
                           double window_factor, const SnakeConfig& cfg)
{
   require_same_shape(image, init, "snake_in_window");
   const auto e = ellipse_from_recist(recist);
   const double half = std::max(window_factor * recist.long_px(), 8.0) / 2.0;
   const int x0 = std::max(0, int(std::floor(e.center.x - half)));
   const int y0 = std::max(0, int(std::floor(e.center.y - half)));
   const int x1 = std::min(image.width() - 1, int(std::ceil(e.center.x + half)));
   const int y1 = std::min(image.height() - 1, int(std::ceil(e.center.y + half)));
   const int w = x1 - x0 + 1;
   const int h = y1 - y0 + 1;
   RealImage sub(h, w);
   BinaryMask sub_init(h, w, 0);
   for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
         sub(x, y) = image(x0 + x, y0 + y);
         sub_init(x, y) = init(x0 + x, y0 + y);
      }
   }
   BinaryMask out(image.height(), image.width(), 0);
   if (count_foreground(sub_init) == 0) {
      return out;
   }
   const auto refined = morph_snake(sub, sub_init, cfg).mask;
   for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
         out(x0 + x, y0 + y) = refined(x, y);
      }
   }
   return out;
}

namespace {

BinaryMask ellipse_mask(const RefineInput& input)
{
   return rasterize_ellipse(ellipse_from_recist(input.recist), input.image.height(), input.image.width());
}

double ignore_fraction(const std::vector<TriStateMask>& masks)
{
   std::size_t fg = 0;
   std::size_t ig = 0;
   for (const auto& m : masks) {
      fg += m.count(Label::Foreground);
      ig += m.count(Label::Ignore);
   }
   return fg + ig == 0 ? 0.0 : double(ig) / double(fg + ig);
}

} // namespace

TriStateMask initial_pseudo_mask(const RefineInput& input, const RefineConfig& cfg, bool* diverged)
{
   const auto ellipse = ellipse_mask(input);
   if (diverged) {
      *diverged = false;
   }
   try {
      return build_pseudo_mask(ellipse,
                               snake_in_window(input.image, ellipse, input.recist, cfg.window_factor, cfg.snake));
   } catch (const RefinementDiverged&) {
      if (diverged) {
         *diverged = true;
      }
      return TriStateMask::from_binary(ellipse);
   }
}

BinaryMask predict_training_mask(PdNet& model, int stage, const RefineInput& input, const InferConfig& cfg)
{
   const int h = input.image.height();
   const int w = input.image.width();
   const int n = model->config().input_size;
   const auto e = ellipse_from_recist(input.recist);
   const auto crop = stage == 1 ? LoiCrop::full_slice(h, w, n)
                                : LoiCrop::centered(e.center, std::max(cfg.crop_factor * input.recist.long_px(),
                                                                       cfg.min_loi_side),
                                                    n);
   const auto p = predict_crop(model, input.image, input.pad, crop, e.center, cfg.threshold);
   if (count_foreground(p.component) == 0) {
      return BinaryMask(h, w, 0);
   }
   return component_nearest(mask_to_slice(p.component, crop, h, w), e.center);
}

RefinementResult iterative_refinement(const std::vector<RefineInput>& data, const RefineConfig& cfg,
                                      const std::optional<fs::path>& out_dir, const RoundFn& on_round,
                                      const ProgressFn& progress)
{
   cfg.validate();
   if (data.empty()) {
      throw std::invalid_argument("iterative_refinement: empty dataset");
   }
   RefinementResult result;
   std::vector<TriStateMask> masks;
   std::vector<BinaryMask> ellipses;
   int diverged = 0;
   for (const auto& d : data) {
      bool div = false;
      masks.push_back(initial_pseudo_mask(d, cfg, &div));
      ellipses.push_back(ellipse_mask(d));
      diverged += div ? 1 : 0;
   }

   for (int round = 1; round <= cfg.rounds; ++round) {
      RoundStats stats;
      stats.round = round;
      stats.ignore_fraction = ignore_fraction(masks);
      stats.diverged = diverged;

      std::vector<StageSample> samples;
      for (std::size_t i = 0; i < data.size(); ++i) {
         samples.push_back({data[i].id, data[i].image, data[i].pad, masks[i], data[i].recist});
      }
      result.models.clear();
      for (const auto& spec : cfg.stages) {
         std::optional<fs::path> dir;
         if (out_dir) {
            dir = *out_dir / ("round_" + std::to_string(round)) / ("stage" + std::to_string(spec.stage));
         }
         auto trained = train_stage(spec, samples, dir, progress);
         trained.meta.extra["round"] = round;
         if (dir) {
            save_checkpoint(*dir, trained.model, trained.meta);
         }
         stats.final_loss.push_back(trained.log.back().total);
         result.models.push_back(std::move(trained));
      }

      auto& predictor = result.models.back();
      const int stage = cfg.stages.back().stage;
      std::vector<BinaryMask> predictions;
      for (const auto& d : data) {
         predictions.push_back(predict_training_mask(predictor.model, stage, d, cfg.infer));
      }

      double dice_sum = 0.0;
      std::size_t dice_n = 0;
      for (std::size_t i = 0; i < data.size(); ++i) {
         if (data[i].gt) {
            dice_sum += seg_scores(predictions[i], *data[i].gt).dice;
            ++dice_n;
         }
      }
      if (dice_n > 0) {
         stats.dice = dice_sum / double(dice_n);
      }

      result.masks = masks;
      if (round < cfg.rounds) {
         diverged = 0;
         for (std::size_t i = 0; i < data.size(); ++i) {
            try {
               if (count_foreground(predictions[i]) == 0) {
                  throw RefinementDiverged();
               }
               masks[i] = build_pseudo_mask(ellipses[i], snake_in_window(data[i].image, predictions[i], data[i].recist,
                                                                         cfg.window_factor, cfg.snake));
            } catch (const RefinementDiverged&) {
               ++diverged;
            }
         }
      }

      if (out_dir) {
         std::ofstream log(*out_dir / "rounds.jsonl", round == 1 ? std::ios::trunc : std::ios::app);
         log << to_json(stats).dump() << '\n';
      }
      if (on_round) {
         on_round(stats);
      }
      result.rounds.push_back(std::move(stats));
   }
   return result;
}

} // namespace pdnet
