#pragma once

#include "pdnet/infer.hpp"
#include "pdnet/pseudomask.hpp"
#include "pdnet/train.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pdnet {

struct RefineConfig {
   int rounds = 3;
   std::vector<StageSpec> stages; ///< trained in order each round; the last one predicts the refined masks
   SnakeConfig snake;
   double window_factor = 2.5;    ///< snake window side, multiple of the RECIST long axis
   InferConfig infer;

   void validate() const;
};

/// One weakly-annotated training lesion. `gt` is used for telemetry only.
struct RefineInput {
   std::string id;
   RealImage image;
   float pad = 0.0f;
   RecistAnnotation recist;
   std::optional<BinaryMask> gt;
};

RefineInput make_refine_input(const CtSlice& slice, const RecistAnnotation& recist,
                              std::optional<BinaryMask> gt = std::nullopt, HuWindow window = {});

struct RoundStats {
   int round = 0;
   double ignore_fraction = 0.0; ///< IGNORE / (FG + IGNORE) over the masks trained on this round
   int diverged = 0;             ///< samples that kept their previous mask when building this round's masks
   std::optional<double> dice;   ///< mean Dice of this round's predictions against `gt`
   std::vector<double> final_loss; ///< per stage
};

nlohmann::json to_json(const RoundStats& s);

struct RefinementResult {
   std::vector<RoundStats> rounds;
   std::vector<TrainResult> models; ///< last round, one per stage
   std::vector<TriStateMask> masks; ///< supervision used in the last round
};

/// Ellipse from the RECIST annotation refined by a morphological snake inside a local window.
TriStateMask initial_pseudo_mask(const RefineInput& input, const RefineConfig& cfg, bool* diverged = nullptr);

/// Runs the snake on a square window of side window_factor x long axis around the lesion;
/// pixels outside the window are background.
BinaryMask snake_in_window(const RealImage& image, const BinaryMask& init, const RecistAnnotation& recist,
                           double window_factor, const SnakeConfig& cfg);

/// Predicted slice-space mask for a training lesion, clicked at its ellipse center.
BinaryMask predict_training_mask(PdNet& model, int stage, const RefineInput& input, const InferConfig& cfg);

using RoundFn = std::function<void(const RoundStats&)>;

/// train -> predict -> refine_round, `rounds` trainings in total, each from scratch.
RefinementResult iterative_refinement(const std::vector<RefineInput>& data, const RefineConfig& cfg,
                                      const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                      const RoundFn& on_round = {}, const ProgressFn& progress = {});

} // namespace pdnet
