#pragma once

#include "pdnet/augment.hpp"
#include "pdnet/checkpoint.hpp"
#include "pdnet/data.hpp"
#include "pdnet/losses.hpp"
#include "pdnet/model.hpp"
#include "pdnet/pseudomask.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace pdnet {

/// Adam with step decay by epoch.
struct TrainConfig {
   double lr = 1e-3;
   int epochs = 120;
   std::vector<int> decay_epochs{60, 90};
   double decay_factor = 0.1;
   int batch_size = 8;
   std::uint64_t seed = 0;
   std::optional<int> max_steps;  ///< stop early after this many optimizer steps
   bool fixed_batch = false;      ///< reuse the first batch (same draws) every step

   void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

double lr_at_epoch(const TrainConfig& cfg, int epoch);

/// Default heatmap sigma per stage at the reference input sizes (512 / 256).
double default_sigma(int stage);

/// One lesion in slice space, ready for augmentation.
struct StageSample {
   std::string id;
   RealImage image;       ///< window-normalized slice
   float pad = 0.0f;      ///< normalized slice minimum
   TriStateMask mask;     ///< supervision in slice space
   RecistAnnotation recist;
};

StageSample make_stage_sample(const CtSlice& slice, const TriStateMask& mask, const RecistAnnotation& recist,
                              HuWindow window = {});

struct StepLoss {
   int step = 0;
   int epoch = 0;
   double lr = 0.0;
   double l_seg = 0.0;
   double l_dp = 0.0;
   double total = 0.0;
};

nlohmann::json to_json(const StepLoss& s);

/// Network inputs and supervision for one batch.
struct Batch {
   torch::Tensor ct;      ///< [B,1,S,S]
   torch::Tensor prior3;  ///< [B,3,S,S]
   std::vector<MaskTarget> mask_targets;
   std::vector<torch::Tensor> heat_targets; ///< full, stride 2, stride 4
   std::vector<std::string> ids;
   std::vector<std::uint64_t> seeds;
};

/// Click used for a training draw: uniform in the half-size RECIST ellipse, or the
/// lesion centroid when the annotation is degenerate.
Point2D training_click(const TrainingSample& sample, std::uint64_t seed);

/// Side-output resolutions in the order of PdNetOutput::mask_side.
std::vector<std::int64_t> mask_side_sizes(const ModelConfig& cfg);

Batch make_batch(const std::vector<TrainingSample>& samples, const std::vector<Point2D>& clicks,
                 const ModelConfig& cfg, double sigma);

struct StageSpec {
   int stage = 2;
   double sigma = 7.0;
   ModelConfig model;
   TrainConfig train;
   LossConfig loss;
   AugmentConfig augment;
};

nlohmann::json to_json(const StageSpec& spec);
StageSpec stage_spec_from_json(const nlohmann::json& j);

struct TrainResult {
   PdNet model{nullptr};
   std::vector<StepLoss> log;
   CheckpointMeta meta;
};

class TrainingDiverged : public std::runtime_error {
public:
   using std::runtime_error::runtime_error;
};

using ProgressFn = std::function<void(const StepLoss&)>;

/// Trains one stage from scratch. Writes a checkpoint and log.jsonl to `out_dir` when given.
/// Throws TrainingDiverged (after writing nan_dump.json) on a non-finite loss.
TrainResult train_stage(const StageSpec& spec, const std::vector<StageSample>& data,
                        const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                        const ProgressFn& progress = {});

/// Draws one augmented sample for the given stage.
TrainingSample draw_sample(const StageSpec& spec, const StageSample& sample, std::uint64_t seed);

} // namespace pdnet
