#pragma once

#include "pdnet/geometry.hpp"
#include "pdnet/image.hpp"

#include <array>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace pdnet {

enum class BackboneKind { PaperResNeSt50, TinyCnn };

std::string to_string(BackboneKind kind);
BackboneKind backbone_from_string(const std::string& name);

inline constexpr int kNumScales = 5;

struct ModelConfig {
   BackboneKind backbone = BackboneKind::TinyCnn;
   int compress_channels = 32;
   std::vector<int> aspp_rates{1, 6, 12, 18};
   int aspp_branch_channels = 16;
   int tiny_base_channels = 16; ///< tiny_cnn stage widths are base * {1, 2, 4, 8, 16}
   bool enable_pe = true;
   bool enable_t2d = true;
   bool enable_b2u = true;
   bool enable_sa = true;
   int input_size = 256;

   /// Throws std::invalid_argument when the config cannot build a network.
   void validate() const;
   /// Channel width of decoder scale k (0 = stride 2) after concatenation.
   int decoder_width(int k) const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Multi-scale feature extractor: five maps at strides 2, 4, 8, 16, 32.
class BackboneBase : public torch::nn::Module {
public:
   virtual std::vector<torch::Tensor> forward(torch::Tensor x) = 0;
   virtual std::array<int, kNumScales> channels() const = 0;
};

/// Five strided conv stages (conv-BN-ReLU twice, the first with stride 2).
class TinyCnn : public BackboneBase {
public:
   TinyCnn(int in_channels, int base_channels);
   std::vector<torch::Tensor> forward(torch::Tensor x) override;
   std::array<int, kNumScales> channels() const override { return channels_; }

private:
   std::vector<torch::nn::Sequential> stages_;
   std::array<int, kNumScales> channels_{};
};

/// ResNeSt-50 layout: deep stem, split-attention bottlenecks [3, 4, 6, 3], radix 2,
/// average-pool downsampling.
class ResNeSt50 : public BackboneBase {
public:
   explicit ResNeSt50(int in_channels);
   std::vector<torch::Tensor> forward(torch::Tensor x) override;
   std::array<int, kNumScales> channels() const override { return {64, 256, 512, 1024, 2048}; }

private:
   torch::nn::Sequential stem_{nullptr};
   torch::nn::MaxPool2d pool_{nullptr};
   std::vector<torch::nn::Sequential> layers_;
};

std::shared_ptr<BackboneBase> make_backbone(BackboneKind kind, int in_channels, int tiny_base_channels);

/// Enhanced features: F * sigmoid(logit) + F.
torch::Tensor apply_attention(const torch::Tensor& features, const torch::Tensor& logit);

/// Click-driven attention at one scale: parallel dilated branches plus a global-pooling
/// branch over concat(F, P), fused to a single-channel attention logit.
class AsppAttentionImpl : public torch::nn::Module {
public:
   AsppAttentionImpl(int in_channels, const std::vector<int>& rates, int branch_channels);
   torch::Tensor forward(const torch::Tensor& x);

private:
   std::vector<torch::nn::Conv2d> branches_;
   torch::nn::Conv2d pool_conv_{nullptr};
   torch::nn::Conv2d fuse_{nullptr};
};
TORCH_MODULE(AsppAttention);

struct PriorEncoding {
   std::vector<torch::Tensor> enhanced;
   std::vector<torch::Tensor> side_logits; ///< pre-sigmoid attention maps, strides 2..32
};

class PriorEncoderImpl : public torch::nn::Module {
public:
   PriorEncoderImpl(int channels, const std::vector<int>& rates, int branch_channels);
   PriorEncoding forward(const std::vector<torch::Tensor>& features, const torch::Tensor& prior3);
   /// Prior maps P1..P5 from the stride-2 convolution stream.
   std::vector<torch::Tensor> prior_stream(const torch::Tensor& prior3);

private:
   std::vector<torch::nn::Conv2d> stream_;
   std::vector<AsppAttention> attention_;
};
TORCH_MODULE(PriorEncoder);

/// Dual-path decoder: each scale concatenates itself with bilinear-upsampled + conv
/// contributions from coarser scales (top-down) and strided-conv contributions from
/// finer scales (bottom-up). Order: self, top-down nearest-first, bottom-up nearest-first.
class DualPathDecoderImpl : public torch::nn::Module {
public:
   DualPathDecoderImpl(int channels, bool top_down, bool bottom_up);
   std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& enhanced);
   int output_width(int k) const;

private:
   int channels_;
   bool top_down_;
   bool bottom_up_;
   // resample_[k][j]: contribution of scale j to target scale k (empty when k == j or disabled)
   std::vector<std::vector<torch::nn::Conv2d>> resample_;
};
TORCH_MODULE(DualPathDecoder);

/// Channel-affinity attention: out = gamma * softmax(X X^T) X + X with X the C x N flattening.
class ScaleAttentionImpl : public torch::nn::Module {
public:
   ScaleAttentionImpl();
   torch::Tensor forward(const torch::Tensor& x);
   /// Row-stochastic C x C affinity for each batch element.
   torch::Tensor affinity(const torch::Tensor& x) const;
   torch::Tensor& gamma() { return gamma_; }

private:
   torch::Tensor gamma_;
};
TORCH_MODULE(ScaleAttention);

struct PdNetOutput {
   /// Prior-encoder sides (strides 2..32, only with PE), decoder sides (strides 2..32),
   /// then the full-resolution mask logits.
   std::vector<torch::Tensor> mask_side;
   /// Four-channel heatmaps at full resolution, stride 2, stride 4.
   std::vector<torch::Tensor> diam_side;

   const torch::Tensor& mask_logits() const { return mask_side.back(); }
   const torch::Tensor& heatmaps() const { return diam_side.front(); }
};

class PdNetImpl : public torch::nn::Module {
public:
   explicit PdNetImpl(ModelConfig cfg);

   /// ct: [B,1,S,S] normalized slice; prior3: [B,3,S,S] (ct, click image, distance image).
   PdNetOutput forward(const torch::Tensor& ct, const torch::Tensor& prior3);

   /// Backbone features at strides 2..32 (raw channels).
   std::vector<torch::Tensor> encode_image(const torch::Tensor& image3);
   std::vector<torch::Tensor> compress_features(const std::vector<torch::Tensor>& raw);

   const ModelConfig& config() const { return cfg_; }
   std::int64_t parameter_count() const;

   PriorEncoder prior_encoder() const { return prior_encoder_; }
   DualPathDecoder decoder() const { return decoder_; }
   const std::vector<ScaleAttention>& scale_attention() const { return scale_attention_; }

private:
   ModelConfig cfg_;
   std::shared_ptr<BackboneBase> backbone_;
   std::vector<torch::nn::Conv2d> compress_;
   PriorEncoder prior_encoder_{nullptr};
   DualPathDecoder decoder_{nullptr};
   std::vector<ScaleAttention> scale_attention_;
   std::vector<torch::nn::Conv2d> mask_heads_;
   torch::nn::ConvTranspose2d deconv_{nullptr};
   torch::nn::Conv2d full_mask_head_{nullptr};
   std::vector<torch::nn::Conv2d> diam_heads_;
};
TORCH_MODULE(PdNet);

/// [3,S,S] prior image (ct, click disk, distance map) for one click.
torch::Tensor make_prior3(const RealImage& ct, Point2D click);

torch::Tensor to_tensor(const RealImage& image); ///< [1,H,W]
RealImage to_image(const torch::Tensor& map);    ///< from [H,W] or [1,H,W]

} // namespace pdnet
