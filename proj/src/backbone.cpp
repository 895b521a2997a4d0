#include "pdnet/model.hpp"

#include <stdexcept>

namespace nn = torch::nn;

namespace pdnet {

namespace {

void append_conv_bn_relu(nn::Sequential& seq, int in, int out, int stride)
{
   seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
   seq->push_back(nn::BatchNorm2d(out));
   seq->push_back(nn::ReLU(nn::ReLUOptions(true)));
}

/// Radix-2 split attention over a grouped 3x3 convolution.
class SplitAttentionConvImpl : public nn::Module {
public:
   SplitAttentionConvImpl(int in, int channels, int stride, int radix = 2, int reduction = 4)
      : channels_(channels), radix_(radix)
   {
      const int inter = std::max(in * radix / reduction, 32);
      conv_ = register_module(
         "conv", nn::Conv2d(nn::Conv2dOptions(in, channels * radix, 3).stride(stride).padding(1).groups(radix).bias(false)));
      bn0_ = register_module("bn0", nn::BatchNorm2d(channels * radix));
      fc1_ = register_module("fc1", nn::Conv2d(nn::Conv2dOptions(channels, inter, 1)));
      bn1_ = register_module("bn1", nn::BatchNorm2d(inter));
      fc2_ = register_module("fc2", nn::Conv2d(nn::Conv2dOptions(inter, channels * radix, 1)));
   }

   torch::Tensor forward(const torch::Tensor& input)
   {
      auto x = torch::relu(bn0_(conv_(input)));
      const auto batch = x.size(0);
      auto splits = x.split(channels_, 1);
      auto gap = splits[0];
      for (std::size_t r = 1; r < splits.size(); ++r) {
         gap = gap + splits[r];
      }
      gap = torch::adaptive_avg_pool2d(gap, {1, 1});
      gap = torch::relu(bn1_(fc1_(gap)));
      auto att = fc2_(gap).view({batch, 1, radix_, -1}).transpose(1, 2);
      att = torch::softmax(att, 1).reshape({batch, -1, 1, 1});
      auto atts = att.split(channels_, 1);
      auto out = atts[0] * splits[0];
      for (std::size_t r = 1; r < splits.size(); ++r) {
         out = out + atts[r] * splits[r];
      }
      return out;
   }

private:
   int channels_;
   int radix_;
   nn::Conv2d conv_{nullptr};
   nn::BatchNorm2d bn0_{nullptr};
   nn::Conv2d fc1_{nullptr};
   nn::BatchNorm2d bn1_{nullptr};
   nn::Conv2d fc2_{nullptr};
};
TORCH_MODULE(SplitAttentionConv);

class SplitBottleneckImpl : public nn::Module {
public:
   static constexpr int kExpansion = 4;

   SplitBottleneckImpl(int in, int planes, int stride, bool first)
   {
      conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, planes, 1).bias(false)));
      bn1_ = register_module("bn1", nn::BatchNorm2d(planes));
      avd_ = stride > 1 || first;
      conv2_ = register_module("conv2", SplitAttentionConv(planes, planes, avd_ ? 1 : stride));
      if (avd_) {
         avd_pool_ = register_module("avd_layer", nn::AvgPool2d(nn::AvgPool2dOptions(3).stride(stride).padding(1)));
      }
      conv3_ = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(planes, planes * kExpansion, 1).bias(false)));
      bn3_ = register_module("bn3", nn::BatchNorm2d(planes * kExpansion));
      if (stride != 1 || in != planes * kExpansion) {
         downsample_ = register_module(
            "downsample",
            nn::Sequential(nn::AvgPool2d(nn::AvgPool2dOptions(stride).stride(stride).ceil_mode(true).count_include_pad(false)),
                           nn::Conv2d(nn::Conv2dOptions(in, planes * kExpansion, 1).bias(false)),
                           nn::BatchNorm2d(planes * kExpansion)));
      }
   }

   torch::Tensor forward(const torch::Tensor& x)
   {
      auto out = torch::relu(bn1_(conv1_(x)));
      out = conv2_(out);
      if (avd_) {
         out = avd_pool_(out);
      }
      out = bn3_(conv3_(out));
      const auto residual = downsample_ ? downsample_->forward(x) : x;
      return torch::relu(out + residual);
   }

private:
   bool avd_ = false;
   nn::Conv2d conv1_{nullptr};
   nn::BatchNorm2d bn1_{nullptr};
   SplitAttentionConv conv2_{nullptr};
   nn::AvgPool2d avd_pool_{nullptr};
   nn::Conv2d conv3_{nullptr};
   nn::BatchNorm2d bn3_{nullptr};
   nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(SplitBottleneck);

} // namespace

TinyCnn::TinyCnn(int in_channels, int base_channels)
{
   if (base_channels < 1) {
      throw std::invalid_argument("TinyCnn: base channels must be positive");
   }
   int in = in_channels;
   for (int k = 0; k < kNumScales; ++k) {
      const int out = base_channels << k;
      nn::Sequential stage;
      append_conv_bn_relu(stage, in, out, 2);
      append_conv_bn_relu(stage, out, out, 1);
      stages_.push_back(register_module("stage" + std::to_string(k + 1), stage));
      channels_[k] = out;
      in = out;
   }
}

std::vector<torch::Tensor> TinyCnn::forward(torch::Tensor x)
{
   std::vector<torch::Tensor> out;
   for (auto& stage : stages_) {
      x = stage->forward(x);
      out.push_back(x);
   }
   return out;
}

ResNeSt50::ResNeSt50(int in_channels)
{
   constexpr int stem_width = 32;
   nn::Sequential stem;
   append_conv_bn_relu(stem, in_channels, stem_width, 2);
   append_conv_bn_relu(stem, stem_width, stem_width, 1);
   append_conv_bn_relu(stem, stem_width, stem_width * 2, 1);
   stem_ = register_module("stem", stem);
   pool_ = register_module("maxpool", nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
   constexpr int planes[4] = {64, 128, 256, 512};
   constexpr int blocks[4] = {3, 4, 6, 3};
   int in = stem_width * 2;
   for (int l = 0; l < 4; ++l) {
      nn::Sequential layer;
      for (int b = 0; b < blocks[l]; ++b) {
         const int stride = (b == 0 && l > 0) ? 2 : 1;
         layer->push_back(SplitBottleneck(in, planes[l], stride, b == 0 && l == 0));
         in = planes[l] * SplitBottleneckImpl::kExpansion;
      }
      layers_.push_back(register_module("layer" + std::to_string(l + 1), layer));
   }
}

std::vector<torch::Tensor> ResNeSt50::forward(torch::Tensor x)
{
   std::vector<torch::Tensor> out;
   x = stem_->forward(x);
   out.push_back(x);
   x = pool_(x);
   for (auto& layer : layers_) {
      x = layer->forward(x);
      out.push_back(x);
   }
   return out;
}

std::shared_ptr<BackboneBase> make_backbone(BackboneKind kind, int in_channels, int tiny_base_channels)
{
   switch (kind) {
   case BackboneKind::TinyCnn:
      return std::make_shared<TinyCnn>(in_channels, tiny_base_channels);
   case BackboneKind::PaperResNeSt50:
      return std::make_shared<ResNeSt50>(in_channels);
   }
   throw std::invalid_argument("unknown backbone");
}

} // namespace pdnet
