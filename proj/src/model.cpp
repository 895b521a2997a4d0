#include "pdnet/model.hpp"

#include <stdexcept>

namespace nn = torch::nn;

namespace pdnet {

std::string to_string(BackboneKind kind)
{
   return kind == BackboneKind::TinyCnn ? "tiny_cnn" : "paper_resnest50";
}

BackboneKind backbone_from_string(const std::string& name)
{
   if (name == "tiny_cnn") {
      return BackboneKind::TinyCnn;
   }
   if (name == "paper_resnest50") {
      return BackboneKind::PaperResNeSt50;
   }
   throw std::invalid_argument("unknown backbone '" + name + "'");
}

void ModelConfig::validate() const
{
   if (compress_channels < 1) {
      throw std::invalid_argument("ModelConfig: compress_channels must be at least 1");
   }
   if (input_size < 32 || input_size % 32 != 0) {
      throw std::invalid_argument("ModelConfig: input_size must be a positive multiple of 32");
   }
   if (enable_pe && (aspp_rates.empty() || aspp_branch_channels < 1)) {
      throw std::invalid_argument("ModelConfig: ASPP needs at least one rate and one channel");
   }
   for (int r : aspp_rates) {
      if (r < 1) {
         throw std::invalid_argument("ModelConfig: ASPP rates must be positive");
      }
   }
}

int ModelConfig::decoder_width(int k) const
{
   int parts = 1;
   if (enable_t2d) {
      parts += kNumScales - 1 - k;
   }
   if (enable_b2u) {
      parts += k;
   }
   return parts * compress_channels;
}

nlohmann::json to_json(const ModelConfig& c)
{
   return {
      {"backbone", to_string(c.backbone)},
      {"compress_channels", c.compress_channels},
      {"num_scales", kNumScales},
      {"aspp_rates", c.aspp_rates},
      {"aspp_branch_channels", c.aspp_branch_channels},
      {"tiny_base_channels", c.tiny_base_channels},
      {"enable_pe", c.enable_pe},
      {"enable_t2d", c.enable_t2d},
      {"enable_b2u", c.enable_b2u},
      {"enable_sa", c.enable_sa},
      {"input_size", c.input_size},
   };
}

ModelConfig model_config_from_json(const nlohmann::json& j)
{
   ModelConfig c;
   c.backbone = backbone_from_string(j.value("backbone", to_string(c.backbone)));
   c.compress_channels = j.value("compress_channels", c.compress_channels);
   if (j.value("num_scales", kNumScales) != kNumScales) {
      throw std::invalid_argument("ModelConfig: num_scales must be 5");
   }
   c.aspp_rates = j.value("aspp_rates", c.aspp_rates);
   c.aspp_branch_channels = j.value("aspp_branch_channels", c.aspp_branch_channels);
   c.tiny_base_channels = j.value("tiny_base_channels", c.tiny_base_channels);
   c.enable_pe = j.value("enable_pe", c.enable_pe);
   c.enable_t2d = j.value("enable_t2d", c.enable_t2d);
   c.enable_b2u = j.value("enable_b2u", c.enable_b2u);
   c.enable_sa = j.value("enable_sa", c.enable_sa);
   c.input_size = j.value("input_size", c.input_size);
   c.validate();
   return c;
}

torch::Tensor apply_attention(const torch::Tensor& features, const torch::Tensor& logit)
{
   return features * torch::sigmoid(logit) + features;
}

AsppAttentionImpl::AsppAttentionImpl(int in_channels, const std::vector<int>& rates, int branch_channels)
{
   for (std::size_t i = 0; i < rates.size(); ++i) {
      const int r = rates[i];
      auto opts = r == 1 ? nn::Conv2dOptions(in_channels, branch_channels, 1)
                         : nn::Conv2dOptions(in_channels, branch_channels, 3).padding(r).dilation(r);
      branches_.push_back(register_module("branch" + std::to_string(i), nn::Conv2d(opts)));
   }
   pool_conv_ = register_module("pool_conv", nn::Conv2d(nn::Conv2dOptions(in_channels, branch_channels, 1)));
   const auto fused_in = static_cast<std::int64_t>(branch_channels * (rates.size() + 1));
   fuse_ = register_module("fuse", nn::Conv2d(nn::Conv2dOptions(fused_in, 1, 1)));
}

torch::Tensor AsppAttentionImpl::forward(const torch::Tensor& x)
{
   std::vector<torch::Tensor> parts;
   parts.reserve(branches_.size() + 1);
   for (auto& b : branches_) {
      parts.push_back(torch::relu(b(x)));
   }
   auto pooled = torch::relu(pool_conv_(torch::adaptive_avg_pool2d(x, {1, 1})));
   parts.push_back(pooled.expand({x.size(0), pooled.size(1), x.size(2), x.size(3)}));
   return fuse_(torch::cat(parts, 1));
}

PriorEncoderImpl::PriorEncoderImpl(int channels, const std::vector<int>& rates, int branch_channels)
{
   for (int k = 0; k < kNumScales; ++k) {
      const int in = k == 0 ? 3 : channels;
      stream_.push_back(register_module("stream" + std::to_string(k + 1),
                                        nn::Conv2d(nn::Conv2dOptions(in, channels, 3).stride(2).padding(1))));
      attention_.push_back(
         register_module("attention" + std::to_string(k + 1), AsppAttention(2 * channels, rates, branch_channels)));
   }
}

std::vector<torch::Tensor> PriorEncoderImpl::prior_stream(const torch::Tensor& prior3)
{
   std::vector<torch::Tensor> maps;
   auto p = prior3;
   for (auto& conv : stream_) {
      p = torch::relu(conv(p));
      maps.push_back(p);
   }
   return maps;
}

PriorEncoding PriorEncoderImpl::forward(const std::vector<torch::Tensor>& features, const torch::Tensor& prior3)
{
   if (features.size() != kNumScales) {
      throw std::invalid_argument("prior_encode: expected 5 feature maps");
   }
   const auto priors = prior_stream(prior3);
   PriorEncoding out;
   for (int k = 0; k < kNumScales; ++k) {
      const auto& f = features[k];
      const auto& p = priors[k];
      if (f.size(2) != p.size(2) || f.size(3) != p.size(3) || f.size(0) != p.size(0)) {
         throw std::invalid_argument("prior_encode: prior and feature shapes differ at scale " + std::to_string(k + 1));
      }
      auto logit = attention_[k](torch::cat({f, p}, 1));
      out.enhanced.push_back(apply_attention(f, logit));
      out.side_logits.push_back(logit);
   }
   return out;
}

DualPathDecoderImpl::DualPathDecoderImpl(int channels, bool top_down, bool bottom_up)
   : channels_(channels), top_down_(top_down), bottom_up_(bottom_up)
{
   resample_.assign(kNumScales, std::vector<nn::Conv2d>(kNumScales, nn::Conv2d{nullptr}));
   for (int k = 0; k < kNumScales; ++k) {
      for (int j = 0; j < kNumScales; ++j) {
         const std::string name = "from" + std::to_string(j + 1) + "_to" + std::to_string(k + 1);
         if (j > k && top_down_) {
            resample_[k][j] =
               register_module("t2d_" + name, nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
         } else if (j < k && bottom_up_) {
            const int stride = 1 << (k - j);
            resample_[k][j] = register_module(
               "b2u_" + name, nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).stride(stride).padding(1)));
         }
      }
   }
}

int DualPathDecoderImpl::output_width(int k) const
{
   int parts = 1;
   if (top_down_) {
      parts += kNumScales - 1 - k;
   }
   if (bottom_up_) {
      parts += k;
   }
   return parts * channels_;
}

std::vector<torch::Tensor> DualPathDecoderImpl::forward(const std::vector<torch::Tensor>& enhanced)
{
   if (enhanced.size() != kNumScales) {
      throw std::invalid_argument("decoder_fuse: expected 5 feature maps");
   }
   std::vector<torch::Tensor> fused;
   for (int k = 0; k < kNumScales; ++k) {
      const auto& target = enhanced[k];
      std::vector<torch::Tensor> parts{target};
      if (top_down_) {
         for (int j = k + 1; j < kNumScales; ++j) {
            auto up = torch::nn::functional::interpolate(
               enhanced[j], torch::nn::functional::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{target.size(2), target.size(3)})
                               .mode(torch::kBilinear)
                               .align_corners(false));
            parts.push_back(torch::relu(resample_[k][j](up)));
         }
      }
      if (bottom_up_) {
         for (int j = k - 1; j >= 0; --j) {
            parts.push_back(torch::relu(resample_[k][j](enhanced[j])));
         }
      }
      fused.push_back(parts.size() == 1 ? target : torch::cat(parts, 1));
   }
   return fused;
}

ScaleAttentionImpl::ScaleAttentionImpl()
{
   gamma_ = register_parameter("gamma", torch::zeros({1}));
}

torch::Tensor ScaleAttentionImpl::affinity(const torch::Tensor& x) const
{
   const auto flat = x.flatten(2);
   return torch::softmax(torch::bmm(flat, flat.transpose(1, 2)), -1);
}

torch::Tensor ScaleAttentionImpl::forward(const torch::Tensor& x)
{
   const auto flat = x.flatten(2);
   const auto out = torch::bmm(affinity(x), flat).view_as(x);
   return gamma_ * out + x;
}

PdNetImpl::PdNetImpl(ModelConfig cfg) : cfg_(std::move(cfg))
{
   cfg_.validate();
   const int c = cfg_.compress_channels;
   backbone_ = register_module("backbone", make_backbone(cfg_.backbone, 3, cfg_.tiny_base_channels));
   const auto raw = backbone_->channels();
   for (int k = 0; k < kNumScales; ++k) {
      compress_.push_back(register_module("compress" + std::to_string(k + 1),
                                          nn::Conv2d(nn::Conv2dOptions(raw[k], c, 3).padding(1))));
   }
   if (cfg_.enable_pe) {
      prior_encoder_ =
         register_module("prior_encoder", PriorEncoder(c, cfg_.aspp_rates, cfg_.aspp_branch_channels));
   }
   decoder_ = register_module("decoder", DualPathDecoder(c, cfg_.enable_t2d, cfg_.enable_b2u));
   for (int k = 0; k < kNumScales; ++k) {
      if (cfg_.enable_sa) {
         scale_attention_.push_back(register_module("sa" + std::to_string(k + 1), ScaleAttention()));
      }
      mask_heads_.push_back(register_module("mask_head" + std::to_string(k + 1),
                                            nn::Conv2d(nn::Conv2dOptions(cfg_.decoder_width(k), 1, 3).padding(1))));
   }
   deconv_ = register_module(
      "deconv", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(cfg_.decoder_width(0), c, 4).stride(2).padding(1)));
   full_mask_head_ = register_module("mask_head_full", nn::Conv2d(nn::Conv2dOptions(c, 1, 3).padding(1)));
   diam_heads_.push_back(register_module("diam_head_full", nn::Conv2d(nn::Conv2dOptions(c, 4, 3).padding(1))));
   diam_heads_.push_back(
      register_module("diam_head_s2", nn::Conv2d(nn::Conv2dOptions(cfg_.decoder_width(0), 4, 3).padding(1))));
   diam_heads_.push_back(
      register_module("diam_head_s4", nn::Conv2d(nn::Conv2dOptions(cfg_.decoder_width(1), 4, 3).padding(1))));
   // Heatmap regressors start near the all-zero map.
   torch::NoGradGuard no_grad;
   for (auto& head : diam_heads_) {
      nn::init::normal_(head->weight, 0.0, 1e-3);
      nn::init::zeros_(head->bias);
   }
}

std::vector<torch::Tensor> PdNetImpl::encode_image(const torch::Tensor& image3)
{
   if (image3.dim() != 4 || image3.size(1) != 3 || image3.size(2) != cfg_.input_size ||
       image3.size(3) != cfg_.input_size) {
      throw std::invalid_argument("encode_image: expected [B,3," + std::to_string(cfg_.input_size) + "," +
                                  std::to_string(cfg_.input_size) + "] input");
   }
   return backbone_->forward(image3);
}

std::vector<torch::Tensor> PdNetImpl::compress_features(const std::vector<torch::Tensor>& raw)
{
   std::vector<torch::Tensor> out;
   for (int k = 0; k < kNumScales; ++k) {
      out.push_back(torch::relu(compress_[k](raw[k])));
   }
   return out;
}

PdNetOutput PdNetImpl::forward(const torch::Tensor& ct, const torch::Tensor& prior3)
{
   if (ct.dim() != 4 || ct.size(1) != 1) {
      throw std::invalid_argument("forward: ct must be [B,1,S,S]");
   }
   if (prior3.dim() != 4 || prior3.size(1) != 3 || prior3.size(0) != ct.size(0) || prior3.size(2) != ct.size(2) ||
       prior3.size(3) != ct.size(3)) {
      throw std::invalid_argument("forward: prior3 must be [B,3,S,S] matching ct");
   }
   // Without the prior encoder the click priors go straight into the image encoder.
   const auto image3 = cfg_.enable_pe ? ct.expand({-1, 3, -1, -1}).contiguous() : prior3;
   auto features = compress_features(encode_image(image3));

   PdNetOutput out;
   if (cfg_.enable_pe) {
      auto pe = prior_encoder_->forward(features, prior3);
      features = std::move(pe.enhanced);
      out.mask_side = std::move(pe.side_logits);
   }
   auto fused = decoder_->forward(features);
   for (int k = 0; k < kNumScales; ++k) {
      if (cfg_.enable_sa) {
         fused[k] = scale_attention_[k]->forward(fused[k]);
      }
      out.mask_side.push_back(mask_heads_[k](fused[k]));
   }
   const auto full = torch::relu(deconv_(fused[0]));
   out.mask_side.push_back(full_mask_head_(full));
   out.diam_side.push_back(diam_heads_[0](full));
   out.diam_side.push_back(diam_heads_[1](fused[0]));
   out.diam_side.push_back(diam_heads_[2](fused[1]));
   return out;
}

std::int64_t PdNetImpl::parameter_count() const
{
   std::int64_t n = 0;
   for (const auto& p : parameters()) {
      n += p.numel();
   }
   return n;
}

torch::Tensor to_tensor(const RealImage& image)
{
   return torch::from_blob(const_cast<float*>(image.data()), {1, image.height(), image.width()}, torch::kFloat32)
      .clone();
}

RealImage to_image(const torch::Tensor& map)
{
   auto t = map.detach().to(torch::kFloat32).contiguous();
   if (t.dim() == 3 && t.size(0) == 1) {
      t = t.squeeze(0);
   }
   if (t.dim() != 2) {
      throw std::invalid_argument("to_image: expected a 2D map");
   }
   RealImage img(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)));
   std::memcpy(img.data(), t.data_ptr<float>(), img.size() * sizeof(float));
   return img;
}

torch::Tensor make_prior3(const RealImage& ct, Point2D click)
{
   const auto click_img = make_click_image(click, ct.height(), ct.width());
   const auto dist_img = make_distance_image(click, ct.height(), ct.width());
   return torch::cat({to_tensor(ct), to_tensor(click_img), to_tensor(dist_img)}, 0);
}

} // namespace pdnet
