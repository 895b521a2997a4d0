#include "pdnet/model.hpp"

#undef CHECK
#include <doctest.h>

#include <cmath>

using namespace pdnet;

namespace {

ModelConfig small(int size = 64)
{
   ModelConfig cfg;
   cfg.input_size = size;
   cfg.tiny_base_channels = 8;
   cfg.compress_channels = 8;
   cfg.aspp_branch_channels = 4;
   return cfg;
}

std::pair<torch::Tensor, torch::Tensor> inputs(int batch, int size)
{
   return {torch::rand({batch, 1, size, size}), torch::rand({batch, 3, size, size})};
}

} // namespace

TEST_SUITE("model")
{
   TEST_CASE("output shapes at 256 with the full configuration")
   {
      torch::manual_seed(0);
      ModelConfig cfg;
      cfg.input_size = 256;
      PdNet net(cfg);
      torch::NoGradGuard ng;
      const auto [ct, prior] = inputs(2, 256);
      const auto out = net->forward(ct, prior);
      REQUIRE(out.mask_side.size() == 11);
      REQUIRE(out.diam_side.size() == 3);
      const std::int64_t sides[11] = {128, 64, 32, 16, 8, 128, 64, 32, 16, 8, 256};
      for (int i = 0; i < 11; ++i) {
         CHECK(out.mask_side[i].sizes() == torch::IntArrayRef{2, 1, sides[i], sides[i]});
      }
      CHECK(out.heatmaps().sizes() == torch::IntArrayRef{2, 4, 256, 256});
      CHECK(out.diam_side[1].sizes() == torch::IntArrayRef{2, 4, 128, 128});
      CHECK(out.diam_side[2].sizes() == torch::IntArrayRef{2, 4, 64, 64});
      CHECK(out.mask_logits().sizes() == torch::IntArrayRef{2, 1, 256, 256});
   }

   TEST_CASE("encoder feature sizes at 512 and compression to 32 channels")
   {
      torch::manual_seed(0);
      for (auto kind : {BackboneKind::TinyCnn, BackboneKind::PaperResNeSt50}) {
         ModelConfig cfg;
         cfg.backbone = kind;
         cfg.input_size = kind == BackboneKind::TinyCnn ? 512 : 64;
         PdNet net(cfg);
         net->eval();
         torch::NoGradGuard ng;
         const auto raw = net->encode_image(torch::rand({1, 3, cfg.input_size, cfg.input_size}));
         REQUIRE(raw.size() == 5);
         for (int k = 0; k < 5; ++k) {
            const auto side = cfg.input_size >> (k + 1);
            CHECK(raw[k].size(2) == side);
            CHECK(raw[k].size(3) == side);
         }
         const auto compressed = net->compress_features(raw);
         for (const auto& f : compressed) {
            CHECK(f.size(1) == 32);
         }
      }
   }

   TEST_CASE("ResNeSt-50 reports paper channel widths")
   {
      torch::manual_seed(0);
      ResNeSt50 backbone(3);
      backbone.eval();
      torch::NoGradGuard ng;
      const auto feats = backbone.forward(torch::rand({1, 3, 64, 64}));
      const auto widths = backbone.channels();
      for (int k = 0; k < 5; ++k) {
         CHECK(feats[k].size(1) == widths[k]);
      }
      CHECK(widths == std::array<int, 5>{64, 256, 512, 1024, 2048});
   }

   TEST_CASE("decoder widths")
   {
      ModelConfig cfg;
      for (int k = 0; k < 5; ++k) {
         CHECK(cfg.decoder_width(k) == 160);
      }
      cfg.enable_t2d = false;
      cfg.enable_b2u = false;
      for (int k = 0; k < 5; ++k) {
         CHECK(cfg.decoder_width(k) == 32);
      }
      cfg.enable_t2d = true;
      CHECK(cfg.decoder_width(0) == 160);
      CHECK(cfg.decoder_width(4) == 32);
      DualPathDecoder dec(8, true, true);
      std::vector<torch::Tensor> feats;
      for (int k = 0; k < 5; ++k) {
         feats.push_back(torch::rand({1, 8, 32 >> k, 32 >> k}));
      }
      const auto fused = dec->forward(feats);
      for (int k = 0; k < 5; ++k) {
         CHECK(fused[k].size(1) == 40);
         CHECK(fused[k].size(2) == (32 >> k));
         // self comes first in the concatenation
         CHECK(torch::equal(fused[k].narrow(1, 0, 8), feats[k]));
      }
   }

   TEST_CASE("ablated configurations keep the output contract")
   {
      torch::manual_seed(1);
      for (int mask = 0; mask < 16; ++mask) {
         auto cfg = small(32);
         cfg.enable_pe = mask & 1;
         cfg.enable_t2d = mask & 2;
         cfg.enable_b2u = mask & 4;
         cfg.enable_sa = mask & 8;
         PdNet net(cfg);
         net->eval();
         torch::NoGradGuard ng;
         const auto [ct, prior] = inputs(1, 32);
         const auto out = net->forward(ct, prior);
         CHECK(out.mask_side.size() == (cfg.enable_pe ? 11u : 6u));
         CHECK(out.mask_logits().sizes() == torch::IntArrayRef{1, 1, 32, 32});
         CHECK(out.heatmaps().sizes() == torch::IntArrayRef{1, 4, 32, 32});
      }
   }

   TEST_CASE("parameter count grows with each enabled module")
   {
      auto base = small();
      base.enable_pe = base.enable_t2d = base.enable_b2u = base.enable_sa = false;
      std::int64_t previous = PdNet(base)->parameter_count();
      auto cfg = base;
      for (bool* flag : {&cfg.enable_pe, &cfg.enable_t2d, &cfg.enable_b2u, &cfg.enable_sa}) {
         *flag = true;
         const auto n = PdNet(cfg)->parameter_count();
         CHECK(n > previous);
         previous = n;
      }
   }

   TEST_CASE("scale attention is the identity at gamma zero")
   {
      ScaleAttention sa;
      const auto x = torch::randn({2, 6, 5, 5});
      CHECK(torch::equal(sa->forward(x), x));
      const auto a = sa->affinity(x);
      CHECK(a.sizes() == torch::IntArrayRef{2, 6, 6});
      CHECK(torch::allclose(a.sum(-1), torch::ones({2, 6}), 1e-6, 1e-6));
      CHECK(a.min().item<float>() >= 0.0f);
   }

   TEST_CASE("scale attention gamma gradient matches finite differences")
   {
      ScaleAttention sa;
      sa->to(torch::kFloat64);
      const auto x = torch::randn({1, 4, 3, 3}, torch::kFloat64) * 0.3;
      const auto w = torch::randn({1, 4, 3, 3}, torch::kFloat64);
      sa->gamma().data().fill_(0.3);
      (sa->forward(x) * w).sum().backward();
      const double analytic = sa->gamma().grad().item<double>();
      const double h = 1e-6;
      torch::NoGradGuard ng;
      sa->gamma().data().fill_(0.3 + h);
      const double up = (sa->forward(x) * w).sum().item<double>();
      sa->gamma().data().fill_(0.3 - h);
      const double down = (sa->forward(x) * w).sum().item<double>();
      CHECK(analytic == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
   }

   TEST_CASE("attention enhancement bounds")
   {
      const auto f = torch::randn({1, 3, 4, 4});
      CHECK(torch::allclose(apply_attention(f, torch::full({1, 1, 4, 4}, 50.0)), 2 * f));
      CHECK(torch::allclose(apply_attention(f, torch::full({1, 1, 4, 4}, -50.0)), f));
      CHECK(torch::allclose(apply_attention(f, torch::zeros({1, 1, 4, 4})), 1.5 * f));
   }

   TEST_CASE("every parameter receives a finite gradient")
   {
      torch::manual_seed(2);
      PdNet net(small(32));
      const auto [ct, prior] = inputs(2, 32);
      const auto out = net->forward(ct, prior);
      auto loss = torch::zeros({});
      for (const auto& h : out.diam_side) {
         loss = loss + h.pow(2).mean();
      }
      for (const auto& s : out.mask_side) {
         loss = loss + s.mean();
      }
      // gamma starts at 0, so pin it away from zero to open the attention path
      for (auto sa : net->scale_attention()) {
         sa->gamma().data().fill_(0.1);
      }
      loss.backward();
      for (const auto& p : net->named_parameters()) {
         INFO(p.key());
         REQUIRE(p.value().grad().defined());
         CHECK(torch::isfinite(p.value().grad()).all().item<bool>());
      }
   }

   TEST_CASE("eval forward is deterministic")
   {
      torch::manual_seed(3);
      PdNet net(small(32));
      net->eval();
      torch::NoGradGuard ng;
      const auto [ct, prior] = inputs(1, 32);
      const auto a = net->forward(ct, prior);
      const auto b = net->forward(ct, prior);
      CHECK(torch::equal(a.mask_logits(), b.mask_logits()));
      CHECK(torch::equal(a.heatmaps(), b.heatmaps()));
   }

   TEST_CASE("bad inputs are rejected")
   {
      PdNet net(small(32));
      CHECK_THROWS_AS(net->forward(torch::rand({1, 1, 16, 16}), torch::rand({1, 3, 16, 16})), std::invalid_argument);
      CHECK_THROWS_AS(net->forward(torch::rand({1, 1, 32, 32}), torch::rand({1, 2, 32, 32})), std::invalid_argument);
      CHECK_THROWS_AS(net->forward(torch::rand({1, 3, 32, 32}), torch::rand({1, 3, 32, 32})), std::invalid_argument);
      ModelConfig bad = small(30);
      CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
      CHECK_THROWS_AS(backbone_from_string("vgg"), std::invalid_argument);
      CHECK(backbone_from_string(to_string(BackboneKind::PaperResNeSt50)) == BackboneKind::PaperResNeSt50);
   }

   TEST_CASE("config JSON round trip")
   {
      auto cfg = small(48);
      cfg.input_size = 64;
      cfg.enable_sa = false;
      cfg.aspp_rates = {1, 2, 3};
      const auto back = model_config_from_json(to_json(cfg));
      CHECK(back.input_size == 64);
      CHECK_FALSE(back.enable_sa);
      CHECK(back.aspp_rates == std::vector<int>{1, 2, 3});
      CHECK(back.compress_channels == 8);
   }

   TEST_CASE("prior image channels")
   {
      RealImage ct(16, 16, 0.25f);
      const auto p = make_prior3(ct, {5, 9});
      CHECK(p.sizes() == torch::IntArrayRef{3, 16, 16});
      CHECK(p[0][3][3].item<float>() == 0.25f);
      CHECK(p[1][9][5].item<float>() == doctest::Approx(p[1].max().item<float>()));
      CHECK(p[2][9][5].item<float>() == 1.0f);
      CHECK(p[2].min().item<float>() < 1.0f);
   }
}
