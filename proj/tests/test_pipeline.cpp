#include "pdnet/augment.hpp"
#include "pdnet/checkpoint.hpp"
#include "pdnet/data.hpp"
#include "pdnet/infer.hpp"
#include "pdnet/train.hpp"

#undef CHECK
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "scratch.hpp"

using namespace pdnet;
namespace fs = std::filesystem;

namespace {

StageSpec tiny_spec(int stage, int steps)
{
   StageSpec s;
   s.stage = stage;
   s.model.input_size = 32;
   s.model.tiny_base_channels = 4;
   s.model.compress_channels = 4;
   s.model.aspp_branch_channels = 2;
   s.sigma = 1.0;
   s.train.batch_size = 2;
   s.train.seed = 7;
   s.train.max_steps = steps;
   return s;
}

std::vector<StageSample> tiny_data(int n)
{
   std::vector<StageSample> out;
   for (int i = 0; i < n; ++i) {
      const auto s = synth_sample(64, derive_seed(42, std::uint64_t(i)));
      out.push_back(make_stage_sample(s.slice, TriStateMask::from_binary(s.mask), s.recist));
   }
   return out;
}

bool same_weights(PdNet& a, PdNet& b)
{
   const auto sa = named_state(a);
   const auto sb = named_state(b);
   if (sa.size() != sb.size()) {
      return false;
   }
   for (std::size_t i = 0; i < sa.size(); ++i) {
      if (sa[i].first != sb[i].first || !torch::equal(sa[i].second, sb[i].second)) {
         return false;
      }
   }
   return true;
}

} // namespace

TEST_SUITE("pipeline")
{
   TEST_CASE("learning rate schedule")
   {
      TrainConfig cfg;
      CHECK(lr_at_epoch(cfg, 0) == 1e-3);
      CHECK(lr_at_epoch(cfg, 59) == 1e-3);
      CHECK(lr_at_epoch(cfg, 60) == doctest::Approx(1e-4).epsilon(1e-12));
      CHECK(lr_at_epoch(cfg, 100) == doctest::Approx(1e-5).epsilon(1e-12));
      CHECK(lr_at_epoch(cfg, 119) == doctest::Approx(1e-5).epsilon(1e-12));
      cfg.batch_size = 0;
      CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
      CHECK(default_sigma(1) == 3.0);
      CHECK(default_sigma(2) == 7.0);
   }

   TEST_CASE("identity warp reproduces the image")
   {
      const auto s = synth_sample(32, 3);
      const auto img = window_normalize(s.slice);
      const auto out = warp_image(img, Affine2D{}, 32, 0.0f);
      for (std::size_t i = 0; i < img.size(); ++i) {
         CHECK(out[i] == doctest::Approx(img[i]).epsilon(1e-6));
      }
      CHECK(warp_mask(s.mask, Affine2D{}, 32) == s.mask);
   }

   TEST_CASE("augmented annotation and image share one transform")
   {
      const auto data = tiny_data(4);
      AugmentConfig cfg;
      for (const auto& d : data) {
         for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto t = augment_stage2(d.image, d.mask, d.recist, cfg, seed, 48, d.pad);
            const auto src = d.recist.endpoints();
            const auto dst = t.recist.endpoints();
            for (std::size_t i = 0; i < src.size(); ++i) {
               const auto back = t.input_to_slice.apply(dst[i]);
               CHECK(back.x == doctest::Approx(src[i].x).epsilon(1e-9));
               CHECK(back.y == doctest::Approx(src[i].y).epsilon(1e-9));
            }
            // every input-space foreground pixel samples a slice lesion pixel (nearest, up to
            // the fixed-point rounding of the resampler)
            for (int y = 0; y < 48; ++y) {
               for (int x = 0; x < 48; ++x) {
                  if (t.mask(x, y) != Label::Foreground) {
                     continue;
                  }
                  const auto p = t.input_to_slice.apply({double(x), double(y)});
                  bool near_lesion = false;
                  for (int sy = int(std::floor(p.y)); sy <= int(std::ceil(p.y)); ++sy) {
                     for (int sx = int(std::floor(p.x)); sx <= int(std::ceil(p.x)); ++sx) {
                        near_lesion = near_lesion || (std::abs(sx - p.x) <= 0.5 + 1.0 / 32 &&
                                                      std::abs(sy - p.y) <= 0.5 + 1.0 / 32 &&
                                                      d.mask(sx, sy) == Label::Foreground);
                     }
                  }
                  CHECK(near_lesion);
               }
            }
         }
      }
   }

   TEST_CASE("stage-2 crops always contain the lesion")
   {
      const auto data = tiny_data(5);
      AugmentConfig cfg;
      const int n = 32;
      for (int draw = 0; draw < 1000; ++draw) {
         const auto& d = data[draw % data.size()];
         const auto t = augment_stage2(d.image, d.mask, d.recist, cfg, std::uint64_t(draw), n, d.pad);
         const auto to_input = t.input_to_slice.inverse();
         for (const auto& p : lesion_pixels(d.mask)) {
            const auto q = to_input.apply(p);
            REQUIRE(q.x >= -0.5);
            REQUIRE(q.y >= -0.5);
            REQUIRE(q.x <= n - 0.5);
            REQUIRE(q.y <= n - 0.5);
         }
         CHECK(t.mask.count(Label::Foreground) > 0);
      }
   }

   TEST_CASE("crop factor 2 puts the lesion extent in the central half")
   {
      const Point2D c{40.0, 30.0};
      const double extent = 20.0;
      const int n = 64;
      const auto to_input = stage2_transform(c, 2 * extent, 0.0, {0, 0}, n).inverse();
      const auto lo = to_input.apply({c.x - extent / 2, c.y - extent / 2});
      const auto hi = to_input.apply({c.x + extent / 2, c.y + extent / 2});
      CHECK(lo.x == doctest::Approx(n / 4.0 - 0.5));
      CHECK(lo.y == doctest::Approx(n / 4.0 - 0.5));
      CHECK(hi.x == doctest::Approx(3 * n / 4.0 - 0.5));
      CHECK(hi.y == doctest::Approx(3 * n / 4.0 - 0.5));
   }

   TEST_CASE("LOI crop coordinate round trip")
   {
      const auto crop = LoiCrop::centered({51.3, 20.7}, 37.5, 64);
      const auto map = crop.input_to_slice();
      for (double q : {-0.5, 0.0, 13.25, 31.5, 63.0, 63.5}) {
         const Point2D p{q, 63.0 - q};
         const auto s = crop.to_slice(p);
         const auto back = crop.to_input(s);
         CHECK(back.x == doctest::Approx(p.x).epsilon(1e-12));
         CHECK(back.y == doctest::Approx(p.y).epsilon(1e-12));
         CHECK(map.apply(p).x == doctest::Approx(s.x).epsilon(1e-12));
         CHECK(map.apply(p).y == doctest::Approx(s.y).epsilon(1e-12));
      }
      const auto full = LoiCrop::full_slice(100, 100, 50);
      CHECK(full.to_slice({-0.5, -0.5}).x == doctest::Approx(-0.5));
      CHECK(full.to_slice({49.5, 49.5}).y == doctest::Approx(99.5));
   }

   TEST_CASE("batch tensors and side sizes")
   {
      const auto spec = tiny_spec(2, 1);
      const auto data = tiny_data(2);
      std::vector<TrainingSample> samples;
      std::vector<Point2D> clicks;
      for (std::size_t i = 0; i < data.size(); ++i) {
         samples.push_back(draw_sample(spec, data[i], i));
         clicks.push_back(training_click(samples.back(), i));
      }
      const auto batch = make_batch(samples, clicks, spec.model, spec.sigma);
      CHECK(batch.ct.sizes() == torch::IntArrayRef{2, 1, 32, 32});
      CHECK(batch.prior3.sizes() == torch::IntArrayRef{2, 3, 32, 32});
      REQUIRE(batch.heat_targets.size() == 3);
      CHECK(batch.heat_targets[0].sizes() == torch::IntArrayRef{2, 4, 32, 32});
      CHECK(batch.heat_targets[1].sizes() == torch::IntArrayRef{2, 4, 16, 16});
      CHECK(batch.heat_targets[2].sizes() == torch::IntArrayRef{2, 4, 8, 8});
      CHECK(mask_side_sizes(spec.model) == std::vector<std::int64_t>{16, 8, 4, 2, 1, 16, 8, 4, 2, 1, 32});
      auto no_pe = spec.model;
      no_pe.enable_pe = false;
      CHECK(mask_side_sizes(no_pe) == std::vector<std::int64_t>{16, 8, 4, 2, 1, 32});
      for (std::size_t i = 0; i < clicks.size(); ++i) {
         CHECK(samples[i].mask(int(std::lround(clicks[i].x)), int(std::lround(clicks[i].y))) != Label::Background);
      }
   }

   TEST_CASE("training is deterministic for a fixed seed")
   {
      const auto data = tiny_data(4);
      const auto spec = tiny_spec(2, 3);
      auto a = train_stage(spec, data);
      auto b = train_stage(spec, data);
      REQUIRE(a.log.size() == 3);
      for (std::size_t i = 0; i < a.log.size(); ++i) {
         CHECK(a.log[i].total == b.log[i].total);
      }
      CHECK(same_weights(a.model, b.model));
   }

   TEST_CASE("checkpoint reload is bit-identical")
   {
      const ScratchDir dir;
      const auto data = tiny_data(2);
      auto r = train_stage(tiny_spec(1, 2), data, dir.path());
      CHECK(fs::exists(dir.path() / "log.jsonl"));
      auto loaded = load_checkpoint(dir.path());
      CHECK(loaded.meta.stage == 1);
      CHECK(same_weights(r.model, loaded.model));
      r.model->eval();
      torch::NoGradGuard ng;
      const auto ct = torch::rand({1, 1, 32, 32});
      const auto prior = torch::rand({1, 3, 32, 32});
      CHECK(torch::equal(r.model->forward(ct, prior).heatmaps(), loaded.model->forward(ct, prior).heatmaps()));
      CHECK(load_checkpoint(dir.path()).model_version == loaded.model_version);
   }

   TEST_CASE("checkpoint loading rejects corruption")
   {
      const ScratchDir dir;
      PdNet net(tiny_spec(2, 1).model);
      save_checkpoint(dir.path(), net, {tiny_spec(2, 1).model});
      std::filesystem::resize_file(dir.path() / "weights.bin", 20);
      CHECK_THROWS(load_checkpoint(dir.path()));
      CHECK_THROWS(load_checkpoint(dir.path() / "missing"));
   }

   TEST_CASE("non-finite loss stops training with a dump")
   {
      const ScratchDir dir;
      auto data = tiny_data(2);
      for (auto& v : data[0].image.pixels()) {
         v = std::nanf("");
      }
      data[1] = data[0];
      CHECK_THROWS_AS(train_stage(tiny_spec(2, 2), data, dir.path()), TrainingDiverged);
      REQUIRE(fs::exists(dir.path() / "nan_dump.json"));
      std::ifstream in(dir.path() / "nan_dump.json");
      const auto j = nlohmann::json::parse(in);
      CHECK(j.contains("step"));
   }

   TEST_CASE("click outside the slice is rejected")
   {
      const auto s = synth_sample(64, 1);
      auto spec1 = tiny_spec(1, 1);
      spec1.model.input_size = 64;
      PdNet m1(spec1.model);
      PdNet m2(tiny_spec(2, 1).model);
      CHECK_THROWS_AS(infer_two_stage(s.slice, {-3.0, 10.0}, m1, m2), std::invalid_argument);
      CHECK_THROWS_AS(infer_two_stage(s.slice, {10.0, 64.0}, m1, m2), std::invalid_argument);
   }

   TEST_CASE("stage spec JSON defaults and round trip")
   {
      const auto s1 = stage_spec_from_json({{"stage", 1}});
      CHECK(s1.model.input_size == 512);
      CHECK(s1.sigma == 3.0);
      const auto s2 = stage_spec_from_json({{"stage", 2}});
      CHECK(s2.model.input_size == 256);
      CHECK(s2.sigma == 7.0);
      auto spec = tiny_spec(2, 5);
      const auto back = stage_spec_from_json(to_json(spec));
      CHECK(back.model.input_size == 32);
      CHECK(back.train.max_steps == 5);
      CHECK(back.train.seed == 7);
   }
}
