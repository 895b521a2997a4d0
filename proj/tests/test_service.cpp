#include "pdnet/service.hpp"

#undef CHECK
#include <doctest.h>

#include <thread>

#include <httplib.h>
#include <opencv2/imgcodecs.hpp>

#include "scratch.hpp"

using namespace pdnet;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(int size)
{
   ModelConfig cfg;
   cfg.input_size = size;
   cfg.tiny_base_channels = 4;
   cfg.compress_channels = 4;
   cfg.aspp_branch_channels = 2;
   return cfg;
}

/// Checkpoint whose full-resolution mask logits are the constant `bias`.
LoadedCheckpoint constant_mask_model(const fs::path& dir, int stage, int size, float bias)
{
   torch::manual_seed(0);
   PdNet net(tiny(size));
   for (auto& p : net->named_parameters()) {
      if (p.key().rfind("mask_head_full.", 0) == 0) {
         torch::NoGradGuard ng;
         p.value().fill_(p.key() == "mask_head_full.bias" ? bias : 0.0f);
      }
   }
   CheckpointMeta meta{net->config()};
   meta.stage = stage;
   save_checkpoint(dir, net, meta);
   return load_checkpoint(dir);
}

struct Fixture {
   ScratchDir dir;
   DatasetIndex index;

   Fixture() { index = synth_dataset(3, 64, 5, dir.path() / "data"); }

   MeasureService service(float bias)
   {
      const auto tag = std::to_string(int(bias));
      return MeasureService(constant_mask_model(dir.path() / ("s1_" + tag), 1, 64, bias),
                            constant_mask_model(dir.path() / ("s2_" + tag), 2, 32, bias), index);
   }
};

nlohmann::json body_of(const HttpResponse& r)
{
   return nlohmann::json::parse(r.body);
}

} // namespace

TEST_SUITE("service")
{
   TEST_CASE("base64 round trip and validation")
   {
      for (const std::string& s : std::vector<std::string>{"", "a", "ab", "abc", "abcd", std::string("\0\xff\x10", 3)}) {
         CHECK(base64_decode(base64_encode(s)) == s);
      }
      CHECK(base64_encode("abc") == "YWJj");
      CHECK(base64_encode("ab") == "YWI=");
      CHECK_THROWS_AS(base64_decode("YWJ"), std::invalid_argument);
      CHECK_THROWS_AS(base64_decode("YW!j"), std::invalid_argument);
   }

   TEST_CASE("inline slice payload round trip")
   {
      const auto s = synth_sample(24, 9).slice;
      const auto payload = encode_inline_slice(s);
      const auto back = decode_inline_slice(payload, s.spacing_mm);
      CHECK(back.pixels == s.pixels);
      auto bad = payload;
      bad["width"] = 23;
      CHECK_THROWS_AS(decode_inline_slice(bad, 1.0), std::invalid_argument);
      CHECK_THROWS_AS(decode_inline_slice(payload, 0.0), std::invalid_argument);
   }

   TEST_CASE("measure request errors")
   {
      Fixture f;
      auto svc = f.service(10.0f);
      const auto id = f.index.records[0].id;
      CHECK(svc.measure("not json").status == 400);
      CHECK(svc.measure(R"({"image_id": ")" + id + R"("})").status == 400);
      CHECK(svc.measure(R"({"image_id": ")" + id + R"(", "click": "x"})").status == 400);
      CHECK(svc.measure(R"({"image_id": ")" + id + R"(", "click": [70, 3]})").status == 400);
      CHECK(svc.measure(R"({"image_id": "nope", "click": [3, 3]})").status == 404);
      nlohmann::json inline_req{{"click", {3, 3}}, {"image", {{"width", 4}, {"height", 4}, {"data", "AAAA"}}}};
      inline_req["spacing_mm"] = 1.0;
      CHECK(svc.measure(inline_req.dump()).status == 400);
      const auto err = body_of(svc.measure("[]"));
      CHECK(err.at("status") == 400);
      CHECK(err.contains("error"));
   }

   TEST_CASE("measure reports 422 when nothing is segmented")
   {
      Fixture f;
      auto svc = f.service(-10.0f);
      const auto r = svc.measure(R"({"image_id": ")" + f.index.records[0].id + R"(", "click": [30, 30]})");
      CHECK(r.status == 422);
      CHECK(body_of(r).at("error") == "no lesion at click");
   }

   TEST_CASE("measure returns a mask and diameters")
   {
      Fixture f;
      auto svc = f.service(10.0f);
      const auto& rec = f.index.records[1];
      const auto r = svc.measure(R"({"image_id": ")" + rec.id + R"(", "click": {"x": 31, "y": 33}})");
      REQUIRE(r.status == 200);
      const auto j = body_of(r);
      for (const char* key : {"mask_rle", "recist", "long_mm", "short_mm", "loi", "stage1_mask_rle", "model_version"}) {
         CHECK(j.contains(key));
      }
      CHECK(j.at("model_version") == svc.model_version());
      CHECK(j.at("long_mm").get<double>() >= j.at("short_mm").get<double>());
      const auto mask = rle_decode(rle_from_json(j.at("mask_rle")));
      CHECK(mask.width() == 64);
      CHECK(count_foreground(mask) > 0);

      const auto slice = load_record_slice(f.index, rec);
      nlohmann::json inline_req{{"click", {31, 33}}, {"image", encode_inline_slice(slice)}, {"spacing_mm", rec.spacing_mm}};
      const auto r2 = svc.measure(inline_req.dump());
      REQUIRE(r2.status == 200);
      CHECK(body_of(r2).at("mask_rle") == j.at("mask_rle"));
   }

   TEST_CASE("image listing, detail and preview")
   {
      Fixture f;
      auto svc = f.service(10.0f);
      const auto list = body_of(svc.list_images());
      CHECK(list.at("count") == 3);
      const auto id = f.index.records[2].id;
      CHECK(body_of(svc.image_detail(id)).at("width") == 64);
      CHECK(svc.image_detail("missing").status == 404);
      CHECK(svc.image_preview("missing", {}).status == 404);
      CHECK(svc.image_preview(id, {{"lo", "5"}, {"hi", "5"}}).status == 400);
      CHECK(svc.image_preview(id, {{"lo", "abc"}}).status == 400);
      const auto a = svc.image_preview(id, {});
      CHECK(a.status == 200);
      CHECK(a.content_type == "image/png");
      CHECK(svc.image_preview(id, {}).body == a.body);
   }

   TEST_CASE("preview maps the window ends to 0 and 255")
   {
      CtSlice s;
      s.pixels = Image<std::int16_t>(1, 3);
      s.pixels[0] = -3000;
      s.pixels[1] = 12;
      s.pixels[2] = 3000;
      const auto png = render_preview_png(s, {});
      const auto img = cv::imdecode(std::vector<uchar>(png.begin(), png.end()), cv::IMREAD_UNCHANGED);
      REQUIRE(img.type() == CV_8U);
      CHECK(img.at<uchar>(0, 0) == 0);
      CHECK(img.at<uchar>(0, 2) == 255);
      CHECK(img.at<uchar>(0, 1) > 0);
      CHECK(img.at<uchar>(0, 1) < 255);
   }

   TEST_CASE("HTTP routes over a socket")
   {
      Fixture f;
      auto svc = f.service(10.0f);
      httplib::Server server;
      svc.mount(server);
      const int port = server.bind_to_any_port("127.0.0.1");
      REQUIRE(port > 0);
      std::thread worker([&] { server.listen_after_bind(); });
      server.wait_until_ready();

      httplib::Client client("127.0.0.1", port);
      const auto list = client.Get("/api/images");
      REQUIRE(list);
      CHECK(list->status == 200);
      CHECK(list->get_header_value("Access-Control-Allow-Origin") == "*");
      const auto options = client.Options("/api/measure");
      REQUIRE(options);
      CHECK(options->status == 204);
      CHECK(options->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
      const auto id = f.index.records[0].id;
      const auto preview = client.Get("/api/images/" + id + "/preview?lo=-100&hi=200");
      REQUIRE(preview);
      CHECK(preview->status == 200);
      CHECK(preview->get_header_value("Content-Type") == "image/png");
      const auto detail = client.Get("/api/images/" + id);
      REQUIRE(detail);
      CHECK(nlohmann::json::parse(detail->body).at("id") == id);
      const auto bad = client.Post("/api/measure", "{", "application/json");
      REQUIRE(bad);
      CHECK(bad->status == 400);
      const auto ok = client.Post("/api/measure", R"({"image_id": ")" + id + R"(", "click": [32, 32]})",
                                  "application/json");
      REQUIRE(ok);
      CHECK(ok->status == 200);

      server.stop();
      worker.join();
   }
}
