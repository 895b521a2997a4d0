#include "pdnet/service.hpp"

#include "pdnet/rle.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <httplib.h>
#include <opencv2/imgcodecs.hpp>

namespace pdnet {

namespace {

class HttpError : public std::runtime_error {
public:
   HttpError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
   int status() const { return status_; }

private:
   int status_;
};

HttpResponse json_response(int status, const nlohmann::json& body)
{
   return {status, "application/json", body.dump(), {}};
}

Point2D parse_click(const nlohmann::json& j)
{
   if (j.is_array() && j.size() == 2 && j[0].is_number() && j[1].is_number()) {
      return {j[0].get<double>(), j[1].get<double>()};
   }
   if (j.is_object() && j.contains("x") && j.contains("y") && j["x"].is_number() && j["y"].is_number()) {
      return {j["x"].get<double>(), j["y"].get<double>()};
   }
   throw HttpError(400, "click must be [x, y] or {\"x\", \"y\"}");
}

} // namespace

std::string base64_encode(const std::string& bytes)
{
   using namespace boost::archive::iterators;
   using It = base64_from_binary<transform_width<std::string::const_iterator, 6, 8>>;
   std::string out(It(bytes.begin()), It(bytes.end()));
   out.append((3 - bytes.size() % 3) % 3, '=');
   return out;
}

std::string base64_decode(const std::string& text)
{
   using namespace boost::archive::iterators;
   using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
   std::string clean;
   for (char c : text) {
      if (!std::isspace(static_cast<unsigned char>(c))) {
         clean.push_back(c);
      }
   }
   if (clean.size() % 4 != 0) {
      throw std::invalid_argument("base64: length is not a multiple of 4");
   }
   std::size_t padding = 0;
   while (!clean.empty() && clean.back() == '=') {
      clean.pop_back();
      ++padding;
   }
   if (padding > 2) {
      throw std::invalid_argument("base64: bad padding");
   }
   for (char c : clean) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '+' && c != '/') {
         throw std::invalid_argument("base64: invalid character");
      }
   }
   const std::size_t out_len = (clean.size() + padding) / 4 * 3 - padding;
   clean.append(padding, 'A');
   std::string out(It(clean.begin()), It(clean.end()));
   out.resize(out_len);
   return out;
}

CtSlice decode_inline_slice(const nlohmann::json& payload, double spacing_mm)
{
   if (!payload.is_object() || !payload.contains("width") || !payload.contains("height") ||
       !payload.contains("data") || !payload["width"].is_number_integer() || !payload["height"].is_number_integer() ||
       !payload["data"].is_string()) {
      throw std::invalid_argument("inline image needs integer width, height and base64 data");
   }
   const int w = payload["width"].get<int>();
   const int h = payload["height"].get<int>();
   if (w < 1 || h < 1 || w > 8192 || h > 8192) {
      throw std::invalid_argument("inline image has an invalid shape");
   }
   if (!(spacing_mm > 0.0) || !std::isfinite(spacing_mm)) {
      throw std::invalid_argument("spacing_mm must be positive");
   }
   const auto bytes = base64_decode(payload["data"].get<std::string>());
   if (bytes.size() != std::size_t(w) * std::size_t(h) * 2) {
      throw std::invalid_argument("inline image data has the wrong length");
   }
   CtSlice s;
   s.pixels = Image<std::int16_t>(h, w);
   s.spacing_mm = spacing_mm;
   s.id = payload.value("id", std::string("inline"));
   for (std::size_t i = 0; i < s.pixels.size(); ++i) {
      const auto lo = static_cast<unsigned char>(bytes[2 * i]);
      const auto hi = static_cast<unsigned char>(bytes[2 * i + 1]);
      s.pixels[i] = static_cast<std::int16_t>(int(lo | (hi << 8)) - kHuOffset);
   }
   return s;
}

nlohmann::json encode_inline_slice(const CtSlice& slice)
{
   std::string bytes(slice.pixels.size() * 2, '\0');
   for (std::size_t i = 0; i < slice.pixels.size(); ++i) {
      const auto v = static_cast<std::uint16_t>(int(slice.pixels[i]) + kHuOffset);
      bytes[2 * i] = static_cast<char>(v & 0xff);
      bytes[2 * i + 1] = static_cast<char>(v >> 8);
   }
   return {{"width", slice.width()}, {"height", slice.height()}, {"data", base64_encode(bytes)}};
}

std::string render_preview_png(const CtSlice& slice, HuWindow window)
{
   const auto norm = window_normalize(slice, window);
   cv::Mat img(slice.height(), slice.width(), CV_8U);
   for (int y = 0; y < slice.height(); ++y) {
      for (int x = 0; x < slice.width(); ++x) {
         img.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(norm(x, y) * 255.0f));
      }
   }
   std::vector<std::uint8_t> buf;
   cv::imencode(".png", img, buf);
   return {buf.begin(), buf.end()};
}

MeasureService::MeasureService(LoadedCheckpoint stage1, LoadedCheckpoint stage2, std::optional<DatasetIndex> index,
                               InferConfig cfg)
    : stage1_(std::move(stage1)), stage2_(std::move(stage2)), index_(std::move(index)), cfg_(cfg)
{
   cfg_.validate();
   model_version_ = stage1_.model_version + "+" + stage2_.model_version;
}

HttpResponse MeasureService::error(int status, const std::string& message, bool with_id)
{
   nlohmann::json body{{"error", message}, {"status", status}};
   HttpResponse r = json_response(status, body);
   if (with_id) {
      char id[32];
      std::snprintf(id, sizeof(id), "req-%08lu", ++request_counter_);
      r.correlation_id = id;
      body["correlation_id"] = r.correlation_id;
      r.body = body.dump();
      std::fprintf(stderr, "[%s] %d %s\n", id, status, message.c_str());
   }
   return r;
}

CtSlice MeasureService::resolve_slice(const nlohmann::json& req, double* spacing) const
{
   const bool has_id = req.contains("image_id");
   const bool has_inline = req.contains("image");
   if (has_id == has_inline) {
      throw HttpError(400, "exactly one of image_id or image is required");
   }
   if (has_id) {
      if (!req["image_id"].is_string()) {
         throw HttpError(400, "image_id must be a string");
      }
      const auto id = req["image_id"].get<std::string>();
      const auto* rec = index_ ? index_->find(id) : nullptr;
      if (!rec) {
         throw HttpError(404, "unknown image_id: " + id);
      }
      auto slice = load_record_slice(*index_, *rec);
      *spacing = slice.spacing_mm;
      return slice;
   }
   if (!req.contains("spacing_mm") || !req["spacing_mm"].is_number()) {
      throw HttpError(400, "spacing_mm is required with an inline image");
   }
   *spacing = req["spacing_mm"].get<double>();
   try {
      return decode_inline_slice(req["image"], *spacing);
   } catch (const std::invalid_argument& e) {
      throw HttpError(400, e.what());
   }
}

HttpResponse MeasureService::measure(const std::string& body)
{
   try {
      nlohmann::json req;
      try {
         req = nlohmann::json::parse(body);
      } catch (const nlohmann::json::parse_error&) {
         throw HttpError(400, "request body is not valid JSON");
      }
      if (!req.is_object() || !req.contains("click")) {
         throw HttpError(400, "click is required");
      }
      const auto click = parse_click(req["click"]);
      double spacing = 0.0;
      const auto slice = resolve_slice(req, &spacing);
      if (!std::isfinite(click.x) || !std::isfinite(click.y) || !point_in_image(click, slice.height(), slice.width())) {
         throw HttpError(400, "click outside the slice");
      }
      MeasurementResult result;
      {
         std::lock_guard lock(infer_mutex_);
         result = infer_two_stage(slice, click, stage1_.model, stage2_.model, cfg_);
      }
      nlohmann::json out{{"mask_rle", to_json(rle_encode(result.mask))},
                         {"recist", to_json(result.recist)},
                         {"long_mm", result.recist.long_mm()},
                         {"short_mm", result.recist.short_mm()},
                         {"loi", to_json(result.loi)},
                         {"stage1_mask_rle", to_json(rle_encode(result.stage1_mask))},
                         {"model_version", model_version_}};
      return json_response(200, out);
   } catch (const HttpError& e) {
      return error(e.status(), e.what());
   } catch (const NoLesionAtClick& e) {
      return error(422, e.what());
   } catch (const std::exception& e) {
      return error(500, e.what(), true);
   }
}

HttpResponse MeasureService::list_images() const
{
   nlohmann::json items = nlohmann::json::array();
   if (index_) {
      for (const auto& r : index_->records) {
         items.push_back({{"id", r.id}, {"spacing_mm", r.spacing_mm}, {"split", r.split}});
      }
   }
   return json_response(200, {{"images", items}, {"count", items.size()}, {"model_version", model_version_}});
}

HttpResponse MeasureService::image_detail(const std::string& id) const
{
   const auto* rec = index_ ? index_->find(id) : nullptr;
   if (!rec) {
      return json_response(404, {{"error", "unknown image id: " + id}, {"status", 404}});
   }
   try {
      const auto slice = load_record_slice(*index_, *rec);
      return json_response(200, {{"id", rec->id},
                                 {"width", slice.width()},
                                 {"height", slice.height()},
                                 {"spacing_mm", slice.spacing_mm},
                                 {"split", rec->split},
                                 {"preview", "/api/images/" + rec->id + "/preview"}});
   } catch (const std::exception& e) {
      return json_response(500, {{"error", e.what()}, {"status", 500}});
   }
}

HttpResponse MeasureService::image_preview(const std::string& id, const std::map<std::string, std::string>& query) const
{
   const auto* rec = index_ ? index_->find(id) : nullptr;
   if (!rec) {
      return json_response(404, {{"error", "unknown image id: " + id}, {"status", 404}});
   }
   HuWindow window;
   try {
      if (auto it = query.find("lo"); it != query.end()) {
         window.lo = std::stod(it->second);
      }
      if (auto it = query.find("hi"); it != query.end()) {
         window.hi = std::stod(it->second);
      }
   } catch (const std::exception&) {
      return json_response(400, {{"error", "lo and hi must be numbers"}, {"status", 400}});
   }
   if (!(window.lo < window.hi)) {
      return json_response(400, {{"error", "lo must be below hi"}, {"status", 400}});
   }
   return {200, "image/png", render_preview_png(load_record_slice(*index_, *rec), window), {}};
}

void MeasureService::mount(httplib::Server& server)
{
   auto send = [](httplib::Response& res, const HttpResponse& r) {
      res.status = r.status;
      if (!r.correlation_id.empty()) {
         res.set_header("X-Correlation-Id", r.correlation_id);
      }
      res.set_content(r.body, r.content_type);
   };
   server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                               {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                               {"Access-Control-Allow-Headers", "Content-Type"}});
   server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
   server.Post("/api/measure",
               [this, send](const httplib::Request& req, httplib::Response& res) { send(res, measure(req.body)); });
   server.Get("/api/images", [this, send](const httplib::Request&, httplib::Response& res) { send(res, list_images()); });
   server.Get(R"(/api/images/([^/]+)/preview)", [this, send](const httplib::Request& req, httplib::Response& res) {
      std::map<std::string, std::string> query(req.params.begin(), req.params.end());
      send(res, image_preview(req.matches[1], query));
   });
   server.Get(R"(/api/images/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, image_detail(req.matches[1]));
   });
}

} // namespace pdnet
