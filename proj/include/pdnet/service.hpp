#pragma once

#include "pdnet/checkpoint.hpp"
#include "pdnet/data.hpp"
#include "pdnet/infer.hpp"

#include <atomic>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

namespace httplib {
class Server;
}

namespace pdnet {

struct HttpResponse {
   int status = 200;
   std::string content_type = "application/json";
   std::string body;
   std::string correlation_id;
};

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

/// Inline slice payload: little-endian uint16 values storing HU + 32768, row-major.
CtSlice decode_inline_slice(const nlohmann::json& payload, double spacing_mm);
nlohmann::json encode_inline_slice(const CtSlice& slice);

/// Click-to-measure over one immutable checkpoint pair. Route handlers are plain functions
/// of the request so they can be exercised without a socket.
class MeasureService {
public:
   MeasureService(LoadedCheckpoint stage1, LoadedCheckpoint stage2, std::optional<DatasetIndex> index = std::nullopt,
                  InferConfig cfg = {});

   HttpResponse measure(const std::string& body);
   HttpResponse list_images() const;
   HttpResponse image_detail(const std::string& id) const;
   HttpResponse image_preview(const std::string& id, const std::map<std::string, std::string>& query) const;

   const std::string& model_version() const { return model_version_; }

   /// Registers /api routes (with CORS) on `server`.
   void mount(httplib::Server& server);

private:
   HttpResponse error(int status, const std::string& message, bool with_id = false);
   CtSlice resolve_slice(const nlohmann::json& req, double* spacing) const;

   LoadedCheckpoint stage1_;
   LoadedCheckpoint stage2_;
   std::optional<DatasetIndex> index_;
   InferConfig cfg_;
   std::string model_version_;
   std::mutex infer_mutex_;
   std::atomic<unsigned long> request_counter_{0};
};

/// 8-bit preview: window_normalize scaled to [0, 255] and PNG-encoded.
std::string render_preview_png(const CtSlice& slice, HuWindow window);

} // namespace pdnet
