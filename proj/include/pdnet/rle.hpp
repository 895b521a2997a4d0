#pragma once

#include "pdnet/image.hpp"

#include <cstdint>
#include <vector>

#include <json.hpp>

namespace pdnet {

/// Row-major run lengths alternating background/foreground, first run background
/// (possibly zero). Runs sum to height * width.
struct RleMask {
   int height = 0;
   int width = 0;
   std::vector<std::uint32_t> counts;

   friend bool operator==(const RleMask&, const RleMask&) = default;
};

RleMask rle_encode(const BinaryMask& mask);
BinaryMask rle_decode(const RleMask& rle);

nlohmann::json to_json(const RleMask& rle);
RleMask rle_from_json(const nlohmann::json& j);

} // namespace pdnet
