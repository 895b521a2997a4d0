#include "pdnet/rle.hpp"

#include <stdexcept>

namespace pdnet {

RleMask rle_encode(const BinaryMask& mask)
{
   RleMask rle{mask.height(), mask.width(), {}};
   bool current = false;
   std::uint32_t run = 0;
   for (auto v : mask.pixels()) {
      const bool fg = v != 0;
      if (fg != current) {
         rle.counts.push_back(run);
         run = 0;
         current = fg;
      }
      ++run;
   }
   rle.counts.push_back(run);
   return rle;
}

BinaryMask rle_decode(const RleMask& rle)
{
   BinaryMask mask(rle.height, rle.width, 0);
   std::size_t pos = 0;
   bool fg = false;
   for (auto run : rle.counts) {
      if (pos + run > mask.size()) {
         throw std::invalid_argument("rle_decode: runs exceed mask size");
      }
      for (std::uint32_t i = 0; i < run; ++i) {
         mask[pos++] = fg ? 1 : 0;
      }
      fg = !fg;
   }
   if (pos != mask.size()) {
      throw std::invalid_argument("rle_decode: runs do not cover the mask");
   }
   return mask;
}

nlohmann::json to_json(const RleMask& rle)
{
   return {{"height", rle.height}, {"width", rle.width}, {"counts", rle.counts}};
}

RleMask rle_from_json(const nlohmann::json& j)
{
   RleMask rle;
   rle.height = j.at("height").get<int>();
   rle.width = j.at("width").get<int>();
   rle.counts = j.at("counts").get<std::vector<std::uint32_t>>();
   return rle;
}

} // namespace pdnet
