#include "pdnet/pseudomask.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace pdnet {

std::size_t TriStateMask::count(Label l) const
{
   return static_cast<std::size_t>(
      std::count(labels_.pixels().begin(), labels_.pixels().end(), static_cast<std::uint8_t>(l)));
}

BinaryMask TriStateMask::select(Label l) const
{
   BinaryMask out(height(), width(), 0);
   for (std::size_t i = 0; i < size(); ++i) {
      out[i] = labels_[i] == static_cast<std::uint8_t>(l) ? 1 : 0;
   }
   return out;
}

TriStateMask TriStateMask::from_binary(const BinaryMask& fg)
{
   TriStateMask t(fg.height(), fg.width());
   for (std::size_t i = 0; i < fg.size(); ++i) {
      if (fg[i] != 0) {
         t.set(i, Label::Foreground);
      }
   }
   return t;
}

std::vector<std::uint8_t> pack(const TriStateMask& mask)
{
   std::vector<std::uint8_t> out(8 + (mask.size() + 3) / 4, 0);
   auto put32 = [&out](std::size_t at, std::uint32_t v) {
      for (int b = 0; b < 4; ++b) {
         out[at + b] = static_cast<std::uint8_t>(v >> (8 * b));
      }
   };
   put32(0, static_cast<std::uint32_t>(mask.height()));
   put32(4, static_cast<std::uint32_t>(mask.width()));
   for (std::size_t i = 0; i < mask.size(); ++i) {
      out[8 + i / 4] |= static_cast<std::uint8_t>(static_cast<std::uint8_t>(mask.at(i)) << (2 * (i % 4)));
   }
   return out;
}

TriStateMask unpack(const std::vector<std::uint8_t>& bytes)
{
   if (bytes.size() < 8) {
      throw std::invalid_argument("unpack: truncated header");
   }
   auto get32 = [&bytes](std::size_t at) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b) {
         v |= std::uint32_t(bytes[at + b]) << (8 * b);
      }
      return v;
   };
   const auto h = get32(0);
   const auto w = get32(4);
   const std::size_t n = std::size_t(h) * w;
   if (bytes.size() != 8 + (n + 3) / 4) {
      throw std::invalid_argument("unpack: payload size does not match header");
   }
   TriStateMask mask(static_cast<int>(h), static_cast<int>(w));
   for (std::size_t i = 0; i < n; ++i) {
      const auto v = static_cast<std::uint8_t>((bytes[8 + i / 4] >> (2 * (i % 4))) & 0x3);
      if (v > 2) {
         throw std::invalid_argument("unpack: invalid label");
      }
      mask.set(i, static_cast<Label>(v));
   }
   return mask;
}

TriStateRle to_rle(const TriStateMask& mask)
{
   return {rle_encode(mask.select(Label::Foreground)), rle_encode(mask.select(Label::Ignore))};
}

TriStateMask from_rle(const TriStateRle& rle)
{
   const auto fg = rle_decode(rle.foreground);
   const auto ig = rle_decode(rle.ignore);
   require_same_shape(fg, ig, "from_rle");
   TriStateMask mask(fg.height(), fg.width());
   for (std::size_t i = 0; i < fg.size(); ++i) {
      if (fg[i] != 0 && ig[i] != 0) {
         throw std::invalid_argument("from_rle: pixel both foreground and ignore");
      }
      if (fg[i] != 0) {
         mask.set(i, Label::Foreground);
      } else if (ig[i] != 0) {
         mask.set(i, Label::Ignore);
      }
   }
   return mask;
}

namespace {

// Three-pixel line elements through the center: diagonal, vertical, anti-diagonal, horizontal.
constexpr std::array<std::array<int, 2>, 4> kLines = {{{1, 1}, {0, 1}, {1, -1}, {1, 0}}};

std::uint8_t sample(const BinaryMask& u, int x, int y)
{
   return u.contains(x, y) ? u(x, y) : 0;
}

} // namespace

BinaryMask sup_inf(const BinaryMask& u)
{
   BinaryMask out(u.height(), u.width(), 0);
   for (int y = 0; y < u.height(); ++y) {
      for (int x = 0; x < u.width(); ++x) {
         std::uint8_t v = 0;
         for (const auto& d : kLines) {
            if (sample(u, x, y) && sample(u, x + d[0], y + d[1]) && sample(u, x - d[0], y - d[1])) {
               v = 1;
               break;
            }
         }
         out(x, y) = v;
      }
   }
   return out;
}

BinaryMask inf_sup(const BinaryMask& u)
{
   BinaryMask out(u.height(), u.width(), 0);
   for (int y = 0; y < u.height(); ++y) {
      for (int x = 0; x < u.width(); ++x) {
         std::uint8_t v = 1;
         for (const auto& d : kLines) {
            if (!(sample(u, x, y) || sample(u, x + d[0], y + d[1]) || sample(u, x - d[0], y - d[1]))) {
               v = 0;
               break;
            }
         }
         out(x, y) = v;
      }
   }
   return out;
}

SnakeResult morph_snake(const RealImage& image, const BinaryMask& init, const SnakeConfig& cfg)
{
   require_same_shape(image, init, "morph_snake");
   if (count_foreground(init) == 0) {
      throw std::invalid_argument("morph_snake: empty initial mask");
   }
   if (cfg.iterations < 1 || !(cfg.lambda_in > 0.0) || !(cfg.lambda_out > 0.0) || cfg.smoothing_passes < 0) {
      throw std::invalid_argument("morph_snake: invalid config");
   }

   const int h = image.height();
   const int w = image.width();
   BinaryMask u(h, w, 0);
   for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] = init[i] != 0 ? 1 : 0;
   }
   SnakeResult result{u, false};
   std::size_t curvature_calls = 0;

   auto at = [&u](int x, int y) { return double(u(x, y)); };
   for (int it = 0; it < cfg.iterations; ++it) {
      double sum_in = 0.0;
      double sum_out = 0.0;
      std::size_t n_in = 0;
      for (std::size_t i = 0; i < u.size(); ++i) {
         if (u[i]) {
            sum_in += image[i];
            ++n_in;
         } else {
            sum_out += image[i];
         }
      }
      const std::size_t n_out = u.size() - n_in;
      const double c_in = n_in > 0 ? sum_in / double(n_in) : 0.0;
      const double c_out = n_out > 0 ? sum_out / double(n_out) : 0.0;

      BinaryMask next = u;
      for (int y = 0; y < h; ++y) {
         for (int x = 0; x < w; ++x) {
            // Central differences inside, one-sided at the border.
            double gx = 0.0;
            double gy = 0.0;
            if (w > 1) {
               gx = x == 0 ? at(1, y) - at(0, y)
                  : x == w - 1 ? at(w - 1, y) - at(w - 2, y)
                  : 0.5 * (at(x + 1, y) - at(x - 1, y));
            }
            if (h > 1) {
               gy = y == 0 ? at(x, 1) - at(x, 0)
                  : y == h - 1 ? at(x, h - 1) - at(x, h - 2)
                  : 0.5 * (at(x, y + 1) - at(x, y - 1));
            }
            const double grad = std::abs(gx) + std::abs(gy);
            if (grad == 0.0) {
               continue;
            }
            const double v = image(x, y);
            const double force = cfg.lambda_in * (v - c_in) * (v - c_in) - cfg.lambda_out * (v - c_out) * (v - c_out);
            if (force < 0.0) {
               next(x, y) = 1;
            } else if (force > 0.0) {
               next(x, y) = 0;
            }
         }
      }
      u = std::move(next);

      for (int s = 0; s < cfg.smoothing_passes; ++s, ++curvature_calls) {
         u = curvature_calls % 2 == 0 ? sup_inf(inf_sup(u)) : inf_sup(sup_inf(u));
      }

      if (count_foreground(u) == 0) {
         result.collapsed = true;
         return result;
      }
      result.mask = u;
   }
   return result;
}

TriStateMask build_pseudo_mask(const BinaryMask& ellipse_mask, const BinaryMask& refined)
{
   require_same_shape(ellipse_mask, refined, "build_pseudo_mask");
   TriStateMask out(ellipse_mask.height(), ellipse_mask.width());
   std::size_t fg = 0;
   for (std::size_t i = 0; i < ellipse_mask.size(); ++i) {
      const bool a = ellipse_mask[i] != 0;
      const bool b = refined[i] != 0;
      if (a && b) {
         out.set(i, Label::Foreground);
         ++fg;
      } else if (a != b) {
         out.set(i, Label::Ignore);
      }
   }
   if (fg == 0) {
      throw RefinementDiverged();
   }
   return out;
}

TriStateMask refine_round(const BinaryMask& model_mask, const RealImage& image, const BinaryMask& ellipse_mask,
                          const SnakeConfig& cfg)
{
   require_same_shape(model_mask, ellipse_mask, "refine_round");
   return build_pseudo_mask(ellipse_mask, morph_snake(image, model_mask, cfg).mask);
}

} // namespace pdnet
