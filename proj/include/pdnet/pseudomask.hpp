#pragma once

#include "pdnet/image.hpp"
#include "pdnet/rle.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace pdnet {

enum class Label : std::uint8_t { Background = 0, Foreground = 1, Ignore = 2 };

/// Per-pixel weak supervision: foreground, background, or excluded from the loss.
class TriStateMask {
public:
   TriStateMask() = default;
   TriStateMask(int height, int width, Label fill = Label::Background)
      : labels_(height, width, static_cast<std::uint8_t>(fill))
   {
   }

   int height() const { return labels_.height(); }
   int width() const { return labels_.width(); }
   std::size_t size() const { return labels_.size(); }

   Label operator()(int x, int y) const { return static_cast<Label>(labels_(x, y)); }
   void set(int x, int y, Label l) { labels_(x, y) = static_cast<std::uint8_t>(l); }
   Label at(std::size_t i) const { return static_cast<Label>(labels_[i]); }
   void set(std::size_t i, Label l) { labels_[i] = static_cast<std::uint8_t>(l); }

   std::size_t count(Label l) const;
   BinaryMask select(Label l) const;
   /// Raw labels, values 0/1/2.
   const Image<std::uint8_t>& raw() const { return labels_; }

   /// Foreground only, no ignore band.
   static TriStateMask from_binary(const BinaryMask& fg);

   friend bool operator==(const TriStateMask&, const TriStateMask&) = default;

private:
   Image<std::uint8_t> labels_;
};

/// 2-bit packed stream: little-endian u32 height, u32 width, then 4 pixels per byte
/// (pixel i occupies bits 2*(i%4)..2*(i%4)+1).
std::vector<std::uint8_t> pack(const TriStateMask& mask);
TriStateMask unpack(const std::vector<std::uint8_t>& bytes);

struct TriStateRle {
   RleMask foreground;
   RleMask ignore;
};
TriStateRle to_rle(const TriStateMask& mask);
TriStateMask from_rle(const TriStateRle& rle);

struct SnakeConfig {
   int iterations = 60;
   int smoothing_passes = 2;
   double lambda_in = 1.0;
   double lambda_out = 1.0;
};

struct SnakeResult {
   BinaryMask mask;
   bool collapsed = false; ///< evolution emptied the level set; `mask` is the last non-empty iterate
};

/// Morphological Chan-Vese evolution of `init` over `image` (values in [0,1]).
SnakeResult morph_snake(const RealImage& image, const BinaryMask& init, const SnakeConfig& cfg = {});

/// Morphological curvature operators on a binary level set.
BinaryMask sup_inf(const BinaryMask& u);
BinaryMask inf_sup(const BinaryMask& u);

class RefinementDiverged : public std::runtime_error {
public:
   RefinementDiverged() : std::runtime_error("refinement diverged") {}
};

/// FG = ellipse AND refined, IGNORE = symmetric difference, BG = the rest.
/// Throws RefinementDiverged when the intersection is empty.
TriStateMask build_pseudo_mask(const BinaryMask& ellipse_mask, const BinaryMask& refined);

TriStateMask refine_round(const BinaryMask& model_mask, const RealImage& image, const BinaryMask& ellipse_mask,
                          const SnakeConfig& cfg = {});

} // namespace pdnet
