#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdnet {

/// Dense row-major 2D raster. Pixel (x, y) is column x, row y; its center sits
/// at integer coordinates.
template <typename T>
class Image {
public:
   Image() = default;
   Image(int height, int width, T fill = T{})
      : height_(height), width_(width)
   {
      if (height < 0 || width < 0) {
         throw std::invalid_argument("Image: negative shape");
      }
      data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
   }

   int height() const { return height_; }
   int width() const { return width_; }
   std::size_t size() const { return data_.size(); }
   bool empty() const { return data_.empty(); }

   bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

   T& operator()(int x, int y) { return data_[index(x, y)]; }
   const T& operator()(int x, int y) const { return data_[index(x, y)]; }

   T& operator[](std::size_t i) { return data_[i]; }
   const T& operator[](std::size_t i) const { return data_[i]; }

   std::span<T> pixels() { return data_; }
   std::span<const T> pixels() const { return data_; }
   T* data() { return data_.data(); }
   const T* data() const { return data_.data(); }

   bool same_shape(const Image& other) const
   {
      return height_ == other.height_ && width_ == other.width_;
   }
   template <typename U>
   bool same_shape(const Image<U>& other) const
   {
      return height_ == other.height() && width_ == other.width();
   }

   friend bool operator==(const Image& a, const Image& b)
   {
      return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
   }

private:
   std::size_t index(int x, int y) const
   {
      return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
   }

   int height_ = 0;
   int width_ = 0;
   std::vector<T> data_;
};

/// Foreground where the value is non-zero.
using BinaryMask = Image<std::uint8_t>;
using RealImage = Image<float>;

inline std::size_t count_foreground(const BinaryMask& mask)
{
   std::size_t n = 0;
   for (auto v : mask.pixels()) {
      n += v != 0 ? 1 : 0;
   }
   return n;
}

template <typename A, typename B>
void require_same_shape(const Image<A>& a, const Image<B>& b, const char* what)
{
   if (a.height() != b.height() || a.width() != b.width()) {
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
   }
}

} // namespace pdnet
