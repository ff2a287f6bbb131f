#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace bdsynth {

/// Dense channel-major (C x H x W) tensor for one sample.
template <class T>
struct BasicTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  BasicTensor() = default;
  BasicTensor(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const BasicTensor& o) const noexcept {
    return channels == o.channels && height == o.height && width == o.width;
  }

  T& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  const T& at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  std::span<T> channel(int c) { return {data.data() + c * plane(), plane()}; }
  std::span<const T> channel(int c) const { return {data.data() + c * plane(), plane()}; }

  bool operator==(const BasicTensor&) const = default;
};

using Tensor = BasicTensor<float>;

/// Single-channel H x W map (heatmaps, attention maps, NC masks).
struct Map2d {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Map2d() = default;
  Map2d(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}
  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

}  // namespace bdsynth
