#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bdsynth/error.hpp"
#include "bdsynth/hash.hpp"
#include "bdsynth/io.hpp"
#include "bdsynth/tensor.hpp"

namespace bdsynth {

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Rect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int area() const noexcept { return std::max(0, x1 - x0) * std::max(0, y1 - y0); }
  bool contains(int x, int y) const noexcept { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  Rect intersect(const Rect& o) const noexcept {
    return {std::max(x0, o.x0), std::max(y0, o.y0), std::min(x1, o.x1), std::min(y1, o.y1)};
  }
  bool operator==(const Rect&) const = default;
};

/// Ground-truth content metadata carried in the image file header.
/// Only the synthetic backends read or write it.
struct ImageMeta {
  std::vector<std::string> tags;
  std::optional<int> subject_class;
  std::optional<Rect> glyph;
  std::optional<std::string> trigger;
  std::optional<Rect> patch;

  bool operator==(const ImageMeta&) const = default;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// 8-bit RGB raster, row-major, interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
  ImageMeta meta;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  Rgb pixel(int x, int y) const {
    auto i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  void set(int x, int y, Rgb c) {
    auto i = (static_cast<std::size_t>(y) * width + x) * 3;
    rgb[i] = c.r;
    rgb[i + 1] = c.g;
    rgb[i + 2] = c.b;
  }
  bool operator==(const Image&) const = default;
};

namespace detail {

inline std::string rect_str(const Rect& r) {
  return std::to_string(r.x0) + "," + std::to_string(r.y0) + "," + std::to_string(r.x1) + "," + std::to_string(r.y1);
}

inline Rect parse_rect(const std::string& s) {
  Rect r;
  char c1, c2, c3;
  std::istringstream in(s);
  if (!(in >> r.x0 >> c1 >> r.y0 >> c2 >> r.x1 >> c3 >> r.y1)) throw ParseError("bad rect '" + s + "'");
  return r;
}

}  // namespace detail

/// Binary PPM (P6) with metadata stored as `# key=value` header comments.
inline std::string encode_ppm(const Image& img) {
  std::ostringstream out;
  out << "P6\n";
  if (!img.meta.tags.empty()) {
    out << "# tags=";
    for (std::size_t i = 0; i < img.meta.tags.size(); ++i) out << (i ? "," : "") << img.meta.tags[i];
    out << "\n";
  }
  if (img.meta.subject_class) out << "# subject=" << *img.meta.subject_class << "\n";
  if (img.meta.glyph) out << "# glyph=" << detail::rect_str(*img.meta.glyph) << "\n";
  if (img.meta.trigger) out << "# trigger=" << *img.meta.trigger << "\n";
  if (img.meta.patch) out << "# patch=" << detail::rect_str(*img.meta.patch) << "\n";
  out << img.width << " " << img.height << "\n255\n";
  std::string s = out.str();
  s.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return s;
}

inline Image decode_ppm(const std::string& bytes, const std::string& name = "image") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> ParseError { return ParseError(name + ": " + why); };
  auto read_line = [&]() {
    auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw fail("truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (read_line() != "P6") throw fail("not a binary PPM");
  Image img;
  std::string line;
  while (!(line = read_line()).empty() && line[0] == '#') {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(2, eq - 2), value = line.substr(eq + 1);
    if (key == "tags") {
      std::istringstream in(value);
      std::string tag;
      while (std::getline(in, tag, ',')) img.meta.tags.push_back(tag);
    } else if (key == "subject") {
      img.meta.subject_class = std::stoi(value);
    } else if (key == "glyph") {
      img.meta.glyph = detail::parse_rect(value);
    } else if (key == "trigger") {
      img.meta.trigger = value;
    } else if (key == "patch") {
      img.meta.patch = detail::parse_rect(value);
    }
  }
  std::istringstream dims(line);
  if (!(dims >> img.width >> img.height) || img.width <= 0 || img.height <= 0) throw fail("bad dimensions");
  if (read_line() != "255") throw fail("unsupported max value");
  auto n = static_cast<std::size_t>(img.width) * img.height * 3;
  if (bytes.size() - pos != n) throw fail("pixel data size mismatch");
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

inline Image read_image(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error&) {
    throw BackendError("cannot read image " + path.string());
  }
  return decode_ppm(bytes, path.string());
}

inline void write_image(const Image& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_ppm(img));
}

/// Converts to a [0,1] float tensor (3 x H x W), resampling to `size` x `size`.
/// Integer downscale factors use box averaging; anything else is bilinear.
inline Tensor to_tensor(const Image& img, int size) {
  Tensor t(3, size, size);
  if (size == img.width && size == img.height) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int c = 0; c < 3; ++c)
          t.at(c, y, x) = img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] / 255.0f;
    return t;
  }
  if (img.width == img.height && img.width % size == 0) {
    int f = img.width / size;
    float norm = 1.0f / (255.0f * f * f);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int c = 0; c < 3; ++c) {
          int acc = 0;
          for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx)
              acc += img.rgb[(static_cast<std::size_t>(y * f + dy) * img.width + x * f + dx) * 3 + c];
          t.at(c, y, x) = acc * norm;
        }
    return t;
  }
  double sx = static_cast<double>(img.width) / size, sy = static_cast<double>(img.height) / size;
  for (int y = 0; y < size; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height - 1);
    double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width - 1);
      double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto px = [&](int xx, int yy) { return img.rgb[(static_cast<std::size_t>(yy) * img.width + xx) * 3 + c]; };
        double v = (1 - wy) * ((1 - wx) * px(x0, y0) + wx * px(x1, y0)) + wy * ((1 - wx) * px(x0, y1) + wx * px(x1, y1));
        t.at(c, y, x) = static_cast<float>(v / 255.0);
      }
    }
  }
  return t;
}

/// Maps a rectangle from image pixel coordinates to a `size` x `size` grid (covering cells).
inline Rect scale_rect(const Rect& r, int from_w, int from_h, int to_w, int to_h) {
  auto lo = [](int v, int from, int to) { return static_cast<int>(std::floor(static_cast<double>(v) * to / from)); };
  auto hi = [](int v, int from, int to) { return static_cast<int>(std::ceil(static_cast<double>(v) * to / from)); };
  return {lo(r.x0, from_w, to_w), lo(r.y0, from_h, to_h), hi(r.x1, from_w, to_w), hi(r.y1, from_h, to_h)};
}

}  // namespace bdsynth
