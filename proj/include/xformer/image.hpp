#pragma once

// Deliberately primitive image input: an uncompressed byte raster with a
// 16-byte header, no codecs. Layout, integers little-endian:
//   "XIM1" | width u32 | height u32 | channels u32 |
//   rows top to bottom, channel-interleaved u8 samples
// to_tensor scales to [0,1] in {channels, height, width} planar order;
// bilinear_resize maps pixel centers (align-corners false) for the model's
// input resolution.

#include "xformer/archive.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xf {

struct ImageError : std::runtime_error {
  explicit ImageError(const std::string& what) : std::runtime_error(what) {}
};

struct RasterImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

inline constexpr char raster_magic[4] = {'X', 'I', 'M', '1'};

inline void write_raster(const RasterImage& img, const std::string& path) {
  const std::size_t expect = static_cast<std::size_t>(img.width) * img.height *
                             img.channels;
  if (img.width <= 0 || img.height <= 0 || img.channels <= 0 ||
      img.pixels.size() != expect)
    throw ImageError("raster: inconsistent image fields");
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw ImageError("raster: cannot open " + path);
  out.write(raster_magic, 4);
  detail::write_u32(out, static_cast<std::uint32_t>(img.width));
  detail::write_u32(out, static_cast<std::uint32_t>(img.height));
  detail::write_u32(out, static_cast<std::uint32_t>(img.channels));
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out.good()) throw ImageError("raster: write failed for " + path);
}

inline RasterImage read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ImageError("raster: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, raster_magic))
    throw ImageError("raster: bad magic in " + path);
  RasterImage img;
  try {
    img.width = static_cast<int>(detail::read_u32(in, "width"));
    img.height = static_cast<int>(detail::read_u32(in, "height"));
    img.channels = static_cast<int>(detail::read_u32(in, "channels"));
  } catch (const ArchiveError& e) {
    throw ImageError(std::string("raster: ") + e.what());
  }
  if (img.width <= 0 || img.height <= 0 || img.channels <= 0 ||
      img.width > 1 << 16 || img.height > 1 << 16 || img.channels > 16)
    throw ImageError("raster: implausible dimensions in " + path);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height *
                        img.channels;
  img.pixels.resize(n);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw ImageError("raster: truncated pixel data in " + path);
  in.peek();
  if (!in.eof()) throw ImageError("raster: trailing bytes in " + path);
  return img;
}

template <typename Scalar>
Tensor<Scalar> to_tensor(const RasterImage& img) {
  Tensor<Scalar> t({img.channels, img.height, img.width});
  Scalar* d = t.data();
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        *d++ = static_cast<Scalar>(
                   img.pixels[(static_cast<std::size_t>(y) * img.width + x) *
                                  img.channels +
                              c]) /
               Scalar(255);
  return t;
}

// Plain preprocessing resample on a {C,H,W} tensor; not differentiated.
template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& x, int out_h, int out_w) {
  const Shape& sh = x.shape();
  check(sh.size() == 3, "bilinear_resize: expected {C,H,W}, got " +
                            shape_str(sh));
  check(out_h > 0 && out_w > 0, "bilinear_resize: output dims must be > 0");
  const int c = sh[0], h = sh[1], w = sh[2];
  Tensor<Scalar> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  const Scalar* src = x.data();
  Scalar* dst = out.data();
  for (int ch = 0; ch < c; ++ch) {
    const Scalar* plane = src + static_cast<std::int64_t>(ch) * h * w;
    for (int oy = 0; oy < out_h; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      if (fy < 0) fy = 0;
      if (fy > h - 1) fy = h - 1;
      const int y0 = static_cast<int>(fy);
      const int y1 = y0 < h - 1 ? y0 + 1 : y0;
      const double wy = fy - y0;
      for (int ox = 0; ox < out_w; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        if (fx < 0) fx = 0;
        if (fx > w - 1) fx = w - 1;
        const int x0 = static_cast<int>(fx);
        const int x1 = x0 < w - 1 ? x0 + 1 : x0;
        const double wx = fx - x0;
        const double top = (1 - wx) * plane[y0 * w + x0] +
                           wx * plane[y0 * w + x1];
        const double bot = (1 - wx) * plane[y1 * w + x0] +
                           wx * plane[y1 * w + x1];
        *dst++ = static_cast<Scalar>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

// Quantizes a [0,1] {C,H,W} tensor back to bytes (used to stage synthetic
// inputs for the inference path).
template <typename Scalar>
RasterImage from_tensor(const Tensor<Scalar>& t) {
  const Shape& sh = t.shape();
  check(sh.size() == 3, "from_tensor: expected {C,H,W}, got " + shape_str(sh));
  RasterImage img;
  img.channels = sh[0];
  img.height = sh[1];
  img.width = sh[2];
  img.pixels.resize(static_cast<std::size_t>(t.numel()));
  const Scalar* d = t.data();
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double v = static_cast<double>(*d++) * 255.0 + 0.5;
        if (v < 0) v = 0;
        if (v > 255) v = 255;
        img.pixels[(static_cast<std::size_t>(y) * img.width + x) *
                       img.channels +
                   c] = static_cast<std::uint8_t>(v);
      }
  return img;
}

}  // namespace xf
