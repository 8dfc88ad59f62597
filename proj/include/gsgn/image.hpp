#pragma once

// Images are float CHW tensors with 3 channels in [0, 1]; batches are NCHW.
// PNG I/O is 8-bit RGB (value / 255 on read, round(255 * v) on write).

#include <png.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "gsgn/ops.hpp"

namespace gsgn {

using Image = Tensor<float>;

inline void check_image(const Image& img) {
  if (img.dim() != 3 || img.size(0) != 3)
    throw ShapeError("expected a 3xHxW image, got " + to_string(img.shape()));
}

inline float quantize8(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

/// Rounds every value to the nearest 8-bit level so a PNG round trip is exact.
inline Image quantize(const Image& img) {
  std::vector<float> v = img.values();
  for (auto& x : v) x = quantize8(x);
  return Image(img.shape(), std::move(v));
}

inline Image decode_png(const std::string& bytes) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw Error(std::string("PNG decode failed: ") + png.message);
  png.format = PNG_FORMAT_RGB;
  const std::size_t H = png.height, W = png.width;
  if (H == 0 || W == 0) {
    png_image_free(&png);
    throw Error("PNG has zero size");
  }
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr))
    throw Error(std::string("PNG decode failed: ") + png.message);
  std::vector<float> v(3 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) v[(c * H + y) * W + x] = buf[(y * W + x) * 3 + c] / 255.0f;
  return Image(Shape{3, H, W}, std::move(v));
}

inline std::string encode_png(const Image& img) {
  check_image(img);
  const std::size_t H = img.size(1), W = img.size(2);
  std::vector<unsigned char> buf(3 * H * W);
  const auto& v = img.values();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        buf[(y * W + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(v[(c * H + y) * W + x], 0.0f, 1.0f) * 255.0f));
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(W);
  png.height = static_cast<png_uint_32>(H);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, buf.data(), 0, nullptr))
    throw Error(std::string("PNG encode failed: ") + png.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, buf.data(), 0, nullptr))
    throw Error(std::string("PNG encode failed: ") + png.message);
  out.resize(size);
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline Image read_png(const std::filesystem::path& path) {
  try {
    return decode_png(read_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

inline void write_png(const std::filesystem::path& path, const Image& img) { write_file(path, encode_png(img)); }

/// Bilinear resampling with half-pixel centers and edge clamping.
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  check_image(img);
  if (out_h == 0 || out_w == 0) throw ShapeError("resize to a zero-sized image");
  const std::size_t H = img.size(1), W = img.size(2);
  if (H == out_h && W == out_w) return img.clone();
  const auto& v = img.values();
  std::vector<float> out(3 * out_h * out_w);
  const double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < 3; ++c) {
        const float* p = v.data() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - wx) + p[y0 * W + x1] * wx;
        const double bot = p[y1 * W + x0] * (1 - wx) + p[y1 * W + x1] * wx;
        out[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return Image(Shape{3, out_h, out_w}, std::move(out));
}

/// An image zero-padded at the bottom/right; content occupies the top-left
/// content_h x content_w rectangle.
struct PaddedImage {
  Image image;
  std::size_t content_h = 0;
  std::size_t content_w = 0;

  bool padded() const { return content_h != image.size(1) || content_w != image.size(2); }

  /// (1, H, W) with 1 on content pixels and 0 on padding.
  Tensor<float> mask() const {
    const std::size_t H = image.size(1), W = image.size(2);
    std::vector<float> m(H * W, 0.0f);
    for (std::size_t y = 0; y < content_h; ++y)
      for (std::size_t x = 0; x < content_w; ++x) m[y * W + x] = 1.0f;
    return Tensor<float>(Shape{1, H, W}, std::move(m));
  }
};

inline Image pad_to(const Image& img, std::size_t H, std::size_t W) {
  check_image(img);
  const std::size_t h = img.size(1), w = img.size(2);
  if (h > H || w > W) throw ShapeError("pad_to: target smaller than image");
  if (h == H && w == W) return img.clone();
  std::vector<float> out(3 * H * W, 0.0f);
  const auto& v = img.values();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(v.data() + (c * h + y) * w, w, out.data() + (c * H + y) * W);
  return Image(Shape{3, H, W}, std::move(out));
}

/// Top-left crop, or an arbitrary window with (top, left).
inline Image crop(const Image& img, std::size_t h, std::size_t w, std::size_t top = 0, std::size_t left = 0) {
  check_image(img);
  const std::size_t H = img.size(1), W = img.size(2);
  if (h == 0 || w == 0 || top + h > H || left + w > W) throw ShapeError("crop window outside the image");
  if (h == H && w == W) return img.clone();
  std::vector<float> out(3 * h * w);
  const auto& v = img.values();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(v.data() + (c * H + top + y) * W + left, w, out.data() + (c * h + y) * w);
  return Image(Shape{3, h, w}, std::move(out));
}

inline Image crop(const PaddedImage& p) { return crop(p.image, p.content_h, p.content_w); }

/// Scales so the longer side equals `edge`, then zero-pads to edge x edge.
inline PaddedImage resize_pad(const Image& img, std::size_t edge = 512) {
  check_image(img);
  if (edge == 0) throw ShapeError("resize_pad: edge must be positive");
  const std::size_t H = img.size(1), W = img.size(2);
  std::size_t h, w;
  if (H >= W) {
    h = edge;
    w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(W) * edge / H)));
  } else {
    w = edge;
    h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(H) * edge / W)));
  }
  return {pad_to(resize_bilinear(img, h, w), edge, edge), h, w};
}

/// Zero-pads bottom/right up to the next multiple of `m` (no resampling).
inline PaddedImage pad_to_multiple(const Image& img, std::size_t m) {
  check_image(img);
  const std::size_t H = img.size(1), W = img.size(2);
  const std::size_t PH = (H + m - 1) / m * m, PW = (W + m - 1) / m * m;
  return {pad_to(img, PH, PW), H, W};
}

/// Stacks CHW images of equal shape into NCHW.
inline Tensor<float> stack(const std::vector<Image>& images) {
  if (images.empty()) throw ShapeError("stack of zero images");
  const Shape s = images.front().shape();
  std::vector<float> v;
  v.reserve(images.size() * numel_of(s));
  for (const auto& im : images) {
    if (im.shape() != s) throw ShapeError("stack: images differ in shape");
    v.insert(v.end(), im.values().begin(), im.values().end());
  }
  Shape out{images.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor<float>(out, std::move(v));
}

/// Sample n of an NCHW batch as a CHW image.
template <class T>
Tensor<T> unstack(const Tensor<T>& batch, std::size_t n) {
  if (batch.dim() != 4 || n >= batch.size(0)) throw ShapeError("unstack: index outside batch");
  const Shape s{batch.size(1), batch.size(2), batch.size(3)};
  const std::size_t m = numel_of(s);
  std::vector<T> v(batch.values().begin() + static_cast<std::ptrdiff_t>(n * m),
                   batch.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * m));
  return Tensor<T>(s, std::move(v));
}

inline Tensor<float> as_batch(const Image& img) {
  check_image(img);
  return reshape(img.detach(), Shape{1, 3, img.size(1), img.size(2)});
}

}  // namespace gsgn
