#pragma once

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "druseg/common.hpp"
#include "druseg/tensor.hpp"

namespace druseg {

// Interleaved 8-bit image, row-major, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

struct FileCloser {
  std::FILE* fp = nullptr;
  ~FileCloser() {
    if (fp) std::fclose(fp);
  }
};

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

inline void png_error_fn(png_structp png, png_const_charp) {
  std::longjmp(png_jmpbuf(png), 1);
}
inline void png_warn_fn(png_structp, png_const_charp) {}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

inline void jpeg_error_exit_fn(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(mgr->jump, 1);
}
inline void jpeg_output_message_fn(j_common_ptr) {}

}  // namespace detail

// Decode a PNG file to 8-bit gray or RGB (16-bit scaled down, palettes
// expanded, alpha stripped).
inline ImageU8 read_png_file(const std::string& path) {
  detail::FileCloser file{std::fopen(path.c_str(), "rb")};
  if (!file.fp) throw IoError("cannot open image file: " + path);

  detail::PngReadGuard guard;
  guard.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                     detail::png_error_fn,
                                     detail::png_warn_fn);
  if (!guard.png) throw IoError("png decoder initialization failed");
  guard.info = png_create_info_struct(guard.png);
  if (!guard.info) throw IoError("png decoder initialization failed");

  ImageU8 img;
  if (setjmp(png_jmpbuf(guard.png))) {
    throw IoError("corrupt or truncated png: " + path);
  }
  png_init_io(guard.png, file.fp);
  png_read_png(guard.png, guard.info,
               PNG_TRANSFORM_SCALE_16 | PNG_TRANSFORM_EXPAND |
                   PNG_TRANSFORM_STRIP_ALPHA | PNG_TRANSFORM_PACKING,
               nullptr);
  img.width = static_cast<int>(png_get_image_width(guard.png, guard.info));
  img.height = static_cast<int>(png_get_image_height(guard.png, guard.info));
  img.channels = static_cast<int>(png_get_channels(guard.png, guard.info));
  if (img.channels != 1 && img.channels != 3) {
    throw IoError("unsupported png channel count in " + path);
  }
  png_bytepp rows = png_get_rows(guard.png, guard.info);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height *
                    img.channels);
  const std::size_t stride =
      static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) {
    const png_bytep row = rows[y];
    std::uint8_t* dst = img.pixels.data() + y * stride;
    for (std::size_t i = 0; i < stride; ++i) dst[i] = row[i];
  }
  return img;
}

// Decode a JPEG file to 8-bit RGB.
inline ImageU8 read_jpeg_file(const std::string& path) {
  detail::FileCloser file{std::fopen(path.c_str(), "rb")};
  if (!file.fp) throw IoError("cannot open image file: " + path);

  jpeg_decompress_struct cinfo;
  detail::JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = detail::jpeg_error_exit_fn;
  jerr.pub.output_message = detail::jpeg_output_message_fn;

  ImageU8 img;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("corrupt or truncated jpeg: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.fp);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

// Decode PNG or JPEG, dispatching on the file's magic bytes.
inline ImageU8 read_image_file(const std::string& path) {
  unsigned char magic[2] = {0, 0};
  {
    detail::FileCloser file{std::fopen(path.c_str(), "rb")};
    if (!file.fp) throw IoError("cannot open image file: " + path);
    if (std::fread(magic, 1, 2, file.fp) != 2) {
      throw IoError("corrupt or truncated image: " + path);
    }
  }
  if (magic[0] == 0x89 && magic[1] == 'P') return read_png_file(path);
  if (magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg_file(path);
  throw IoError("unsupported image format: " + path);
}

// Write an 8-bit gray (1 channel) or RGB (3 channel) PNG.
inline void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw ValueError("write_png: channels must be 1 or 3");
  }
  if (img.width < 1 || img.height < 1 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * img.height *
                               img.channels) {
    throw ValueError("write_png: pixel buffer does not match dimensions");
  }
  detail::FileCloser file{std::fopen(path.c_str(), "wb")};
  if (!file.fp) throw IoError("cannot open output file: " + path);

  detail::PngWriteGuard guard;
  guard.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                      detail::png_error_fn,
                                      detail::png_warn_fn);
  if (!guard.png) throw IoError("png encoder initialization failed");
  guard.info = png_create_info_struct(guard.png);
  if (!guard.info) throw IoError("png encoder initialization failed");

  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  const std::size_t stride =
      static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) {
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(img.pixels.data() + y * stride);
  }
  if (setjmp(png_jmpbuf(guard.png))) {
    throw IoError("png encode failed: " + path);
  }
  png_init_io(guard.png, file.fp);
  png_set_IHDR(guard.png, guard.info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(guard.png, guard.info, rows.data());
  png_write_png(guard.png, guard.info, PNG_TRANSFORM_IDENTITY, nullptr);
  return;
}

// Decoded image as a [3, H, W] tensor of values in [0, 1]; gray input is
// replicated across the three channels.
inline Tensor decode_image(const std::string& path) {
  const ImageU8 img = read_image_file(path);
  Tensor t = Tensor::zeros({3, img.height, img.width});
  const std::int64_t plane = static_cast<std::int64_t>(img.height) * img.width;
  for (std::int64_t i = 0; i < plane; ++i) {
    if (img.channels == 1) {
      const double v = img.pixels[static_cast<std::size_t>(i)] / 255.0;
      t[i] = v;
      t[plane + i] = v;
      t[2 * plane + i] = v;
    } else {
      t[i] = img.pixels[static_cast<std::size_t>(3 * i)] / 255.0;
      t[plane + i] = img.pixels[static_cast<std::size_t>(3 * i + 1)] / 255.0;
      t[2 * plane + i] = img.pixels[static_cast<std::size_t>(3 * i + 2)] / 255.0;
    }
  }
  return t;
}

// Decoded mask as a binary [H, W] tensor; bytes at or above 128 count as
// foreground. Color masks fall back to their first channel.
inline Tensor read_mask(const std::string& path) {
  const ImageU8 img = read_image_file(path);
  Tensor t = Tensor::zeros({img.height, img.width});
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const std::uint8_t v =
        img.pixels[static_cast<std::size_t>(i) * img.channels];
    t[i] = v >= 128 ? 1.0 : 0.0;
  }
  return t;
}

// Confidence in [0, 1] to a byte, rounding half away from zero: 0 -> 0,
// 0.5 -> 128, 1 -> 255.
inline std::uint8_t confidence_to_byte(double p) {
  if (p < 0.0) p = 0.0;
  if (p > 1.0) p = 1.0;
  const int v = static_cast<int>(p * 255.0 + 0.5);
  return static_cast<std::uint8_t>(v > 255 ? 255 : v);
}

namespace detail {

// Accept [H, W], [1, H, W] or [1, 1, H, W] single-image tensors.
inline std::pair<std::int64_t, std::int64_t> single_plane_dims(
    const Tensor& t) {
  if (t.rank() == 2) return {t.extent(0), t.extent(1)};
  if (t.rank() == 3 && t.extent(0) == 1) return {t.extent(1), t.extent(2)};
  if (t.rank() == 4 && t.extent(0) == 1 && t.extent(1) == 1) {
    return {t.extent(2), t.extent(3)};
  }
  throw ShapeError("expected a single-channel image tensor, got " +
                   t.shape_string());
}

}  // namespace detail

// Confidence map to an 8-bit gray PNG via confidence_to_byte.
inline void write_confidence_png(const std::string& path,
                                 const Tensor& confidences) {
  const auto [h, w] = detail::single_plane_dims(confidences);
  ImageU8 img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    img.pixels[static_cast<std::size_t>(i)] = confidence_to_byte(
        confidences.values()[static_cast<std::size_t>(i)]);
  }
  write_png(path, img);
}

// Binary mask to an 8-bit gray PNG with values exactly 0 and 255.
inline void write_mask_png(const std::string& path, const Tensor& mask) {
  const auto [h, w] = detail::single_plane_dims(mask);
  ImageU8 img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    const double v = mask.values()[static_cast<std::size_t>(i)];
    img.pixels[static_cast<std::size_t>(i)] = v >= 0.5 ? 255 : 0;
  }
  write_png(path, img);
}

}  // namespace druseg
