#pragma once

// PNG/JPEG codecs (libpng, libjpeg) and the raw float map format:
//   4-byte magic, u32 height, u32 width, then height*width*channels
//   little-endian float32 values, row-major, channels interleaved.

#include <png.h>

#include <cstdio>
// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

#include <bit>
#include <csetjmp>
#include <cstdlib>
#include <span>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "synthfeat/errors.hpp"
#include "synthfeat/scenegen.hpp"

namespace synthfeat::io {

namespace fs = std::filesystem;

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const fs::path& p, const char* mode) {
  FilePtr f(std::fopen(p.c_str(), mode));
  if (!f) throw IoError("cannot open " + p.string());
  return f;
}

// The codec cores below use the libraries' setjmp error protocol, so they hold
// only trivially destructible locals; the C++ wrappers turn failures into
// exceptions.

inline bool png_write_c(std::FILE* f, int height, int width, int color_type, int bit_depth,
                        const std::uint8_t* data, std::size_t stride) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

struct PngRaw {
  int height = 0, width = 0, channels = 0, bit_depth = 0;
  std::size_t rowbytes = 0;
  unsigned char* pixels = nullptr;  // malloc'd; owned by the caller
  png_bytep* rows = nullptr;        // malloc'd; owned by the caller
};

inline bool png_read_c(std::FILE* f, PngRaw* out) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, f);
  png_read_info(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(png);
  png_read_update_info(png, info);
  out->height = static_cast<int>(png_get_image_height(png, info));
  out->width = static_cast<int>(png_get_image_width(png, info));
  out->channels = png_get_channels(png, info);
  out->bit_depth = png_get_bit_depth(png, info);
  out->rowbytes = png_get_rowbytes(png, info);
  out->pixels = static_cast<unsigned char*>(std::malloc(out->rowbytes * static_cast<std::size_t>(out->height)));
  out->rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * static_cast<std::size_t>(out->height)));
  if (!out->pixels || !out->rows) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  for (int y = 0; y < out->height; ++y) out->rows[y] = out->pixels + static_cast<std::size_t>(y) * out->rowbytes;
  png_read_image(png, out->rows);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline void write_png_raw(const fs::path& path, int height, int width, int color_type, int bit_depth,
                          const std::vector<std::uint8_t>& bytes) {
  auto f = open_file(path, "wb");
  if (!png_write_c(f.get(), height, width, color_type, bit_depth, bytes.data(),
                   bytes.size() / static_cast<std::size_t>(height)))
    throw IoError("png encode failed: " + path.string());
}

}  // namespace detail

/// Writes an H x W x 3 float image in [0,1] as 8-bit RGB.
inline void write_png_rgb(const fs::path& path, const Image<float>& img) {
  if (img.channels != 3 && img.channels != 1) throw IoError("write_png_rgb expects 1 or 3 channels");
  std::vector<std::uint8_t> bytes(img.pixels() * 3);
  for (std::size_t i = 0; i < img.pixels(); ++i)
    for (int c = 0; c < 3; ++c) {
      float v = img.data[i * img.channels + (img.channels == 3 ? c : 0)];
      bytes[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  detail::write_png_raw(path, img.height, img.width, PNG_COLOR_TYPE_RGB, 8, bytes);
}

inline void write_png_u16(const fs::path& path, const Image<std::uint16_t>& img) {
  std::vector<std::uint8_t> bytes(img.pixels() * 2);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    bytes[2 * i] = static_cast<std::uint8_t>(img.data[i] >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<std::uint8_t>(img.data[i] & 0xff);
  }
  detail::write_png_raw(path, img.height, img.width, PNG_COLOR_TYPE_GRAY, 16, bytes);
}

struct DecodedPng {
  int height = 0, width = 0, channels = 0, bit_depth = 8;
  std::vector<std::uint16_t> samples;  // interleaved, native bit depth
};

inline DecodedPng read_png(const fs::path& path) {
  auto f = detail::open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw IoError("not a PNG file: " + path.string());
  std::rewind(f.get());
  detail::PngRaw raw;
  bool ok = detail::png_read_c(f.get(), &raw);
  std::unique_ptr<unsigned char, decltype(&std::free)> pixels(raw.pixels, &std::free);
  std::unique_ptr<png_bytep, decltype(&std::free)> rows(raw.rows, &std::free);
  if (!ok) throw IoError("corrupt PNG: " + path.string());
  DecodedPng out;
  out.height = raw.height;
  out.width = raw.width;
  out.channels = raw.channels;
  out.bit_depth = raw.bit_depth;
  std::size_t n = static_cast<std::size_t>(out.height) * out.width * out.channels;
  out.samples.resize(n);
  for (int y = 0; y < out.height; ++y) {
    const unsigned char* row = raw.pixels + static_cast<std::size_t>(y) * raw.rowbytes;
    std::size_t per_row = static_cast<std::size_t>(out.width) * out.channels;
    for (std::size_t i = 0; i < per_row; ++i) {
      std::uint16_t v;
      if (out.bit_depth == 16)
        std::memcpy(&v, row + 2 * i, 2);
      else
        v = row[i];
      out.samples[static_cast<std::size_t>(y) * per_row + i] = v;
    }
  }
  return out;
}

namespace detail {

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegErrorMgr*>(cinfo->err)->jump, 1);
}

struct JpegRaw {
  int height = 0, width = 0;
  unsigned char* pixels = nullptr;  // malloc'd RGB8
};

inline bool jpeg_read_c(std::FILE* f, JpegRaw* out) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out->height = static_cast<int>(cinfo.output_height);
  out->width = static_cast<int>(cinfo.output_width);
  std::size_t stride = static_cast<std::size_t>(out->width) * 3;
  out->pixels = static_cast<unsigned char*>(std::malloc(stride * static_cast<std::size_t>(out->height)));
  if (!out->pixels) {
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW rp = out->pixels + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &rp, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace detail

inline Image<float> read_jpeg_rgb(const fs::path& path) {
  auto f = detail::open_file(path, "rb");
  detail::JpegRaw raw;
  bool ok = detail::jpeg_read_c(f.get(), &raw);
  std::unique_ptr<unsigned char, decltype(&std::free)> pixels(raw.pixels, &std::free);
  if (!ok) throw IoError("corrupt JPEG: " + path.string());
  Image<float> img(raw.height, raw.width, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = raw.pixels[i] / 255.0f;
  return img;
}

/// Reads a PNG or JPEG as RGB floats in [0,1]; grayscale is replicated.
inline Image<float> read_rgb(const fs::path& path) {
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg_rgb(path);
  DecodedPng png = read_png(path);
  double scale = png.bit_depth == 16 ? 65535.0 : 255.0;
  Image<float> img(png.height, png.width, 3);
  for (std::size_t i = 0; i < img.pixels(); ++i)
    for (int c = 0; c < 3; ++c) {
      int src = png.channels >= 3 ? c : 0;
      img.data[i * 3 + c] = static_cast<float>(png.samples[i * png.channels + src] / scale);
    }
  return img;
}

inline Image<std::uint16_t> read_png_u16(const fs::path& path) {
  DecodedPng png = read_png(path);
  if (png.channels != 1) throw IoError("expected single-channel PNG: " + path.string());
  Image<std::uint16_t> img(png.height, png.width, 1);
  img.data = std::move(png.samples);
  return img;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff), static_cast<char>((v >> 16) & 0xff),
               static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}
inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

/// Serialises little-endian float32 values (host order is converted when needed).
inline void append_f32_le(std::string& out, std::span<const float> values) {
  std::size_t at = out.size();
  out.resize(at + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int k = 0; k < 4; ++k) out[at + i * 4 + static_cast<std::size_t>(k)] = static_cast<char>((bits >> (8 * k)) & 0xff);
  }
}

inline std::vector<float> parse_f32_le(const unsigned char* p, std::size_t count) {
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) v[i] = std::bit_cast<float>(detail::get_u32(p + 4 * i));
  return v;
}

inline void write_float_map(const fs::path& path, const char (&magic)[5], const Image<float>& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(magic, 4);
  detail::put_u32(os, static_cast<std::uint32_t>(img.height));
  detail::put_u32(os, static_cast<std::uint32_t>(img.width));
  std::string payload;
  append_f32_le(payload, img.data);
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError("short write " + path.string());
}

inline Image<float> read_float_map(const fs::path& path, const char (&magic)[5], int channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), magic, 4) != 0)
    throw IoError("bad header (expected " + std::string(magic) + "): " + path.string());
  int h = static_cast<int>(detail::get_u32(bytes.data() + 4));
  int w = static_cast<int>(detail::get_u32(bytes.data() + 8));
  std::size_t n = static_cast<std::size_t>(h) * w * channels;
  if (bytes.size() != 12 + 4 * n) throw IoError("truncated map file: " + path.string());
  Image<float> img(h, w, channels);
  img.data = parse_f32_le(bytes.data() + 12, n);
  return img;
}

inline void write_depth(const fs::path& p, const Image<float>& d) { write_float_map(p, "DPTH", d); }
inline void write_normal(const fs::path& p, const Image<float>& n) { write_float_map(p, "NRML", n); }
inline Image<float> read_depth(const fs::path& p) { return read_float_map(p, "DPTH", 1); }
inline Image<float> read_normal(const fs::path& p) { return read_float_map(p, "NRML", 3); }

}  // namespace synthfeat::io
