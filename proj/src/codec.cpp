#include "causalvae/codec.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

namespace causalvae::codec {

namespace {

int color_type_for(std::size_t channels) {
  switch (channels) {
    case 1: return PNG_COLOR_TYPE_GRAY;
    case 2: return PNG_COLOR_TYPE_GRAY_ALPHA;
    case 3: return PNG_COLOR_TYPE_RGB;
    case 4: return PNG_COLOR_TYPE_RGBA;
    default: throw CodecError("PNG supports 1 to 4 channels, got " + std::to_string(channels));
  }
}

void on_png_error(png_structp, png_const_charp message) { throw CodecError(std::string("PNG: ") + message); }
void on_png_warning(png_structp, png_const_charp) {}

struct ReadCursor {
  std::string_view data;
  std::size_t offset = 0;
};

}  // namespace

std::string encode_png(const scene::Image& image) {
  if (image.height == 0 || image.width == 0) throw CodecError("cannot encode an empty image");
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw CodecError("image buffer does not match its dimensions");
  }
  const int color_type = color_type_for(image.channels);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  if (!png) throw CodecError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::string out;
  std::vector<png_byte> row(image.width * image.channels * 2);
  try {
    if (!info) throw CodecError("png_create_info_struct failed");
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t length) {
          static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), length);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 16,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < image.height; ++r) {
      for (std::size_t i = 0; i < image.width * image.channels; ++i) {
        const double v = std::clamp(image.pixels[r * image.width * image.channels + i], 0.0, 1.0);
        const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
        row[2 * i] = static_cast<png_byte>(q >> 8);  // PNG stores 16-bit samples big-endian
        row[2 * i + 1] = static_cast<png_byte>(q & 0xff);
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

scene::Image decode_png(std::string_view bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw CodecError("not a PNG stream");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  if (!png) throw CodecError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{bytes, 0};
  scene::Image image;
  try {
    if (!info) throw CodecError("png_create_info_struct failed");
    png_set_read_fn(png, &cursor, [](png_structp p, png_bytep data, png_size_t length) {
      auto* c = static_cast<ReadCursor*>(png_get_io_ptr(p));
      if (c->offset + length > c->data.size()) png_error(p, "truncated stream");
      std::memcpy(data, c->data.data() + c->offset, length);
      c->offset += length;
    });
    png_read_info(png, info);
    const auto width = png_get_image_width(png, info);
    const auto height = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (depth < 8) png_set_expand(png);
    png_read_update_info(png, info);
    const std::size_t channels = png_get_channels(png, info);
    const int out_depth = png_get_bit_depth(png, info);
    image = scene::Image::blank(height, width, channels, 0.0);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    const double scale = out_depth == 16 ? 65535.0 : 255.0;
    for (std::size_t r = 0; r < height; ++r) {
      png_read_row(png, row.data(), nullptr);
      for (std::size_t i = 0; i < width * channels; ++i) {
        const unsigned v = out_depth == 16 ? (static_cast<unsigned>(row[2 * i]) << 8) | row[2 * i + 1] : row[i];
        image.pixels[r * width * channels + i] = static_cast<double>(v) / scale;
      }
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw CodecError("base64 length is not a multiple of 4");
  std::string out(3 * (text.size() / 4), '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw CodecError("invalid base64 text");
  // EVP_DecodeBlock keeps the bytes that padding stands for
  std::size_t padding = 0;
  if (!text.empty() && text.back() == '=') ++padding;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++padding;
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

scene::Image horizontal_strip(const std::vector<scene::Image>& images) {
  if (images.empty()) throw CodecError("strip needs at least one image");
  const std::size_t h = images.front().height;
  const std::size_t c = images.front().channels;
  std::size_t total_w = 0;
  for (const auto& im : images) {
    if (im.height != h || im.channels != c) throw CodecError("strip images differ in height or channels");
    total_w += im.width;
  }
  scene::Image out = scene::Image::blank(h, total_w, c, 0.0);
  std::size_t x0 = 0;
  for (const auto& im : images) {
    for (std::size_t r = 0; r < h; ++r) {
      std::copy_n(im.pixels.begin() + static_cast<std::ptrdiff_t>(r * im.width * c), im.width * c,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>((r * total_w + x0) * c));
    }
    x0 += im.width;
  }
  return out;
}

}  // namespace causalvae::codec
