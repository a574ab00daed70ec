#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "causalvae/scene.hpp"

// PNG and base64 helpers for moving images across process boundaries.
namespace causalvae::codec {

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 16-bit PNG (grey, grey+alpha, RGB or RGBA by channel count) of an image
// whose values lie in [0, 1]; values outside are clamped.
std::string encode_png(const scene::Image& image);
// Inverse of encode_png; 8-bit files are accepted as well.
scene::Image decode_png(std::string_view bytes);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

// Images side by side, left to right; all inputs must share height and channels.
scene::Image horizontal_strip(const std::vector<scene::Image>& images);

}  // namespace causalvae::codec
