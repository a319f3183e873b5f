#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "alterdetect/tensor.hpp"

namespace alterdetect {

enum class ImageFormat { kPng, kJpeg };

std::string_view format_name(ImageFormat f);
ImageFormat parse_format(std::string_view text);

/// Raised for unreadable or unsupported image data; the message names the
/// detected format and the decoder's complaint.
class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

Bytes read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

/// Sniffs PNG/JPEG signatures; throws ImageError for anything else.
ImageFormat detect_format(std::span<const std::uint8_t> bytes);

/// HxWx3 in [0,1]. Grayscale is expanded to three equal channels, alpha is
/// dropped and 16-bit samples are reduced to 8 bits.
Tensor<float> decode_image(std::span<const std::uint8_t> bytes);
Tensor<float> decode_image(const std::string& path);

/// Single-channel 8-bit decode, used for region masks.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;
};
GrayImage decode_gray_png(std::span<const std::uint8_t> bytes);
Bytes encode_gray_png(const GrayImage& image);

/// Values are rounded to the nearest of 256 levels after clamping to [0,1].
std::uint8_t to_byte(float v);
Tensor<float> quantize8(const Tensor<float>& image);

Bytes encode_png(const Tensor<float>& image);
void write_png(const std::string& path, const Tensor<float>& image);

/// Baseline JPEG, standard IJG quality-scaled tables, 4:2:0 chroma.
Bytes encode_jpeg(const Tensor<float>& image, int quality);
void write_jpeg(const std::string& path, const Tensor<float>& image, int quality);

struct JpegResult {
    Bytes bytes;
    Tensor<float> decoded;
};
JpegResult recompress_jpeg(const Tensor<float>& image, int quality = 50);

}  // namespace alterdetect
