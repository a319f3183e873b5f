#include "alterdetect/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>

#include <jpeglib.h>
#include <png.h>

namespace alterdetect {

std::string_view format_name(ImageFormat f) { return f == ImageFormat::kPng ? "png" : "jpeg"; }

ImageFormat parse_format(std::string_view text) {
    if (text == "png") return ImageFormat::kPng;
    if (text == "jpeg" || text == "jpg") return ImageFormat::kJpeg;
    throw std::invalid_argument("unknown image format '" + std::string(text) + "' (expected png or jpeg)");
}

Bytes read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open " + path);
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ImageError("write failed for " + path);
}

ImageFormat detect_format(std::span<const std::uint8_t> bytes) {
    static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) return ImageFormat::kPng;
    if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return ImageFormat::kJpeg;
    throw ImageError("unsupported image data: neither a PNG nor a JPEG signature (" +
                     std::to_string(bytes.size()) + " bytes)");
}

std::uint8_t to_byte(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

Tensor<float> quantize8(const Tensor<float>& image) {
    Tensor<float> out = image;
    for (auto& v : out.data()) v = static_cast<float>(to_byte(v)) / 255.0f;
    return out;
}

namespace {

struct Rgb8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;  // HxWx3
    std::vector<png_bytep> rows;
};

Tensor<float> to_tensor(const Rgb8& img) {
    Tensor<float> t({img.height, img.width, 3});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    return t;
}

std::vector<std::uint8_t> to_rgb8(const Tensor<float>& image, const char* what) {
    if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) == 0 || image.dim(1) == 0) {
        throw ShapeError(std::string(what) + ": expected non-empty HxWx3 image, got " + shape_str(image.shape()));
    }
    std::vector<std::uint8_t> px(image.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(image[i]);
    return px;
}

// ---------------------------------------------------------------------------
// PNG

struct PngContext {
    const std::uint8_t* data = nullptr;
    std::size_t size = 0;
    std::size_t pos = 0;
    Bytes* sink = nullptr;
    char message[256] = {};
};

void png_error_fn(png_structp png, png_const_charp msg) {
    auto* ctx = static_cast<PngContext*>(png_get_error_ptr(png));
    std::snprintf(ctx->message, sizeof ctx->message, "%s", msg);
    png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

void png_read_fn(png_structp png, png_bytep out, png_size_t len) {
    auto* ctx = static_cast<PngContext*>(png_get_io_ptr(png));
    if (ctx->pos + len > ctx->size) png_error(png, "unexpected end of data");
    std::memcpy(out, ctx->data + ctx->pos, len);
    ctx->pos += len;
}

void png_write_fn(png_structp png, png_bytep in, png_size_t len) {
    auto* ctx = static_cast<PngContext*>(png_get_io_ptr(png));
    ctx->sink->insert(ctx->sink->end(), in, in + len);
}

void png_flush_fn(png_structp) {}

// Only plain-old-data locals live across setjmp here.
bool png_decode_rgb8(PngContext& ctx, Rgb8& out) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &ctx, png_error_fn, png_warning_fn);
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
    png_set_read_fn(png, &ctx, png_read_fn);
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);
    if (png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * 3) {
        png_error(png, "unexpected row layout after conversion to 8-bit RGB");
    }
    out.height = h;
    out.width = w;
    out.pixels.assign(static_cast<std::size_t>(w) * h * 3, 0);
    out.rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) out.rows[y] = out.pixels.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, out.rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return true;
}

bool png_encode(PngContext& ctx, const std::uint8_t* pixels, std::size_t h, std::size_t w, int channels) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &ctx, png_error_fn, png_warning_fn);
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
    png_set_write_fn(png, &ctx, png_write_fn, png_flush_fn);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < h; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels + y * w * static_cast<std::size_t>(channels)));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return true;
}

Rgb8 decode_png(std::span<const std::uint8_t> bytes) {
    PngContext ctx;
    ctx.data = bytes.data();
    ctx.size = bytes.size();
    Rgb8 out;
    if (!png_decode_rgb8(ctx, out)) throw ImageError(std::string("png decode failed: ") + ctx.message);
    return out;
}

Bytes encode_png_raw(const std::uint8_t* pixels, std::size_t h, std::size_t w, int channels) {
    Bytes sink;
    PngContext ctx;
    ctx.sink = &sink;
    if (!png_encode(ctx, pixels, h, w, channels)) throw ImageError(std::string("png encode failed: ") + ctx.message);
    return sink;
}

// ---------------------------------------------------------------------------
// JPEG

struct JpegError {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX] = {};
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegError*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

void jpeg_silent(j_common_ptr) {}

bool jpeg_decode_rgb8(std::span<const std::uint8_t> bytes, Rgb8& out, JpegError& err) {
    jpeg_decompress_struct cinfo;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    err.base.output_message = jpeg_silent;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    cinfo.dct_method = JDCT_ISLOW;
    jpeg_start_decompress(&cinfo);
    if (cinfo.output_components != 3) {
        std::snprintf(err.message, sizeof err.message, "unsupported component count %d", cinfo.output_components);
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    out.height = cinfo.output_height;
    out.width = cinfo.output_width;
    out.pixels.assign(out.height * out.width * 3, 0);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return true;
}

struct JpegOutput {
    unsigned char* buffer = nullptr;
    unsigned long size = 0;
};

bool jpeg_encode_rgb8(const std::uint8_t* pixels, std::size_t h, std::size_t w, int quality, JpegOutput& out,
                      JpegError& err) {
    jpeg_compress_struct cinfo;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    err.base.output_message = jpeg_silent;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        return false;
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &out.buffer, &out.size);
    cinfo.image_width = static_cast<JDIMENSION>(w);
    cinfo.image_height = static_cast<JDIMENSION>(h);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    cinfo.dct_method = JDCT_ISLOW;
    cinfo.optimize_coding = FALSE;
    cinfo.comp_info[0].h_samp_factor = 2;
    cinfo.comp_info[0].v_samp_factor = 2;
    for (int c = 1; c < 3; ++c) {
        cinfo.comp_info[c].h_samp_factor = 1;
        cinfo.comp_info[c].v_samp_factor = 1;
    }
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = const_cast<JSAMPROW>(pixels + static_cast<std::size_t>(cinfo.next_scanline) * w * 3);
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    return true;
}

Rgb8 decode_jpeg(std::span<const std::uint8_t> bytes) {
    Rgb8 out;
    JpegError err;
    if (!jpeg_decode_rgb8(bytes, out, err)) throw ImageError(std::string("jpeg decode failed: ") + err.message);
    return out;
}

Rgb8 decode_any(std::span<const std::uint8_t> bytes) {
    return detect_format(bytes) == ImageFormat::kPng ? decode_png(bytes) : decode_jpeg(bytes);
}

}  // namespace

Tensor<float> decode_image(std::span<const std::uint8_t> bytes) { return to_tensor(decode_any(bytes)); }

Tensor<float> decode_image(const std::string& path) {
    const Bytes bytes = read_file_bytes(path);
    try {
        return decode_image(bytes);
    } catch (const ImageError& e) {
        throw ImageError(path + ": " + e.what());
    }
}

GrayImage decode_gray_png(std::span<const std::uint8_t> bytes) {
    const Rgb8 rgb = decode_any(bytes);
    GrayImage g;
    g.height = rgb.height;
    g.width = rgb.width;
    g.pixels.resize(g.height * g.width);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) {
        g.pixels[i] = std::max({rgb.pixels[3 * i], rgb.pixels[3 * i + 1], rgb.pixels[3 * i + 2]});
    }
    return g;
}

Bytes encode_gray_png(const GrayImage& image) {
    if (image.pixels.size() != image.height * image.width || image.pixels.empty()) {
        throw std::invalid_argument("encode_gray_png: pixel count does not match dimensions");
    }
    return encode_png_raw(image.pixels.data(), image.height, image.width, 1);
}

Bytes encode_png(const Tensor<float>& image) {
    const auto px = to_rgb8(image, "encode_png");
    return encode_png_raw(px.data(), image.dim(0), image.dim(1), 3);
}

void write_png(const std::string& path, const Tensor<float>& image) { write_file_bytes(path, encode_png(image)); }

Bytes encode_jpeg(const Tensor<float>& image, int quality) {
    if (quality < 1 || quality > 100) throw std::invalid_argument("encode_jpeg: quality must be in 1..100");
    const auto px = to_rgb8(image, "encode_jpeg");
    JpegOutput out;
    JpegError err;
    const bool ok = jpeg_encode_rgb8(px.data(), image.dim(0), image.dim(1), quality, out, err);
    Bytes bytes;
    if (ok) bytes.assign(out.buffer, out.buffer + out.size);
    std::free(out.buffer);
    if (!ok) throw ImageError(std::string("jpeg encode failed: ") + err.message);
    return bytes;
}

void write_jpeg(const std::string& path, const Tensor<float>& image, int quality) {
    write_file_bytes(path, encode_jpeg(image, quality));
}

JpegResult recompress_jpeg(const Tensor<float>& image, int quality) {
    JpegResult r;
    r.bytes = encode_jpeg(image, quality);
    r.decoded = decode_image(r.bytes);
    return r;
}

}  // namespace alterdetect
