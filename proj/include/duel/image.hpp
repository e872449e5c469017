#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "duel/tensor.hpp"

namespace duel {

using Rgb = std::array<std::uint8_t, 3>;

/// 8-bit interleaved RGB raster, row-major, top-left origin.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // height * width * 3

    RgbImage() = default;
    RgbImage(int w, int h, Rgb fill = {0, 0, 0}) : width(w), height(h), pixels(std::size_t(w) * h * 3) {
        for (std::size_t i = 0; i < pixels.size(); i += 3) std::copy(fill.begin(), fill.end(), pixels.begin() + i);
    }

    std::uint8_t* at(int x, int y) { return pixels.data() + (std::size_t(y) * width + x) * 3; }
    const std::uint8_t* at(int x, int y) const { return pixels.data() + (std::size_t(y) * width + x) * 3; }
    void set(int x, int y, Rgb c) { std::copy(c.begin(), c.end(), at(x, y)); }
    bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// [3,H,W] float in [-1,1], the representation the codec and network consume.
using Image = Tensor<float>;

inline Image to_float(const RgbImage& img) {
    Image out({3, img.height, img.width});
    const std::size_t plane = std::size_t(img.width) * img.height;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) out[c * plane + p] = img.pixels[p * 3 + c] / 127.5f - 1.0f;
    return out;
}

inline RgbImage to_rgb(const Image& img) {
    require(img.rank() == 3 && img.dim(0) == 3, ErrorKind::shape,
            "expected a 3xHxW image, got " + shape_str(img.shape()));
    RgbImage out(int(img.dim(2)), int(img.dim(1)));
    const std::size_t plane = std::size_t(out.width) * out.height;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) {
            const double v = std::round((double(img[c * plane + p]) + 1.0) * 127.5);
            out.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
    return out;
}

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
    detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
    require(f != nullptr, ErrorKind::io, "cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorKind::io, "libpng failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.at(0, y)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline RgbImage read_png(const std::filesystem::path& path) {
    detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
    require(f != nullptr, ErrorKind::io, "cannot read " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    RgbImage out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(ErrorKind::io, "not a readable PNG: " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    out = RgbImage(int(png_get_image_width(png, info)), int(png_get_image_height(png, info)));
    for (int y = 0; y < out.height; ++y) png_read_row(png, out.at(0, y), nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline std::string frame_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05d.png", index);
    return buf;
}

/// Sorted PNG files of a frame directory.
inline std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir) {
    require(std::filesystem::is_directory(dir), ErrorKind::io, "not a directory: " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace duel
