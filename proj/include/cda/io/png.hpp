#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "cda/io/cdaf.hpp"

namespace cda {

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

// 16-bit grayscale PNG. Real-data images are stored this way with a
// per-image (offset, scale) recorded in the manifest: float = u/65535*scale + offset.
inline void write_png_gray16(const std::string& path, const std::vector<uint16_t>& pixels,
                             int height, int width) {
    if ((long)pixels.size() != (long)height * width) throw IoError("png16: pixel count mismatch");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failure: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_set_swap(png);  // in-memory little-endian rows
    std::vector<png_bytep> rows(size_t(height), nullptr);
    for (int y = 0; y < height; ++y)
        rows[size_t(y)] = reinterpret_cast<png_bytep>(const_cast<uint16_t*>(&pixels[size_t(y) * width]));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::vector<uint16_t> read_png_gray16(const std::string& path, int& height, int& width) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng read failure: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    width = int(png_get_image_width(png, info));
    height = int(png_get_image_height(png, info));
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);
    if (color != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("expected grayscale png: " + path);
    }
    if (depth < 16) png_set_expand_gray_1_2_4_to_8(png);
    png_set_swap(png);
    png_read_update_info(png, info);
    std::vector<uint16_t> pixels(size_t(height) * width);
    std::vector<uint8_t> row8;
    if (depth == 16) {
        std::vector<png_bytep> rows(size_t(height), nullptr);
        for (int y = 0; y < height; ++y)
            rows[size_t(y)] = reinterpret_cast<png_bytep>(&pixels[size_t(y) * width]);
        png_read_image(png, rows.data());
    } else {
        row8.resize(size_t(width));
        for (int y = 0; y < height; ++y) {
            png_read_row(png, row8.data(), nullptr);
            for (int x = 0; x < width; ++x)
                pixels[size_t(y) * width + x] = uint16_t(row8[size_t(x)] * 257);  // 8->16 bit
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

// 8-bit masks: labels {0,1,2} stored verbatim.
inline void write_png_gray8(const std::string& path, const std::vector<uint8_t>& pixels, int height,
                            int width) {
    if ((long)pixels.size() != (long)height * width) throw IoError("png8: pixel count mismatch");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failure: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(size_t(height), nullptr);
    for (int y = 0; y < height; ++y)
        rows[size_t(y)] = const_cast<png_bytep>(&pixels[size_t(y) * width]);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::vector<uint8_t> read_png_gray8(const std::string& path, int& height, int& width) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng read failure: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    width = int(png_get_image_width(png, info));
    height = int(png_get_image_height(png, info));
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY ||
        png_get_bit_depth(png, info) != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("expected 8-bit grayscale png: " + path);
    }
    std::vector<uint8_t> pixels(size_t(height) * width);
    std::vector<png_bytep> rows(size_t(height), nullptr);
    for (int y = 0; y < height; ++y) rows[size_t(y)] = &pixels[size_t(y) * width];
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

// RGB8, used by the montage emitter.
inline void write_png_rgb8(const std::string& path, const std::vector<uint8_t>& pixels, int height,
                           int width) {
    if ((long)pixels.size() != (long)height * width * 3) throw IoError("png rgb: pixel count mismatch");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failure: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(size_t(height), nullptr);
    for (int y = 0; y < height; ++y)
        rows[size_t(y)] = const_cast<png_bytep>(&pixels[size_t(y) * width * 3]);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace cda
